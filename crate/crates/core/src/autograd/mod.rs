//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse and returns gradients for every tracked leaf.
//!
//! Broadcasting is limited to [`Graph::add_bias`] (a vector added to every
//! row); all other binary operations require identical shapes.

mod attention;
mod backward;

pub use attention::AttnSpec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_into, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: S },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    Sum(Var),
    Concat { parts: Vec<Var>, axis: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    Mask { x: Var, mask: Vec<S> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<S> },
    SmoothedCe { logits: Var, targets: Vec<Option<usize>>, eps: S, probs: Vec<S>, count: usize },
}

pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) op: Op<S>,
    pub(crate) tracked: bool,
}

/// Record of operations from parameters to a scalar loss.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
    dropout_seed: Option<u64>,
    dropout_calls: u64,
}

/// Gradients of a scalar loss with respect to the tracked leaves of a graph.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// `(outer, n, inner)` decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    /// A graph that tracks gradients, with dropout disabled.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            dropout_seed: None,
            dropout_calls: 0,
        }
    }

    /// A graph for inference: nothing is tracked and dropout is off.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Enable dropout; the i-th dropout call draws its mask from a generator
    /// seeded by `(seed, i)`.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_seed = Some(seed);
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let tracked = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].tracked);
        let op = if tracked { op } else { strip(op) };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; gradients are reported for it.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        let tracked = self.grad_enabled;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// An untracked leaf.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(op, self.shape(x), &[axis]));
        }
        Ok(())
    }

    /// Matrix product of 2-D operands, each optionally transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_into(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            S::zero(),
        );
        let t = Tensor::new([m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a vector of the trailing extent to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap_or(&1);
        if sb.len() != 1 || sb[0] != n || sx.is_empty() {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v = *v + bb;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        Ok(self.push(t, Op::Scale { x, c }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(S::zero()));
        Ok(self.push(t, Op::Relu(x), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(S::exp);
        Ok(self.push(t, Op::Exp(x), &[x]))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(S::ln);
        Ok(self.push(t, Op::Log(x), &[x]))
    }

    fn softmax_values(&self, x: Var, axis: usize, log: bool) -> Result<Tensor<S>> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| src[at(i)]).fold(S::neg_infinity(), S::max);
                let sum: S = (0..n).map(|i| (src[at(i)] - max).exp()).sum();
                let lse = max + sum.ln();
                for i in 0..n {
                    out[at(i)] = if log {
                        src[at(i)] - lse
                    } else {
                        (src[at(i)] - max).exp() / sum
                    };
                }
            }
        }
        Tensor::new(shape, out)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.softmax_values(x, axis, false)?;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let t = self.softmax_values(x, axis, true)?;
        Ok(self.push(t, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let inv = S::one() / S::lit(n as f64);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    out[o * inner + j] = out[o * inner + j] + src[(o * n + i) * inner + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut oshape = shape;
        oshape.remove(axis);
        let t = Tensor::new(oshape, out)?;
        Ok(self.push(t, Op::Mean { x, axis }, &[x]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: S = self.value(x).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of nothing".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Rows of `x` (leading axis) in the order given by `idx`. Doubles as
    /// embedding lookup when `x` is an embedding table.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x).select_rows(idx)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Normalizes over the trailing axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / n;
        let mut xhat = vec![S::zero(); src.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); src.len()];
        let inv_n = S::one() / S::lit(n as f64);
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean: S = row.iter().copied().sum::<S>() * inv_n;
            let var: S = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let rs = S::one() / (var + S::lit(eps)).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Elementwise multiplication by a constant mask.
    pub fn apply_mask(&mut self, x: Var, mask: Vec<S>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("apply_mask", self.shape(x), &[mask.len()]));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Mask { x, mask }, &[x]))
    }

    /// Inverted dropout. Identity unless the graph was built with a dropout seed.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let Some(seed) = self.dropout_seed else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(call)));
        let keep = S::lit(1.0 / (1.0 - p));
        let mask = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        self.apply_mask(x, mask)
    }

    /// Multi-head scaled dot-product attention over row blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if sq.len() != 2 || sk.len() != 2 || self.shape(v) != sk.as_slice() || sq[1] != sk[1] {
            return Err(Error::shape("attention", &sq, &sk));
        }
        let d = sq[1];
        if spec.heads == 0
            || d % spec.heads != 0
            || sq[0] != spec.batch * spec.q_len
            || sk[0] != spec.batch * spec.k_len
            || spec
                .key_mask
                .as_ref()
                .is_some_and(|m| m.len() != spec.batch * spec.k_len)
        {
            return Err(Error::shape("attention", &sq, &sk));
        }
        let (out, probs) = attention::forward(
            &spec,
            d,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let t = Tensor::new(sq, out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean label-smoothed negative log-likelihood over non-pad rows.
    ///
    /// Row `i` of `logits` is scored against `targets[i]`; `None` marks padding.
    /// The smoothed target mixes the one-hot vector with a uniform distribution:
    /// `q = (1 - eps) * onehot + eps / V`.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Config(format!("smoothing {eps} outside [0, 1)")));
        }
        let vocab = shape[1];
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::InvalidTensor("all targets are padding".into()));
        }
        if let Some(t) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::InvalidTensor(format!("target {t} outside vocabulary {vocab}")));
        }
        let src = self.value(logits).data();
        let eps_s = S::lit(eps);
        let uni = eps_s / S::lit(vocab as f64);
        let mut probs = vec![S::zero(); src.len()];
        let mut total = S::zero();
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &src[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            let mut smooth = S::zero();
            for (j, &v) in row.iter().enumerate() {
                let lp = v - lse;
                probs[i * vocab + j] = lp.exp();
                smooth = smooth + lp;
            }
            let nll = -(row[t] - lse);
            total = total + (S::one() - eps_s) * nll - uni * smooth;
        }
        let loss = total / S::lit(count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                eps: eps_s,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every tracked leaf receives a gradient, zero when disconnected from
    /// the loss; untracked leaves and intermediate nodes are absent.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        backward::run(self, loss)
    }

    pub(crate) fn nodes(&self) -> &[Node<S>] {
        &self.nodes
    }
}

/// Drops saved buffers of untracked nodes; they are never differentiated.
fn strip<S>(op: Op<S>) -> Op<S> {
    match op {
        Op::LayerNorm { .. } | Op::Attention { .. } | Op::SmoothedCe { .. } | Op::Mask { .. } => {
            Op::Leaf
        }
        other => other,
    }
}
