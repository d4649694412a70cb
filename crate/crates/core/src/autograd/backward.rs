use super::{attention, split_axis, Gradients, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_into, Tensor};

struct Acc<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Acc<S> {
    /// Accumulation buffer for `v`, zero-initialized on first use.
    fn buf<'a>(&'a mut self, g: &Graph<S>, v: Var) -> Option<&'a mut Vec<S>> {
        if !g.nodes()[v.0].tracked {
            return None;
        }
        let n = g.nodes()[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
    }

    fn add(&mut self, g: &Graph<S>, v: Var, delta: &[S]) {
        if let Some(b) = self.buf(g, v) {
            for (a, &d) in b.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
    }
}

pub(super) fn run<S: Scalar>(g: &Graph<S>, loss: Var) -> Result<Gradients<S>> {
    let nodes = g.nodes();
    let lv = &nodes[loss.0].value;
    if !lv.is_scalar() {
        return Err(Error::NonScalarLoss(lv.shape().to_vec()));
    }
    let mut acc = Acc {
        grads: (0..nodes.len()).map(|_| None).collect(),
    };
    if nodes[loss.0].tracked {
        acc.grads[loss.0] = Some(vec![S::one()]);
    }
    for i in (0..=loss.0).rev() {
        let node = &nodes[i];
        if !node.tracked || matches!(node.op, Op::Leaf) {
            continue;
        }
        let Some(dy) = acc.grads[i].take() else {
            continue;
        };
        step(g, &mut acc, i, &dy);
    }
    let grads = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            if !(n.tracked && matches!(n.op, Op::Leaf)) {
                return None;
            }
            let data = acc.grads[i]
                .take()
                .unwrap_or_else(|| vec![S::zero(); n.value.len()]);
            Tensor::new(n.value.shape().to_vec(), data).ok()
        })
        .collect();
    Ok(Gradients { grads })
}

fn step<S: Scalar>(g: &Graph<S>, acc: &mut Acc<S>, i: usize, dy: &[S]) {
    let node = &g.nodes()[i];
    let val = |v: Var| g.value(v);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (ta, tb) = (*ta, *tb);
            let (av, bv) = (val(*a), val(*b));
            let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
            let k = if ta { av.shape()[0] } else { av.shape()[1] };
            if let Some(ga) = acc.buf(g, *a) {
                if !ta {
                    gemm_into(m, n, k, dy, false, bv.data(), !tb, ga, S::one());
                } else {
                    gemm_into(k, n, m, bv.data(), tb, dy, true, ga, S::one());
                }
            }
            if let Some(gb) = acc.buf(g, *b) {
                if !tb {
                    gemm_into(k, m, n, av.data(), !ta, dy, false, gb, S::one());
                } else {
                    gemm_into(n, m, k, dy, true, av.data(), ta, gb, S::one());
                }
            }
        }
        Op::Add(a, b) => {
            acc.add(g, *a, dy);
            acc.add(g, *b, dy);
        }
        Op::Sub(a, b) => {
            acc.add(g, *a, dy);
            let neg: Vec<S> = dy.iter().map(|&v| -v).collect();
            acc.add(g, *b, &neg);
        }
        Op::Mul(a, b) => {
            let da: Vec<S> = dy.iter().zip(val(*b).data()).map(|(&d, &y)| d * y).collect();
            let db: Vec<S> = dy.iter().zip(val(*a).data()).map(|(&d, &x)| d * x).collect();
            acc.add(g, *a, &da);
            acc.add(g, *b, &db);
        }
        Op::AddBias { x, bias } => {
            acc.add(g, *x, dy);
            if let Some(gb) = acc.buf(g, *bias) {
                let n = gb.len();
                for row in dy.chunks(n) {
                    for (a, &d) in gb.iter_mut().zip(row) {
                        *a = *a + d;
                    }
                }
            }
        }
        Op::Scale { x, c } => {
            let d: Vec<S> = dy.iter().map(|&v| v * *c).collect();
            acc.add(g, *x, &d);
        }
        Op::Relu(x) => {
            let d: Vec<S> = dy
                .iter()
                .zip(val(*x).data())
                .map(|(&d, &v)| if v > S::zero() { d } else { S::zero() })
                .collect();
            acc.add(g, *x, &d);
        }
        Op::Exp(x) => {
            let d: Vec<S> = dy.iter().zip(node.value.data()).map(|(&d, &y)| d * y).collect();
            acc.add(g, *x, &d);
        }
        Op::Log(x) => {
            let d: Vec<S> = dy.iter().zip(val(*x).data()).map(|(&d, &v)| d / v).collect();
            acc.add(g, *x, &d);
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = split_axis(node.value.shape(), *axis);
            let y = node.value.data();
            let mut d = vec![S::zero(); y.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + j;
                    let dot: S = (0..n).map(|k| dy[at(k)] * y[at(k)]).sum();
                    for k in 0..n {
                        d[at(k)] = y[at(k)] * (dy[at(k)] - dot);
                    }
                }
            }
            acc.add(g, *x, &d);
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, n, inner) = split_axis(node.value.shape(), *axis);
            let y = node.value.data();
            let mut d = vec![S::zero(); y.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + j;
                    let total: S = (0..n).map(|k| dy[at(k)]).sum();
                    for k in 0..n {
                        d[at(k)] = dy[at(k)] - y[at(k)].exp() * total;
                    }
                }
            }
            acc.add(g, *x, &d);
        }
        Op::Mean { x, axis } => {
            let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
            let inv = S::one() / S::lit(n as f64);
            if let Some(gx) = acc.buf(g, *x) {
                for o in 0..outer {
                    for k in 0..n {
                        for j in 0..inner {
                            let t = &mut gx[(o * n + k) * inner + j];
                            *t = *t + dy[o * inner + j] * inv;
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc.buf(g, *x) {
                gx.iter_mut().for_each(|v| *v = *v + dy[0]);
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let n = val(p).shape()[*axis];
                if let Some(gp) = acc.buf(g, p) {
                    for o in 0..outer {
                        let src = &dy[(o * total + offset) * inner..(o * total + offset + n) * inner];
                        let dst = &mut gp[o * n * inner..(o + 1) * n * inner];
                        for (a, &b) in dst.iter_mut().zip(src) {
                            *a = *a + b;
                        }
                    }
                }
                offset += n;
            }
        }
        Op::GatherRows { x, idx } => {
            let c = node.value.len() / idx.len();
            if let Some(gx) = acc.buf(g, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[src * c + j] = gx[src * c + j] + dy[r * c + j];
                    }
                }
            }
        }
        Op::Reshape(x) => acc.add(g, *x, dy),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = *node.value.shape().last().unwrap_or(&1);
            let gm = val(*gamma).data();
            if let Some(gg) = acc.buf(g, *gamma) {
                for (r, row) in dy.chunks(n).enumerate() {
                    for c in 0..n {
                        gg[c] = gg[c] + row[c] * xhat[r * n + c];
                    }
                }
            }
            if let Some(gb) = acc.buf(g, *beta) {
                for row in dy.chunks(n) {
                    for c in 0..n {
                        gb[c] = gb[c] + row[c];
                    }
                }
            }
            if let Some(gx) = acc.buf(g, *x) {
                let inv_n = S::one() / S::lit(n as f64);
                for (r, row) in dy.chunks(n).enumerate() {
                    let h = &xhat[r * n..(r + 1) * n];
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for c in 0..n {
                        let dh = row[c] * gm[c];
                        m1 = m1 + dh;
                        m2 = m2 + dh * h[c];
                    }
                    m1 = m1 * inv_n;
                    m2 = m2 * inv_n;
                    for c in 0..n {
                        let dh = row[c] * gm[c];
                        gx[r * n + c] = gx[r * n + c] + rstd[r] * (dh - m1 - h[c] * m2);
                    }
                }
            }
        }
        Op::Mask { x, mask } => {
            let d: Vec<S> = dy.iter().zip(mask).map(|(&d, &m)| d * m).collect();
            acc.add(g, *x, &d);
        }
        Op::Attention {
            q,
            k,
            v,
            spec,
            probs,
        } => {
            let d = node.value.shape()[1];
            let (dq, dk, dv) = attention::backward(
                spec,
                d,
                val(*q).data(),
                val(*k).data(),
                val(*v).data(),
                probs,
                dy,
            );
            acc.add(g, *q, &dq);
            acc.add(g, *k, &dk);
            acc.add(g, *v, &dv);
        }
        Op::SmoothedCe {
            logits,
            targets,
            eps,
            probs,
            count,
        } => {
            let vocab = val(*logits).shape()[1];
            let uni = *eps / S::lit(vocab as f64);
            let scale = dy[0] / S::lit(*count as f64);
            if let Some(gl) = acc.buf(g, *logits) {
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..vocab {
                        let mut qj = uni;
                        if j == t {
                            qj = qj + S::one() - *eps;
                        }
                        let o = i * vocab + j;
                        gl[o] = gl[o] + scale * (probs[o] - qj);
                    }
                }
            }
        }
    }
}
