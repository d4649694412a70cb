//! Pre-norm transformer encoder-decoder over joint text and graph rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal, xavier, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::PAD;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_positions: usize,
    /// Learned instead of sinusoidal positional encodings.
    pub learned_positions: bool,
    /// Additive text / language-graph / visual-graph type embeddings.
    pub segment_embeddings: bool,
    /// Output projection shares the target embedding matrix.
    pub tie_output: bool,
}

impl BackboneConfig {
    fn preset(layers: usize, heads: usize, d_model: usize) -> Self {
        BackboneConfig {
            layers,
            heads,
            d_model,
            d_ff: 4 * d_model,
            dropout: 0.3,
            max_positions: 256,
            learned_positions: false,
            segment_embeddings: true,
            tie_output: true,
        }
    }

    pub fn tiny() -> Self {
        Self::preset(4, 4, 128)
    }

    pub fn small() -> Self {
        Self::preset(6, 8, 128)
    }

    pub fn medium() -> Self {
        Self::preset(6, 8, 256)
    }

    pub fn base() -> Self {
        BackboneConfig {
            d_ff: 2048,
            ..Self::preset(6, 8, 512)
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "medium" => Ok(Self::medium()),
            "base" => Ok(Self::base()),
            _ => Err(Error::Config(format!("unknown size preset {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Sinusoidal table: `PE(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `PE(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding<S: Scalar>(length: usize, d: usize, max_positions: usize) -> Result<Tensor<S>> {
    if length == 0 || length > max_positions {
        return Err(Error::Config(format!("length {length} outside 1..={max_positions} positions")));
    }
    let mut data = Vec::with_capacity(length * d);
    for pos in 0..length {
        for c in 0..d {
            let i2 = (c - c % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
            data.push(S::lit(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new([length, d], data)
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ff: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct DecLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ff: FeedForward,
}

/// Segment kinds inside a joint encoder input.
pub const SEG_TEXT: usize = 0;
pub const SEG_LANGUAGE: usize = 1;
pub const SEG_VISUAL: usize = 2;

/// Row counts of each segment of one encoded example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spans {
    pub text: usize,
    pub language: usize,
    pub visual: usize,
}

impl Spans {
    pub fn total(&self) -> usize {
        self.text + self.language + self.visual
    }
}

/// Encoder output for a padded batch: `out` is `[batch * len, d]`.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub out: Var,
    pub batch: usize,
    pub len: usize,
    /// `true` for real rows.
    pub key_mask: Vec<bool>,
    pub spans: Vec<Spans>,
}

/// Per-layer key/value projections of one example's encoder rows.
#[derive(Clone, Debug)]
pub struct CrossContext<S: Scalar> {
    pub len: usize,
    keys: Vec<Tensor<S>>,
    values: Vec<Tensor<S>>,
}

/// Self-attention keys/values of one hypothesis, row-major per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderCache<S> {
    pub len: usize,
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub vocab_size: usize,
    src_embed: ParamId,
    tgt_embed: ParamId,
    out_proj: Option<ParamId>,
    positions: Option<ParamId>,
    segments: Option<ParamId>,
    enc: Vec<EncLayer>,
    enc_norm: Norm,
    dec: Vec<DecLayer>,
    dec_norm: Norm,
}

fn norm<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) -> Result<Norm> {
    Ok(Norm {
        g: store.add(format!("{name}.gamma"), Tensor::ones([d])?)?,
        b: store.add(format!("{name}.beta"), Tensor::zeros([d])?)?,
    })
}

fn linear<S: Scalar>(store: &mut ParamStore<S>, name: &str, i: usize, o: usize, rng: &mut impl Rng) -> Result<Linear> {
    Ok(Linear {
        w: store.add(format!("{name}.weight"), xavier(i, o, rng)?)?,
        b: Some(store.add(format!("{name}.bias"), Tensor::zeros([o])?)?),
    })
}

/// Attention scores are invariant to a key bias, so key projections have none.
fn key_linear<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize, rng: &mut impl Rng) -> Result<Linear> {
    Ok(Linear {
        w: store.add(format!("{name}.weight"), xavier(d, d, rng)?)?,
        b: None,
    })
}

fn attn<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize, rng: &mut impl Rng) -> Result<Attn> {
    Ok(Attn {
        q: linear(store, &format!("{name}.q"), d, d, rng)?,
        k: key_linear(store, &format!("{name}.k"), d, rng)?,
        v: linear(store, &format!("{name}.v"), d, d, rng)?,
        o: linear(store, &format!("{name}.o"), d, d, rng)?,
    })
}

fn feed_forward<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize, f: usize, rng: &mut impl Rng) -> Result<FeedForward> {
    Ok(FeedForward {
        up: linear(store, &format!("{name}.up"), d, f, rng)?,
        down: linear(store, &format!("{name}.down"), f, d, rng)?,
    })
}

impl Backbone {
    /// Registers all backbone parameters in `store`.
    pub fn build<S: Scalar>(
        config: &BackboneConfig,
        vocab_size: usize,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = (d as f64).powf(-0.5);
        let src_embed = store.add("embed.source", normal(&[vocab_size, d], std, rng)?)?;
        let tgt_embed = store.add("embed.target", normal(&[vocab_size, d], std, rng)?)?;
        let out_proj = if config.tie_output {
            None
        } else {
            Some(store.add("output.weight", xavier(d, vocab_size, rng)?)?)
        };
        let positions = if config.learned_positions {
            Some(store.add("embed.position", normal(&[config.max_positions, d], std, rng)?)?)
        } else {
            None
        };
        let segments = if config.segment_embeddings {
            Some(store.add("embed.segment", normal(&[3, d], std, rng)?)?)
        } else {
            None
        };
        let mut enc = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("encoder.{l}");
            enc.push(EncLayer {
                ln1: norm(store, &format!("{p}.ln1"), d)?,
                attn: attn(store, &format!("{p}.self_attn"), d, rng)?,
                ln2: norm(store, &format!("{p}.ln2"), d)?,
                ff: feed_forward(store, &format!("{p}.ff"), d, config.d_ff, rng)?,
            });
        }
        let enc_norm = norm(store, "encoder.ln_final", d)?;
        let mut dec = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("decoder.{l}");
            dec.push(DecLayer {
                ln1: norm(store, &format!("{p}.ln1"), d)?,
                self_attn: attn(store, &format!("{p}.self_attn"), d, rng)?,
                ln2: norm(store, &format!("{p}.ln2"), d)?,
                cross: attn(store, &format!("{p}.cross_attn"), d, rng)?,
                ln3: norm(store, &format!("{p}.ln3"), d)?,
                ff: feed_forward(store, &format!("{p}.ff"), d, config.d_ff, rng)?,
            });
        }
        let dec_norm = norm(store, "decoder.ln_final", d)?;
        Ok(Backbone {
            config: config.clone(),
            vocab_size,
            src_embed,
            tgt_embed,
            out_proj,
            positions,
            segments,
            enc,
            enc_norm,
            dec,
            dec_norm,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// The decoder's final normalization; zeroing it makes every logit zero.
    pub fn output_norm_ids(&self) -> (ParamId, ParamId) {
        (self.dec_norm.g, self.dec_norm.b)
    }

    fn ln<S: Scalar>(&self, g: &mut Graph<S>, b: &Bound, n: Norm, x: Var) -> Result<Var> {
        g.layer_norm(x, b[n.g], b[n.b], LN_EPS)
    }

    fn lin<S: Scalar>(&self, g: &mut Graph<S>, b: &Bound, l: Linear, x: Var) -> Result<Var> {
        let h = g.matmul(x, b[l.w])?;
        match l.b {
            Some(bias) => g.add_bias(h, b[bias]),
            None => Ok(h),
        }
    }

    fn ff<S: Scalar>(&self, g: &mut Graph<S>, b: &Bound, f: FeedForward, x: Var) -> Result<Var> {
        let h = self.lin(g, b, f.up, x)?;
        let h = g.relu(h)?;
        self.lin(g, b, f.down, h)
    }

    fn attend<S: Scalar>(&self, g: &mut Graph<S>, b: &Bound, a: Attn, x: Var, mem: Var, spec: AttnSpec) -> Result<Var> {
        let q = self.lin(g, b, a.q, x)?;
        let k = self.lin(g, b, a.k, mem)?;
        let v = self.lin(g, b, a.v, mem)?;
        let o = g.attention(q, k, v, spec)?;
        self.lin(g, b, a.o, o)
    }

    fn residual<S: Scalar>(&self, g: &mut Graph<S>, x: Var, h: Var) -> Result<Var> {
        let h = g.dropout(h, self.config.dropout)?;
        g.add(x, h)
    }

    /// Positional rows for `positions`: sinusoidal constants or learned rows.
    fn position_rows<S: Scalar>(&self, g: &mut Graph<S>, b: &Bound, positions: &[usize]) -> Result<Var> {
        let max = positions.iter().copied().max().unwrap_or(0) + 1;
        if max > self.config.max_positions {
            return Err(Error::Config(format!(
                "sequence length {max} exceeds {} positions",
                self.config.max_positions
            )));
        }
        match self.positions {
            Some(p) => g.gather_rows(b[p], positions),
            None => {
                let table = positional_encoding::<S>(max, self.config.d_model, self.config.max_positions)?;
                let t = g.constant(table);
                g.gather_rows(t, positions)
            }
        }
    }

    fn token_rows<S: Scalar>(&self, g: &mut Graph<S>, b: &Bound, table: ParamId, seqs: &[&[usize]]) -> Result<Var> {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let pos: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let e = g.embedding(b[table], &ids)?;
        let e = g.scale(e, S::lit((self.config.d_model as f64).sqrt()))?;
        let p = self.position_rows(g, b, &pos)?;
        g.add(e, p)
    }

    /// Encodes `[text + PE; language rows; visual rows]` for each example.
    ///
    /// `language[i]` / `visual[i]` hold `p × d` features or `None` for an
    /// empty segment. Graph rows get no positional encoding.
    pub fn encode_joint<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        b: &Bound,
        sources: &[&[usize]],
        language: &[Option<Var>],
        visual: &[Option<Var>],
    ) -> Result<EncodedBatch> {
        let n = sources.len();
        if n == 0 || language.len() != n || visual.len() != n {
            return Err(Error::shape("encode_joint", &[n], &[language.len(), visual.len()]));
        }
        if let Some(i) = sources.iter().position(|s| s.is_empty()) {
            return Err(Error::Data(format!("example {i} has an empty text segment")));
        }
        let d = self.config.d_model;
        let text = self.token_rows(g, b, self.src_embed, sources)?;
        let mut parts = vec![text];
        let mut next = sources.iter().map(|s| s.len()).sum::<usize>();
        let mut starts = vec![[0usize; 2]; n];
        let mut spans = Vec::with_capacity(n);
        for (which, segs) in [language, visual].into_iter().enumerate() {
            for (i, s) in segs.iter().enumerate() {
                if let Some(v) = *s {
                    let sh = g.shape(v);
                    if sh.len() != 2 || sh[1] != d {
                        return Err(Error::shape("encode_joint", sh, &[d]));
                    }
                    starts[i][which] = next;
                    next += sh[0];
                    parts.push(v);
                }
            }
        }
        let zero_row = next;
        parts.push(g.constant(Tensor::zeros([1, d])?));
        let pool = g.concat(&parts, 0)?;

        let rows = |s: &Option<Var>, g: &Graph<S>| s.map_or(0, |v| g.shape(v)[0]);
        for i in 0..n {
            spans.push(Spans {
                text: sources[i].len(),
                language: rows(&language[i], g),
                visual: rows(&visual[i], g),
            });
        }
        let len = spans.iter().map(Spans::total).max().unwrap_or(1);
        let mut index = Vec::with_capacity(n * len);
        let mut seg_ids = Vec::with_capacity(n * len);
        let mut key_mask = Vec::with_capacity(n * len);
        let mut text_at = 0;
        for (i, sp) in spans.iter().enumerate() {
            index.extend(text_at..text_at + sp.text);
            text_at += sp.text;
            index.extend(starts[i][0]..starts[i][0] + sp.language);
            index.extend(starts[i][1]..starts[i][1] + sp.visual);
            index.extend(std::iter::repeat_n(zero_row, len - sp.total()));
            seg_ids.extend(std::iter::repeat_n(SEG_TEXT, sp.text));
            seg_ids.extend(std::iter::repeat_n(SEG_LANGUAGE, sp.language));
            seg_ids.extend(std::iter::repeat_n(SEG_VISUAL, sp.visual));
            seg_ids.extend(std::iter::repeat_n(SEG_TEXT, len - sp.total()));
            key_mask.extend((0..len).map(|t| t < sp.total()));
        }
        let mut x = g.gather_rows(pool, &index)?;
        if let Some(seg) = self.segments {
            let s = g.gather_rows(b[seg], &seg_ids)?;
            x = g.add(x, s)?;
        }
        x = g.dropout(x, self.config.dropout)?;
        let spec = AttnSpec {
            batch: n,
            heads: self.config.heads,
            q_len: len,
            k_len: len,
            causal: false,
            q_offset: 0,
            key_mask: Some(key_mask.clone()),
        };
        for layer in &self.enc {
            let h = self.ln(g, b, layer.ln1, x)?;
            let h = self.attend(g, b, layer.attn, h, h, spec.clone())?;
            x = self.residual(g, x, h)?;
            let h = self.ln(g, b, layer.ln2, x)?;
            let h = self.ff(g, b, layer.ff, h)?;
            x = self.residual(g, x, h)?;
        }
        let out = self.ln(g, b, self.enc_norm, x)?;
        Ok(EncodedBatch {
            out,
            batch: n,
            len,
            key_mask,
            spans,
        })
    }

    /// Text-only path through the same encoder parameters.
    pub fn encode_text_only<S: Scalar>(&self, g: &mut Graph<S>, b: &Bound, sources: &[&[usize]]) -> Result<EncodedBatch> {
        let none = vec![None; sources.len()];
        self.encode_joint(g, b, sources, &none, &none)
    }

    fn logits<S: Scalar>(&self, g: &mut Graph<S>, b: &Bound, h: Var) -> Result<Var> {
        match self.out_proj {
            Some(w) => g.matmul(h, b[w]),
            None => g.matmul_t(h, b[self.tgt_embed], false, true),
        }
    }

    /// Teacher-forced decoder over `inputs` (each starting with bos). Returns
    /// logits `[batch * len, vocab]` and the padded length.
    pub fn decode_train<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        b: &Bound,
        enc: &EncodedBatch,
        inputs: &[&[usize]],
    ) -> Result<(Var, usize)> {
        if inputs.len() != enc.batch {
            return Err(Error::shape("decode_train", &[enc.batch], &[inputs.len()]));
        }
        if let Some(i) = inputs.iter().position(|s| s.is_empty()) {
            return Err(Error::Data(format!("example {i} has an empty decoder prefix")));
        }
        let len = inputs.iter().map(|s| s.len()).max().unwrap_or(1);
        let padded: Vec<Vec<usize>> = inputs
            .iter()
            .map(|s| {
                let mut v = s.to_vec();
                v.resize(len, PAD);
                v
            })
            .collect();
        let refs: Vec<&[usize]> = padded.iter().map(Vec::as_slice).collect();
        let mut x = self.token_rows(g, b, self.tgt_embed, &refs)?;
        x = g.dropout(x, self.config.dropout)?;
        let self_mask: Vec<bool> = inputs.iter().flat_map(|s| (0..len).map(move |t| t < s.len())).collect();
        let self_spec = AttnSpec {
            batch: enc.batch,
            heads: self.config.heads,
            q_len: len,
            k_len: len,
            causal: true,
            q_offset: 0,
            key_mask: Some(self_mask),
        };
        let cross_spec = AttnSpec {
            batch: enc.batch,
            heads: self.config.heads,
            q_len: len,
            k_len: enc.len,
            causal: false,
            q_offset: 0,
            key_mask: Some(enc.key_mask.clone()),
        };
        for layer in &self.dec {
            let h = self.ln(g, b, layer.ln1, x)?;
            let h = self.attend(g, b, layer.self_attn, h, h, self_spec.clone())?;
            x = self.residual(g, x, h)?;
            let h = self.ln(g, b, layer.ln2, x)?;
            let h = self.attend(g, b, layer.cross, h, enc.out, cross_spec.clone())?;
            x = self.residual(g, x, h)?;
            let h = self.ln(g, b, layer.ln3, x)?;
            let h = self.ff(g, b, layer.ff, h)?;
            x = self.residual(g, x, h)?;
        }
        let h = self.ln(g, b, self.dec_norm, x)?;
        Ok((self.logits(g, b, h)?, len))
    }

    /// Cross-attention keys and values for the real rows of example `i`.
    pub fn cross_context<S: Scalar>(&self, g: &mut Graph<S>, b: &Bound, enc: &EncodedBatch, i: usize) -> Result<CrossContext<S>> {
        let rows: Vec<usize> = (0..enc.len)
            .filter(|&t| enc.key_mask[i * enc.len + t])
            .map(|t| i * enc.len + t)
            .collect();
        let mem = g.gather_rows(enc.out, &rows)?;
        let mut keys = Vec::with_capacity(self.dec.len());
        let mut values = Vec::with_capacity(self.dec.len());
        for layer in &self.dec {
            let k = self.lin(g, b, layer.cross.k, mem)?;
            let v = self.lin(g, b, layer.cross.v, mem)?;
            keys.push(g.value(k).clone());
            values.push(g.value(v).clone());
        }
        Ok(CrossContext {
            len: rows.len(),
            keys,
            values,
        })
    }

    pub fn empty_cache<S: Scalar>(&self) -> DecoderCache<S> {
        DecoderCache {
            len: 0,
            keys: vec![Vec::new(); self.dec.len()],
            values: vec![Vec::new(); self.dec.len()],
        }
    }

    /// Feeds one token per hypothesis and returns next-token logits
    /// `[hyps, vocab]`. All caches must hold the same number of positions;
    /// each grows by one.
    pub fn decode_step<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        b: &Bound,
        ctx: &CrossContext<S>,
        caches: &mut [DecoderCache<S>],
        tokens: &[usize],
    ) -> Result<Tensor<S>> {
        let n = caches.len();
        if n == 0 || tokens.len() != n {
            return Err(Error::Decode(format!("{} tokens for {n} caches", tokens.len())));
        }
        let pos = caches[0].len;
        if caches.iter().any(|c| c.len != pos || c.keys.len() != self.dec.len()) {
            return Err(Error::Decode("caches disagree on decoded length".into()));
        }
        let d = self.config.d_model;
        let seqs: Vec<Vec<usize>> = tokens.iter().map(|&t| vec![t]).collect();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Decode(format!("token {bad} outside vocabulary")));
        }
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let e = g.embedding(b[self.tgt_embed], &ids)?;
        let e = g.scale(e, S::lit((d as f64).sqrt()))?;
        let p = self.position_rows(g, b, &vec![pos; n])?;
        let mut x = g.add(e, p)?;
        let klen = pos + 1;
        let self_spec = AttnSpec {
            batch: n,
            heads: self.config.heads,
            q_len: 1,
            k_len: klen,
            causal: false,
            q_offset: 0,
            key_mask: None,
        };
        let cross_spec = AttnSpec {
            batch: n,
            heads: self.config.heads,
            q_len: 1,
            k_len: ctx.len,
            causal: false,
            q_offset: 0,
            key_mask: None,
        };
        let tile = |t: &Tensor<S>| -> Result<Tensor<S>> {
            if n == 1 {
                return Ok(t.clone());
            }
            let mut data = Vec::with_capacity(n * t.len());
            for _ in 0..n {
                data.extend_from_slice(t.data());
            }
            Tensor::new([n * t.rows(), d], data)
        };
        for (l, layer) in self.dec.iter().enumerate() {
            let h = self.ln(g, b, layer.ln1, x)?;
            let q = self.lin(g, b, layer.self_attn.q, h)?;
            let k = self.lin(g, b, layer.self_attn.k, h)?;
            let v = self.lin(g, b, layer.self_attn.v, h)?;
            let (kv, vv) = (g.value(k).clone(), g.value(v).clone());
            let mut kall = Vec::with_capacity(n * klen * d);
            let mut vall = Vec::with_capacity(n * klen * d);
            for (i, c) in caches.iter_mut().enumerate() {
                c.keys[l].extend_from_slice(kv.row(i));
                c.values[l].extend_from_slice(vv.row(i));
                kall.extend_from_slice(&c.keys[l]);
                vall.extend_from_slice(&c.values[l]);
            }
            let kc = g.constant(Tensor::new([n * klen, d], kall)?);
            let vc = g.constant(Tensor::new([n * klen, d], vall)?);
            let a = g.attention(q, kc, vc, self_spec.clone())?;
            let h = self.lin(g, b, layer.self_attn.o, a)?;
            x = g.add(x, h)?;
            let h = self.ln(g, b, layer.ln2, x)?;
            let q = self.lin(g, b, layer.cross.q, h)?;
            let kc = g.constant(tile(&ctx.keys[l])?);
            let vc = g.constant(tile(&ctx.values[l])?);
            let a = g.attention(q, kc, vc, cross_spec.clone())?;
            let h = self.lin(g, b, layer.cross.o, a)?;
            x = g.add(x, h)?;
            let h = self.ln(g, b, layer.ln3, x)?;
            let h = self.ff(g, b, layer.ff, h)?;
            x = g.add(x, h)?;
        }
        for c in caches.iter_mut() {
            c.len += 1;
        }
        let h = self.ln(g, b, self.dec_norm, x)?;
        let logits = self.logits(g, b, h)?;
        Ok(g.value(logits).clone())
    }
}

#[cfg(test)]
mod tests;
