//! The scene-graph-guided translation model: graph encoders, language-guided
//! visual pruning, a joint encoder and a shared decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig, CrossContext, DecoderCache, EncodedBatch};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::graph_encoder::{gcn_forward, GcnParams, GraphBatch, Projection, VectorizedSceneGraph};
use crate::params::{xavier, Bound, ParamId, ParamStore};
use crate::pruner::{multi_step_prune, PruneConfig, PruneTrace};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub use_visual: bool,
    pub use_language: bool,
    /// Dimension of label embeddings (language entities and all relations).
    pub label_dim: usize,
    /// Dimension of visual entity rows.
    pub visual_dim: usize,
    pub projection_layers: usize,
    /// One entity projection for both modalities; needs `visual_dim == label_dim`.
    pub share_entity_projection: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            use_visual: true,
            use_language: true,
            label_dim: 300,
            visual_dim: 300,
            projection_layers: 1,
            share_entity_projection: true,
        }
    }
}

impl GraphConfig {
    pub fn enabled(&self) -> bool {
        self.use_visual || self.use_language
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    /// Add the text-only translation loss through the shared parameters.
    #[serde(default = "yes")]
    pub nmt_aux: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.prune.validate()?;
        if self.vocab_size <= EOS {
            return Err(Error::Config(format!("vocabulary of {} has no room for specials", self.vocab_size)));
        }
        let gc = &self.graph;
        if gc.enabled() {
            if gc.projection_layers == 0 || gc.label_dim == 0 || gc.visual_dim == 0 {
                return Err(Error::Config("graph dimensions and projection depth must be positive".into()));
            }
            if gc.use_visual && gc.use_language && gc.share_entity_projection && gc.visual_dim != gc.label_dim {
                return Err(Error::Config(format!(
                    "shared entity projection needs visual_dim == label_dim, got {} and {}",
                    gc.visual_dim, gc.label_dim
                )));
            }
        }
        Ok(())
    }
}

type Layers = Vec<(ParamId, ParamId)>;

#[derive(Clone, Debug)]
struct GraphIds {
    visual: Layers,
    language: Layers,
    relation: Layers,
    w1: ParamId,
    w2: ParamId,
    b: ParamId,
}

fn projection<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    in_dim: usize,
    d: usize,
    depth: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Layers> {
    (0..depth)
        .map(|k| {
            let rows = if k == 0 { in_dim } else { d };
            let w = store.add(format!("{name}.{k}.weight"), xavier(rows, d, rng)?)?;
            let b = store.add(format!("{name}.{k}.bias"), Tensor::zeros([d])?)?;
            Ok((w, b))
        })
        .collect()
}

fn bind_layers(b: &Bound, layers: &Layers) -> Projection {
    Projection {
        layers: layers.iter().map(|&(w, bias)| (b[w], b[bias])).collect(),
    }
}

/// Losses of one batch as graph nodes plus bookkeeping values.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub mmt: Var,
    pub prune: Var,
    pub nmt: Var,
    /// Unsmoothed negative log-likelihood summed over target tokens of the
    /// primary path (joint when graphs are enabled, text-only otherwise).
    pub nll_sum: f64,
    pub tokens: usize,
    pub traces: Vec<Option<PruneTrace>>,
}

/// Encoder output of a batch plus pruning results.
pub struct Encoded {
    pub enc: EncodedBatch,
    /// Mean prune loss over the batch.
    pub prune: Var,
    pub traces: Vec<Option<PruneTrace>>,
}

pub struct PsgModel<S: Scalar> {
    config: ModelConfig,
    params: ParamStore<S>,
    backbone: Backbone,
    graph: Option<GraphIds>,
}

impl<S: Scalar> PsgModel<S> {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::build(&config.backbone, config.vocab_size, &mut store, &mut rng)?;
        let gc = &config.graph;
        let graph = if gc.enabled() {
            let d = config.backbone.d_model;
            let depth = gc.projection_layers;
            let shared = gc.share_entity_projection && gc.visual_dim == gc.label_dim;
            let (visual, language) = if shared {
                let p = projection(&mut store, "graph.entity", gc.label_dim, d, depth, &mut rng)?;
                (p.clone(), p)
            } else {
                (
                    projection(&mut store, "graph.entity_visual", gc.visual_dim, d, depth, &mut rng)?,
                    projection(&mut store, "graph.entity_language", gc.label_dim, d, depth, &mut rng)?,
                )
            };
            let relation = projection(&mut store, "graph.relation", gc.label_dim, d, depth, &mut rng)?;
            let w1 = store.add("graph.w1", xavier(d, d, &mut rng)?)?;
            let w2 = store.add("graph.w2", xavier(d, d, &mut rng)?)?;
            let b = store.add("graph.bias", Tensor::zeros([d])?)?;
            Some(GraphIds {
                visual,
                language,
                relation,
                w1,
                w2,
                b,
            })
        } else {
            None
        };
        Ok(PsgModel {
            config,
            params: store,
            backbone,
            graph,
        })
    }

    /// Model with the given parameter values; names and shapes must match a
    /// freshly built model of `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.check_schema(&params)?;
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn graphs_enabled(&self) -> bool {
        self.graph.is_some()
    }

    fn gcn_params(&self, b: &Bound, language: bool) -> Option<GcnParams> {
        let ids = self.graph.as_ref()?;
        Some(GcnParams {
            entity_proj: bind_layers(b, if language { &ids.language } else { &ids.visual }),
            relation_proj: bind_layers(b, &ids.relation),
            w1: b[ids.w1],
            w2: b[ids.w2],
            b: b[ids.b],
        })
    }

    /// Per-example GCN features of one modality, `None` where the example
    /// has no graph or no entities.
    fn graph_features(
        &self,
        g: &mut Graph<S>,
        b: &Bound,
        graphs: &[Option<&VectorizedSceneGraph>],
        language: bool,
    ) -> Result<Vec<Option<Var>>> {
        let mut out = vec![None; graphs.len()];
        let present: Vec<usize> = (0..graphs.len())
            .filter(|&i| graphs[i].is_some_and(|v| v.num_entities > 0))
            .collect();
        if present.is_empty() {
            return Ok(out);
        }
        let refs: Vec<&VectorizedSceneGraph> = present.iter().map(|&i| graphs[i].unwrap()).collect();
        let Some(batch) = GraphBatch::<S>::new(&refs)? else {
            return Ok(out);
        };
        let params = self.gcn_params(b, language).expect("graph parameters exist when graphs are enabled");
        let all = gcn_forward(g, &batch, &params)?;
        for (k, &i) in present.iter().enumerate() {
            let rows: Vec<usize> = batch.node_range(k).collect();
            out[i] = Some(if present.len() == 1 {
                all
            } else {
                g.gather_rows(all, &rows)?
            });
        }
        Ok(out)
    }

    /// Encodes a batch. With graphs disabled this is the text-only encoder
    /// and the prune loss is a constant zero.
    pub fn encode(&self, g: &mut Graph<S>, b: &Bound, batch: &[&Example], prune_seed: u64) -> Result<Encoded> {
        let sources: Vec<Vec<usize>> = batch.iter().map(|e| with_eos(&e.src)).collect();
        let src_refs: Vec<&[usize]> = sources.iter().map(Vec::as_slice).collect();
        let zero = g.constant(Tensor::scalar(S::zero()));
        let gc = &self.config.graph;
        if !gc.enabled() {
            return Ok(Encoded {
                enc: self.backbone.encode_text_only(g, b, &src_refs)?,
                prune: zero,
                traces: vec![None; batch.len()],
            });
        }
        let lang_graphs: Vec<Option<&VectorizedSceneGraph>> = batch
            .iter()
            .map(|e| if gc.use_language { e.language.as_deref() } else { None })
            .collect();
        let vis_graphs: Vec<Option<&VectorizedSceneGraph>> = batch
            .iter()
            .map(|e| if gc.use_visual { e.visual.as_deref() } else { None })
            .collect();
        let lang = self.graph_features(g, b, &lang_graphs, true)?;
        let mut vis = self.graph_features(g, b, &vis_graphs, false)?;
        let mut rng = ChaCha8Rng::seed_from_u64(prune_seed);
        let mut traces = vec![None; batch.len()];
        let mut prune = zero;
        for i in 0..batch.len() {
            if let (Some(fv), Some(fl)) = (vis[i], lang[i]) {
                let p = multi_step_prune(g, fv, fl, &self.config.prune, &mut rng)?;
                vis[i] = Some(p.features);
                prune = g.add(prune, p.loss)?;
                traces[i] = Some(p.trace);
            }
        }
        let prune = g.scale(prune, S::lit(1.0 / batch.len() as f64))?;
        let enc = self.backbone.encode_joint(g, b, &src_refs, &lang, &vis)?;
        Ok(Encoded { enc, prune, traces })
    }

    fn decode_loss(
        &self,
        g: &mut Graph<S>,
        b: &Bound,
        enc: &EncodedBatch,
        batch: &[&Example],
        smoothing: f64,
    ) -> Result<(Var, f64, usize)> {
        let inputs: Vec<Vec<usize>> = batch.iter().map(|e| decoder_input(&e.tgt)).collect();
        let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let (logits, len) = self.backbone.decode_train(g, b, enc, &refs)?;
        let targets = padded_targets(batch, len);
        let loss = g.smoothed_cross_entropy(logits, &targets, smoothing)?;
        let (nll, count) = token_nll(g.value(logits), &targets);
        Ok((loss, nll, count))
    }

    /// Training objective `L_mmt + L_prune + L_nmt` for a batch. With graphs
    /// disabled only the text-only term is active.
    pub fn batch_loss(
        &self,
        g: &mut Graph<S>,
        b: &Bound,
        batch: &[&Example],
        smoothing: f64,
        prune_seed: u64,
    ) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let zero = g.constant(Tensor::scalar(S::zero()));
        if !self.graphs_enabled() {
            let enc = self.encode(g, b, batch, prune_seed)?;
            let (nmt, nll_sum, tokens) = self.decode_loss(g, b, &enc.enc, batch, smoothing)?;
            return Ok(BatchLoss {
                total: nmt,
                mmt: zero,
                prune: zero,
                nmt,
                nll_sum,
                tokens,
                traces: enc.traces,
            });
        }
        let enc = self.encode(g, b, batch, prune_seed)?;
        let (mmt, nll_sum, tokens) = self.decode_loss(g, b, &enc.enc, batch, smoothing)?;
        let nmt = if self.config.nmt_aux {
            let sources: Vec<Vec<usize>> = batch.iter().map(|e| with_eos(&e.src)).collect();
            let refs: Vec<&[usize]> = sources.iter().map(Vec::as_slice).collect();
            let text = self.backbone.encode_text_only(g, b, &refs)?;
            self.decode_loss(g, b, &text, batch, smoothing)?.0
        } else {
            zero
        };
        let total = g.add(mmt, enc.prune)?;
        let total = g.add(total, nmt)?;
        Ok(BatchLoss {
            total,
            mmt,
            prune: enc.prune,
            nmt,
            nll_sum,
            tokens,
            traces: enc.traces,
        })
    }

    /// Teacher-forced unsmoothed negative log-likelihood of each example's
    /// target (eos included) and its token count.
    pub fn score(&self, batch: &[&Example], prune_seed: u64) -> Result<Vec<(f64, usize)>> {
        let mut g = Graph::inference();
        let b = self.params.bind(&mut g);
        let enc = self.encode(&mut g, &b, batch, prune_seed)?;
        let inputs: Vec<Vec<usize>> = batch.iter().map(|e| decoder_input(&e.tgt)).collect();
        let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let (logits, len) = self.backbone.decode_train(&mut g, &b, &enc.enc, &refs)?;
        let targets = padded_targets(batch, len);
        let lv = g.value(logits);
        Ok((0..batch.len())
            .map(|i| token_nll_rows(lv, &targets, i * len..(i + 1) * len))
            .collect())
    }

    /// Inference-mode decoder for one example, holding its cross-attention
    /// context.
    pub fn sentence_decoder(&self, ex: &Example, prune_seed: u64) -> Result<SentenceDecoder<'_, S>> {
        let mut g = Graph::inference();
        let b = self.params.bind(&mut g);
        let enc = self.encode(&mut g, &b, &[ex], prune_seed)?;
        let ctx = self.backbone.cross_context(&mut g, &b, &enc.enc, 0)?;
        let trace = enc.traces.into_iter().next().flatten();
        Ok(SentenceDecoder {
            model: self,
            g,
            b,
            ctx,
            trace,
        })
    }
}

/// Step-wise decoding state for one source sentence.
pub struct SentenceDecoder<'a, S: Scalar> {
    model: &'a PsgModel<S>,
    g: Graph<S>,
    b: Bound,
    ctx: CrossContext<S>,
    trace: Option<PruneTrace>,
}

impl<S: Scalar> SentenceDecoder<'_, S> {
    pub fn trace(&self) -> Option<&PruneTrace> {
        self.trace.as_ref()
    }

    pub fn empty_cache(&self) -> DecoderCache<S> {
        self.model.backbone.empty_cache()
    }

    /// Next-token log-probabilities for each hypothesis.
    pub fn step(&mut self, caches: &mut [DecoderCache<S>], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let logits = self
            .model
            .backbone
            .decode_step(&mut self.g, &self.b, &self.ctx, caches, tokens)?;
        Ok((0..logits.rows()).map(|i| log_softmax(logits.row(i))).collect())
    }
}

pub fn with_eos(tokens: &[usize]) -> Vec<usize> {
    let mut v = tokens.to_vec();
    v.push(EOS);
    v
}

pub fn decoder_input(tgt: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(tgt.len() + 1);
    v.push(BOS);
    v.extend_from_slice(tgt);
    v
}

fn padded_targets(batch: &[&Example], len: usize) -> Vec<Option<usize>> {
    batch
        .iter()
        .flat_map(|e| {
            let out = with_eos(&e.tgt);
            (0..len).map(move |t| out.get(t).copied())
        })
        .collect()
}

pub fn log_softmax<S: Scalar>(row: &[S]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.as_f64() - lse).collect()
}

fn token_nll<S: Scalar>(logits: &Tensor<S>, targets: &[Option<usize>]) -> (f64, usize) {
    token_nll_rows(logits, targets, 0..targets.len())
}

fn token_nll_rows<S: Scalar>(logits: &Tensor<S>, targets: &[Option<usize>], rows: std::ops::Range<usize>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for i in rows {
        if let Some(t) = targets[i] {
            sum -= log_softmax(logits.row(i))[t];
            n += 1;
        }
    }
    (sum, n)
}
