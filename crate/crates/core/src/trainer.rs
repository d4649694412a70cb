//! Optimization: schedule, Adam, early stopping and the training loop.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{checkpoint_path, Checkpoint, Moments};
use crate::data::{make_batches, Example};
use crate::error::{Error, Result};
use crate::model::PsgModel;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub label_smoothing: f64,
    /// Padded tokens per batch.
    pub max_tokens: usize,
    pub max_updates: u64,
    pub max_epochs: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: u64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop once an epoch's mean training NLL per token falls below this.
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 0.005,
            warmup: 2000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            label_smoothing: 0.1,
            max_tokens: 4096,
            max_updates: 80_000,
            max_epochs: u64::MAX,
            patience: 10,
            seed: 1,
            clip_norm: None,
            stop_below: None,
        }
    }
}

impl TrainConfig {
    /// Optimization settings of the per-size hyperparameter table: 20000
    /// warmup updates and a size-dependent learning rate.
    pub fn table_preset(size: &str) -> Result<Self> {
        let peak_lr = match size {
            "tiny" => 0.005,
            "small" | "medium" => 0.001,
            "base" => 0.0005,
            other => return Err(Error::Config(format!("unknown size {other}"))),
        };
        Ok(TrainConfig {
            peak_lr,
            warmup: 20_000,
            ..TrainConfig::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.peak_lr, self.eps];
        if positive.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Config("learning rate and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        if self.warmup == 0 || self.max_tokens == 0 || self.max_updates == 0 || self.patience == 0 {
            return Err(Error::Config("warmup, max_tokens, max_updates and patience must be at least 1".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup followed by inverse-square-root decay.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Sum of the three loss components; a non-finite component is an error
/// naming it.
pub fn total_loss(mmt: f64, prune: f64, nmt: f64) -> Result<f64> {
    for (name, v) in [("l_mmt", mmt), ("l_prune", prune), ("l_nmt", nmt)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(mmt + prune + nmt)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamStore<S>, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let zeros = || -> Result<Vec<Tensor<S>>> {
            params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect()
        };
        Ok(Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros()?,
            v: zeros()?,
        })
    }

    /// One bias-corrected update. Non-finite gradients abort the step before
    /// anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape("adam_step", params.get(id).shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
            }
        }
        self.t += 1;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = S::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (S::lit(lr), S::lit(self.eps));
        let one = S::one();
        for (k, id) in params.ids().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn to_moments(&self) -> Moments {
        Moments {
            t: self.t,
            m: self.m.iter().map(Tensor::cast).collect(),
            v: self.v.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = S::lit(max_norm / norm);
        for t in grads.iter_mut() {
            for x in t.data_mut() {
                *x = *x * c;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: u64,
    pub best: f64,
    pub bad_epochs: u64,
}

impl EarlyStopping {
    pub fn new(patience: u64) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records a validation loss; true when training should stop.
    pub fn update(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        self.bad_epochs >= self.patience
    }
}

/// One NDJSON training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub l_mmt: f64,
    pub l_prune: f64,
    pub l_nmt: f64,
    pub l_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxUpdates,
    MaxEpochs,
    Patience,
    TargetLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub updates: u64,
    pub epochs: u64,
    pub stop: StopReason,
    /// Mean unsmoothed NLL per target token over each epoch's batches.
    pub train_nll: Vec<f64>,
    pub val_loss: Vec<f64>,
}

fn mix(seed: u64, stream: u64, n: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ n.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean unsmoothed per-token NLL of the primary path over `examples`.
pub fn corpus_nll<S: Scalar>(model: &PsgModel<S>, examples: &[Example], max_tokens: usize) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for batch in make_batches(examples, max_tokens, None) {
        let refs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
        for (nll, n) in model.score(&refs, 0)? {
            sum += nll;
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::Data("no target tokens".into()));
    }
    Ok(sum / count as f64)
}

/// Where and how training writes its artifacts.
pub struct TrainOutput<'a> {
    /// Per-epoch checkpoints and `checkpoint_last.bin` go here.
    pub dir: Option<&'a Path>,
    /// Stored under `run` in every checkpoint's config snapshot.
    pub run: serde_json::Value,
    pub log: Option<&'a mut dyn Write>,
}

impl Default for TrainOutput<'_> {
    fn default() -> Self {
        TrainOutput {
            dir: None,
            run: serde_json::Value::Null,
            log: None,
        }
    }
}

/// Trains `model` in place. Batches are reshuffled every epoch from the
/// seed; dropout and random pruning draw from per-step seeds, so a run is a
/// pure function of its inputs.
pub fn train<S: Scalar>(
    model: &mut PsgModel<S>,
    train_set: &[Example],
    valid_set: &[Example],
    cfg: &TrainConfig,
    mut out: TrainOutput<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if let Some(e) = train_set.iter().chain(valid_set).find(|e| e.src.is_empty() || e.tgt.is_empty()) {
        return Err(Error::Data(format!("example {}: empty source or target", e.id)));
    }
    let mut adam = Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps)?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut report = TrainReport {
        updates: 0,
        epochs: 0,
        stop: StopReason::MaxEpochs,
        train_nll: Vec::new(),
        val_loss: Vec::new(),
    };
    let mut step = 0u64;
    let mut epoch = 0u64;
    'outer: while epoch < cfg.max_epochs {
        epoch += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, epoch));
        let batches = make_batches(train_set, cfg.max_tokens, Some(&mut rng));
        let (mut nll, mut tokens) = (0.0, 0usize);
        let mut last: Option<LogRecord> = None;
        let mut hit_max = false;
        for batch in batches {
            step += 1;
            let refs: Vec<&Example> = batch.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::new().with_dropout_seed(mix(cfg.seed, 2, step));
            let b = model.params().bind(&mut g);
            let loss = model
                .batch_loss(&mut g, &b, &refs, cfg.label_smoothing, mix(cfg.seed, 3, step))
                .map_err(|e| Error::Data(format!("batch at step {step} (first example {}): {e}", refs[0].id)))?;
            let comp = |v| g.value(v).item().as_f64();
            let (l_mmt, l_prune, l_nmt) = (comp(loss.mmt), comp(loss.prune), comp(loss.nmt));
            let l_total = total_loss(l_mmt, l_prune, l_nmt)?;
            let mut grads_store = g.backward(loss.total)?;
            let mut grads = model.params().collect_grads(&b, &mut grads_store)?;
            drop(g);
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            let lr = lr_at(step, cfg.peak_lr, cfg.warmup);
            adam.step(model.params_mut(), &grads, lr)?;
            nll += loss.nll_sum;
            tokens += loss.tokens;
            if let (Some(w), Some(rec)) = (out.log.as_deref_mut(), last.take()) {
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
            last = Some(LogRecord {
                step,
                lr,
                l_mmt,
                l_prune,
                l_nmt,
                l_total,
                val_loss: None,
            });
            if step >= cfg.max_updates {
                hit_max = true;
                break;
            }
        }
        report.updates = step;
        report.epochs = epoch;
        let train_nll = nll / tokens.max(1) as f64;
        report.train_nll.push(train_nll);
        let val = if valid_set.is_empty() {
            None
        } else {
            Some(corpus_nll(model, valid_set, cfg.max_tokens)?)
        };
        if let Some(v) = val {
            report.val_loss.push(v);
        }
        if let (Some(w), Some(mut rec)) = (out.log.as_deref_mut(), last.take()) {
            rec.val_loss = val;
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        if let Some(dir) = out.dir {
            let mut ck = Checkpoint::from_model(model, step, epoch, out.run.clone())?;
            ck.moments = Some(adam.to_moments());
            let bytes = ck.to_bytes()?;
            crate::io::write_atomic(&checkpoint_path(dir, epoch), &bytes)?;
            crate::io::write_atomic(&dir.join("checkpoint_last.bin"), &bytes)?;
        }
        if hit_max {
            report.stop = StopReason::MaxUpdates;
            break 'outer;
        }
        if cfg.stop_below.is_some_and(|t| train_nll < t) {
            report.stop = StopReason::TargetLoss;
            break 'outer;
        }
        if let Some(v) = val {
            if stopper.update(v) {
                report.stop = StopReason::Patience;
                break 'outer;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
