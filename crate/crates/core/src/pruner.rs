//! Language-guided pruning of visual node features.
//!
//! Each step scores visual nodes by how much attention the language nodes pay
//! them, drops nodes whose mean score falls below `tau / p_v`, and adds a
//! weighted KL term between pooled visual and language feature distributions.

use rand::seq::index::sample;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_values, Tensor};

/// How each step's KL term is weighted in the prune loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepWeighting {
    /// Step `s` (1-based) is weighted by `s`.
    #[default]
    Linear,
    /// Every step is weighted by the step count.
    Constant,
}

/// Which nodes a step removes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Threshold on language-guided attention.
    #[default]
    Guided,
    /// Same number of survivors as guided pruning, chosen uniformly at random.
    Random,
    /// Keep every node and skip the prune loss.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub steps: usize,
    pub tau: f64,
    pub keep_at_least_one: bool,
    pub weighting: StepWeighting,
    pub mode: PruneMode,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            steps: 5,
            tau: 0.2,
            keep_at_least_one: true,
            weighting: StepWeighting::Linear,
            mode: PruneMode::Guided,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("prune tau must be a non-negative number, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn step_weight(&self, step: usize) -> f64 {
        match self.weighting {
            StepWeighting::Linear => step as f64,
            StepWeighting::Constant => self.steps as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneStepTrace {
    /// `p_v × p_l` attention over the nodes alive at the start of the step.
    pub attention: Vec<Vec<f64>>,
    pub mean_scores: Vec<f64>,
    /// Original node ids alive at the start of the step.
    pub candidates: Vec<usize>,
    /// Original node ids surviving the step.
    pub kept: Vec<usize>,
    pub kl: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneTrace {
    pub initial_nodes: usize,
    pub tau: f64,
    pub steps: Vec<PruneStepTrace>,
    pub final_kept: Vec<usize>,
    pub loss: f64,
}

/// `alpha[i][j] = softmax_i(f_v[i] · f_l[j])`: each language node's attention
/// over the visual nodes, so every column sums to one.
pub fn cross_attention<S: Scalar>(f_v: &Tensor<S>, f_l: &Tensor<S>) -> Result<Tensor<S>> {
    if f_v.rank() != 2 || f_l.rank() != 2 || f_v.cols() != f_l.cols() {
        return Err(Error::shape("cross_attention", f_v.shape(), f_l.shape()));
    }
    let scores = matmul_values(f_v, f_l, true)?;
    let (pv, pl) = (f_v.rows(), f_l.rows());
    let mut a = scores.into_vec();
    for j in 0..pl {
        let max = (0..pv).map(|i| a[i * pl + j]).fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for i in 0..pv {
            let e = (a[i * pl + j] - max).exp();
            a[i * pl + j] = e;
            sum = sum + e;
        }
        for i in 0..pv {
            a[i * pl + j] = a[i * pl + j] / sum;
        }
    }
    Tensor::new([pv, pl], a)
}

/// Mean attention each visual node receives across language nodes.
pub fn mean_scores<S: Scalar>(alpha: &Tensor<S>) -> Vec<S> {
    let pl = S::lit(alpha.cols() as f64);
    (0..alpha.rows())
        .map(|i| alpha.row(i).iter().fold(S::zero(), |acc, &x| acc + x) / pl)
        .collect()
}

/// Indices `i` with `scores[i] >= (tau / p) * sum(scores)`. When nothing
/// survives and `keep_at_least_one` is set, the first argmax is kept.
pub fn prune_step<S: Scalar>(scores: &[S], tau: f64, keep_at_least_one: bool) -> Vec<usize> {
    let p = scores.len();
    if p == 0 {
        return Vec::new();
    }
    let total = scores.iter().fold(S::zero(), |acc, &x| acc + x);
    let threshold = S::lit(tau / p as f64) * total;
    let kept: Vec<usize> = (0..p).filter(|&i| scores[i] >= threshold).collect();
    if kept.is_empty() && keep_at_least_one {
        let mut best = 0;
        for i in 1..p {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        return vec![best];
    }
    kept
}

fn pooled_log_distribution(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let max = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + mean.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    mean.iter().map(|x| x - lse).collect()
}

/// `KL(softmax(mean f_v) || softmax(mean f_l))` for row-lists of features.
pub fn pooled_kl(f_v: &[Vec<f64>], f_l: &[Vec<f64>]) -> Result<f64> {
    if f_v.is_empty() || f_l.is_empty() || f_v[0].len() != f_l[0].len() {
        return Err(Error::shape(
            "pooled_kl",
            &[f_v.len(), f_v.first().map_or(0, Vec::len)],
            &[f_l.len(), f_l.first().map_or(0, Vec::len)],
        ));
    }
    let lv = pooled_log_distribution(f_v);
    let ll = pooled_log_distribution(f_l);
    Ok(lv.iter().zip(&ll).map(|(a, b)| a.exp() * (a - b)).sum::<f64>().max(0.0))
}

/// Weighted sum of per-step KL terms over the visual features surviving each
/// step. An empty step list gives exactly zero.
pub fn prune_loss(step_features: &[Vec<Vec<f64>>], f_l: &[Vec<f64>], weighting: StepWeighting) -> Result<f64> {
    let cfg = PruneConfig {
        steps: step_features.len(),
        weighting,
        ..PruneConfig::default()
    };
    let mut loss = 0.0;
    for (s, fv) in step_features.iter().enumerate() {
        loss += cfg.step_weight(s + 1) * pooled_kl(fv, f_l)?;
    }
    Ok(loss)
}

/// Differentiable pooled KL between two feature matrices in `g`.
fn pooled_kl_var<S: Scalar>(g: &mut Graph<S>, f_v: Var, log_pl: Var) -> Result<Var> {
    let mv = g.mean(f_v, 0)?;
    let pv = g.softmax(mv, 0)?;
    let lpv = g.log_softmax(mv, 0)?;
    let diff = g.sub(lpv, log_pl)?;
    let prod = g.mul(pv, diff)?;
    let kl = g.sum(prod)?;
    // Rounding can leave a KL of identical distributions slightly negative.
    g.relu(kl)
}

/// Output of [`multi_step_prune`].
#[derive(Clone, Debug)]
pub struct Pruned {
    pub features: Var,
    pub loss: Var,
    pub trace: PruneTrace,
}

/// Runs the configured number of prune steps on `f_v` (p_v × d) guided by
/// `f_l` (p_l × d). Attention is recomputed on the survivors at every step.
/// `rng` is only consulted in [`PruneMode::Random`].
pub fn multi_step_prune<S: Scalar>(
    g: &mut Graph<S>,
    f_v: Var,
    f_l: Var,
    config: &PruneConfig,
    rng: &mut dyn RngCore,
) -> Result<Pruned> {
    config.validate()?;
    let (sv, sl) = (g.shape(f_v).to_vec(), g.shape(f_l).to_vec());
    if sv.len() != 2 || sl.len() != 2 || sv[1] != sl[1] {
        return Err(Error::shape("multi_step_prune", &sv, &sl));
    }
    let mut trace = PruneTrace {
        initial_nodes: sv[0],
        tau: config.tau,
        steps: Vec::new(),
        final_kept: (0..sv[0]).collect(),
        loss: 0.0,
    };
    let zero = g.constant(Tensor::scalar(S::zero()));
    if config.steps == 0 || config.mode == PruneMode::Off {
        return Ok(Pruned {
            features: f_v,
            loss: zero,
            trace,
        });
    }

    let ml = g.mean(f_l, 0)?;
    let log_pl = g.log_softmax(ml, 0)?;
    let lang = g.value(f_l).clone();
    let mut current = f_v;
    let mut alive: Vec<usize> = (0..sv[0]).collect();
    let mut loss = zero;
    for step in 1..=config.steps {
        let alpha = cross_attention(g.value(current), &lang)?;
        let scores = mean_scores(&alpha);
        let mut kept = prune_step(&scores, config.tau, config.keep_at_least_one);
        if config.mode == PruneMode::Random {
            let mut pick = sample(rng, alive.len(), kept.len()).into_vec();
            pick.sort_unstable();
            kept = pick;
        }
        let candidates = alive.clone();
        alive = kept.iter().map(|&i| candidates[i]).collect();
        let weight = config.step_weight(step);
        let mut step_trace = PruneStepTrace {
            attention: (0..alpha.rows()).map(|i| alpha.row(i).iter().map(|x| x.as_f64()).collect()).collect(),
            mean_scores: scores.iter().map(|x| x.as_f64()).collect(),
            candidates,
            kept: alive.clone(),
            kl: 0.0,
            weight,
        };
        if kept.is_empty() {
            // Only reachable with keep_at_least_one off: nothing left to pool.
            trace.steps.push(step_trace);
            break;
        }
        current = g.gather_rows(current, &kept)?;
        let kl = pooled_kl_var(g, current, log_pl)?;
        step_trace.kl = g.value(kl).item().as_f64();
        let weighted = g.scale(kl, S::lit(weight))?;
        loss = g.add(loss, weighted)?;
        trace.steps.push(step_trace);
    }
    trace.final_kept = alive;
    trace.loss = g.value(loss).item().as_f64();
    if trace.final_kept.is_empty() {
        return Err(Error::Config("pruning removed every visual node".into()));
    }
    Ok(Pruned {
        features: current,
        loss,
        trace,
    })
}

/// Heat map of one attention matrix as a standalone SVG document.
pub fn attention_heatmap_svg(attention: &[Vec<f64>], row_labels: &[String], col_labels: &[String], title: &str) -> String {
    const CELL: usize = 28;
    const LEFT: usize = 110;
    const TOP: usize = 60;
    let rows = attention.len();
    let cols = attention.first().map_or(0, Vec::len);
    let (w, h) = (LEFT + cols * CELL + 20, TOP + rows * CELL + 20);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s.push_str(&format!("<text x=\"4\" y=\"14\">{}</text>\n", escape(title)));
    for (j, label) in col_labels.iter().enumerate().take(cols) {
        let x = LEFT + j * CELL + CELL / 2;
        s.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" transform=\"rotate(-45 {x} {})\">{}</text>\n",
            TOP - 6,
            TOP - 6,
            escape(label)
        ));
    }
    for (i, row) in attention.iter().enumerate() {
        let y = TOP + i * CELL;
        if let Some(label) = row_labels.get(i) {
            s.push_str(&format!("<text x=\"4\" y=\"{}\">{}</text>\n", y + CELL / 2 + 4, escape(label)));
        }
        for (j, &v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            s.push_str(&format!(
                "<rect x=\"{}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({shade},{shade},255)\"><title>{v:.4}</title></rect>\n",
                LEFT + j * CELL
            ));
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests;
