//! Beam-search decoding and evaluation metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backbone::DecoderCache;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{PsgModel, SentenceDecoder};
use crate::scalar::Scalar;
use crate::tokenizer::{BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Exponent on hypothesis length when normalizing scores.
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 5,
            max_len: 100,
            length_penalty: 1.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.max_len == 0 {
            return Err(Error::Config("beam size and max length must be at least 1".into()));
        }
        if !(self.length_penalty >= 0.0) {
            return Err(Error::Config("length penalty must be non-negative".into()));
        }
        Ok(())
    }
}

/// Anything that maps per-hypothesis states and a fed token to next-token
/// log-probabilities.
pub trait StepModel {
    type State: Clone;
    fn initial_state(&self) -> Self::State;
    /// Advances every state by its token and returns log-probabilities.
    fn step(&mut self, states: &mut [Self::State], tokens: &[usize]) -> Result<Vec<Vec<f64>>>;
}

impl<S: Scalar> StepModel for SentenceDecoder<'_, S> {
    type State = DecoderCache<S>;

    fn initial_state(&self) -> Self::State {
        self.empty_cache()
    }

    fn step(&mut self, states: &mut [Self::State], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        SentenceDecoder::step(self, states, tokens)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Output tokens without bos/eos.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, eos included when finished.
    pub log_prob: f64,
    /// Length-normalized score.
    pub score: f64,
    /// Hit the length limit without producing eos.
    pub truncated: bool,
}

fn normalized(log_prob: f64, len: usize, penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(penalty)
}

/// Argmax decoding.
pub fn greedy_decode<M: StepModel>(model: &mut M, max_len: usize, length_penalty: f64) -> Result<Hypothesis> {
    let mut state = vec![model.initial_state()];
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut last = BOS;
    for _ in 0..max_len {
        let lp = model.step(&mut state, &[last])?;
        let (best, &p) = lp[0]
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, p)| if *p > *acc.1 { (i, p) } else { acc });
        log_prob += p;
        if best == EOS {
            let len = tokens.len() + 1;
            return Ok(Hypothesis {
                tokens,
                log_prob,
                score: normalized(log_prob, len, length_penalty),
                truncated: false,
            });
        }
        tokens.push(best);
        last = best;
    }
    let len = tokens.len();
    Ok(Hypothesis {
        tokens,
        log_prob,
        score: normalized(log_prob, len, length_penalty),
        truncated: true,
    })
}

/// Length-normalized beam search. Candidates are ranked by cumulative
/// log-probability (ties: earlier hypothesis, then smaller token id); the
/// search stops once `beam` hypotheses have ended in eos. For beam > 1 the
/// greedy hypothesis competes in the final selection, so widening the beam
/// never lowers the returned score.
pub fn beam_search<M: StepModel>(model: &mut M, config: &BeamConfig) -> Result<Hypothesis> {
    config.validate()?;
    let best = plain_beam(model, config)?;
    if config.beam == 1 {
        return Ok(best);
    }
    let greedy = greedy_decode(model, config.max_len, config.length_penalty)?;
    let finished_first = |h: &Hypothesis| (!h.truncated, h.score);
    if finished_first(&greedy) > finished_first(&best) {
        Ok(greedy)
    } else {
        Ok(best)
    }
}

fn plain_beam<M: StepModel>(model: &mut M, config: &BeamConfig) -> Result<Hypothesis> {
    let k = config.beam;
    let mut alive: Vec<(Vec<usize>, f64, M::State)> = vec![(Vec::new(), 0.0, model.initial_state())];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..config.max_len {
        let mut states: Vec<M::State> = alive.iter().map(|a| a.2.clone()).collect();
        let feed: Vec<usize> = alive.iter().map(|a| a.0.last().copied().unwrap_or(BOS)).collect();
        let lps = model.step(&mut states, &feed)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(alive.len() * k);
        for (h, row) in lps.iter().enumerate() {
            for (v, &p) in row.iter().enumerate() {
                cands.push((alive[h].1 + p, h, v));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(k);
        for (lp, h, v) in cands {
            if next.len() == k || finished.len() >= k {
                break;
            }
            if v == EOS {
                let toks = alive[h].0.clone();
                let len = toks.len() + 1;
                finished.push(Hypothesis {
                    tokens: toks,
                    log_prob: lp,
                    score: normalized(lp, len, config.length_penalty),
                    truncated: false,
                });
            } else {
                let mut toks = alive[h].0.clone();
                toks.push(v);
                next.push((toks, lp, states[h].clone()));
            }
        }
        if finished.len() >= k || next.is_empty() {
            alive.clear();
            break;
        }
        alive = next;
    }
    if finished.is_empty() {
        finished = alive
            .into_iter()
            .map(|(tokens, lp, _)| {
                let len = tokens.len();
                Hypothesis {
                    tokens,
                    log_prob: lp,
                    score: normalized(lp, len, config.length_penalty),
                    truncated: true,
                }
            })
            .collect();
    }
    let mut best = 0;
    for (i, h) in finished.iter().enumerate() {
        if h.score > finished[best].score {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}

/// Beam-searches every example.
pub fn translate<S: Scalar>(model: &PsgModel<S>, examples: &[Example], config: &BeamConfig) -> Result<Vec<Hypothesis>> {
    examples
        .iter()
        .map(|ex| {
            let mut dec = model.sentence_decoder(ex, 0)?;
            if config.beam == 1 {
                greedy_decode(&mut dec, config.max_len, config.length_penalty)
            } else {
                beam_search(&mut dec, config)
            }
        })
        .collect()
}

/// Whitespace split with every non-alphanumeric character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if c.is_alphanumeric() {
                cur.push(c);
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Brevity {
    /// `min(1, exp(1 - r/c))`.
    #[default]
    Standard,
    /// `(1 - r/c)` as a multiplicative factor.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub score: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level 4-gram BLEU on a 0-100 scale, without smoothing.
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<String>], brevity: Brevity) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if hyps.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            matched[n - 1] += hc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    // Orders with no hypothesis n-grams at all are left out of the mean.
    let orders: Vec<usize> = (0..4).filter(|&i| total[i] > 0).collect();
    let precisions: [f64; 4] =
        std::array::from_fn(|i| if total[i] == 0 { 0.0 } else { matched[i] as f64 / total[i] as f64 });
    let ratio = r as f64 / c.max(1) as f64;
    let bp = match brevity {
        Brevity::Standard => (1.0 - ratio).exp().min(1.0),
        Brevity::Literal => 1.0 - ratio,
    };
    let score = if orders.is_empty() || orders.iter().any(|&i| precisions[i] == 0.0) {
        0.0
    } else {
        100.0 * bp * (orders.iter().map(|&i| precisions[i].ln()).sum::<f64>() / orders.len() as f64).exp()
    };
    Ok(BleuReport {
        score,
        precisions,
        brevity_penalty: bp,
        hyp_len: c,
        ref_len: r,
    })
}

/// [`corpus_bleu`] on raw lines with [`tokenize`].
pub fn corpus_bleu_text(hyps: &[String], refs: &[String], brevity: Brevity) -> Result<BleuReport> {
    let h: Vec<Vec<String>> = hyps.iter().map(|s| tokenize(s)).collect();
    let r: Vec<Vec<String>> = refs.iter().map(|s| tokenize(s)).collect();
    corpus_bleu(&h, &r, brevity)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeteorConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MeteorConfig {
    fn default() -> Self {
        MeteorConfig {
            alpha: 0.9,
            beta: 3.0,
            gamma: 0.5,
        }
    }
}

impl MeteorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.beta >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config("meteor needs alpha in [0,1] and non-negative beta, gamma".into()));
        }
        Ok(())
    }
}

/// Exact-match alignment as (hyp index, ref index) pairs sorted by
/// hypothesis index. The longest run of unaligned tokens common to both
/// sides is aligned first (ties: earliest in the hypothesis, then in the
/// reference), repeated until no shared token is left.
pub fn align(hyp: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let (n, m) = (hyp.len(), reference.len());
    let mut hu = vec![false; n];
    let mut ru = vec![false; m];
    let mut out = Vec::new();
    loop {
        // run[i][j]: length of the free common run starting at (i, j).
        let mut run = vec![0usize; (n + 1) * (m + 1)];
        let mut best = (0, 0, 0);
        for i in (0..n).rev() {
            for j in (0..m).rev() {
                if !hu[i] && !ru[j] && hyp[i] == reference[j] {
                    run[i * (m + 1) + j] = 1 + run[(i + 1) * (m + 1) + j + 1];
                }
            }
        }
        for i in 0..n {
            for j in 0..m {
                let l = run[i * (m + 1) + j];
                if l > best.0 {
                    best = (l, i, j);
                }
            }
        }
        let (l, i, j) = best;
        if l == 0 {
            break;
        }
        for k in 0..l {
            hu[i + k] = true;
            ru[j + k] = true;
            out.push((i + k, j + k));
        }
    }
    out.sort_unstable();
    out
}

/// Number of runs of alignment pairs adjacent in both sentences.
pub fn chunks(alignment: &[(usize, usize)]) -> usize {
    if alignment.is_empty() {
        return 0;
    }
    1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

pub fn meteor_lite(hyp: &[String], reference: &[String], config: &MeteorConfig) -> f64 {
    let a = align(hyp, reference);
    let m = a.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let frag = chunks(&a) as f64 / m as f64;
    let fmean = r * p / (config.alpha * p + (1.0 - config.alpha) * r);
    (1.0 - config.gamma * frag.powf(config.beta)) * fmean
}

/// Mean sentence-level METEOR-lite over a corpus.
pub fn corpus_meteor(hyps: &[String], refs: &[String], config: &MeteorConfig) -> Result<f64> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return Err(Error::Data(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    config.validate()?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| meteor_lite(&tokenize(h), &tokenize(r), config))
        .sum();
    Ok(total / hyps.len() as f64)
}

/// exp of the mean per-token negative log-likelihood.
pub fn perplexity_from_nll(nll_sum: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::Data("perplexity of an empty target".into()));
    }
    Ok((nll_sum / tokens as f64).exp())
}

/// Teacher-forced perplexity of each example's target (eos included).
pub fn perplexities<S: Scalar>(model: &PsgModel<S>, examples: &[&Example]) -> Result<Vec<f64>> {
    if let Some(e) = examples.iter().find(|e| e.tgt.is_empty()) {
        return Err(Error::Data(format!("example {}: empty target", e.id)));
    }
    model
        .score(examples, 0)?
        .into_iter()
        .map(|(nll, n)| perplexity_from_nll(nll, n))
        .collect()
}

/// Fraction of pairs `(ppl(T+), ppl(T-))` with the correct side strictly lower.
pub fn accuracy_from_perplexities(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("no accuracy items".into()));
    }
    Ok(pairs.iter().filter(|(p, n)| p < n).count() as f64 / pairs.len() as f64)
}

/// An item for [`disambiguation_accuracy`]: one source with its graphs and
/// a correct and an incorrect translation.
#[derive(Clone, Debug)]
pub struct AccuracyItem {
    pub positive: Example,
    pub negative: Example,
}

pub fn disambiguation_accuracy<S: Scalar>(model: &PsgModel<S>, items: &[AccuracyItem]) -> Result<f64> {
    let mut pairs = Vec::with_capacity(items.len());
    for it in items {
        let ppl = perplexities(model, &[&it.positive, &it.negative])?;
        pairs.push((ppl[0], ppl[1]));
    }
    accuracy_from_perplexities(&pairs)
}
