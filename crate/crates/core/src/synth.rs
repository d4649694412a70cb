//! Seeded synthetic parallel corpora with scene graphs.
//!
//! Sentences follow `adj* N1 V adj* N2` on the source side and
//! `N1' adj'* N2' adj'* V'` on the target side. An ambiguous noun has one
//! source word and one target word per sense; the sense is drawn
//! independently of the text and shows up only in the visual feature of
//! that noun's entity. Distractor entities have features orthogonal to every
//! label embedding the language graphs can produce.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{graph_path, Example};
use crate::error::{Error, Result};
use crate::eval::AccuracyItem;
use crate::graph_encoder::{synthetic_vector, vectorize, EmbeddingProvider};
use crate::io::write_atomic;
use crate::sg::{Entity, Modality, Relation, SceneGraph};
use crate::tokenizer::BpeModel;

pub const NEAR: &str = "near";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub nouns: usize,
    pub verbs: usize,
    pub adjectives: usize,
    pub ambiguous_types: usize,
    pub senses: usize,
    /// Inclusive range of adjectives before each source noun.
    pub adjectives_per_noun: [usize; 2],
    pub distractors: usize,
    /// Number of distinct distractor labels.
    pub distractor_labels: usize,
    /// Dimension of label embeddings and visual features.
    pub feature_dim: usize,
    pub embedding_seed: u64,
    /// Norm of the sense component added to an ambiguous noun's feature.
    pub sense_scale: f64,
    /// Multiplier applied to every visual feature.
    pub visual_scale: f64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            nouns: 12,
            verbs: 6,
            adjectives: 6,
            ambiguous_types: 2,
            senses: 2,
            adjectives_per_noun: [0, 1],
            distractors: 2,
            distractor_labels: 8,
            feature_dim: 48,
            embedding_seed: 11,
            sense_scale: 1.0,
            visual_scale: 1.0,
            train: 1000,
            valid: 100,
            test: 300,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let infeasible = |m: String| Err(Error::Config(format!("infeasible synth spec: {m}")));
        if self.nouns < 2 && self.ambiguous_types == 0 || self.nouns < 1 {
            return infeasible("need at least two nouns per sentence".into());
        }
        if self.verbs == 0 {
            return infeasible("need at least one verb".into());
        }
        if self.ambiguous_types > 0 && self.senses < 2 {
            return infeasible("ambiguous types need at least two senses".into());
        }
        let [lo, hi] = self.adjectives_per_noun;
        if lo > hi || (hi > 0 && self.adjectives == 0) {
            return infeasible("adjective range needs adjectives".into());
        }
        if !(self.visual_scale > 0.0 && self.visual_scale.is_finite() && self.sense_scale.is_finite()) {
            return infeasible("feature scales must be finite and visual_scale positive".into());
        }
        if self.distractors > 0 && self.distractor_labels == 0 {
            return infeasible("distractors need labels".into());
        }
        let needed =
            self.nouns + self.ambiguous_types + self.verbs + 1 + self.ambiguous_types * self.senses + self.distractor_labels;
        if self.feature_dim < needed {
            return infeasible(format!(
                "feature_dim {} is below {needed}, the room needed for orthogonal sense and distractor directions",
                self.feature_dim
            ));
        }
        let combos = self.nouns.max(1) as f64
            * (self.nouns + self.ambiguous_types) as f64
            * self.verbs as f64
            * (self.ambiguous_types.max(1) * self.senses.max(1)) as f64;
        if combos < 2.0 * (self.train + self.valid + self.test) as f64 {
            return infeasible("vocabulary too small for that many distinct sentences".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerEntry {
    pub split: String,
    pub example: usize,
    /// Position of the ambiguous word in the whitespace-split reference.
    pub word_index: usize,
    pub correct: String,
    /// Target words of every sense of this ambiguous type.
    pub senses: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerKey {
    /// Example count per split.
    pub splits: BTreeMap<String, usize>,
    pub entries: Vec<AnswerEntry>,
}

/// A correct/incorrect translation pair for one test example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub split: String,
    pub example: usize,
    pub source: String,
    pub positive: String,
    pub negative: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplit {
    pub name: String,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub visual: Vec<SceneGraph>,
    pub language: Vec<SceneGraph>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub splits: Vec<SynthSplit>,
    pub answer_key: AnswerKey,
    pub items: Vec<ItemRecord>,
    pub embeddings: EmbeddingProvider,
}

struct Lexicon {
    src_nouns: Vec<String>,
    tgt_nouns: Vec<String>,
    src_amb: Vec<String>,
    tgt_amb: Vec<Vec<String>>,
    src_verbs: Vec<String>,
    tgt_verbs: Vec<String>,
    src_adj: Vec<String>,
    tgt_adj: Vec<String>,
    distractors: Vec<String>,
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize, used: &mut HashSet<String>) -> String {
    loop {
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS[rng.random_range(0..ONSETS.len())], VOWELS[rng.random_range(0..VOWELS.len())]))
            .collect();
        if used.insert(w.clone()) {
            return w;
        }
    }
}

impl Lexicon {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut used: HashSet<String> = [NEAR.to_string()].into();
        let mut words = |n: usize, syl: usize, used: &mut HashSet<String>| -> Vec<String> {
            (0..n).map(|_| pseudo_word(rng, syl, used)).collect()
        };
        let src_nouns = words(spec.nouns, 2, &mut used);
        let tgt_nouns = words(spec.nouns, 3, &mut used);
        let src_amb = words(spec.ambiguous_types, 2, &mut used);
        let tgt_amb = (0..spec.ambiguous_types)
            .map(|_| words(spec.senses, 3, &mut used))
            .collect();
        let src_verbs = words(spec.verbs, 2, &mut used);
        let tgt_verbs = words(spec.verbs, 3, &mut used);
        let src_adj = words(spec.adjectives, 2, &mut used);
        let tgt_adj = words(spec.adjectives, 3, &mut used);
        let distractors = (0..spec.distractor_labels).map(|k| format!("thing{k}")).collect();
        Lexicon {
            src_nouns,
            tgt_nouns,
            src_amb,
            tgt_amb,
            src_verbs,
            tgt_verbs,
            src_adj,
            tgt_adj,
            distractors,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes the components of `v` along the orthonormal `basis`, then
/// normalizes. Returns `None` when nothing is left.
fn orthogonalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    // Two passes keep the result orthogonal to rounding level.
    for _ in 0..2 {
        for q in basis {
            let c = dot(&v, q);
            v.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
        }
    }
    let n = dot(&v, &v).sqrt();
    (n > 1e-6).then(|| v.into_iter().map(|x| x / n).collect())
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Orthonormal basis of `vectors` by Gram-Schmidt.
pub fn orthonormal_basis(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        if let Some(q) = orthogonalize(v.clone(), &basis) {
            basis.push(q);
        }
    }
    basis
}

/// One sampled sentence before it is rendered.
struct Draft {
    subj: Noun,
    obj: Noun,
    verb: usize,
    subj_adj: Vec<usize>,
    obj_adj: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Noun {
    Plain(usize),
    Ambiguous(usize, usize),
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lex = Lexicon::new(spec, &mut rng);
    let dim = spec.feature_dim;
    let emb = |label: &str| synthetic_vector(label, dim, spec.embedding_seed);

    // Every label a language graph can carry, plus the visual relation labels.
    let language_labels: Vec<String> = lex
        .src_nouns
        .iter()
        .chain(&lex.src_amb)
        .chain(&lex.src_verbs)
        .cloned()
        .chain([NEAR.to_string()])
        .collect();
    let mut basis = orthonormal_basis(&language_labels.iter().map(|l| emb(l)).collect::<Vec<_>>());
    let mut sense_vecs = Vec::with_capacity(spec.ambiguous_types);
    for _ in 0..spec.ambiguous_types {
        let mut per = Vec::with_capacity(spec.senses);
        for _ in 0..spec.senses {
            let q = orthogonalize(gaussian(&mut rng, dim), &basis)
                .ok_or_else(|| Error::Config("infeasible synth spec: no room for sense directions".into()))?;
            basis.push(q.clone());
            per.push(q);
        }
        sense_vecs.push(per);
    }
    let distractor_feats: Vec<Vec<f64>> = (0..spec.distractor_labels)
        .map(|_| {
            orthogonalize(gaussian(&mut rng, dim), &basis)
                .ok_or_else(|| Error::Config("infeasible synth spec: no room for distractor directions".into()))
        })
        .collect::<Result<_>>()?;

    let table = language_labels
        .iter()
        .chain(&lex.distractors)
        .map(|l| (l.clone(), emb(l)))
        .collect::<Vec<_>>();
    let embeddings = EmbeddingProvider::from_table(dim, table)?;

    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut splits = Vec::new();
    let mut key = AnswerKey::default();
    let mut items = Vec::new();
    for (name, count) in [("train", spec.train), ("valid", spec.valid), ("test", spec.test)] {
        let mut split = SynthSplit {
            name: name.into(),
            src: Vec::with_capacity(count),
            tgt: Vec::with_capacity(count),
            visual: Vec::with_capacity(count),
            language: Vec::with_capacity(count),
        };
        key.splits.insert(name.into(), count);
        let mut attempts = 0usize;
        while split.src.len() < count {
            attempts += 1;
            if attempts > 1000 * (count + 10) {
                return Err(Error::Config("infeasible synth spec: cannot draw enough distinct sentences".into()));
            }
            let draft = draw(spec, &mut rng);
            let (src, tgt, amb_index) = render(&lex, &draft);
            if !seen.insert((src.clone(), tgt.clone())) {
                continue;
            }
            let index = split.src.len();
            if let Some((word_index, t, s)) = amb_index {
                key.entries.push(AnswerEntry {
                    split: name.into(),
                    example: index,
                    word_index,
                    correct: lex.tgt_amb[t][s].clone(),
                    senses: lex.tgt_amb[t].clone(),
                });
                if name == "test" {
                    let wrong = (s + 1) % spec.senses;
                    let mut neg: Vec<&str> = tgt.split(' ').collect();
                    neg[word_index] = &lex.tgt_amb[t][wrong];
                    items.push(ItemRecord {
                        split: name.into(),
                        example: index,
                        source: src.clone(),
                        positive: tgt.clone(),
                        negative: neg.join(" "),
                    });
                }
            }
            split.language.push(language_graph(&lex, &draft)?);
            split
                .visual
                .push(visual_graph(spec, &lex, &draft, &emb, &sense_vecs, &distractor_feats, &mut rng)?);
            split.src.push(src);
            split.tgt.push(tgt);
        }
        splits.push(split);
    }
    Ok(SynthCorpus {
        spec: spec.clone(),
        splits,
        answer_key: key,
        items,
        embeddings,
    })
}

fn draw(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Draft {
    let [lo, hi] = spec.adjectives_per_noun;
    let adj = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let n = rng.random_range(lo..=hi);
        (0..n).map(|_| rng.random_range(0..spec.adjectives)).collect()
    };
    let (subj, obj) = if spec.ambiguous_types > 0 {
        let amb = Noun::Ambiguous(rng.random_range(0..spec.ambiguous_types), rng.random_range(0..spec.senses));
        let plain = Noun::Plain(rng.random_range(0..spec.nouns));
        if rng.random_bool(0.5) {
            (amb, plain)
        } else {
            (plain, amb)
        }
    } else {
        let a = rng.random_range(0..spec.nouns);
        let mut b = rng.random_range(0..spec.nouns - 1);
        if b >= a {
            b += 1;
        }
        (Noun::Plain(a), Noun::Plain(b))
    };
    Draft {
        subj,
        obj,
        verb: rng.random_range(0..spec.verbs),
        subj_adj: adj(rng),
        obj_adj: adj(rng),
    }
}

fn src_noun(lex: &Lexicon, n: Noun) -> &str {
    match n {
        Noun::Plain(i) => &lex.src_nouns[i],
        Noun::Ambiguous(t, _) => &lex.src_amb[t],
    }
}

fn tgt_noun(lex: &Lexicon, n: Noun) -> &str {
    match n {
        Noun::Plain(i) => &lex.tgt_nouns[i],
        Noun::Ambiguous(t, s) => &lex.tgt_amb[t][s],
    }
}

/// Source line, target line, and the (target word index, type, sense) of
/// the ambiguous noun if any.
fn render(lex: &Lexicon, d: &Draft) -> (String, String, Option<(usize, usize, usize)>) {
    let mut src: Vec<&str> = d.subj_adj.iter().map(|&a| lex.src_adj[a].as_str()).collect();
    src.push(src_noun(lex, d.subj));
    src.push(&lex.src_verbs[d.verb]);
    src.extend(d.obj_adj.iter().map(|&a| lex.src_adj[a].as_str()));
    src.push(src_noun(lex, d.obj));

    let mut tgt: Vec<&str> = vec![tgt_noun(lex, d.subj)];
    tgt.extend(d.subj_adj.iter().map(|&a| lex.tgt_adj[a].as_str()));
    let obj_pos = tgt.len();
    tgt.push(tgt_noun(lex, d.obj));
    tgt.extend(d.obj_adj.iter().map(|&a| lex.tgt_adj[a].as_str()));
    tgt.push(&lex.tgt_verbs[d.verb]);
    let amb = match (d.subj, d.obj) {
        (Noun::Ambiguous(t, s), _) => Some((0, t, s)),
        (_, Noun::Ambiguous(t, s)) => Some((obj_pos, t, s)),
        _ => None,
    };
    (src.join(" "), tgt.join(" "), amb)
}

fn language_graph(lex: &Lexicon, d: &Draft) -> Result<SceneGraph> {
    let ent = |id, n| Entity {
        id,
        label: src_noun(lex, n).to_string(),
        confidence: None,
        feature: None,
    };
    SceneGraph::new(
        Modality::Language,
        vec![ent(0, d.subj), ent(1, d.obj)],
        vec![Relation {
            id: 0,
            label: lex.src_verbs[d.verb].clone(),
            subject: 0,
            object: 1,
            confidence: None,
        }],
    )
}

fn visual_graph(
    spec: &SynthSpec,
    lex: &Lexicon,
    d: &Draft,
    emb: &dyn Fn(&str) -> Vec<f64>,
    sense_vecs: &[Vec<Vec<f64>>],
    distractor_feats: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<SceneGraph> {
    let feature = |n: Noun| {
        let mut f = emb(src_noun(lex, n));
        if let Noun::Ambiguous(t, s) = n {
            f.iter_mut()
                .zip(&sense_vecs[t][s])
                .for_each(|(x, y)| *x += spec.sense_scale * y);
        }
        f.iter_mut().for_each(|x| *x *= spec.visual_scale);
        f
    };
    // (label, feature, confidence) before shuffling ids.
    let mut nodes: Vec<(String, Vec<f64>, f64)> = vec![
        (src_noun(lex, d.subj).to_string(), feature(d.subj), rng.random_range(0.5..1.0)),
        (src_noun(lex, d.obj).to_string(), feature(d.obj), rng.random_range(0.5..1.0)),
    ];
    for _ in 0..spec.distractors {
        let k = rng.random_range(0..lex.distractors.len());
        nodes.push((lex.distractors[k].clone(), distractor_feats[k].iter().map(|x| x * spec.visual_scale).collect(), rng.random_range(0.05..0.6)));
    }
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.shuffle(rng);
    // order[new] = old; position[old] = new.
    let mut position = vec![0; nodes.len()];
    for (new, &old) in order.iter().enumerate() {
        position[old] = new;
    }
    let entities = order
        .iter()
        .enumerate()
        .map(|(new, &old)| Entity {
            id: new,
            label: nodes[old].0.clone(),
            confidence: Some(nodes[old].2),
            feature: Some(nodes[old].1.clone()),
        })
        .collect();
    let mut relations = vec![Relation {
        id: 0,
        label: lex.src_verbs[d.verb].clone(),
        subject: position[0],
        object: position[1],
        confidence: Some(rng.random_range(0.5..1.0)),
    }];
    for k in 2..nodes.len() {
        let anchor = rng.random_range(0..2);
        relations.push(Relation {
            id: relations.len(),
            label: NEAR.into(),
            subject: position[k],
            object: position[anchor],
            confidence: Some(rng.random_range(0.05..0.6)),
        });
    }
    SceneGraph::new(Modality::Visual, entities, relations)
}

impl SynthCorpus {
    pub fn split(&self, name: &str) -> Result<&SynthSplit> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Data(format!("no split {name}")))
    }

    /// Writes the corpus under `dir`: `<split>.src/.tgt`,
    /// `graphs/<split>/<i>.{visual,language}.json`, `labels.emb`,
    /// `answer_key.json`, `test.items.jsonl` and `spec.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for s in &self.splits {
            write_atomic(&dir.join(format!("{}.src", s.name)), lines(&s.src).as_bytes())?;
            write_atomic(&dir.join(format!("{}.tgt", s.name)), lines(&s.tgt).as_bytes())?;
            std::fs::create_dir_all(dir.join("graphs").join(&s.name))?;
            for (i, (v, l)) in s.visual.iter().zip(&s.language).enumerate() {
                write_atomic(&graph_path(dir, &s.name, i, Modality::Visual), v.to_json().as_bytes())?;
                write_atomic(&graph_path(dir, &s.name, i, Modality::Language), l.to_json().as_bytes())?;
            }
        }
        let emb = self
            .embeddings
            .to_text()
            .ok_or_else(|| Error::Embedding("synthetic table is not file-backed".into()))?;
        write_atomic(&dir.join("labels.emb"), emb.as_bytes())?;
        write_atomic(&dir.join("answer_key.json"), serde_json::to_string_pretty(&self.answer_key)?.as_bytes())?;
        let mut items = String::new();
        for it in &self.items {
            items.push_str(&serde_json::to_string(it)?);
            items.push('\n');
        }
        write_atomic(&dir.join("test.items.jsonl"), items.as_bytes())?;
        write_atomic(&dir.join("spec.json"), serde_json::to_string_pretty(&self.spec)?.as_bytes())?;
        Ok(())
    }

    /// Every source and target line, for tokenizer training.
    pub fn all_text(&self) -> impl Iterator<Item = &str> {
        self.splits
            .iter()
            .flat_map(|s| s.src.iter().chain(&s.tgt))
            .map(String::as_str)
    }

    /// Tokenized, vectorized examples of one split.
    pub fn examples(&self, split: &str, bpe: &BpeModel) -> Result<Vec<Example>> {
        let s = self.split(split)?;
        (0..s.src.len())
            .map(|i| {
                Ok(Example {
                    id: format!("{split}:{i}"),
                    src: bpe.encode(&s.src[i]),
                    tgt: bpe.encode(&s.tgt[i]),
                    visual: Some(Arc::new(vectorize(&s.visual[i], &self.embeddings)?)),
                    language: Some(Arc::new(vectorize(&s.language[i], &self.embeddings)?)),
                })
            })
            .collect()
    }

    /// Correct/incorrect pairs for every ambiguous test example.
    pub fn accuracy_items(&self, bpe: &BpeModel) -> Result<Vec<AccuracyItem>> {
        let test = self.examples("test", bpe)?;
        Ok(self
            .items
            .iter()
            .map(|it| {
                let base = &test[it.example];
                let mut positive = base.clone();
                positive.tgt = bpe.encode(&it.positive);
                let mut negative = base.clone();
                negative.tgt = bpe.encode(&it.negative);
                AccuracyItem { positive, negative }
            })
            .collect())
    }
}

fn lines(v: &[String]) -> String {
    let mut s = String::new();
    for l in v {
        s.push_str(l);
        s.push('\n');
    }
    s
}

/// Fraction of ambiguous slots in `split` whose hypothesis contains the
/// correct sense word and no other sense word of the same type.
pub fn ambiguous_token_accuracy(hypotheses: &[String], key: &AnswerKey, split: &str) -> Result<f64> {
    let expected = key
        .splits
        .get(split)
        .copied()
        .ok_or_else(|| Error::Data(format!("answer key has no split {split}")))?;
    if hypotheses.len() != expected {
        return Err(Error::Data(format!(
            "{} hypotheses for {expected} examples in {split}",
            hypotheses.len()
        )));
    }
    let entries: Vec<&AnswerEntry> = key.entries.iter().filter(|e| e.split == split).collect();
    if entries.is_empty() {
        return Err(Error::Data(format!("no ambiguous slots in {split}")));
    }
    let correct = entries
        .iter()
        .filter(|e| {
            let words: HashSet<&str> = hypotheses[e.example].split_whitespace().collect();
            words.contains(e.correct.as_str())
                && e.senses.iter().filter(|s| **s != e.correct).all(|s| !words.contains(s.as_str()))
        })
        .count();
    Ok(correct as f64 / entries.len() as f64)
}

#[cfg(test)]
mod tests;
