//! Parallel examples, corpus loading, and token-count batching.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph_encoder::{vectorize, EmbeddingProvider, VectorizedSceneGraph};
use crate::sg::{read_scene_graph, Modality};
use crate::tokenizer::BpeModel;

/// One source/target pair with its optional scene graphs. Token ids carry no
/// bos/eos; the model adds them.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub visual: Option<Arc<VectorizedSceneGraph>>,
    pub language: Option<Arc<VectorizedSceneGraph>>,
}

impl Example {
    pub fn text(id: impl Into<String>, src: Vec<usize>, tgt: Vec<usize>) -> Self {
        Example {
            id: id.into(),
            src,
            tgt,
            visual: None,
            language: None,
        }
    }

    /// Padded length this example contributes to a batch.
    pub fn cost(&self) -> usize {
        let graph_rows = self.visual.as_ref().map_or(0, |v| v.num_entities)
            + self.language.as_ref().map_or(0, |v| v.num_entities);
        (self.src.len() + 1 + graph_rows).max(self.tgt.len() + 1)
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Graph file of example `index` in `split` for `modality`.
pub fn graph_path(dir: &Path, split: &str, index: usize, modality: Modality) -> std::path::PathBuf {
    graph_file(&dir.join("graphs").join(split), index, modality)
}

/// `<graph_dir>/<index>.{visual,language}.json`.
pub fn graph_file(graph_dir: &Path, index: usize, modality: Modality) -> std::path::PathBuf {
    let kind = match modality {
        Modality::Visual => "visual",
        Modality::Language => "language",
    };
    graph_dir.join(format!("{index}.{kind}.json"))
}

/// Reads `<graph_dir>/<index>.{visual,language}.json` into `ex`.
pub fn attach_graphs(ex: &mut Example, graph_dir: &Path, index: usize, provider: &EmbeddingProvider) -> Result<()> {
    let id = ex.id.clone();
    let load = |m| -> Result<Arc<VectorizedSceneGraph>> {
        let p = graph_file(graph_dir, index, m);
        let g = read_scene_graph(&p).map_err(|e| Error::Data(format!("example {id}: {e}")))?;
        if g.modality() != m {
            return Err(Error::Data(format!("example {id}: {} holds a {:?} graph", p.display(), g.modality())));
        }
        Ok(Arc::new(vectorize(&g, provider).map_err(|e| Error::Data(format!("example {id}: {e}")))?))
    };
    ex.visual = Some(load(Modality::Visual)?);
    ex.language = Some(load(Modality::Language)?);
    Ok(())
}

/// Loads `<dir>/<split>.src`, `<dir>/<split>.tgt` and, when a
/// `graphs/<split>` directory exists, each example's visual and language
/// graphs. A missing graph file for an example is an error naming it.
pub fn load_split(dir: &Path, split: &str, bpe: &BpeModel, provider: &EmbeddingProvider) -> Result<Vec<Example>> {
    let src = read_lines(&dir.join(format!("{split}.src")))?;
    let tgt = read_lines(&dir.join(format!("{split}.tgt")))?;
    if src.len() != tgt.len() {
        return Err(Error::Data(format!(
            "{split}: {} source lines but {} target lines",
            src.len(),
            tgt.len()
        )));
    }
    let with_graphs = dir.join("graphs").join(split).is_dir();
    let mut out = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        let id = format!("{split}:{i}");
        let mut ex = Example::text(id.clone(), bpe.encode(s), bpe.encode(t));
        if ex.src.is_empty() {
            return Err(Error::Data(format!("example {id}: empty source")));
        }
        if with_graphs {
            attach_graphs(&mut ex, &dir.join("graphs").join(split), i, provider)?;
        }
        out.push(ex);
    }
    Ok(out)
}

/// Groups example indices into batches of at most `max_tokens` padded
/// tokens. Examples are bucketed by length; with `rng` the batch order is
/// shuffled. A single example longer than the budget forms its own batch.
pub fn make_batches(examples: &[Example], max_tokens: usize, rng: Option<&mut dyn rand::RngCore>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].cost(), examples[i].tgt.len(), i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let c = examples[i].cost();
        let widened = longest.max(c);
        if !current.is_empty() && widened * (current.len() + 1) > max_tokens {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(c);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    if let Some(rng) = rng {
        shuffle(&mut batches, rng);
    }
    batches
}

fn shuffle<T>(items: &mut [T], rng: &mut dyn rand::RngCore) {
    // `SliceRandom::shuffle` needs a sized RNG.
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Uniform random permutation helper for callers holding a sized RNG.
pub fn shuffled<T: Clone>(items: &[T], rng: &mut impl Rng) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    v
}
