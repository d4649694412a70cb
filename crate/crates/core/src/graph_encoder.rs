//! Label vectorization and one round of relational message passing over
//! scene graphs.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sg::{Modality, SceneGraph};
use crate::tensor::Tensor;

/// Source of label vectors.
#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingProvider {
    /// Fixed table, usually read from an `emb v1` file.
    File {
        dim: usize,
        labels: Vec<String>,
        vectors: Vec<Vec<f64>>,
        index: HashMap<String, usize>,
    },
    /// Unit-norm Gaussian vectors seeded by a hash of the label.
    Synthetic { dim: usize, seed: u64 },
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn synthetic_vector(label: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(label.as_bytes()) ^ seed.rotate_left(29));
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl EmbeddingProvider {
    pub fn synthetic(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Embedding("dimension must be positive".into()));
        }
        Ok(EmbeddingProvider::Synthetic { dim, seed })
    }

    pub fn from_table(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Embedding("dimension must be positive".into()));
        }
        let mut labels = Vec::new();
        let mut vectors = Vec::new();
        let mut index = HashMap::new();
        for (label, v) in entries {
            if v.len() != dim {
                return Err(Error::Embedding(format!("{label:?} has {} values, expected {dim}", v.len())));
            }
            if index.insert(label.clone(), labels.len()).is_some() {
                return Err(Error::Embedding(format!("duplicate label {label:?}")));
            }
            labels.push(label);
            vectors.push(v);
        }
        Ok(EmbeddingProvider::File {
            dim,
            labels,
            vectors,
            index,
        })
    }

    /// Parses the `emb v1 <count> <dim>` text format. The last `dim` fields of
    /// each line are the vector; everything before them is the label.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (count, dim) = match fields.as_slice() {
            ["emb", "v1", c, d] => (
                c.parse::<usize>().map_err(|_| Error::Embedding(format!("bad count in {header:?}")))?,
                d.parse::<usize>().map_err(|_| Error::Embedding(format!("bad dim in {header:?}")))?,
            ),
            _ => return Err(Error::Embedding(format!("bad header {header:?}"))),
        };
        let mut entries = Vec::with_capacity(count);
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let toks: Vec<&str> = line.split(' ').collect();
            if toks.len() < dim + 1 {
                return Err(Error::Embedding(format!("line {}: expected label and {dim} values", i + 2)));
            }
            let split = toks.len() - dim;
            let label = toks[..split].join(" ");
            let v = toks[split..]
                .iter()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Embedding(format!("line {}: {e}", i + 2)))?;
            entries.push((label, v));
        }
        if entries.len() != count {
            return Err(Error::Embedding(format!("header says {count} rows, found {}", entries.len())));
        }
        Self::from_table(dim, entries)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::File { dim, .. } | EmbeddingProvider::Synthetic { dim, .. } => *dim,
        }
    }

    pub fn embed(&self, label: &str) -> Option<Vec<f64>> {
        match self {
            EmbeddingProvider::File { vectors, index, .. } => index.get(label).map(|&i| vectors[i].clone()),
            EmbeddingProvider::Synthetic { dim, seed } => Some(synthetic_vector(label, *dim, *seed)),
        }
    }

    /// Serializes a file-backed table; synthetic providers have no table.
    pub fn to_text(&self) -> Option<String> {
        let EmbeddingProvider::File { dim, labels, vectors, .. } = self else {
            return None;
        };
        let mut s = format!("emb v1 {} {dim}\n", labels.len());
        for (l, v) in labels.iter().zip(vectors) {
            s.push_str(l);
            for x in v {
                s.push_str(&format!(" {x}"));
            }
            s.push('\n');
        }
        Some(s)
    }
}

/// Continuous form of a scene graph: entity rows, relation rows, and the
/// (subject, object) pairs of each relation.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorizedSceneGraph {
    pub modality: Modality,
    pub num_entities: usize,
    pub entity_dim: usize,
    /// Row-major `num_entities × entity_dim`.
    pub entities: Vec<f64>,
    pub relation_dim: usize,
    /// Row-major `pairs.len() × relation_dim`.
    pub relations: Vec<f64>,
    pub pairs: Vec<[usize; 2]>,
}

impl VectorizedSceneGraph {
    pub fn num_relations(&self) -> usize {
        self.pairs.len()
    }

    pub fn entity_row(&self, i: usize) -> &[f64] {
        &self.entities[i * self.entity_dim..(i + 1) * self.entity_dim]
    }

    pub fn relation_row(&self, r: usize) -> &[f64] {
        &self.relations[r * self.relation_dim..(r + 1) * self.relation_dim]
    }

    /// Keeps the listed entities (original ids, any order) and the relations
    /// whose endpoints both survive; ids are renumbered in the given order.
    pub fn retain_entities(&self, kept: &[usize]) -> Self {
        let mut remap = vec![usize::MAX; self.num_entities];
        let mut entities = Vec::with_capacity(kept.len() * self.entity_dim);
        for (new, &old) in kept.iter().enumerate() {
            remap[old] = new;
            entities.extend_from_slice(self.entity_row(old));
        }
        let mut relations = Vec::new();
        let mut pairs = Vec::new();
        for (r, &[s, o]) in self.pairs.iter().enumerate() {
            if remap[s] != usize::MAX && remap[o] != usize::MAX {
                pairs.push([remap[s], remap[o]]);
                relations.extend_from_slice(self.relation_row(r));
            }
        }
        VectorizedSceneGraph {
            modality: self.modality,
            num_entities: kept.len(),
            entity_dim: self.entity_dim,
            entities,
            relation_dim: self.relation_dim,
            relations,
            pairs,
        }
    }
}

/// Entity rows come from detector features when present, else label vectors;
/// relation rows are label vectors.
pub fn vectorize(graph: &SceneGraph, provider: &EmbeddingProvider) -> Result<VectorizedSceneGraph> {
    let dc = provider.dim();
    let mut missing = BTreeSet::new();
    let mut lookup = |label: &str| -> Vec<f64> {
        provider.embed(label).unwrap_or_else(|| {
            missing.insert(label.to_string());
            vec![0.0; dc]
        })
    };
    let entity_dim = graph.feature_dim().unwrap_or(dc);
    let mut entities = Vec::with_capacity(graph.num_entities() * entity_dim);
    for e in graph.entities() {
        match &e.feature {
            Some(f) => entities.extend_from_slice(f),
            None if entity_dim == dc => entities.extend(lookup(&e.label)),
            None => {
                return Err(Error::Embedding(format!(
                    "entity {} has no feature but the graph's features have dimension {entity_dim} != {dc}",
                    e.id
                )))
            }
        }
    }
    let mut relations = Vec::with_capacity(graph.num_relations() * dc);
    for r in graph.relations() {
        relations.extend(lookup(&r.label));
    }
    if !missing.is_empty() {
        let list: Vec<String> = missing.into_iter().collect();
        return Err(Error::Embedding(format!("labels missing from table: {}", list.join(", "))));
    }
    Ok(VectorizedSceneGraph {
        modality: graph.modality(),
        num_entities: graph.num_entities(),
        entity_dim,
        entities,
        relation_dim: dc,
        relations,
        pairs: graph.index_pairs(),
    })
}

/// Affine layers with ReLU between consecutive layers.
#[derive(Clone, Debug)]
pub struct Projection {
    pub layers: Vec<(Var, Var)>,
}

impl Projection {
    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, mut x: Var) -> Result<Var> {
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.relu(x)?;
            }
            let h = g.matmul(x, w)?;
            x = g.add_bias(h, b)?;
        }
        Ok(x)
    }
}

/// Graph-side parameters bound into a compute graph.
#[derive(Clone, Debug)]
pub struct GcnParams {
    pub entity_proj: Projection,
    pub relation_proj: Projection,
    pub w1: Var,
    pub w2: Var,
    pub b: Var,
}

/// Several scene graphs of one modality stacked as a disjoint union, with the
/// degree-normalized aggregation precomputed as constant matrices.
#[derive(Clone, Debug)]
pub struct GraphBatch<S: Scalar> {
    offsets: Vec<usize>,
    entities: Tensor<S>,
    relations: Option<Tensor<S>>,
    entity_mix: Tensor<S>,
    relation_mix: Option<Tensor<S>>,
    bias_count: Tensor<S>,
}

/// Number of summands in each node's update: the self term plus one per
/// incident relation (a relation from a node to itself counts once).
pub fn degrees(num_entities: usize, pairs: &[[usize; 2]]) -> Vec<usize> {
    let mut deg = vec![1usize; num_entities];
    for &[s, o] in pairs {
        deg[s] += 1;
        if s != o {
            deg[o] += 1;
        }
    }
    deg
}

impl<S: Scalar> GraphBatch<S> {
    /// Returns `None` when the graphs hold no entities at all.
    pub fn new(graphs: &[&VectorizedSceneGraph]) -> Result<Option<Self>> {
        let total: usize = graphs.iter().map(|v| v.num_entities).sum();
        let total_rel: usize = graphs.iter().map(|v| v.num_relations()).sum();
        let Some(first) = graphs.iter().find(|v| v.num_entities > 0) else {
            return Ok(None);
        };
        let (in_dim, rel_dim) = (first.entity_dim, first.relation_dim);
        let mut offsets = vec![0];
        let mut ent = Vec::with_capacity(total * in_dim);
        let mut rel = Vec::with_capacity(total_rel * rel_dim);
        let mut m_e = vec![S::zero(); total * total];
        let mut m_r = vec![S::zero(); total * total_rel];
        let mut counts = Vec::with_capacity(total);
        let (mut base, mut rbase) = (0, 0);
        for v in graphs {
            if v.num_entities > 0 && v.entity_dim != in_dim {
                return Err(Error::shape("gcn entities", &[in_dim], &[v.entity_dim]));
            }
            if v.num_relations() > 0 && v.relation_dim != rel_dim {
                return Err(Error::shape("gcn relations", &[rel_dim], &[v.relation_dim]));
            }
            ent.extend(v.entities.iter().map(|&x| S::lit(x)));
            rel.extend(v.relations.iter().map(|&x| S::lit(x)));
            let deg = degrees(v.num_entities, &v.pairs);
            for (j, &d) in deg.iter().enumerate() {
                m_e[(base + j) * total + base + j] = S::lit(1.0 / d as f64);
                counts.push(S::lit(d as f64));
            }
            for (r, &[s, o]) in v.pairs.iter().enumerate() {
                let w = S::lit(1.0 / ((deg[s] * deg[o]) as f64).sqrt());
                let (s, o, r) = (base + s, base + o, rbase + r);
                m_e[s * total + o] = m_e[s * total + o] + w;
                m_r[s * total_rel + r] = m_r[s * total_rel + r] + w;
                if s != o {
                    m_e[o * total + s] = m_e[o * total + s] + w;
                    m_r[o * total_rel + r] = m_r[o * total_rel + r] + w;
                }
            }
            base += v.num_entities;
            rbase += v.num_relations();
            offsets.push(base);
        }
        let (relations, relation_mix) = if total_rel > 0 {
            (
                Some(Tensor::new([total_rel, rel_dim], rel)?),
                Some(Tensor::new([total, total_rel], m_r)?),
            )
        } else {
            (None, None)
        };
        Ok(Some(GraphBatch {
            offsets,
            entities: Tensor::new([total, in_dim], ent)?,
            relations,
            entity_mix: Tensor::new([total, total], m_e)?,
            relation_mix,
            bias_count: Tensor::new([total, 1], counts)?,
        }))
    }

    pub fn num_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_nodes(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// Rows of graph `i` in the stacked node features.
    pub fn node_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

/// One round of message passing over every graph in `batch`; returns the
/// stacked node features (total nodes × d).
pub fn gcn_forward<S: Scalar>(g: &mut Graph<S>, batch: &GraphBatch<S>, params: &GcnParams) -> Result<Var> {
    let e_in = g.constant(batch.entities.clone());
    let e = params.entity_proj.apply(g, e_in)?;
    let ew = g.matmul(e, params.w1)?;
    let mix = g.constant(batch.entity_mix.clone());
    let mut out = g.matmul(mix, ew)?;
    if let (Some(rel), Some(rmix)) = (&batch.relations, &batch.relation_mix) {
        let r_in = g.constant(rel.clone());
        let r = params.relation_proj.apply(g, r_in)?;
        let rw = g.matmul(r, params.w2)?;
        let rmix = g.constant(rmix.clone());
        let rel_term = g.matmul(rmix, rw)?;
        out = g.add(out, rel_term)?;
    }
    let d = g.shape(params.b).iter().product::<usize>();
    let b_row = g.reshape(params.b, &[1, d])?;
    let counts = g.constant(batch.bias_count.clone());
    let bias = g.matmul(counts, b_row)?;
    g.add(out, bias)
}

#[cfg(test)]
mod tests;
