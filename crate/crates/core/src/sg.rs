//! Scene graphs: domain model, interchange format, validation and entity statistics.
//!
//! The interchange format is UTF-8 JSON, one graph per document:
//!
//! ```json
//! {"version": 1, "modality": "visual",
//!  "entities": [{"id": 0, "label": "man", "confidence": 0.9, "feature": [0.1, 0.2]}],
//!  "relations": [{"id": 0, "label": "rides", "subject": 0, "object": 0}]}
//! ```
//!
//! Streams hold one such document per line.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Language,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub id: usize,
    pub label: String,
    pub subject: usize,
    pub object: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// A validated scene graph. Entities and relations are stored in id order,
/// so `entities[i].id == i` and `relations[r].id == r`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    modality: Modality,
    entities: Vec<Entity>,
    relations: Vec<Relation>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    version: u32,
    modality: Modality,
    #[serde(default)]
    entities: Vec<Entity>,
    #[serde(default)]
    relations: Vec<Relation>,
}

impl SceneGraph {
    /// Validates and normalizes (sorts by id) the parts of a graph.
    pub fn new(modality: Modality, mut entities: Vec<Entity>, mut relations: Vec<Relation>) -> Result<Self> {
        let p = entities.len();
        let mut seen = HashSet::new();
        for (i, e) in entities.iter().enumerate() {
            let path = format!("entities[{i}]");
            if !seen.insert(e.id) {
                return Err(Error::sg(format!("{path}.id"), format!("duplicate entity id {}", e.id)));
            }
            if e.id >= p {
                return Err(Error::sg(
                    format!("{path}.id"),
                    format!("entity ids must be dense 0..{p}, found {}", e.id),
                ));
            }
            check_confidence(&path, e.confidence)?;
            if let Some(f) = &e.feature {
                if modality == Modality::Language {
                    return Err(Error::sg(format!("{path}.feature"), "language entities carry no features"));
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::sg(format!("{path}.feature"), "non-finite feature value"));
                }
            }
        }
        let mut dim = None;
        for (i, f) in entities.iter().enumerate().filter_map(|(i, e)| e.feature.as_ref().map(|f| (i, f))) {
            match dim {
                None => dim = Some(f.len()),
                Some(d) if d != f.len() => {
                    return Err(Error::sg(
                        format!("entities[{i}].feature"),
                        format!("feature length {} differs from {d}", f.len()),
                    ))
                }
                _ => {}
            }
        }
        let q = relations.len();
        let mut seen = HashSet::new();
        for (i, r) in relations.iter().enumerate() {
            let path = format!("relations[{i}]");
            if !seen.insert(r.id) {
                return Err(Error::sg(format!("{path}.id"), format!("duplicate relation id {}", r.id)));
            }
            if r.id >= q {
                return Err(Error::sg(
                    format!("{path}.id"),
                    format!("relation ids must be dense 0..{q}, found {}", r.id),
                ));
            }
            for (field, end) in [("subject", r.subject), ("object", r.object)] {
                if end >= p {
                    return Err(Error::sg(
                        format!("{path}.{field}"),
                        format!("dangling endpoint {end}: graph has {p} entities"),
                    ));
                }
            }
            check_confidence(&path, r.confidence)?;
        }
        entities.sort_by_key(|e| e.id);
        relations.sort_by_key(|r| r.id);
        Ok(SceneGraph {
            modality,
            entities,
            relations,
        })
    }

    pub fn empty(modality: Modality) -> Self {
        SceneGraph {
            modality,
            entities: Vec::new(),
            relations: Vec::new(),
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    /// Number of entities `p`.
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Number of relations `q`.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// The `q × 2` relation index matrix as (subject, object) pairs.
    pub fn index_pairs(&self) -> Vec<[usize; 2]> {
        self.relations.iter().map(|r| [r.subject, r.object]).collect()
    }

    /// Ids of all relations joining `a` and `b` in either direction.
    pub fn relations_between(&self, a: usize, b: usize) -> Vec<usize> {
        self.relations
            .iter()
            .filter(|r| (r.subject == a && r.object == b) || (r.subject == b && r.object == a))
            .map(|r| r.id)
            .collect()
    }

    /// Common length of the entity features, if any entity has one.
    pub fn feature_dim(&self) -> Option<usize> {
        self.entities.iter().find_map(|e| e.feature.as_ref().map(Vec::len))
    }

    /// Sub-graph on the kept entities (renumbered in the given order);
    /// relations with a dropped endpoint are removed.
    pub fn retain_entities(&self, kept: &[usize]) -> Result<Self> {
        let mut remap = vec![None; self.entities.len()];
        let mut entities = Vec::with_capacity(kept.len());
        for (new, &old) in kept.iter().enumerate() {
            let e = self
                .entities
                .get(old)
                .ok_or_else(|| Error::sg("kept", format!("no entity {old}")))?;
            remap[old] = Some(new);
            entities.push(Entity { id: new, ..e.clone() });
        }
        let relations = self
            .relations
            .iter()
            .filter_map(|r| Some((r, remap[r.subject]?, remap[r.object]?)))
            .enumerate()
            .map(|(id, (r, s, o))| Relation {
                id,
                subject: s,
                object: o,
                ..r.clone()
            })
            .collect();
        SceneGraph::new(self.modality, entities, relations)
    }

    pub fn to_json(&self) -> String {
        let doc = Document {
            version: FORMAT_VERSION,
            modality: self.modality,
            entities: self.entities.clone(),
            relations: self.relations.clone(),
        };
        serde_json::to_string(&doc).expect("scene graph serializes")
    }
}

fn check_confidence(path: &str, c: Option<f64>) -> Result<()> {
    match c {
        Some(c) if !(0.0..=1.0).contains(&c) => Err(Error::sg(
            format!("{path}.confidence"),
            format!("confidence {c} outside [0, 1]"),
        )),
        _ => Ok(()),
    }
}

/// Parses and validates one interchange document. Unknown fields are ignored.
pub fn parse_scene_graph(bytes: &[u8]) -> Result<SceneGraph> {
    let doc: Document = serde_json::from_slice(bytes).map_err(|e| Error::sg("$", e.to_string()))?;
    if doc.version != FORMAT_VERSION {
        return Err(Error::sg(
            "version",
            format!("unsupported version {} (expected {FORMAT_VERSION})", doc.version),
        ));
    }
    SceneGraph::new(doc.modality, doc.entities, doc.relations)
}

/// Parses a newline-delimited stream; blank lines are skipped.
pub fn parse_scene_graph_stream(reader: impl BufRead) -> Result<Vec<SceneGraph>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let g = parse_scene_graph(line.as_bytes()).map_err(|e| match e {
            Error::SceneGraph { path, message } => Error::sg(format!("line {}: {path}", n + 1), message),
            other => other,
        })?;
        out.push(g);
    }
    Ok(out)
}

pub fn read_scene_graph(path: &Path) -> Result<SceneGraph> {
    let bytes = std::fs::read(path)?;
    parse_scene_graph(&bytes).map_err(|e| match e {
        Error::SceneGraph { path: p, message } => Error::sg(format!("{}: {p}", path.display()), message),
        other => other,
    })
}

/// All graphs under `dir` (recursive): `*.json` files hold one graph,
/// `*.jsonl` files a stream. Files are visited in path order.
pub fn load_graph_dir(dir: &Path) -> Result<Vec<(PathBuf, SceneGraph)>> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    files.sort();
    let mut out = Vec::new();
    for f in files {
        match f.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let g = read_scene_graph(&f)?;
                out.push((f, g));
            }
            Some("jsonl") => {
                let reader = std::io::BufReader::new(std::fs::File::open(&f)?);
                for g in parse_scene_graph_stream(reader)? {
                    out.push((f.clone(), g));
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Entity-count statistics over a collection of graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityStats {
    pub mean_entities: f64,
    pub mean_reliable: f64,
    pub graph_count: usize,
    /// `None` when confidences were not consulted.
    pub threshold: Option<f64>,
}

/// Published Multi30K reference counts, reported next to computed statistics
/// as the expected outputs on real extracted data. Two values circulate for
/// the reliable visual mean; both are kept.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReferenceCounts {
    pub detector_entities: f64,
    pub visual_reliable: [f64; 2],
    pub language_english: f64,
    pub language_german: f64,
    pub language_french: f64,
    pub confidence_threshold: f64,
}

pub const MULTI30K_REFERENCE: ReferenceCounts = ReferenceCounts {
    detector_entities: 36.0,
    visual_reliable: [9.06, 9.17],
    language_english: 3.48,
    language_german: 3.66,
    language_french: 3.92,
    confidence_threshold: 0.3,
};

fn is_reliable(modality: Modality, e: &Entity, threshold: f64) -> bool {
    match (e.confidence, modality) {
        (Some(c), _) => c >= threshold,
        (None, Modality::Language) => true,
        (None, Modality::Visual) => false,
    }
}

/// Mean entity count and mean count of entities with confidence at least
/// `threshold`. Entities without a confidence are reliable in language
/// graphs and unreliable in visual graphs.
pub fn entity_stats<'a>(graphs: impl IntoIterator<Item = &'a SceneGraph>, threshold: f64) -> Result<EntityStats> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let (mut n, mut total, mut reliable) = (0usize, 0usize, 0usize);
    for g in graphs {
        n += 1;
        total += g.entities.len();
        reliable += g
            .entities
            .iter()
            .filter(|e| is_reliable(g.modality, e, threshold))
            .count();
    }
    if n == 0 {
        return Err(Error::Data("entity statistics over no graphs".into()));
    }
    Ok(EntityStats {
        mean_entities: total as f64 / n as f64,
        mean_reliable: reliable as f64 / n as f64,
        graph_count: n,
        threshold: Some(threshold),
    })
}

/// Mean entity count of language graphs; confidences are not consulted.
pub fn language_entity_stats<'a>(graphs: impl IntoIterator<Item = &'a SceneGraph>) -> Result<EntityStats> {
    let (mut n, mut total) = (0usize, 0usize);
    for g in graphs {
        n += 1;
        total += g.entities.len();
    }
    if n == 0 {
        return Err(Error::Data("entity statistics over no graphs".into()));
    }
    let mean = total as f64 / n as f64;
    Ok(EntityStats {
        mean_entities: mean,
        mean_reliable: mean,
        graph_count: n,
        threshold: None,
    })
}
