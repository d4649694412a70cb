//! Run configuration: flat JSON with dotted keys over nested defaults.

use std::collections::BTreeMap;
use std::path::Path;

use psg_core::backbone::BackboneConfig;
use psg_core::eval::{BeamConfig, Brevity, MeteorConfig};
use psg_core::model::{GraphConfig, ModelConfig};
use psg_core::pruner::PruneConfig;
use psg_core::synth::SynthSpec;
use psg_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

pub const SEED_ENV: &str = "PSG_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOptions {
    /// Train the text-only translation term next to the multimodal one.
    pub nmt_aux: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataOptions {
    /// Merge budget when no `bpe.model` ships with the data.
    pub bpe_merges: usize,
    /// Seed of the hashed label embeddings used when no `labels.emb` exists.
    pub embedding_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub brevity: Brevity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Size preset (`tiny`, `small`, `medium`, `base`) applied before any
    /// other key.
    pub preset: Option<String>,
    pub backbone: BackboneConfig,
    pub graph: GraphConfig,
    pub prune: PruneConfig,
    pub model: ModelOptions,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub meteor: MeteorConfig,
    pub eval: EvalOptions,
    pub synth: SynthSpec,
    pub data: DataOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: None,
            backbone: BackboneConfig::base(),
            graph: GraphConfig::default(),
            prune: PruneConfig::default(),
            model: ModelOptions { nmt_aux: true },
            train: TrainConfig::default(),
            beam: BeamConfig::default(),
            meteor: MeteorConfig::default(),
            eval: EvalOptions {
                brevity: Brevity::Standard,
            },
            synth: SynthSpec::default(),
            data: DataOptions {
                bpe_merges: psg_core::tokenizer::DEFAULT_MERGES,
                embedding_seed: 0,
            },
        }
    }
}

impl RunConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            backbone: self.backbone.clone(),
            graph: self.graph.clone(),
            prune: self.prune.clone(),
            nmt_aux: self.model.nmt_aux,
        }
    }

    pub fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten(&serde_json::to_value(self).expect("config serializes"), "", &mut out);
        out
    }

    pub fn to_flat_json(&self) -> String {
        let map: Map<String, Value> = self.flat().into_iter().collect();
        serde_json::to_string_pretty(&Value::Object(map)).expect("config serializes") + "\n"
    }

    fn validate(&self) -> psg_core::Result<()> {
        self.backbone.validate()?;
        self.prune.validate()?;
        self.train.validate()?;
        self.beam.validate()?;
        self.meteor.validate()?;
        Ok(())
    }
}

fn flatten(v: &Value, prefix: &str, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(x, &key, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(p) = parts.next() {
            if parts.peek().is_none() {
                node.insert(p.to_string(), v.clone());
            } else {
                node = node
                    .entry(p)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("dotted keys never collide with leaves");
            }
        }
    }
    Value::Object(root)
}

/// `key=value` with the value read as JSON, or as a bare string when it is
/// not valid JSON.
fn parse_set(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {s:?}")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Defaults, then the preset, then the file, then `--set` pairs, then
/// `PSG_SEED` for both the training and the generator seed.
pub fn resolve(file: Option<&Path>, sets: &[String], env_seed: Option<&str>) -> Result<RunConfig, CliError> {
    let mut overrides: Vec<(String, Value)> = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display())));
        };
        overrides.extend(map);
    }
    for s in sets {
        overrides.push(parse_set(s)?);
    }
    if let Some(seed) = env_seed {
        let n: u64 = seed
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {seed:?}")))?;
        overrides.push(("train.seed".into(), n.into()));
        overrides.push(("synth.seed".into(), n.into()));
    }

    let mut base = RunConfig::default();
    if let Some((_, v)) = overrides.iter().rev().find(|(k, _)| k == "preset") {
        if !v.is_null() {
            let name = v
                .as_str()
                .ok_or_else(|| CliError::Usage("preset must be a string".into()))?
                .to_string();
            base.backbone = BackboneConfig::by_name(&name).map_err(|e| CliError::Usage(e.to_string()))?;
            base.train = TrainConfig::table_preset(&name).map_err(|e| CliError::Usage(e.to_string()))?;
        }
    }
    let mut flat = base.flat();
    for (k, v) in overrides {
        match flat.get_mut(&k) {
            Some(slot) => *slot = v,
            None => return Err(CliError::Usage(format!("unknown config key {k:?}"))),
        }
    }
    let cfg: RunConfig =
        serde_json::from_value(unflatten(&flat)).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Reads a flattened config back, as echoed next to outputs or stored in a
/// checkpoint.
pub fn from_flat(value: &Value) -> Result<RunConfig, CliError> {
    let Value::Object(map) = value else {
        return Err(CliError::Usage("stored config is not an object".into()));
    };
    let flat: BTreeMap<String, Value> = map.clone().into_iter().collect();
    serde_json::from_value(unflatten(&flat)).map_err(|e| CliError::Usage(format!("stored config: {e}")))
}
