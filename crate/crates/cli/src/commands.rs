use std::path::{Path, PathBuf};

use psg_core::checkpoint::{average_checkpoints, list_checkpoints, Checkpoint};
use psg_core::data::{attach_graphs, load_split, read_lines, Example};
use psg_core::eval::{corpus_bleu_text, corpus_meteor, disambiguation_accuracy, translate as beam_translate, AccuracyItem};
use psg_core::graph_encoder::EmbeddingProvider;
use psg_core::io::write_atomic;
use psg_core::pruner::attention_heatmap_svg;
use psg_core::sg::{entity_stats, language_entity_stats, load_graph_dir, read_scene_graph, Modality, MULTI30K_REFERENCE};
use psg_core::synth::{ambiguous_token_accuracy, generate, AnswerKey, ItemRecord};
use psg_core::tokenizer::BpeModel;
use psg_core::trainer::{train as run_training, TrainOutput};
use psg_core::{Error, Model};
use serde_json::{json, Value};

use crate::config::{self, from_flat, RunConfig};
use crate::error::CliError;
use crate::ConfigArgs;

fn echo_config(path: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write_atomic(path, cfg.to_flat_json().as_bytes())?;
    Ok(())
}

/// `<file>.config.json` next to a file output.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    out.with_file_name(name)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), CliError> {
    let mut s = String::new();
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn read_bpe(path: &Path) -> Result<BpeModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Tokenizer(format!("{}: {e}", path.display())))?;
    Ok(BpeModel::from_text(&text)?)
}

/// `labels.emb` in `dir` or up to three levels above it, else hashed
/// embeddings of the configured dimension.
fn provider_near(dir: Option<&Path>, cfg: &RunConfig) -> Result<EmbeddingProvider, CliError> {
    if let Some(d) = dir {
        for anc in d.ancestors().take(4) {
            let p = anc.join("labels.emb");
            if p.is_file() {
                return Ok(EmbeddingProvider::read(&p)?);
            }
        }
    }
    Ok(EmbeddingProvider::synthetic(cfg.graph.label_dim, cfg.data.embedding_seed)?)
}

struct Loaded {
    ckpt: Checkpoint,
    cfg: RunConfig,
    data_dir: Option<PathBuf>,
}

fn load_checkpoint(path: &Path) -> Result<Loaded, CliError> {
    let ckpt = Checkpoint::read(path)?;
    let run = ckpt.run_config().cloned().unwrap_or(Value::Null);
    let cfg = match run.get("config") {
        Some(c) => from_flat(c)?,
        None => RunConfig::default(),
    };
    let data_dir = run.get("data_dir").and_then(Value::as_str).map(PathBuf::from);
    Ok(Loaded { ckpt, cfg, data_dir })
}

fn bpe_for(ckpt: &Path, explicit: Option<&Path>) -> Result<BpeModel, CliError> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join("bpe.model"),
    };
    read_bpe(&path)
}

pub fn synth(args: &ConfigArgs, env_seed: Option<&str>, out: &Path) -> Result<Value, CliError> {
    let cfg = config::resolve(args.config.as_deref(), &args.sets, env_seed)?;
    let corpus = generate(&cfg.synth)?;
    corpus.write(out)?;
    echo_config(&out.join("config.json"), &cfg)?;
    let counts: Value = corpus.splits.iter().map(|s| (s.name.clone(), json!(s.src.len()))).collect();
    Ok(json!({
        "out": out,
        "splits": counts,
        "ambiguous_slots": corpus.answer_key.entries.len(),
        "items": corpus.items.len(),
    }))
}

pub fn bpe_train(corpus: &[PathBuf], merges: usize, out: &Path) -> Result<Value, CliError> {
    let mut lines = Vec::new();
    for p in corpus {
        lines.extend(read_lines(p)?);
    }
    let bpe = BpeModel::train(lines.iter().map(String::as_str), merges)?;
    write_atomic(out, bpe.to_text().as_bytes())?;
    let echo = json!({ "corpus": corpus, "merges": merges });
    write_atomic(&sidecar(out), (serde_json::to_string_pretty(&echo)? + "\n").as_bytes())?;
    Ok(json!({ "out": out, "merges": bpe.merges().len(), "vocab_size": bpe.vocab_size() }))
}

fn check_graph_dims(examples: &[Example], cfg: &RunConfig) -> Result<(), CliError> {
    if !cfg.graph.enabled() {
        return Ok(());
    }
    for ex in examples {
        for (g, want, key) in [
            (&ex.visual, cfg.graph.visual_dim, "graph.visual_dim"),
            (&ex.language, cfg.graph.label_dim, "graph.label_dim"),
        ] {
            if let Some(v) = g {
                if v.num_entities > 0 && v.entity_dim != want {
                    return Err(CliError::Usage(format!(
                        "example {}: entity vectors have dimension {}, but {key} is {want}",
                        ex.id, v.entity_dim
                    )));
                }
            }
        }
    }
    Ok(())
}

pub fn train(args: &ConfigArgs, env_seed: Option<&str>, data: &Path, out: &Path) -> Result<Value, CliError> {
    let cfg = config::resolve(args.config.as_deref(), &args.sets, env_seed)?;
    std::fs::create_dir_all(out)?;
    echo_config(&out.join("config.json"), &cfg)?;
    let shipped = data.join("bpe.model");
    let bpe = if shipped.is_file() {
        read_bpe(&shipped)?
    } else {
        let mut text = read_lines(&data.join("train.src"))?;
        text.extend(read_lines(&data.join("train.tgt"))?);
        BpeModel::train(text.iter().map(String::as_str), cfg.data.bpe_merges)?
    };
    write_atomic(&out.join("bpe.model"), bpe.to_text().as_bytes())?;
    let provider = provider_near(Some(data), &cfg)?;
    let train_set = load_split(data, "train", &bpe, &provider)?;
    let valid_set = if data.join("valid.src").is_file() {
        load_split(data, "valid", &bpe, &provider)?
    } else {
        Vec::new()
    };
    check_graph_dims(&train_set, &cfg)?;
    let mut model = Model::new(cfg.model_config(bpe.vocab_size()), cfg.train.seed)?;
    let data_dir = std::fs::canonicalize(data).unwrap_or_else(|_| data.to_path_buf());
    let mut log = Vec::new();
    let report = run_training(
        &mut model,
        &train_set,
        &valid_set,
        &cfg.train,
        TrainOutput {
            dir: Some(out),
            run: json!({ "config": serde_json::from_str::<Value>(&cfg.to_flat_json())?, "data_dir": data_dir }),
            log: Some(&mut log),
        },
    );
    // Keep the log of a failed run for diagnosis.
    write_atomic(&out.join("train.log.jsonl"), &log)?;
    let report = serde_json::to_value(report?)?;
    write_atomic(&out.join("report.json"), (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    Ok(report)
}

pub struct TranslateArgs<'a> {
    pub ckpt: &'a Path,
    pub src: &'a Path,
    pub graphs: Option<&'a Path>,
    pub beam: Option<usize>,
    pub out: &'a Path,
    pub bpe: Option<&'a Path>,
    pub embeddings: Option<&'a Path>,
    pub cfg: &'a ConfigArgs,
}

/// Stored run config with `--config` / `--set` applied on top.
fn overlay(stored: &RunConfig, args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut sets: Vec<String> = stored
        .flat()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    if let Some(p) = &args.config {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        let Value::Object(m) = v else {
            return Err(CliError::Usage(format!("{}: config must be a JSON object", p.display())));
        };
        sets.extend(m.into_iter().map(|(k, v)| format!("{k}={v}")));
    }
    sets.extend(args.sets.iter().cloned());
    config::resolve(None, &sets, None)
}

fn source_examples(
    lines: &[String],
    bpe: &BpeModel,
    graphs: Option<&Path>,
    provider: &EmbeddingProvider,
) -> Result<Vec<Example>, CliError> {
    lines
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut ex = Example::text(format!("src:{i}"), bpe.encode(s), Vec::new());
            if let Some(dir) = graphs {
                attach_graphs(&mut ex, dir, i, provider)?;
            }
            Ok(ex)
        })
        .collect()
}

pub fn translate(a: TranslateArgs<'_>) -> Result<Value, CliError> {
    let loaded = load_checkpoint(a.ckpt)?;
    let mut cfg = overlay(&loaded.cfg, a.cfg)?;
    if let Some(b) = a.beam {
        cfg.beam.beam = b;
    }
    cfg.beam.validate()?;
    let model: Model = loaded.ckpt.to_model()?;
    let bpe = bpe_for(a.ckpt, a.bpe)?;
    let provider = match a.embeddings {
        Some(p) => EmbeddingProvider::read(p)?,
        None => provider_near(a.graphs, &cfg)?,
    };
    let lines = read_lines(a.src)?;
    let graphs = a.graphs.filter(|_| model.graphs_enabled());
    let examples = source_examples(&lines, &bpe, graphs, &provider)?;
    let hyps = beam_translate(&model, &examples, &cfg.beam)?;
    let mut text = Vec::with_capacity(hyps.len());
    let mut truncated = 0;
    for (i, h) in hyps.iter().enumerate() {
        if h.truncated {
            truncated += 1;
            eprintln!("{}", json!({ "warning": "hypothesis truncated at max length", "line": i }));
        }
        text.push(bpe.decode(&h.tokens)?);
    }
    write_lines(a.out, &text)?;
    echo_config(&sidecar(a.out), &cfg)?;
    Ok(json!({ "out": a.out, "sentences": text.len(), "truncated": truncated }))
}

pub fn avg_ckpt(last: usize, dir: &Path, out: &Path) -> Result<Value, CliError> {
    if last == 0 {
        return Err(CliError::Usage("--last must be at least 1".into()));
    }
    let all = list_checkpoints(dir)?;
    if all.len() < last {
        return Err(CliError::Core(Error::Checkpoint(format!(
            "{} holds {} epoch checkpoints, fewer than {last}",
            dir.display(),
            all.len()
        ))));
    }
    let inputs = &all[all.len() - last..];
    let ckpts = inputs.iter().map(|p| Checkpoint::read(p)).collect::<Result<Vec<_>, _>>()?;
    average_checkpoints(&ckpts)?.write(out)?;
    let echo = json!({ "last": last, "inputs": inputs });
    write_atomic(&sidecar(out), (serde_json::to_string_pretty(&echo)? + "\n").as_bytes())?;
    Ok(json!({ "out": out, "averaged": inputs }))
}

pub struct EvalArgs<'a> {
    pub hyp: &'a Path,
    pub reference: &'a Path,
    pub items: Option<&'a Path>,
    pub key: Option<&'a Path>,
    pub split: &'a str,
    pub ckpt: Option<&'a Path>,
    pub data: Option<&'a Path>,
    pub bpe: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub cfg: &'a ConfigArgs,
}

fn accuracy_items(
    records: &[ItemRecord],
    data: &Path,
    bpe: &BpeModel,
    provider: &EmbeddingProvider,
) -> Result<Vec<AccuracyItem>, CliError> {
    records
        .iter()
        .map(|r| {
            let mut base = Example::text(format!("{}:{}", r.split, r.example), bpe.encode(&r.source), Vec::new());
            let graph_dir = data.join("graphs").join(&r.split);
            if graph_dir.is_dir() {
                attach_graphs(&mut base, &graph_dir, r.example, provider)?;
            }
            let mut positive = base.clone();
            positive.tgt = bpe.encode(&r.positive);
            let mut negative = base;
            negative.tgt = bpe.encode(&r.negative);
            Ok(AccuracyItem { positive, negative })
        })
        .collect()
}

pub fn eval(a: EvalArgs<'_>) -> Result<Value, CliError> {
    let cfg = config::resolve(a.cfg.config.as_deref(), &a.cfg.sets, None)?;
    let hyps = read_lines(a.hyp)?;
    let refs = read_lines(a.reference)?;
    let bleu = corpus_bleu_text(&hyps, &refs, cfg.eval.brevity)?;
    let meteor = corpus_meteor(&hyps, &refs, &cfg.meteor)?;
    let accuracy = match a.items {
        None => None,
        Some(path) => {
            let (Some(ckpt), Some(data)) = (a.ckpt, a.data) else {
                return Err(CliError::Usage("--items needs --ckpt and --data".into()));
            };
            let loaded = load_checkpoint(ckpt)?;
            let model: Model = loaded.ckpt.to_model()?;
            let bpe = bpe_for(ckpt, a.bpe)?;
            let provider = provider_near(Some(data), &loaded.cfg)?;
            let records = read_lines(path)?
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    serde_json::from_str::<ItemRecord>(l)
                        .map_err(|e| CliError::Core(Error::Data(format!("{} line {}: {e}", path.display(), i + 1))))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let items = accuracy_items(&records, data, &bpe, &provider)?;
            Some(disambiguation_accuracy(&model, &items)?)
        }
    };
    let ambiguous = match a.key {
        None => None,
        Some(p) => {
            let key: AnswerKey = serde_json::from_slice(&std::fs::read(p)?)?;
            Some(ambiguous_token_accuracy(&hyps, &key, a.split)?)
        }
    };
    let report = json!({
        "bleu": bleu,
        "meteor_lite": meteor,
        "accuracy": accuracy,
        "ambiguous_token_accuracy": ambiguous,
        "comet": "n/a",
        "n_examples": hyps.len(),
        "tokenization": "detokenized text split on whitespace and punctuation, case-sensitive",
        "config": serde_json::from_str::<Value>(&cfg.to_flat_json())?,
    });
    if let Some(out) = a.out {
        write_atomic(out, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    }
    Ok(report)
}

pub fn stats(dir: &Path, threshold: f64, out: Option<&Path>) -> Result<Value, CliError> {
    let graphs = load_graph_dir(dir)?;
    let visual: Vec<_> = graphs.iter().map(|(_, g)| g).filter(|g| g.modality() == Modality::Visual).collect();
    let language: Vec<_> = graphs.iter().map(|(_, g)| g).filter(|g| g.modality() == Modality::Language).collect();
    let v = if visual.is_empty() {
        None
    } else {
        Some(entity_stats(visual.iter().copied(), threshold)?)
    };
    let l = if language.is_empty() {
        None
    } else {
        Some(language_entity_stats(language.iter().copied())?)
    };
    let report = json!({
        "graphs": graphs.len(),
        "threshold": threshold,
        "visual": v,
        "language": l,
        "multi30k_expected": MULTI30K_REFERENCE,
    });
    if let Some(out) = out {
        write_atomic(out, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    }
    Ok(report)
}

pub fn prune_analyze(
    ckpt: &Path,
    example: &str,
    out: &Path,
    data: Option<&Path>,
    bpe: Option<&Path>,
) -> Result<Value, CliError> {
    let (split, index) = example
        .rsplit_once(':')
        .and_then(|(s, i)| Some((s, i.parse::<usize>().ok()?)))
        .ok_or_else(|| CliError::Usage(format!("--example expects <split>:<index>, got {example:?}")))?;
    let loaded = load_checkpoint(ckpt)?;
    let data = data
        .map(Path::to_path_buf)
        .or(loaded.data_dir.clone())
        .ok_or_else(|| CliError::Usage("no --data given and none recorded in the checkpoint".into()))?;
    let model: Model = loaded.ckpt.to_model()?;
    if !model.graphs_enabled() {
        return Err(CliError::Usage("checkpoint was trained without scene graphs".into()));
    }
    let bpe = bpe_for(ckpt, bpe)?;
    let provider = provider_near(Some(&data), &loaded.cfg)?;
    let lines = read_lines(&data.join(format!("{split}.src")))?;
    let src = lines
        .get(index)
        .ok_or_else(|| Error::Data(format!("{split} has {} examples, no index {index}", lines.len())))?;
    let graph_dir = data.join("graphs").join(split);
    let mut ex = Example::text(example, bpe.encode(src), Vec::new());
    attach_graphs(&mut ex, &graph_dir, index, &provider)?;
    let visual = read_scene_graph(&psg_core::data::graph_file(&graph_dir, index, Modality::Visual))?;
    let language = read_scene_graph(&psg_core::data::graph_file(&graph_dir, index, Modality::Language))?;
    let decoder = model.sentence_decoder(&ex, 0)?;
    let trace = decoder
        .trace()
        .cloned()
        .ok_or_else(|| Error::Data(format!("example {example}: no visual or language entities to prune")))?;
    let vis_labels: Vec<String> = visual.entities().iter().map(|e| e.label.clone()).collect();
    let lang_labels: Vec<String> = language.entities().iter().map(|e| e.label.clone()).collect();
    std::fs::create_dir_all(out)?;
    let mut maps = Vec::new();
    for (k, step) in trace.steps.iter().enumerate() {
        let rows: Vec<String> = step.candidates.iter().map(|&i| vis_labels[i].clone()).collect();
        let svg = attention_heatmap_svg(&step.attention, &rows, &lang_labels, &format!("{example} step {}", k + 1));
        let path = out.join(format!("step{}.svg", k + 1));
        write_atomic(&path, svg.as_bytes())?;
        maps.push(path);
    }
    let report = json!({
        "example": example,
        "source": src,
        "visual_labels": vis_labels,
        "language_labels": lang_labels,
        "kept_labels": trace.final_kept.iter().map(|&i| vis_labels[i].clone()).collect::<Vec<_>>(),
        "trace": trace,
    });
    write_atomic(&out.join("trace.json"), (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    echo_config(&out.join("config.json"), &loaded.cfg)?;
    Ok(json!({ "out": out, "heatmaps": maps, "kept": report["kept_labels"] }))
}
