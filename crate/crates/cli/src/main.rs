mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "psg", version, about = "Scene-graph-guided multimodal translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat JSON config with dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set prune.tau=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with scene graphs.
    Synth {
        /// Config file; `synth.*` keys describe the corpus.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a BPE model from text files.
    BpeTrain {
        #[arg(long, num_args = 1.., required = true)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        merges: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a data directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate source sentences with a checkpoint.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        src: PathBuf,
        /// Directory with `<i>.visual.json` and `<i>.language.json`.
        #[arg(long)]
        graphs: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// BPE model; defaults to `bpe.model` next to the checkpoint.
        #[arg(long)]
        bpe: Option<PathBuf>,
        /// Label embeddings; defaults to the nearest `labels.emb` above the
        /// graph directory.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Average the last K per-epoch checkpoints.
    AvgCkpt {
        #[arg(long)]
        last: usize,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// BLEU, METEOR-lite and optional accuracy report.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Contrastive items (`test.items.jsonl`); needs `--ckpt` and `--data`.
        #[arg(long)]
        items: Option<PathBuf>,
        /// Answer key for ambiguous-token accuracy.
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bpe: Option<PathBuf>,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Entity-count statistics over a directory of scene graphs.
    Stats {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prune trace and attention heat maps for one example.
    PruneAnalyze {
        #[arg(long)]
        ckpt: PathBuf,
        /// `<split>:<index>`, e.g. `test:3`.
        #[arg(long)]
        example: String,
        #[arg(long)]
        out: PathBuf,
        /// Data directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bpe: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let env_seed = std::env::var(config::SEED_ENV).ok();
    let env_seed = env_seed.as_deref();
    match cli.command {
        Command::Synth { spec, sets, out } => commands::synth(&ConfigArgs { config: spec, sets }, env_seed, &out),
        Command::BpeTrain { corpus, merges, out } => commands::bpe_train(&corpus, merges, &out),
        Command::Train { cfg, data, out } => commands::train(&cfg, env_seed, &data, &out),
        Command::Translate {
            ckpt,
            src,
            graphs,
            beam,
            out,
            bpe,
            embeddings,
            cfg,
        } => commands::translate(commands::TranslateArgs {
            ckpt: &ckpt,
            src: &src,
            graphs: graphs.as_deref(),
            beam,
            out: &out,
            bpe: bpe.as_deref(),
            embeddings: embeddings.as_deref(),
            cfg: &cfg,
        }),
        Command::AvgCkpt { last, dir, out } => commands::avg_ckpt(last, &dir, &out),
        Command::Eval {
            hyp,
            reference,
            items,
            key,
            split,
            ckpt,
            data,
            bpe,
            out,
            cfg,
        } => commands::eval(commands::EvalArgs {
            hyp: &hyp,
            reference: &reference,
            items: items.as_deref(),
            key: key.as_deref(),
            split: &split,
            ckpt: ckpt.as_deref(),
            data: data.as_deref(),
            bpe: bpe.as_deref(),
            out: out.as_deref(),
            cfg: &cfg,
        }),
        Command::Stats { graphs, threshold, out } => commands::stats(&graphs, threshold, out.as_deref()),
        Command::PruneAnalyze {
            ckpt,
            example,
            out,
            data,
            bpe,
        } => commands::prune_analyze(&ckpt, &example, &out, data.as_deref(), bpe.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).to_json_line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
