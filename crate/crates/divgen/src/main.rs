use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use divgen::config::PipelineConfig;
use divgen::core::dataset::DEFAULT_HEAD_COUNT;
use divgen::core::metrics::DEFAULT_IS_SPLITS;
use divgen::core::{inception_score, subsample_long_tail, subsample_low_data, BnMode};
use divgen::{files, pipeline};
use serde_json::{json, Value};

/// Synthetic training data pipeline: disambiguate class names, diversify
/// prompts, generate images, subsample, train and evaluate.
#[derive(Parser)]
#[command(name = "divgen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Restrict to one class id.
    #[arg(long = "class")]
    class: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pick each class's meaning by image-text similarity.
    Resolve(Common),
    /// Collect contextual prompts from the LLM into {out}/{class}.prompts.jsonl.
    Prompts(Common),
    /// Plan and run generation jobs; appends to {out}/manifest.jsonl.
    Generate(Common),
    /// Low-data or long-tailed subsample of a manifest's real entries.
    Subsample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep at most this many real entries per class.
        #[arg(long, conflicts_with = "long_tail", required_unless_present = "long_tail")]
        per_class: Option<usize>,
        /// Exponential long-tail subsample instead.
        #[arg(long)]
        long_tail: bool,
        #[arg(long, default_value_t = 100.0)]
        gamma: f64,
        #[arg(long, default_value_t = DEFAULT_HEAD_COUNT)]
        n1: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the dual-BN classifier on two-domain toy features.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_parser = parse_bn_mode)]
        bn_mode: Option<BnMode>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint: top-1, shot-bucket accuracy and Inception Score.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inception Score of a probability matrix (CSV, one row per sample).
    IsScore {
        #[arg(long)]
        probs: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IS_SPLITS)]
        splits: usize,
    },
    /// Every stage in order, offline when providers are mock/stub.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_bn_mode(s: &str) -> Result<BnMode, String> {
    match s {
        "dual" => Ok(BnMode::Dual),
        "vanilla" => Ok(BnMode::Vanilla),
        _ => Err(format!("expected dual or vanilla, got {s:?}")),
    }
}

fn to_value<T: serde::Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("summary serializes")
}

fn load(config: &Path) -> divgen::Result<PipelineConfig> {
    PipelineConfig::load(config)
}

fn run(cmd: Command) -> divgen::Result<Value> {
    match cmd {
        Command::Resolve(c) => {
            let cfg = load(&c.config)?;
            let s = pipeline::run_resolve(&cfg, c.class.as_deref(), &c.out)?;
            let choices: serde_json::Map<String, Value> = s
                .resolved
                .iter()
                .map(|m| (m.class_id.clone(), json!(m.chosen.text)))
                .collect();
            Ok(json!({"command": "resolve", "classes": s.classes, "resolved": s.resolved.len(), "choices": choices}))
        }
        Command::Prompts(c) => {
            let cfg = load(&c.config)?;
            let mut client = pipeline::llm_client(&cfg)?;
            let s = pipeline::run_prompts(&cfg, c.class.as_deref(), &c.out, client.as_mut())?;
            Ok(json!({"command": "prompts", "classes": to_value(s)}))
        }
        Command::Generate(c) => {
            let cfg = load(&c.config)?;
            let mut client = pipeline::llm_client(&cfg)?;
            let backend = pipeline::image_backend(&cfg)?;
            let s = pipeline::run_generate(&cfg, c.class.as_deref(), &c.out, client.as_mut(), backend.as_ref())?;
            Ok(json!({"command": "generate", "summary": to_value(s)}))
        }
        Command::Subsample {
            manifest,
            out,
            per_class,
            long_tail,
            gamma,
            n1,
            seed,
        } => {
            let m = files::load_manifest(&manifest)?;
            let sub = match per_class {
                Some(n) if !long_tail => subsample_low_data(&m, n, seed)?,
                _ => subsample_long_tail(&m, gamma, n1, seed)?,
            };
            files::save_manifest(&out, &sub)?;
            let counts = sub.class_counts(divgen::core::Domain::Real);
            Ok(json!({"command": "subsample", "input": m.len(), "output": sub.len(), "real_per_class": counts}))
        }
        Command::Train {
            config,
            out,
            lambda,
            bn_mode,
            epochs,
        } => {
            let mut cfg = load(&config)?;
            if let Some(l) = lambda {
                cfg.trainer.lambda = l;
            }
            if let Some(m) = bn_mode {
                cfg.trainer.bn_mode = m;
            }
            if let Some(e) = epochs {
                cfg.trainer.epochs = e;
            }
            cfg.validate()?;
            let (ck, history) = pipeline::train_toy(&cfg)?;
            let ck_path = out.join("checkpoint.json");
            files::save_checkpoint(&ck_path, &ck)?;
            files::write_file(&out.join("history.csv"), files::history_csv(&history).as_bytes())?;
            let last = history.last();
            Ok(json!({
                "command": "train",
                "epochs": history.len(),
                "final_loss": last.map(|h| h.loss),
                "final_eval_acc": last.map(|h| h.eval_acc),
                "checkpoint": ck_path,
            }))
        }
        Command::Evaluate {
            config,
            checkpoint,
            out,
        } => {
            let cfg = load(&config)?;
            let ck = files::load_checkpoint(&checkpoint)?;
            let (report, probs) = pipeline::evaluate_toy(&cfg, &ck)?;
            files::save_report(&out.join("metrics.json"), &report)?;
            files::write_file(&out.join("synthetic_probs.csv"), probs.to_csv().as_bytes())?;
            Ok(json!({"command": "evaluate", "report": to_value(report)}))
        }
        Command::IsScore { probs, splits } => {
            let p = files::load_probs(&probs)?;
            let (mean, std) = inception_score(&p, splits)?;
            Ok(json!({"command": "is-score", "is_mean": mean, "is_std": std, "rows": p.rows(), "splits": splits}))
        }
        Command::Run { config, out } => {
            let cfg = load(&config)?;
            let backend = pipeline::image_backend(&cfg)?;
            let s = pipeline::run_all(&cfg, &out, backend.as_ref())?;
            Ok(json!({"command": "run", "summary": to_value(s)}))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // clap exits 2 on usage errors and 0 for --help / --version.
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.name());
            println!("{}", json!({"error": e.name(), "message": e.to_string()}));
            ExitCode::from(1)
        }
    }
}
