use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use flamingo::commands::{self, TaskSource};
use flamingo::config::{parse_override, preset, RunConfig};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "flamingo", version, about = "Train and evaluate a desk-scale visual language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; unspecified fields take defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Model preset applied before the config file.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "FLAMINGO_OUT", default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pretraining of the vision encoder.
    PretrainContrastive {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Pretrain the text model on synthetic text.
    PretrainLm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train the visual language model on the configured mixture.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
        /// Language-model checkpoint from `pretrain-lm`.
        #[arg(long)]
        lm_checkpoint: Option<PathBuf>,
        /// Vision checkpoint from `pretrain-contrastive`.
        #[arg(long)]
        vision_checkpoint: Option<PathBuf>,
    },
    /// Few-shot evaluation of a trained checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL task file, `synthetic:color` or `synthetic:class`.
        #[arg(long)]
        task: String,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Decode a completion for a prompt file.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON file with `support`, `query` and `prefix`.
        #[arg(long)]
        prompt: PathBuf,
    },
    /// Run the built-in correctness checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Errors that should exit with the usage code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn resolve(common: &Common, extra: Vec<(String, Value)>) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(p) = &common.preset {
        let model = preset(p).map_err(|e| Usage(e.to_string()))?;
        overrides.push(("model".to_string(), serde_json::to_value(model)?));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), Value::from(seed)));
    }
    for s in &common.set {
        overrides.push(parse_override(s).map_err(|e| Usage(e.to_string()))?);
    }
    overrides.extend(extra);
    RunConfig::resolve(common.config.as_deref(), &overrides).map_err(|e| Usage(e.to_string()).into())
}

fn opt<T: Into<Value>>(key: &str, v: Option<T>) -> Vec<(String, Value)> {
    v.map(|v| vec![(key.to_string(), v.into())]).unwrap_or_default()
}

fn path_opt(key: &str, v: &Option<PathBuf>) -> Vec<(String, Value)> {
    opt(key, v.as_ref().map(|p| p.display().to_string()))
}

fn print_line(line: &str) {
    eprintln!("{line}");
}

fn finish(out: &Path, report: Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&report)?);
    eprintln!("outputs in {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let mut progress = print_line;
    match cli.command {
        Command::PretrainContrastive { common, steps } => {
            let cfg = resolve(&common, opt("contrastive.pretrain.steps", steps))?;
            let r = commands::cmd_pretrain_contrastive(&cfg, &common.out, &mut progress)?;
            finish(&common.out, serde_json::to_value(&r)?)?;
        }
        Command::PretrainLm { common, steps } => {
            let cfg = resolve(&common, opt("lm_pretrain.steps", steps))?;
            let p = commands::cmd_pretrain_lm(&cfg, &common.out, &mut progress)?;
            finish(&common.out, serde_json::json!({ "checkpoint": p }))?;
        }
        Command::Train {
            common,
            steps,
            lm_checkpoint,
            vision_checkpoint,
        } => {
            let mut extra = opt("train.steps", steps);
            extra.extend(path_opt("checkpoints.lm", &lm_checkpoint));
            extra.extend(path_opt("checkpoints.vision", &vision_checkpoint));
            let cfg = resolve(&common, extra)?;
            let r = commands::cmd_train(&cfg, &common.out, &mut progress)?;
            finish(&common.out, serde_json::to_value(&r)?)?;
        }
        Command::Eval {
            common,
            checkpoint,
            task,
            shots,
        } => {
            let cfg = resolve(&common, opt("eval.shots", shots.map(|s| s as u64)))?;
            let source = TaskSource::parse(&task).map_err(|e| Usage(e.to_string()))?;
            let s = commands::cmd_eval(&cfg, &checkpoint, &source, &common.out)?;
            finish(&common.out, serde_json::to_value(&s)?)?;
        }
        Command::Generate {
            common,
            checkpoint,
            prompt,
        } => {
            let cfg = resolve(&common, Vec::new())?;
            let g = commands::cmd_generate(&cfg, &checkpoint, &prompt, &common.out)?;
            finish(&common.out, serde_json::to_value(&g)?)?;
        }
        Command::Selftest { seed } => {
            let reports = commands::cmd_selftest(seed).context("self-test aborted")?;
            for r in &reports {
                println!("{r}");
            }
            return Ok(reports.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
