//! Reproducible runs: every command writes its resolved config, metrics and
//! artifacts into one output directory with atomic writes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, write_atomic};
use crate::config::RunConfig;
use crate::contrastive::{
    class_embeddings, classify_embedding, glyph_class_set, recall_csv, retrieval_recall, DualEncoder, Recall,
    PAIR_TEMPLATES,
};
use crate::datapipe::{ImageRef, SIZES};
use crate::error::{Error, Result};
use crate::fewshot::{
    decode, evaluate, glyph_task_records, load_task_file, task_from_records, trim_at_keywords, EvalSummary,
    GlyphAttribute, PromptSpec, Shot,
};
use crate::lm::{FlamingoConfig, FlamingoModel};
use crate::pipeline::{pretrain_contrastive, pretrain_lm, train_flamingo};
use crate::rng;
use crate::selftest::{self, gate_identity_check, SuiteReport};
use crate::tokenizer::Vocab;
use crate::train::{MetricLog, StepReport};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const METRICS: &str = "metrics.csv";

/// Progress callback receiving human-readable lines.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn begin(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_text(&out.join(RESOLVED_CONFIG), &(cfg.to_json()? + "\n"))
}

fn step_printer<'a>(label: &'a str, total: u64, progress: Progress<'a>) -> impl FnMut(u64, &StepReport) + 'a {
    let every = (total / 10).max(1);
    move |step, r| {
        if step % every == 0 || step == total {
            progress(&format!("{label} step {step}/{total} loss {:.4} lr {:.2e}", r.total, r.lr));
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    model: FlamingoConfig,
    vocab: String,
}

pub fn save_model(path: &Path, model: &FlamingoModel) -> Result<()> {
    let meta = serde_json::to_value(ModelMeta {
        model: model.config.clone(),
        vocab: model.vocab.to_file_string(),
    })?;
    checkpoint::save(path, &model.store, meta)
}

/// Rebuilds a model from a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<FlamingoModel> {
    let (store, manifest) = checkpoint::load(path)?;
    let meta: ModelMeta = serde_json::from_value(manifest.meta)
        .map_err(|e| Error::Checkpoint(format!("{}: missing model metadata ({e})", path.display())))?;
    FlamingoModel::from_parts(meta.model, Vocab::from_file_string(&meta.vocab)?, store)
}

/// Pretrains the text model on synthetic text; writes `lm.ckpt`.
pub fn cmd_pretrain_lm(cfg: &RunConfig, out: &Path, progress: Progress) -> Result<PathBuf> {
    begin(cfg, out)?;
    let mut model = FlamingoModel::assemble(cfg.model.clone(), Vocab::synthetic(), &mut rng::stream(cfg.seed, "init"))?;
    let steps = cfg.lm_pretrain.steps;
    let log = pretrain_lm(&mut model, &cfg.lm_pretrain, cfg.seed, step_printer("lm", steps, progress))?;
    write_text(&out.join(METRICS), &log.to_csv())?;
    let path = out.join("lm.ckpt");
    save_model(&path, &model)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContrastiveReport {
    pub strategy: String,
    pub final_loss: f64,
    pub beta: f64,
    pub recall: Vec<Recall>,
    /// Zero-shot accuracy per template set.
    pub zero_shot: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Trains the dual encoder and exports its weights (`vision.ckpt`), recall
/// and zero-shot reports on one fresh rendering of every glyph class.
pub fn cmd_pretrain_contrastive(cfg: &RunConfig, out: &Path, progress: Progress) -> Result<ContrastiveReport> {
    begin(cfg, out)?;
    let sec = &cfg.contrastive;
    let mut enc = DualEncoder::new(sec.model.clone(), Vocab::synthetic(), &mut rng::stream(cfg.seed, "init"))?;
    let steps = sec.pretrain.steps;
    let log = pretrain_contrastive(&mut enc, &sec.pretrain, cfg.seed, step_printer("contrastive", steps, progress))?;
    write_text(&out.join(METRICS), &log.to_csv())?;
    let template = sec.pretrain.templates.first().map_or(PAIR_TEMPLATES[0], String::as_str);
    let set = glyph_class_set(cfg.seed, "data.heldout", template, &enc.config.vision)?;
    let v = enc.embed_images(&set.images)?;
    let l = enc.embed_texts(&set.texts)?;
    let pairing: Vec<usize> = (0..set.len()).collect();
    let recall = sec
        .recall_k
        .iter()
        .map(|&k| retrieval_recall(&v, &l, &pairing, k))
        .collect::<Result<Vec<_>>>()?;
    write_text(&out.join("recall.csv"), &recall_csv(&recall))?;
    let classes: Vec<String> = crate::datapipe::COLORS
        .iter()
        .flat_map(|c| {
            crate::datapipe::SHAPES
                .iter()
                .flat_map(move |s| SIZES.iter().map(move |z| format!("{z} {c} {s}")))
        })
        .collect();
    let mut zero_shot = Vec::new();
    let mut zs_csv = String::from("template_set,accuracy\n");
    for (t, templates) in sec.zero_shot_templates.iter().enumerate() {
        let ce = class_embeddings(&enc, &classes, templates)?;
        let correct = (0..set.len())
            .filter(|&i| classify_embedding(v.row(i), &ce).is_ok_and(|c| c == i))
            .count();
        let acc = correct as f64 / set.len() as f64;
        zs_csv.push_str(&format!("{t},{acc:.6}\n"));
        zero_shot.push(acc);
    }
    write_text(&out.join("zero_shot.csv"), &zs_csv)?;
    let checkpoint = out.join("vision.ckpt");
    checkpoint::save(&checkpoint, &enc.store, serde_json::to_value(&enc.config)?)?;
    let report = ContrastiveReport {
        strategy: format!("{:?}", sec.pretrain.strategy).to_lowercase(),
        final_loss: last_total(&log),
        beta: enc.beta()?,
        recall,
        zero_shot,
        checkpoint,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

fn last_total(log: &MetricLog) -> f64 {
    let csv = log.to_csv();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = header.iter().position(|c| *c == "total");
    csv.lines()
        .last()
        .and_then(|l| col.and_then(|c| l.split(',').nth(c)))
        .and_then(|v| v.parse().ok())
        .unwrap_or(f64::NAN)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub gate_identity_worst: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Assembles the model, loads or pretrains the frozen LM, verifies gate
/// identity, then trains on the configured mixture. Writes `model.ckpt`
/// and `metrics.csv`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, progress: Progress) -> Result<TrainReport> {
    begin(cfg, out)?;
    let base = Path::new(".");
    let mut model = FlamingoModel::assemble(cfg.model.clone(), Vocab::synthetic(), &mut rng::stream(cfg.seed, "init"))?;
    if let Some(lm) = &cfg.checkpoints.lm {
        let n = checkpoint::load_components(lm, &mut model.store, &["lm", "eoc"])
            .map_err(|e| Error::Checkpoint(format!("checkpoints.lm {}: {e}", lm.display())))?;
        progress(&format!("loaded {n} language-model tensors from {}", lm.display()));
    } else if cfg.train.pretrain_lm {
        let steps = cfg.lm_pretrain.steps;
        let log = pretrain_lm(&mut model, &cfg.lm_pretrain, cfg.seed, step_printer("lm", steps, progress))?;
        write_text(&out.join("lm_metrics.csv"), &log.to_csv())?;
    } else {
        return Err(Error::Config(
            "missing checkpoint: set checkpoints.lm or enable train.pretrain_lm".into(),
        ));
    }
    if let Some(v) = &cfg.checkpoints.vision {
        let n = checkpoint::load_components(v, &mut model.store, &["vision"])
            .map_err(|e| Error::Checkpoint(format!("checkpoints.vision {}: {e}", v.display())))?;
        progress(&format!("loaded {n} vision tensors from {}", v.display()));
    }
    cfg.train.freeze.apply(&mut model.store);
    let mut optimizer = cfg.train.optimizer.clone();
    if !cfg.train.freeze.freeze_lm && cfg.train.freeze.lm_lr_multiplier != 1.0 {
        optimizer
            .lr_multipliers
            .insert(0, ("lm.".into(), cfg.train.freeze.lm_lr_multiplier));
    }
    let mixture = cfg.data.build(cfg.seed, &cfg.model, &model.vocab, base)?;

    let probe = crate::datapipe::next_mixture_batches(&mixture, &model.vocab, &mut rng::stream(cfg.seed, "data.identity"))?
        .concat();
    let identity = gate_identity_check(&model, &probe)?;
    if !identity.passed {
        return Err(Error::InvalidArgument(format!("gate identity violated at step 0: {identity}")));
    }
    progress(&format!("gate identity at step 0: worst {:.1e}", identity.worst));

    let steps = cfg.train.steps;
    let log = train_flamingo(
        &mut model,
        &mixture,
        steps,
        cfg.train.strategy,
        optimizer,
        cfg.train.clip.clone(),
        cfg.seed,
        step_printer("train", steps, progress),
    )?;
    let metrics = out.join(METRICS);
    write_text(&metrics, &log.to_csv())?;
    let checkpoint = out.join("model.ckpt");
    save_model(&checkpoint, &model)?;
    let csv = log.to_csv();
    let totals: Vec<f64> = {
        let header: Vec<&str> = csv.lines().next().unwrap_or("").split(',').collect();
        let col = header.iter().position(|c| *c == "total").unwrap_or(0);
        csv.lines()
            .skip(1)
            .filter_map(|l| l.split(',').nth(col).and_then(|v| v.parse().ok()))
            .collect()
    };
    let report = TrainReport {
        gate_identity_worst: identity.worst,
        initial_loss: totals.first().copied().unwrap_or(f64::NAN),
        final_loss: totals.last().copied().unwrap_or(f64::NAN),
        checkpoint,
        metrics,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Where evaluation items come from.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskSource {
    File(PathBuf),
    /// Freshly rendered glyphs: support pool size and query count.
    Synthetic { attr: GlyphAttribute, support: usize, queries: usize },
}

impl TaskSource {
    /// `synthetic:color`, `synthetic:class`, or a JSONL path.
    pub fn parse(spec: &str) -> Result<TaskSource> {
        match spec {
            "synthetic:color" => Ok(TaskSource::Synthetic {
                attr: GlyphAttribute::Color,
                support: 32,
                queries: 100,
            }),
            "synthetic:class" => Ok(TaskSource::Synthetic {
                attr: GlyphAttribute::Class,
                support: 32,
                queries: 100,
            }),
            s if s.starts_with("synthetic:") => Err(Error::Config(format!(
                "unknown synthetic task {s:?} (expected synthetic:color or synthetic:class)"
            ))),
            path => Ok(TaskSource::File(PathBuf::from(path))),
        }
    }
}

/// Evaluates a trained checkpoint; writes `predictions.jsonl` and
/// `summary.json`. Synthetic tasks use their own prompt format and are also
/// written out as `task.jsonl`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, task: &TaskSource, out: &Path) -> Result<EvalSummary> {
    begin(cfg, out)?;
    let model = load_model(checkpoint)?;
    let mut eval_cfg = cfg.eval.clone();
    let task = match task {
        TaskSource::File(p) => load_task_file(p, &model.config.vision)?,
        TaskSource::Synthetic { attr, support, queries } => {
            let records = glyph_task_records(*attr, *support, *queries, cfg.seed.wrapping_add(1_000_003));
            let mut lines = String::new();
            for r in &records {
                lines.push_str(&serde_json::to_string(r)?);
                lines.push('\n');
            }
            write_text(&out.join("task.jsonl"), &lines)?;
            eval_cfg.format = attr.format();
            task_from_records(&records, out, &model.config.vision)?
        }
    };
    let mut r = rng::stream(cfg.seed, "ensemble");
    let (summary, preds) = evaluate(&model, &model.vocab, (&model.store, &model.config.vision), &task, &eval_cfg, &mut r)?;
    let mut lines = String::new();
    for p in &preds {
        lines.push_str(&serde_json::to_string(p)?);
        lines.push('\n');
    }
    write_text(&out.join("predictions.jsonl"), &lines)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Prompt file for `generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratePrompt {
    #[serde(default)]
    pub support: Vec<GenerateShot>,
    pub query: Option<ImageRef>,
    pub prefix: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateShot {
    pub image: Option<ImageRef>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Generation {
    pub prompt: String,
    pub completion: String,
    pub log_likelihood: f64,
}

/// Decodes a completion for a prompt file with the configured decoder.
pub fn cmd_generate(cfg: &RunConfig, checkpoint: &Path, prompt_file: &Path, out: &Path) -> Result<Generation> {
    begin(cfg, out)?;
    let model = load_model(checkpoint)?;
    let text = std::fs::read_to_string(prompt_file)?;
    let prompt: GeneratePrompt = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: prompt_file.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let base = prompt_file.parent().unwrap_or(Path::new("."));
    let vision = &model.config.vision;
    let support = prompt
        .support
        .iter()
        .map(|s| {
            Ok(Shot {
                visual: s.image.as_ref().map(|i| i.load(base, vision)).transpose()?,
                text: s.text.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = PromptSpec {
        support,
        query_visual: prompt.query.as_ref().map(|i| i.load(base, vision)).transpose()?,
        query_prefix: prompt.prefix.clone(),
        image_text_sep: String::new(),
    };
    let inst = spec.render(&model.vocab)?;
    let c = decode(&model, &inst, cfg.eval.decode, cfg.eval.max_len, model.vocab.specials().eoc)?;
    let raw = model.vocab.decode(&c.tokens)?;
    let generation = Generation {
        prompt: model.vocab.decode(&inst.text)?,
        completion: trim_at_keywords(&raw, &cfg.eval.format.keywords()),
        log_likelihood: c.log_likelihood,
    };
    write_json(&out.join("generation.json"), &generation)?;
    Ok(generation)
}

/// Runs every self-check suite.
pub fn cmd_selftest(seed: u64) -> Result<Vec<SuiteReport>> {
    selftest::run_all(seed)
}
