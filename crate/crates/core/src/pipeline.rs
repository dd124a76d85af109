//! Training loops shared by the command line and the test suites.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{
    glyph_class_set, glyph_pairs, retrieval_recall, sample_pairs, DualEncoder, PairBatch, Recall, PAIR_TEMPLATES,
};
use crate::datapipe::{next_mixture_batches, synth_text, MixtureSpec, TrainingInstance};
use crate::error::{invalid, Result};
use crate::lm::{text_instance, FlamingoModel};
use crate::tokenizer::Vocab;
use crate::train::{
    gate_columns, gate_values, strategy_step, AdamWConfig, ClipMode, ClipRule, MetricLog, Objective, OptimState,
    StepReport, Strategy,
};

/// Generic step loop: draws batches, applies `strategy`, logs every step.
pub struct Trainer<'a, O: Objective> {
    pub obj: &'a mut O,
    pub opt: OptimState,
    pub strategy: Strategy,
    pub weights: Vec<f64>,
    pub clip: Vec<ClipRule>,
    pub log: MetricLog,
}

impl<'a, O: Objective> Trainer<'a, O> {
    /// Runs `steps` steps. `extra` supplies the log's extra columns after
    /// each update.
    pub fn run(
        &mut self,
        steps: u64,
        mut next_batches: impl FnMut(u64) -> Result<Vec<O::Batch>>,
        mut extra: impl FnMut(&O) -> Result<Vec<f64>>,
        mut on_step: impl FnMut(u64, &StepReport),
    ) -> Result<()> {
        for step in 0..steps {
            let batches = next_batches(step)?;
            let report = strategy_step(
                self.strategy,
                self.obj,
                &mut self.opt,
                &batches,
                &self.weights,
                &self.clip,
                step,
            )?;
            let ex = extra(self.obj)?;
            self.log.push(step + 1, &report, &ex)?;
            on_step(step + 1, &report);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmPretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub corpus_size: usize,
    pub optimizer: AdamWConfig,
    pub clip_norm: f64,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        LmPretrainConfig {
            steps: 300,
            batch_size: 16,
            seq_len: 48,
            corpus_size: 2000,
            optimizer: AdamWConfig {
                peak_lr: 3e-3,
                warmup_steps: 30,
                weight_decay: 0.0,
                no_decay_prefixes: Vec::new(),
                ..AdamWConfig::default()
            },
            clip_norm: 1.0,
        }
    }
}

/// `<BOS> text <EOS>`, truncated and padded to `seq_len`.
pub fn lm_instance(text: &str, vocab: &Vocab, seq_len: usize) -> TrainingInstance {
    let sp = vocab.specials();
    let mut toks = vec![sp.bos];
    toks.extend(vocab.encode(text));
    toks.push(sp.eos);
    toks.truncate(seq_len);
    text_instance(toks).padded(seq_len, sp.pad)
}

/// Trains the text model (and `<EOC>` row) alone on image-free synthetic
/// text. Freeze flags and the text-only switch are restored afterwards.
pub fn pretrain_lm(
    model: &mut FlamingoModel,
    cfg: &LmPretrainConfig,
    seed: u64,
    mut on_step: impl FnMut(u64, &StepReport),
) -> Result<MetricLog> {
    if cfg.batch_size == 0 || cfg.seq_len < 2 {
        return Err(invalid("lm pretraining needs batch_size ≥ 1 and seq_len ≥ 2"));
    }
    let corpus: Vec<TrainingInstance> = synth_text(cfg.corpus_size.max(1), seed)
        .iter()
        .map(|t| lm_instance(t, &model.vocab, cfg.seq_len))
        .collect();
    let frozen_before: Vec<String> = model.store.frozen_names().cloned().collect();
    let all: Vec<String> = model.store.names().cloned().collect();
    for n in &all {
        model.store.freeze(n);
    }
    model.store.unfreeze_prefix("lm.");
    model.store.unfreeze("eoc.embed");
    model.text_only = true;
    let mut rng = crate::rng::stream(seed, "shuffle");
    let mut trainer = Trainer {
        opt: OptimState::new(cfg.optimizer.clone()),
        obj: &mut *model,
        strategy: Strategy::Accumulation,
        weights: vec![1.0],
        clip: vec![ClipRule {
            prefix: String::new(),
            mode: ClipMode::GlobalNorm { max_norm: cfg.clip_norm },
        }],
        log: MetricLog::new(&["text".into()], &[]),
    };
    let result = trainer.run(
        cfg.steps,
        |_| {
            Ok(vec![(0..cfg.batch_size)
                .map(|_| corpus[rng.gen_range(0..corpus.len())].clone())
                .collect()])
        },
        |_| Ok(Vec::new()),
        &mut on_step,
    );
    let log = trainer.log;
    model.text_only = false;
    for n in &all {
        model.store.unfreeze(n);
    }
    for n in &frozen_before {
        model.store.freeze(n);
    }
    result.map(|_| log)
}

/// Trains a Flamingo model on a dataset mixture, logging per-dataset losses
/// and gate magnitudes. All randomness comes from the `shuffle` stream of
/// `seed`.
#[allow(clippy::too_many_arguments)]
pub fn train_flamingo(
    model: &mut FlamingoModel,
    mixture: &MixtureSpec,
    steps: u64,
    strategy: Strategy,
    optimizer: AdamWConfig,
    clip: Vec<ClipRule>,
    seed: u64,
    mut on_step: impl FnMut(u64, &StepReport),
) -> Result<MetricLog> {
    mixture.validate()?;
    let names: Vec<String> = mixture.datasets.iter().map(|d| d.name.clone()).collect();
    let gates = gate_columns(model);
    let vocab = model.vocab.clone();
    let mut rng = crate::rng::stream(seed, "shuffle");
    let mut trainer = Trainer {
        opt: OptimState::new(optimizer),
        obj: &mut *model,
        strategy,
        weights: mixture.weights(),
        clip,
        log: MetricLog::new(&names, &gates),
    };
    trainer.run(
        steps,
        |_| next_mixture_batches(mixture, &vocab, &mut rng),
        gate_values,
        &mut on_step,
    )?;
    Ok(trainer.log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastivePretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Items per synthetic pair dataset.
    pub pool_size: usize,
    /// One caption template per dataset.
    pub templates: Vec<String>,
    pub weights: Vec<f64>,
    /// Per-dataset probability of a mismatched caption.
    pub caption_noise: Vec<f64>,
    pub strategy: Strategy,
    pub optimizer: AdamWConfig,
    pub clip: Vec<ClipRule>,
}

impl Default for ContrastivePretrainConfig {
    fn default() -> Self {
        ContrastivePretrainConfig {
            steps: 400,
            batch_size: 32,
            pool_size: 2000,
            templates: vec![PAIR_TEMPLATES[0].into()],
            weights: vec![1.0],
            caption_noise: vec![0.0],
            strategy: Strategy::Accumulation,
            optimizer: AdamWConfig {
                peak_lr: 2e-3,
                warmup_steps: 40,
                weight_decay: 1e-4,
                no_decay_prefixes: vec!["contrastive.log_beta".into()],
                ..AdamWConfig::default()
            },
            clip: vec![
                ClipRule {
                    prefix: "vision.".into(),
                    mode: ClipMode::Agc { lambda: 0.1, eps: 1e-3 },
                },
                ClipRule {
                    prefix: "text.".into(),
                    mode: ClipMode::GlobalNorm { max_norm: 10.0 },
                },
            ],
        }
    }
}

/// Contrastive pretraining over one pair dataset per template. Dataset `m`
/// draws from its own pool under the `data` stream of `seed`.
pub fn pretrain_contrastive(
    enc: &mut DualEncoder,
    cfg: &ContrastivePretrainConfig,
    seed: u64,
    mut on_step: impl FnMut(u64, &StepReport),
) -> Result<MetricLog> {
    let m = cfg.templates.len();
    if m == 0 || cfg.weights.len() != m || cfg.caption_noise.len() != m {
        return Err(invalid("need one weight and one noise level per caption template"));
    }
    if cfg.batch_size < 2 || cfg.pool_size == 0 {
        return Err(invalid("contrastive batches need at least 2 pairs"));
    }
    let pools: Vec<PairBatch> = cfg
        .templates
        .iter()
        .enumerate()
        .map(|(m, t)| {
            let stream = format!("data.pairs{m}");
            glyph_pairs(cfg.pool_size, seed, &stream, t, cfg.caption_noise[m], &enc.config.vision)
        })
        .collect::<Result<_>>()?;
    let names: Vec<String> = (0..pools.len()).map(|m| format!("pairs{m}")).collect();
    let mut rng = crate::rng::stream(seed, "shuffle");
    let mut trainer = Trainer {
        opt: OptimState::new(cfg.optimizer.clone()),
        obj: enc,
        strategy: cfg.strategy,
        weights: cfg.weights.clone(),
        clip: cfg.clip.clone(),
        log: MetricLog::new(&names, &["beta".into()]),
    };
    trainer.run(
        cfg.steps,
        |_| Ok(pools.iter().map(|p| sample_pairs(p, cfg.batch_size, &mut rng)).collect()),
        |e| Ok(vec![e.beta()?]),
        &mut on_step,
    )?;
    Ok(trainer.log)
}

/// Recall on one fresh rendering of every glyph class.
pub fn heldout_recall(enc: &DualEncoder, seed: u64, template: &str, k: usize) -> Result<Recall> {
    let set = glyph_class_set(seed, "data.heldout", template, &enc.config.vision)?;
    let v = enc.embed_images(&set.images)?;
    let l = enc.embed_texts(&set.texts)?;
    let pairing: Vec<usize> = (0..set.len()).collect();
    retrieval_recall(&v, &l, &pairing, k)
}
