//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! with its measurement and wall time; the test fails if any criterion does.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use flamingo::commands::{cmd_train, load_model};
use flamingo::config::RunConfig;
use flamingo::contrastive::{contrastive_loss, ContrastiveConfig, DualEncoder, PAIR_TEMPLATES};
use flamingo::datapipe::TrainingInstance;
use flamingo::fewshot::{
    build_fewshot_prompt, decode, ensemble_scores, evaluate, glyph_task_records, rices_select, score_candidates,
    task_from_records, DecodeMode, EvalConfig, EvalMode, EvalTask, GlyphAttribute, Shot,
};
use flamingo::lm::{sequence_log_likelihood, text_instance, FlamingoConfig, FlamingoModel, SequenceModel};
use flamingo::pipeline::{heldout_recall, pretrain_contrastive, pretrain_lm, train_flamingo, ContrastivePretrainConfig, LmPretrainConfig};
use flamingo::resampler::{init_resampler, resample, ResamplerConfig};
use flamingo::selftest::{accumulation_suite, gate_identity_suite, gradcheck_suite, mask_invariance_suite};
use flamingo::tokenizer::Vocab;
use flamingo::train::{FreezePolicy, Strategy};
use flamingo::vision::{temporal_embed, temporal_weights, VisualFeatureGrid};
use flamingo::{rng, Result, Tensor};
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { passed, detail: detail.into() })
}

/// Logits are a fixed pseudo-random function of the whole prefix.
struct ToyModel {
    vocab: usize,
    seed: u64,
}

impl SequenceModel for ToyModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn logits(&self, inst: &TrainingInstance) -> Result<Tensor> {
        let mut data = Vec::with_capacity(inst.len() * self.vocab);
        for l in 0..inst.len() {
            let mut h = std::collections::hash_map::DefaultHasher::new();
            (self.seed, &inst.text[..=l]).hash(&mut h);
            let mut r = rng::item(h.finish(), "logits", 0);
            data.extend((0..self.vocab).map(|_| r.gen_range(-4.0..4.0)));
        }
        Tensor::new(vec![inst.len(), self.vocab], data)
    }
}

/// Next-token probabilities after `prefix`, from an unpadded forward pass.
fn next_probs(model: &ToyModel, prefix: &[usize]) -> Vec<f64> {
    let logits = model.logits(&text_instance(prefix.to_vec())).unwrap();
    let row = logits.row(prefix.len() - 1);
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    row.iter().map(|x| x.exp() / z).collect()
}

/// Every token sequence of length `n` over `v` symbols.
fn all_sequences(v: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..v).map(move |t| {
                    let mut s = s.clone();
                    s.push(t);
                    s
                })
            })
            .collect();
    }
    out
}

/// Chain-rule probability of `cont` after `prompt`, one factor at a time.
fn chain_log_prob(model: &ToyModel, prompt: &[usize], cont: &[usize]) -> f64 {
    let mut prefix = prompt.to_vec();
    let mut p = 1.0;
    for &t in cont {
        p *= next_probs(model, &prefix)[t];
        prefix.push(t);
    }
    p.ln()
}

fn with_continuation(prompt: &[usize], cont: &[usize]) -> TrainingInstance {
    text_instance(prompt.iter().chain(cont).copied().collect())
}

fn fresh_model(seed: u64) -> Result<FlamingoModel> {
    FlamingoModel::assemble(FlamingoConfig::default(), Vocab::synthetic(), &mut rng::stream(seed, "init"))
}

fn c1_gate_identity() -> Result<Outcome> {
    let r = gate_identity_suite(100, 1)?;
    outcome(r.passed && r.checks == 100, r.to_string())
}

fn c2_future_images() -> Result<Outcome> {
    let r = mask_invariance_suite(50, 2, None)?;
    outcome(r.passed && r.checks >= 45, r.to_string())
}

fn c3_frozen_parameters() -> Result<Outcome> {
    let cfg = RunConfig::default();
    let mut model = fresh_model(3)?;
    pretrain_lm(&mut model, &LmPretrainConfig { steps: 20, ..LmPretrainConfig::default() }, 3, |_, _| {})?;
    FreezePolicy::default().apply(&mut model.store);
    let frozen: BTreeMap<String, Vec<u64>> = model
        .store
        .frozen_names()
        .map(|n| (n.clone(), model.store.get(n).unwrap().data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    let eoc_before = model.store.get("eoc.embed")?.clone();
    let mixture = cfg.data.build(3, &cfg.model, &model.vocab, Path::new("."))?;
    train_flamingo(
        &mut model,
        &mixture,
        200,
        Strategy::Accumulation,
        cfg.train.optimizer.clone(),
        cfg.train.clip.clone(),
        3,
        |_, _| {},
    )?;
    let moved = frozen
        .iter()
        .filter(|(n, bits)| {
            let now: Vec<u64> = model.store.get(n).unwrap().data().iter().map(|v| v.to_bits()).collect();
            &now != *bits
        })
        .count();
    let eoc_change = model.store.get("eoc.embed")?.max_abs_diff(&eoc_before);
    outcome(
        !frozen.is_empty() && moved == 0 && eoc_change > 0.0,
        format!("{} frozen tensors, {moved} changed; <EOC> row moved by {eoc_change:.3e}", frozen.len()),
    )
}

fn c4_gradcheck() -> Result<Outcome> {
    let r = gradcheck_suite(200, 4)?;
    outcome(r.passed && r.checks == 200, r.to_string())
}

fn c5_accumulation() -> Result<Outcome> {
    let r = accumulation_suite(5)?;
    outcome(r.passed && r.checks == 3, r.to_string())
}

fn c6_enumeration() -> Result<Outcome> {
    let vocab = Vocab::new("a", &[]);
    assert_eq!(vocab.len(), 8);
    let v = vocab.len();
    let mut worst: f64 = 0.0;
    let mut mass_err: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..3 {
        let model = ToyModel { vocab: v, seed };
        let prompt = vec![vocab.specials().bos, 7];
        for n in 1..=4 {
            let mut mass = 0.0;
            for cont in all_sequences(v, n) {
                let brute = chain_log_prob(&model, &prompt, &cont);
                mass += brute.exp();
                let got = sequence_log_likelihood(
                    &model,
                    &with_continuation(&prompt, &cont),
                    prompt.len()..prompt.len() + n,
                )?;
                worst = worst.max((got - brute).abs());
                checks += 1;
            }
            mass_err = mass_err.max((mass - 1.0).abs());
        }
        let candidates: Vec<String> = ["a", "aa", "aaa", "a a"].iter().map(|s| s.to_string()).collect();
        let ranked = score_candidates(&model, &vocab, &text_instance(prompt.clone()), &candidates)?;
        for c in &ranked {
            let toks = vocab.encode(&format!(" {}", c.text));
            assert!(toks.len() <= 4);
            worst = worst.max((c.score - chain_log_prob(&model, &prompt, &toks)).abs());
            checks += 1;
        }
        if ranked.windows(2).any(|w| w[0].score < w[1].score) {
            worst = f64::INFINITY;
        }
    }
    outcome(
        worst <= 1e-12 && mass_err <= 1e-12,
        format!("{checks} sequences, worst |Δ log p| {worst:.3e}, probability mass error {mass_err:.3e}"),
    )
}

/// Best completion under the decoding rules by exhaustive search: any
/// non-`<EOC>` run shorter than `max_len` closed by `<EOC>`, or any
/// `<EOC>`-free run of exactly `max_len` tokens.
fn exhaustive_best(model: &ToyModel, prompt: &[usize], max_len: usize, eoc: usize) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for n in 0..=max_len {
        for body in all_sequences(model.vocab, n) {
            if body.contains(&eoc) {
                continue;
            }
            let full: Vec<usize> = if n < max_len { body.iter().copied().chain([eoc]).collect() } else { body.clone() };
            let lp = chain_log_prob(model, prompt, &full);
            if lp > best.1 {
                best = (body, lp);
            }
        }
    }
    best
}

fn c7_beam_search() -> Result<Outcome> {
    let v = 8;
    let max_len = 3;
    let eoc = 3;
    let mut beam_mismatch = 0;
    let mut greedy_mismatch = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let model = ToyModel { vocab: v, seed: 100 + seed };
        let prompt = vec![1, 6, 7];
        let inst = text_instance(prompt.clone());
        let (best, best_lp) = exhaustive_best(&model, &prompt, max_len, eoc);
        let wide = decode(&model, &inst, DecodeMode::Beam(v.pow(max_len as u32)), max_len, eoc)?;
        worst = worst.max((wide.log_likelihood - best_lp).abs());
        if wide.tokens != best || (wide.log_likelihood - best_lp).abs() > 1e-12 {
            beam_mismatch += 1;
        }
        let greedy = decode(&model, &inst, DecodeMode::Greedy, max_len, eoc)?;
        let beam1 = decode(&model, &inst, DecodeMode::Beam(1), max_len, eoc)?;
        if greedy != beam1 {
            greedy_mismatch += 1;
        }
    }
    outcome(
        beam_mismatch == 0 && greedy_mismatch == 0,
        format!(
            "20 models: wide beam misses {beam_mismatch} (worst {worst:.1e}), beam(1)≠greedy {greedy_mismatch}"
        ),
    )
}

fn c8_resampler() -> Result<Outcome> {
    let cfg = ResamplerConfig::default();
    let mut store = flamingo::ParamStore::new();
    init_resampler(&mut store, &cfg, 12, 16, &mut rng::stream(8, "init"));
    let mut r = rng::stream(8, "grid");
    let mut shapes_ok = true;
    for t in [1usize, 2, 3, 5, 8] {
        for s in [1usize, 4, 16] {
            let data = (0..t * s * 12).map(|_| r.gen_range(-1.0..1.0)).collect();
            let grid = VisualFeatureGrid { features: Tensor::new(vec![t * s, 12], data)?, frames: t, spatial: s };
            let out = resample(&store, &cfg, &grid)?;
            shapes_ok &= out.tokens.shape() == [cfg.latents, 16] && out.tokens.is_finite();
        }
    }
    let mut exact = true;
    for t in 1..=cfg.max_frames {
        let w = temporal_weights(cfg.max_frames, t)?;
        if t == cfg.max_frames {
            for i in 0..t {
                for j in 0..t {
                    exact &= w.row(i)[j] == if i == j { 1.0 } else { 0.0 };
                }
            }
        }
        let table = Tensor::new(vec![t, 5], (0..t * 5).map(|_| r.gen_range(-1.0..1.0)).collect())?;
        let grid = VisualFeatureGrid { features: Tensor::zeros(vec![t * 3, 5]), frames: t, spatial: 3 };
        let out = temporal_embed(&grid, &table, t)?;
        for row in 0..t * 3 {
            exact &= out.features.row(row) == table.row(row / 3);
        }
    }
    outcome(
        shapes_ok && exact,
        format!("R = {} over T∈{{1,2,3,5,8}}, S∈{{1,4,16}}: {shapes_ok}; exact temporal embedding at T_eval = T_train: {exact}", cfg.latents),
    )
}

/// Model trained with the default recipe: text pretraining, then the
/// default mixture.
fn train_default_model(dir: &Path) -> Result<FlamingoModel> {
    let cfg = RunConfig::default();
    let report = cmd_train(&cfg, dir, &mut |_| {})?;
    load_model(&report.checkpoint)
}

fn glyph_task(model: &FlamingoModel, attr: GlyphAttribute, queries: usize, seed: u64) -> Result<EvalTask> {
    let n_support = attr.candidates().len().max(32);
    task_from_records(&glyph_task_records(attr, n_support, queries, seed), Path::new("."), &model.config.vision)
}

fn accuracy(model: &FlamingoModel, task: &EvalTask, cfg: &EvalConfig, seed: u64) -> Result<f64> {
    let (summary, _) = evaluate(
        model,
        &model.vocab,
        (&model.store, &model.config.vision),
        task,
        cfg,
        &mut rng::stream(seed, "eval"),
    )?;
    Ok(summary.accuracy)
}

fn c9_fewshot(model: &FlamingoModel) -> Result<Outcome> {
    let attr = GlyphAttribute::Color;
    let task = glyph_task(model, attr, 200, 9_000_009)?;
    let base = EvalConfig { mode: EvalMode::Closed, format: attr.format(), ..EvalConfig::default() };
    let four = accuracy(model, &task, &EvalConfig { shots: 4, ..base.clone() }, 9)?;
    let zero = accuracy(model, &task, &EvalConfig { shots: 0, ..base }, 9)?;
    outcome(
        four >= 0.9 && four >= zero,
        format!("colour question on 200 fresh glyphs: 4-shot {four:.3}, 0-shot {zero:.3}"),
    )
}

/// Top-k by repeated arg-max over explicitly computed cosines, returned
/// most similar last.
fn brute_top_k(query: &[f64], pool: &[Vec<f64>], k: usize) -> Vec<usize> {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sims: Vec<f64> = pool
        .iter()
        .map(|p| query.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / (norm(query) * norm(p)))
        .collect();
    let mut taken = vec![false; pool.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..pool.len() {
            if !taken[i] && best.map_or(true, |b| sims[i] > sims[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out.reverse();
    out
}

fn c10_retrieval_and_ensembling(model: &FlamingoModel) -> Result<Outcome> {
    let mut r = rng::stream(10, "pools");
    let mut rices_mismatch = 0;
    for _ in 0..100 {
        let n = r.gen_range(4..40);
        let d = r.gen_range(2..12);
        let k = r.gen_range(1..=n);
        let vec = |r: &mut rng::Rng| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let pool: Vec<Vec<f64>> = (0..n).map(|_| vec(&mut r)).collect();
        let q = vec(&mut r);
        if rices_select(&q, &pool, k)? != brute_top_k(&q, &pool, k) {
            rices_mismatch += 1;
        }
    }

    let attr = GlyphAttribute::Class;
    let task = glyph_task(model, attr, 100, 10_000_010)?;
    let shot = Shot { visual: Some(task.support[0].visual.clone()), text: attr.format().render(&task.support[0].answer) };
    let shots = vec![shot; 4];
    let prefix = attr.format().prefix();
    let query = &task.queries[0];
    let single = build_fewshot_prompt(&shots, Some(query.visual.clone()), &prefix, &mut rng::stream(0, "p"), false)
        .render(&model.vocab)?;
    let variants: Vec<TrainingInstance> = (0..6)
        .map(|i| {
            build_fewshot_prompt(&shots, Some(query.visual.clone()), &prefix, &mut rng::stream(i, "p"), true)
                .render(&model.vocab)
        })
        .collect::<Result<_>>()?;
    let ens = ensemble_scores(model, &model.vocab, &variants, &query.candidates)?;
    let one = score_candidates(model, &model.vocab, &single, &query.candidates)?;
    let same_order = ens.iter().map(|c| c.index).eq(one.iter().map(|c| c.index));
    let score_gap = ens.iter().zip(&one).map(|(a, b)| (a.score - b.score).abs()).fold(0.0, f64::max);

    let base = EvalConfig { shots: 4, mode: EvalMode::Closed, format: attr.format(), ..EvalConfig::default() };
    let rices = accuracy(model, &task, &EvalConfig { rices: true, ..base.clone() }, 10)?;
    let random: f64 = (0..5).map(|s| accuracy(model, &task, &base, 100 + s)).sum::<Result<f64>>()? / 5.0;
    outcome(
        rices_mismatch == 0 && same_order && score_gap <= 1e-12 && rices >= random,
        format!(
            "RICES mismatches {rices_mismatch}/100; 6 identical variants same ranking {same_order} (gap {score_gap:.1e}); 32-class 4-shot RICES {rices:.3} vs random {random:.3}"
        ),
    )
}

fn c11_contrastive() -> Result<Outcome> {
    let mut r = rng::stream(11, "embed");
    let mut worst: f64 = 0.0;
    for n in [2usize, 5, 16, 64] {
        let d = 8;
        let mut row: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
        let t = Tensor::from_rows(&vec![row; n])?;
        for beta in [0.5, 1.0, 14.0] {
            let loss = contrastive_loss(&t, &t, beta, 0.0)?;
            worst = worst.max((loss - 2.0 * (n as f64).ln()).abs());
        }
    }

    let mut enc = DualEncoder::new(ContrastiveConfig::default(), Vocab::synthetic(), &mut rng::stream(11, "init"))?;
    let cfg = ContrastivePretrainConfig { steps: 3000, ..ContrastivePretrainConfig::default() };
    pretrain_contrastive(&mut enc, &cfg, 11, |_, _| {})?;
    let recall = heldout_recall(&enc, 11, PAIR_TEMPLATES[0], 1)?;

    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let run = |strategy| -> Result<f64> {
            let mut enc =
                DualEncoder::new(ContrastiveConfig::default(), Vocab::synthetic(), &mut rng::stream(seed, "init"))?;
            let cfg = ContrastivePretrainConfig {
                steps: 800,
                batch_size: 16,
                pool_size: 1000,
                templates: vec![PAIR_TEMPLATES[0].into(), PAIR_TEMPLATES[1].into()],
                weights: vec![1.0, 0.25],
                caption_noise: vec![0.0, 0.5],
                strategy,
                ..ContrastivePretrainConfig::default()
            };
            pretrain_contrastive(&mut enc, &cfg, seed, |_, _| {})?;
            let rc = heldout_recall(&enc, seed, PAIR_TEMPLATES[0], 1)?;
            Ok((rc.image_to_text + rc.text_to_image) / 2.0)
        };
        let acc = run(Strategy::Accumulation)?;
        let merged = run(Strategy::Merged)?;
        if acc >= merged {
            wins += 1;
        }
        pairs.push(format!("{acc:.2}/{merged:.2}"));
    }
    let r1 = recall.image_to_text.min(recall.text_to_image);
    outcome(
        worst <= 1e-9 && r1 >= 0.9 && wins >= 3,
        format!(
            "identical batch |L − 2 log N| {worst:.1e}; held-out R@1 i→t {:.3} t→i {:.3}; accumulation ≥ merged in {wins}/5 seeds [{}]",
            recall.image_to_text,
            recall.text_to_image,
            pairs.join(" ")
        ),
    )
}

fn c12_reproducible_runs() -> Result<Outcome> {
    let overrides: Vec<(String, serde_json::Value)> = vec![
        ("train.steps".into(), 40.into()),
        ("lm_pretrain.steps".into(), 20.into()),
        ("seed".into(), 12.into()),
    ];
    let cfg = RunConfig::resolve(None, &overrides)?;
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    cmd_train(&cfg, a.path(), &mut |_| {})?;
    cmd_train(&cfg, b.path(), &mut |_| {})?;
    let mut identical = true;
    for f in ["metrics.csv", "lm_metrics.csv", "model.ckpt", "config.resolved.json"] {
        identical &= std::fs::read(a.path().join(f))? == std::fs::read(b.path().join(f))?;
    }
    outcome(identical, format!("two seeded runs byte-identical (metrics, text metrics, checkpoint, config): {identical}"))
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let trained: std::cell::RefCell<Option<FlamingoModel>> = Default::default();
    let with_model = |f: fn(&FlamingoModel) -> Result<Outcome>| -> Result<Outcome> {
        if trained.borrow().is_none() {
            *trained.borrow_mut() = Some(train_default_model(dir.path())?);
        }
        f(trained.borrow().as_ref().unwrap())
    };

    type Check<'a> = (&'static str, u64, Box<dyn FnMut() -> Result<Outcome> + 'a>);
    let criteria: Vec<Check> = vec![
        ("gate identity at initialisation", 10, Box::new(c1_gate_identity)),
        ("future images cannot influence text", 30, Box::new(c2_future_images)),
        ("frozen parameters stay fixed", 120, Box::new(c3_frozen_parameters)),
        ("gradient check over every op kind", 60, Box::new(c4_gradcheck)),
        ("gradient accumulation equals weighted sum", 30, Box::new(c5_accumulation)),
        ("candidate scoring matches enumeration", 10, Box::new(c6_enumeration)),
        ("beam search and greedy decoding", 30, Box::new(c7_beam_search)),
        ("resampler output size and temporal embedding", 10, Box::new(c8_resampler)),
        ("few-shot glyph classification", 900, Box::new(|| with_model(c9_fewshot))),
        ("retrieval-based shot selection and ensembling", 300, Box::new(|| with_model(c10_retrieval_and_ensembling))),
        ("contrastive pretraining", 600, Box::new(c11_contrastive)),
        ("reproducible training runs", 300, Box::new(c12_reproducible_runs)),
    ];

    let mut failures = Vec::new();
    for (i, (name, budget, mut check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        let (passed, detail) = match result {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = secs <= budget as f64;
        let ok = passed && in_time;
        // Written past the harness capture so the lines show without --nocapture.
        let _ = writeln!(
            std::io::stdout(),
            "{} criterion {:>2} {name}: {detail} [{secs:.1}s of {budget}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1
        );
        if !ok {
            failures.push(i + 1);
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
