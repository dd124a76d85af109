//! In-context evaluation: prompt rendering, open-ended decoding, close-ended
//! candidate scoring, retrieval-based shot selection and prompt ensembling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{
    compute_phi, image_positions, Direction, Glyph, GlyphRef, ImageRef, TrainingInstance, COLORS, SHAPES,
};
use crate::error::{invalid, Error, Result};
use crate::lm::{log_likelihood_from_logits, SequenceModel};
use crate::params::ParamStore;
use crate::tensor::log_softmax_row;
use crate::tokenizer::Vocab;
use crate::vision::{encode_frames, VisionConfig, VisualInput};

/// Task formatting of shot and query text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFormat {
    /// `Output: {answer}`
    Caption,
    /// `Question: {question} Answer: {answer}`
    Qa { question: String },
    /// Arbitrary prefix followed by the answer.
    Template { prefix: String },
}

impl TaskFormat {
    pub fn prefix(&self) -> String {
        match self {
            TaskFormat::Caption => "Output:".into(),
            TaskFormat::Qa { question } => format!("Question: {question} Answer:"),
            TaskFormat::Template { prefix } => prefix.clone(),
        }
    }

    pub fn render(&self, answer: &str) -> String {
        format!("{} {answer}", self.prefix())
    }

    /// Words that mark the start of a new prompt chunk in generated text.
    pub fn keywords(&self) -> Vec<String> {
        match self {
            TaskFormat::Caption => vec!["Output:".into()],
            TaskFormat::Qa { .. } => vec!["Question:".into(), "Answer:".into()],
            TaskFormat::Template { prefix } => vec![prefix.clone()],
        }
    }
}

/// One support example: optional visual and its full text.
#[derive(Clone, Debug, PartialEq)]
pub struct Shot {
    pub visual: Option<VisualInput>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSpec {
    pub support: Vec<Shot>,
    pub query_visual: Option<VisualInput>,
    pub query_prefix: String,
    /// Text inserted between each `<image>` tag and the text that follows.
    pub image_text_sep: String,
}

impl PromptSpec {
    /// `<BOS>`, then per shot `[<image>] text <EOC>`, then `[<image>] prefix`.
    pub fn render(&self, vocab: &Vocab) -> Result<TrainingInstance> {
        let sp = vocab.specials();
        let mut text = vec![sp.bos];
        let mut images = Vec::new();
        for shot in &self.support {
            let mut body = shot.text.clone();
            if let Some(v) = &shot.visual {
                text.push(sp.image);
                images.push(v.clone());
                body = format!("{}{body}", self.image_text_sep);
            }
            text.extend(vocab.encode(&body));
            text.push(sp.eoc);
        }
        let mut prefix = self.query_prefix.clone();
        if let Some(v) = &self.query_visual {
            text.push(sp.image);
            images.push(v.clone());
            prefix = format!("{}{prefix}", self.image_text_sep);
        }
        text.extend(vocab.encode(&prefix));
        let positions = image_positions(&text, sp.image);
        let indices = compute_phi(text.len(), &positions, Direction::Previous);
        Ok(TrainingInstance {
            max_images: images.len(),
            images,
            text,
            indices,
        })
    }
}

/// Support shots (optionally shuffled) followed by the query.
pub fn build_fewshot_prompt(
    shots: &[Shot],
    query_visual: Option<VisualInput>,
    query_prefix: &str,
    rng: &mut impl Rng,
    shuffle: bool,
) -> PromptSpec {
    let mut support = shots.to_vec();
    if shuffle {
        support.shuffle(rng);
    }
    PromptSpec {
        support,
        query_visual,
        query_prefix: query_prefix.to_string(),
        image_text_sep: String::new(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Open,
    Closed,
}

/// Image-free text examples followed by the query image and prefix
/// (`<image> prefix`). Open-ended mode needs exactly two examples.
pub fn build_zeroshot_prompt(
    examples: &[String],
    query_visual: VisualInput,
    query_prefix: &str,
    mode: EvalMode,
) -> Result<PromptSpec> {
    if mode == EvalMode::Open && examples.len() != 2 {
        return Err(invalid(format!(
            "open-ended zero-shot prompts take exactly 2 text examples, got {}",
            examples.len()
        )));
    }
    Ok(PromptSpec {
        support: examples
            .iter()
            .map(|t| Shot {
                visual: None,
                text: t.clone(),
            })
            .collect(),
        query_visual: Some(query_visual),
        query_prefix: query_prefix.to_string(),
        image_text_sep: " ".into(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "width")]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    /// Generated tokens, without the terminating `<EOC>`.
    pub tokens: Vec<usize>,
    pub log_likelihood: f64,
    pub finished: bool,
}

fn extend(prompt: &TrainingInstance, tokens: &[usize]) -> TrainingInstance {
    let mut inst = prompt.clone();
    let last = inst.indices.last().copied().unwrap_or(0);
    inst.text.extend_from_slice(tokens);
    inst.indices.extend(std::iter::repeat(last).take(tokens.len()));
    inst
}

/// Log-probabilities of the next token after `prompt + tokens`.
fn next_log_probs(model: &impl SequenceModel, prompt: &TrainingInstance, tokens: &[usize]) -> Result<Vec<f64>> {
    let inst = extend(prompt, tokens);
    let logits = model.logits(&inst)?;
    Ok(log_softmax_row(logits.row(inst.len() - 1)))
}

/// Generates until `<EOC>` or `max_len` tokens (the `<EOC>` counts).
/// Beams are ranked by total log-likelihood; ties go to the earlier beam,
/// then the lower token id.
pub fn decode(
    model: &impl SequenceModel,
    prompt: &TrainingInstance,
    mode: DecodeMode,
    max_len: usize,
    eoc: usize,
) -> Result<Completion> {
    if max_len == 0 {
        return Err(invalid("max_len must be positive"));
    }
    let width = match mode {
        DecodeMode::Greedy => 1,
        DecodeMode::Beam(0) => return Err(invalid("beam width must be positive")),
        DecodeMode::Beam(w) => w,
    };
    let mut active: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut expansions: Vec<(usize, usize, f64)> = Vec::new();
        for (b, (toks, score)) in active.iter().enumerate() {
            let lp = next_log_probs(model, prompt, toks)?;
            for (t, &l) in lp.iter().enumerate() {
                expansions.push((b, t, score + l));
            }
        }
        expansions.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        expansions.truncate(width);
        let mut next = Vec::with_capacity(width);
        for (b, t, s) in expansions {
            let mut toks = active[b].0.clone();
            if t == eoc {
                finished.push((toks, s));
            } else {
                toks.push(t);
                next.push((toks, s));
            }
        }
        active = next;
        let best_finished = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
        let best_active = active.iter().map(|a| a.1).fold(f64::NEG_INFINITY, f64::max);
        if active.is_empty() || best_finished >= best_active {
            break;
        }
    }
    let pick = |pool: &[(Vec<usize>, f64)]| {
        pool.iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.1.total_cmp(&b.1).then(j.cmp(i)))
            .map(|(_, x)| x.clone())
    };
    let best_f = pick(&finished);
    let best_a = pick(&active);
    let (tokens, ll, fin) = match (best_f, best_a) {
        (Some(f), Some(a)) if a.1 > f.1 => (a.0, a.1, false),
        (Some(f), _) => (f.0, f.1, true),
        (None, Some(a)) => (a.0, a.1, false),
        (None, None) => (Vec::new(), 0.0, false),
    };
    Ok(Completion {
        tokens,
        log_likelihood: ll,
        finished: fin,
    })
}

/// Removes text at and after the first occurrence of any keyword, and any
/// `<EOC>`/`<image>` literal, then trims whitespace.
pub fn trim_at_keywords(text: &str, keywords: &[String]) -> String {
    let mut cut = text.len();
    for k in keywords.iter().map(String::as_str).chain([crate::tokenizer::EOC, crate::tokenizer::IMAGE]) {
        if k.is_empty() {
            continue;
        }
        if let Some(p) = text.find(k) {
            cut = cut.min(p);
        }
    }
    text[..cut].trim().to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub text: String,
    pub score: f64,
    /// Position in the input list.
    pub index: usize,
}

fn rank(mut cands: Vec<Candidate>) -> Vec<Candidate> {
    cands.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    cands
}

/// Raw log-likelihood of each candidate (prefixed with a space) after the
/// prompt, sorted descending with ties in input order.
pub fn score_candidates(
    model: &impl SequenceModel,
    vocab: &Vocab,
    prompt: &TrainingInstance,
    candidates: &[String],
) -> Result<Vec<Candidate>> {
    Ok(rank(raw_scores(model, vocab, prompt, candidates)?
        .into_iter()
        .enumerate()
        .map(|(index, score)| Candidate {
            text: candidates[index].clone(),
            score,
            index,
        })
        .collect()))
}

/// Unsorted candidate scores in input order.
pub fn raw_scores(
    model: &impl SequenceModel,
    vocab: &Vocab,
    prompt: &TrainingInstance,
    candidates: &[String],
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let pad = vocab.specials().pad;
    let mut encoded = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.is_empty() {
            return Err(invalid("empty candidate"));
        }
        encoded.push(vocab.encode(&format!(" {c}")));
    }
    let longest = encoded.iter().map(Vec::len).max().unwrap_or(0);
    let insts: Vec<TrainingInstance> = encoded
        .iter()
        .map(|toks| {
            let mut inst = extend(prompt, toks);
            inst.text.resize(prompt.len() + longest, pad);
            inst.indices.resize(prompt.len() + longest, *prompt.indices.last().unwrap_or(&0));
            inst
        })
        .collect();
    let logits = model.logits_many(&insts)?;
    encoded
        .iter()
        .zip(insts.iter().zip(&logits))
        .map(|(toks, (inst, lg))| log_likelihood_from_logits(lg, &inst.text, prompt.len()..prompt.len() + toks.len()))
        .collect()
}

/// Mean candidate score over prompt variants, sorted descending.
pub fn ensemble_scores(
    model: &impl SequenceModel,
    vocab: &Vocab,
    variants: &[TrainingInstance],
    candidates: &[String],
) -> Result<Vec<Candidate>> {
    if variants.is_empty() {
        return Err(Error::Empty("prompt variants"));
    }
    let mut sums = vec![0.0; candidates.len()];
    for v in variants {
        for (s, x) in sums.iter_mut().zip(raw_scores(model, vocab, v, candidates)?) {
            *s += x;
        }
    }
    Ok(combine_scores(candidates, &sums, variants.len()))
}

/// Divides per-candidate score sums by `n` and ranks.
pub fn combine_scores(candidates: &[String], sums: &[f64], n: usize) -> Vec<Candidate> {
    rank(candidates
        .iter()
        .zip(sums)
        .enumerate()
        .map(|(index, (text, s))| Candidate {
            text: text.clone(),
            score: s / n as f64,
            index,
        })
        .collect())
}

/// Mean-pooled vision-encoder features.
pub fn pooled_features(store: &ParamStore, cfg: &VisionConfig, v: &VisualInput) -> Result<Vec<f64>> {
    let grid = encode_frames(store, cfg, v)?;
    let f = &grid.features;
    let mut out = vec![0.0; f.cols()];
    for r in 0..f.rows() {
        out.iter_mut().zip(f.row(r)).for_each(|(a, b)| *a += b);
    }
    out.iter_mut().for_each(|a| *a /= f.rows() as f64);
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Indices of the `k` pool items most similar to the query, in ascending
/// similarity (most similar last). Ties prefer the lower pool index.
pub fn rices_select(query: &[f64], pool: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(invalid("k must be positive"));
    }
    if pool.is_empty() {
        return Err(Error::Empty("support pool"));
    }
    if k > pool.len() {
        return Err(invalid(format!("k = {k} exceeds pool of {}", pool.len())));
    }
    let sims: Vec<f64> = pool.iter().map(|p| cosine(query, p)).collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.reverse();
    Ok(order)
}

/// One labelled item of an evaluation task file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub role: TaskRole,
    pub image: ImageRef,
    /// Answer text of the item.
    pub answer: String,
    /// Candidate answers for close-ended queries.
    #[serde(default)]
    pub candidates: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRole {
    Support,
    Query,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelledVisual {
    pub visual: VisualInput,
    pub answer: String,
    pub candidates: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalTask {
    pub support: Vec<LabelledVisual>,
    pub queries: Vec<LabelledVisual>,
}

/// Reads a JSONL task file; errors carry the offending line number.
pub fn load_task_file(path: &Path, cfg: &VisionConfig) -> Result<EvalTask> {
    let content = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut task = EvalTask::default();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let rec: TaskRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let visual = rec.image.load(base, cfg).map_err(|e| err(e.to_string()))?;
        let item = LabelledVisual {
            visual,
            answer: rec.answer,
            candidates: rec.candidates,
        };
        match rec.role {
            TaskRole::Support => task.support.push(item),
            TaskRole::Query => task.queries.push(item),
        }
    }
    if task.queries.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: "task file has no queries".into(),
        });
    }
    Ok(task)
}

/// Attribute predicted by a synthetic glyph task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphAttribute {
    /// One of 8 colors, asked as a question.
    Color,
    /// One of 32 color-shape classes, as a caption.
    Class,
}

impl GlyphAttribute {
    pub fn format(self) -> TaskFormat {
        match self {
            GlyphAttribute::Color => TaskFormat::Qa {
                question: "what color?".into(),
            },
            GlyphAttribute::Class => TaskFormat::Caption,
        }
    }

    pub fn candidates(self) -> Vec<String> {
        match self {
            GlyphAttribute::Color => COLORS.iter().map(|c| c.to_string()).collect(),
            GlyphAttribute::Class => COLORS
                .iter()
                .flat_map(|c| SHAPES.iter().map(move |s| format!("{c} {s}")))
                .collect(),
        }
    }

    fn answer(self, g: Glyph) -> String {
        match self {
            GlyphAttribute::Color => g.color_name().to_string(),
            GlyphAttribute::Class => format!("{} {}", g.color_name(), g.shape_name()),
        }
    }
}

/// Task records over freshly rendered glyphs. Support item `i` has class
/// `i mod n_classes` so the pool covers the classes evenly; queries are
/// random. Rendering seeds derive from `seed` and differ per item.
pub fn glyph_task_records(attr: GlyphAttribute, n_support: usize, n_query: usize, seed: u64) -> Vec<TaskRecord> {
    let candidates = attr.candidates();
    let mut out = Vec::with_capacity(n_support + n_query);
    for i in 0..n_support + n_query {
        let mut r = crate::rng::item(seed, "task", i as u64);
        let mut g = Glyph::random(&mut r);
        if i < n_support {
            match attr {
                GlyphAttribute::Color => g.color = i % COLORS.len(),
                GlyphAttribute::Class => {
                    let c = i % (COLORS.len() * SHAPES.len());
                    g.color = c / SHAPES.len();
                    g.shape = c % SHAPES.len();
                }
            }
        }
        let support = i < n_support;
        out.push(TaskRecord {
            role: if support { TaskRole::Support } else { TaskRole::Query },
            image: ImageRef::Glyph {
                glyph: GlyphRef {
                    color: g.color_name().into(),
                    shape: g.shape_name().into(),
                    size: g.size_name().into(),
                    seed: r.gen(),
                },
            },
            answer: attr.answer(g),
            candidates: if support { Vec::new() } else { candidates.clone() },
        });
    }
    out
}

/// Loads records into an evaluation task; image paths resolve against `base`.
pub fn task_from_records(records: &[TaskRecord], base: &Path, cfg: &VisionConfig) -> Result<EvalTask> {
    let mut task = EvalTask::default();
    for rec in records {
        let item = LabelledVisual {
            visual: rec.image.load(base, cfg)?,
            answer: rec.answer.clone(),
            candidates: rec.candidates.clone(),
        };
        match rec.role {
            TaskRole::Support => task.support.push(item),
            TaskRole::Query => task.queries.push(item),
        }
    }
    Ok(task)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub shots: usize,
    pub mode: EvalMode,
    pub rices: bool,
    /// Number of shot permutations averaged per query (1 disables).
    pub ensemble: usize,
    pub decode: DecodeMode,
    pub max_len: usize,
    pub format: TaskFormat,
    /// Text-only examples for zero-shot open-ended prompts.
    pub zero_shot_examples: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            shots: 4,
            mode: EvalMode::Closed,
            rices: false,
            ensemble: 1,
            decode: DecodeMode::Beam(3),
            max_len: 8,
            format: TaskFormat::Caption,
            zero_shot_examples: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub query: usize,
    pub answer: String,
    pub prediction: String,
    pub correct: bool,
    pub shots: Vec<usize>,
    pub scores: Vec<Candidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub queries: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Pool features used for retrieval, computed once per task.
pub fn support_features(store: &ParamStore, cfg: &VisionConfig, task: &EvalTask) -> Result<Vec<Vec<f64>>> {
    task.support
        .iter()
        .map(|s| pooled_features(store, cfg, &s.visual))
        .collect()
}

/// Runs every query of `task`. With zero shots, close-ended prompts use the
/// query alone and open-ended prompts use the configured text examples.
pub fn evaluate<M: SequenceModel>(
    model: &M,
    vocab: &Vocab,
    vision: (&ParamStore, &VisionConfig),
    task: &EvalTask,
    cfg: &EvalConfig,
    rng: &mut impl Rng,
) -> Result<(EvalSummary, Vec<Prediction>)> {
    if cfg.shots > task.support.len() {
        return Err(invalid(format!("{} shots from a pool of {}", cfg.shots, task.support.len())));
    }
    let pool_feats = if cfg.rices && cfg.shots > 0 {
        support_features(vision.0, vision.1, task)?
    } else {
        Vec::new()
    };
    let prefix = cfg.format.prefix();
    let mut preds = Vec::with_capacity(task.queries.len());
    for (qi, q) in task.queries.iter().enumerate() {
        let chosen: Vec<usize> = if cfg.shots == 0 {
            Vec::new()
        } else if cfg.rices {
            let qf = pooled_features(vision.0, vision.1, &q.visual)?;
            rices_select(&qf, &pool_feats, cfg.shots)?
        } else {
            rand::seq::index::sample(rng, task.support.len(), cfg.shots).into_vec()
        };
        let shots: Vec<Shot> = chosen
            .iter()
            .map(|&i| Shot {
                visual: Some(task.support[i].visual.clone()),
                text: cfg.format.render(&task.support[i].answer),
            })
            .collect();
        let n_variants = cfg.ensemble.max(1);
        let mut variants = Vec::with_capacity(n_variants);
        for v in 0..n_variants {
            let spec = if cfg.shots == 0 {
                let examples = if cfg.mode == EvalMode::Open {
                    cfg.zero_shot_examples.clone()
                } else {
                    Vec::new()
                };
                build_zeroshot_prompt(&examples, q.visual.clone(), &prefix, cfg.mode)?
            } else {
                build_fewshot_prompt(&shots, Some(q.visual.clone()), &prefix, rng, v > 0)
            };
            variants.push(spec.render(vocab)?);
        }
        let (prediction, scores) = match cfg.mode {
            EvalMode::Closed => {
                let ranked = ensemble_scores(model, vocab, &variants, &q.candidates)?;
                (ranked[0].text.clone(), ranked)
            }
            EvalMode::Open => {
                let c = decode(model, &variants[0], cfg.decode, cfg.max_len, vocab.specials().eoc)?;
                let text = vocab.decode(&c.tokens)?;
                (trim_at_keywords(&text, &cfg.format.keywords()), Vec::new())
            }
        };
        preds.push(Prediction {
            query: qi,
            correct: prediction == q.answer,
            answer: q.answer.clone(),
            prediction,
            shots: chosen,
            scores,
        });
    }
    let correct = preds.iter().filter(|p| p.correct).count();
    Ok((
        EvalSummary {
            queries: preds.len(),
            correct,
            accuracy: correct as f64 / preds.len().max(1) as f64,
        },
        preds,
    ))
}
