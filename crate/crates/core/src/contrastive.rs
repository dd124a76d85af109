//! Dual-encoder contrastive pretraining of the vision encoder.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{render_glyph, Glyph, COLORS, SHAPES, SIZES};
use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{normal, ParamStore};
use crate::tensor::{Activation, Tensor};
use crate::tokenizer::Vocab;
use crate::train::{Grads, Objective};
use crate::vision::{encode_batch, init_vision, VisionConfig, VisualInput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub vision: VisionConfig,
    pub text_width: usize,
    pub text_blocks: usize,
    pub text_heads: usize,
    pub max_text_len: usize,
    pub embed_dim: usize,
    pub init_temperature: f64,
    pub smoothing: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            vision: VisionConfig::default(),
            text_width: 48,
            text_blocks: 1,
            text_heads: 2,
            max_text_len: 16,
            embed_dim: 32,
            init_temperature: 0.07,
            smoothing: 0.1,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        if self.text_heads == 0 || self.text_width % self.text_heads != 0 {
            return Err(invalid("text heads must divide text width"));
        }
        if self.max_text_len == 0 || self.embed_dim == 0 {
            return Err(invalid("text length and embedding size must be positive"));
        }
        if !(self.init_temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(invalid("smoothing must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Image-text pairs; item `i` of each list belong together.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairBatch {
    pub images: Vec<VisualInput>,
    pub texts: Vec<String>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub struct DualEncoder {
    pub config: ContrastiveConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
}

impl DualEncoder {
    pub fn new(config: ContrastiveConfig, vocab: Vocab, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        init_vision(&mut store, &config.vision, rng)?;
        let d = config.text_width;
        store.insert("text.embed", normal(vec![vocab.len(), d], 0.1, rng));
        store.insert("text.pos", normal(vec![config.max_text_len, d], 0.02, rng));
        for b in 0..config.text_blocks {
            let p = format!("text.block{b}");
            nn::init_layer_norm(&mut store, &format!("{p}.ln_attn"), d);
            nn::init_attention(&mut store, rng, &format!("{p}.attn"), d);
            nn::init_layer_norm(&mut store, &format!("{p}.ln_ffw"), d);
            nn::init_ffw(&mut store, rng, &format!("{p}.ffw"), d, 2 * d);
        }
        nn::init_layer_norm(&mut store, "text.ln_f", d);
        nn::init_linear(&mut store, rng, "text.proj", d, config.embed_dim, true);
        nn::init_linear(&mut store, rng, "contrastive.image_proj", config.vision.width, config.embed_dim, true);
        store.insert("contrastive.log_beta", Tensor::scalar((1.0 / config.init_temperature).ln()));
        Ok(DualEncoder { config, vocab, store })
    }

    /// Inverse temperature `exp(log β)`.
    pub fn beta(&self) -> Result<f64> {
        Ok(self.store.get("contrastive.log_beta")?.item()?.exp())
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut t = self.vocab.encode(text);
        t.truncate(self.config.max_text_len);
        if t.is_empty() {
            return Err(invalid("empty text"));
        }
        Ok(t)
    }

    /// Unit-norm image embeddings `[N, e]`.
    pub fn image_embeddings_var(&self, g: &mut Graph, images: &[VisualInput]) -> Result<Var> {
        let refs: Vec<&VisualInput> = images.iter().collect();
        let (h, grids) = encode_batch(g, &self.store, &self.config.vision, &refs)?;
        let rows: Vec<usize> = grids.iter().map(|gr| gr.frames * gr.spatial).collect();
        let pooled = mean_pool(g, h, &rows)?;
        let z = nn::linear(g, &self.store, "contrastive.image_proj", pooled)?;
        Ok(g.l2_normalize_rows(z))
    }

    /// Unit-norm text embeddings `[N, e]` from a bidirectional encoder with
    /// mean pooling over real tokens.
    pub fn text_embeddings_var(&self, g: &mut Graph, texts: &[String]) -> Result<Var> {
        if texts.is_empty() {
            return Err(Error::Empty("text batch"));
        }
        let toks: Vec<Vec<usize>> = texts.iter().map(|t| self.tokenize(t)).collect::<Result<_>>()?;
        let len = toks.iter().map(Vec::len).max().unwrap_or(1);
        let pad = self.vocab.specials().pad;
        let mut ids = Vec::with_capacity(toks.len() * len);
        let mut pos = Vec::with_capacity(toks.len() * len);
        let mut mask = Vec::with_capacity(toks.len() * len * len);
        for t in &toks {
            for i in 0..len {
                ids.push(*t.get(i).unwrap_or(&pad));
                pos.push(i);
            }
            for _ in 0..len {
                mask.extend((0..len).map(|j| j < t.len()));
            }
        }
        let table = g.param(&self.store, "text.embed")?;
        let x = g.gather_rows(table, &ids)?;
        let p = g.param(&self.store, "text.pos")?;
        let p = g.gather_rows(p, &pos)?;
        let mut h = g.add(x, p)?;
        let heads = self.config.text_heads;
        for b in 0..self.config.text_blocks {
            let pre = format!("text.block{b}");
            let n = nn::layer_norm(g, &self.store, &format!("{pre}.ln_attn"), h)?;
            let a = nn::attention(g, &self.store, &format!("{pre}.attn"), n, n, heads, toks.len(), Some(&mask))?;
            h = g.add(h, a)?;
            let n = nn::layer_norm(g, &self.store, &format!("{pre}.ln_ffw"), h)?;
            let f = nn::ffw(g, &self.store, &format!("{pre}.ffw"), n, Activation::Gelu)?;
            h = g.add(h, f)?;
        }
        let h = nn::layer_norm(g, &self.store, "text.ln_f", h)?;
        let weights: Vec<Vec<f64>> = toks
            .iter()
            .map(|t| (0..len).map(|i| if i < t.len() { 1.0 / t.len() as f64 } else { 0.0 }).collect())
            .collect();
        let pooled = weighted_pool(g, h, &weights)?;
        let z = nn::linear(g, &self.store, "text.proj", pooled)?;
        Ok(g.l2_normalize_rows(z))
    }

    pub fn embed_images(&self, images: &[VisualInput]) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let v = self.image_embeddings_var(&mut g, images)?;
        Ok(g.value(v).clone())
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let v = self.text_embeddings_var(&mut g, texts)?;
        Ok(g.value(v).clone())
    }

    /// `(V_i, L_i)` for one pair.
    pub fn embed_pair(&self, image: &VisualInput, text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let v = self.embed_images(std::slice::from_ref(image))?;
        let l = self.embed_texts(&[text.to_string()])?;
        Ok((v.into_data(), l.into_data()))
    }

    fn batch_loss(&self, g: &mut Graph, batch: &PairBatch) -> Result<Var> {
        if batch.images.len() != batch.texts.len() {
            return Err(shape_err(
                "contrastive",
                format!("{} images, {} texts", batch.images.len(), batch.texts.len()),
            ));
        }
        let v = self.image_embeddings_var(g, &batch.images)?;
        let l = self.text_embeddings_var(g, &batch.texts)?;
        let log_beta = g.param(&self.store, "contrastive.log_beta")?;
        contrastive_loss_var(g, v, l, log_beta, self.config.smoothing)
    }
}

/// Rows `[Σ rows, d]` pooled to `[groups, d]` by per-group means.
fn mean_pool(g: &mut Graph, h: Var, rows: &[usize]) -> Result<Var> {
    let total: usize = rows.iter().sum();
    let mut w = vec![0.0; rows.len() * total];
    let mut off = 0;
    for (i, &r) in rows.iter().enumerate() {
        for j in off..off + r {
            w[i * total + j] = 1.0 / r as f64;
        }
        off += r;
    }
    let p = g.constant(Tensor::new(vec![rows.len(), total], w)?);
    g.matmul(p, h)
}

/// Each group spans `weights[i].len()` consecutive rows, combined with those weights.
fn weighted_pool(g: &mut Graph, h: Var, weights: &[Vec<f64>]) -> Result<Var> {
    let total: usize = weights.iter().map(Vec::len).sum();
    let mut w = vec![0.0; weights.len() * total];
    let mut off = 0;
    for (i, ws) in weights.iter().enumerate() {
        w[i * total + off..i * total + off + ws.len()].copy_from_slice(ws);
        off += ws.len();
    }
    let p = g.constant(Tensor::new(vec![weights.len(), total], w)?);
    g.matmul(p, h)
}

/// Text-to-image plus image-to-text cross-entropy over `β·V Lᵀ`, each the
/// mean over the batch, with diagonal positives.
pub fn contrastive_loss_var(g: &mut Graph, v: Var, l: Var, log_beta: Var, smoothing: f64) -> Result<Var> {
    let (n, nl) = (g.value(v).rows(), g.value(l).rows());
    if n != nl || g.value(v).cols() != g.value(l).cols() {
        return Err(shape_err("contrastive_loss", format!("{n} image rows, {nl} text rows")));
    }
    if n < 2 {
        return Err(invalid("contrastive loss needs at least 2 pairs"));
    }
    let beta = g.exp(log_beta);
    let targets: Vec<usize> = (0..n).collect();
    let w = vec![1.0 / n as f64; n];
    let s_ti = g.matmul_nt(l, v)?;
    let s_ti = g.scale_by(s_ti, beta)?;
    let s_it = g.matmul_nt(v, l)?;
    let s_it = g.scale_by(s_it, beta)?;
    let a = g.cross_entropy(s_ti, &targets, &w, smoothing)?;
    let b = g.cross_entropy(s_it, &targets, &w, smoothing)?;
    g.add(a, b)
}

/// Value of [`contrastive_loss_var`] on fixed embeddings.
pub fn contrastive_loss(v: &Tensor, l: &Tensor, beta: f64, smoothing: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(invalid("beta must be positive"));
    }
    let mut g = Graph::no_grad();
    let (v, l) = (g.constant(v.clone()), g.constant(l.clone()));
    let lb = g.constant(Tensor::scalar(beta.ln()));
    let loss = contrastive_loss_var(&mut g, v, l, lb, smoothing)?;
    g.value(loss).item()
}

impl Objective for DualEncoder {
    type Batch = PairBatch;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn loss_and_grad(&self, batch: &PairBatch) -> Result<(f64, Grads)> {
        let mut g = Graph::new();
        let loss = self.batch_loss(&mut g, batch)?;
        let value = g.value(loss).item()?;
        Ok((value, g.backward(loss)?.into_params()))
    }

    fn loss(&self, batch: &PairBatch) -> Result<f64> {
        let mut g = Graph::no_grad();
        let loss = self.batch_loss(&mut g, batch)?;
        g.value(loss).item()
    }

    fn merge(batches: &[PairBatch]) -> PairBatch {
        let mut out = PairBatch::default();
        for b in batches {
            out.images.extend(b.images.iter().cloned());
            out.texts.extend(b.texts.iter().cloned());
        }
        out
    }
}

/// Per-class mean of unit template embeddings, re-normalized: `[C, e]`.
pub fn class_embeddings(enc: &DualEncoder, classes: &[String], templates: &[String]) -> Result<Tensor> {
    if classes.is_empty() {
        return Err(Error::Empty("class list"));
    }
    if templates.is_empty() {
        return Err(Error::Empty("template list"));
    }
    let mut rows = Vec::with_capacity(classes.len());
    for c in classes {
        let texts: Vec<String> = templates.iter().map(|t| t.replace("{class_name}", c)).collect();
        let e = enc.embed_texts(&texts)?;
        let mut mean = vec![0.0; e.cols()];
        for r in 0..e.rows() {
            mean.iter_mut().zip(e.row(r)).for_each(|(m, x)| *m += x / e.rows() as f64);
        }
        let norm = (mean.iter().map(|x| x * x).sum::<f64>() + 1e-24).sqrt();
        rows.push(mean.into_iter().map(|x| x / norm).collect());
    }
    Tensor::from_rows(&rows)
}

/// Index of the class embedding with the largest dot product (ties to the
/// lower index).
pub fn classify_embedding(image: &[f64], classes: &Tensor) -> Result<usize> {
    if classes.rows() == 0 {
        return Err(Error::Empty("class list"));
    }
    if classes.cols() != image.len() {
        return Err(shape_err("classify", format!("{} vs {}", image.len(), classes.cols())));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..classes.rows() {
        let s: f64 = classes.row(c).iter().zip(image).map(|(a, b)| a * b).sum();
        if s > best.1 {
            best = (c, s);
        }
    }
    Ok(best.0)
}

/// Template-ensembled zero-shot classification; templates contain
/// `{class_name}`.
pub fn zero_shot_classify(
    enc: &DualEncoder,
    image: &VisualInput,
    classes: &[String],
    templates: &[String],
) -> Result<usize> {
    let ce = class_embeddings(enc, classes, templates)?;
    let v = enc.embed_images(std::slice::from_ref(image))?;
    classify_embedding(v.data(), &ce)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Recall {
    pub k: usize,
    pub image_to_text: f64,
    pub text_to_image: f64,
}

/// 0-based rank of `target` among `scores`; equal scores at lower indices
/// rank ahead.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count()
}

/// Recall@K in both directions. `pairing[i]` is the text row matching
/// image row `i`; text queries are the texts some image points at.
pub fn retrieval_recall(v: &Tensor, l: &Tensor, pairing: &[usize], k: usize) -> Result<Recall> {
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    if pairing.len() != v.rows() || v.cols() != l.cols() {
        return Err(shape_err("retrieval_recall", "pairing or width mismatch"));
    }
    if v.rows() == 0 || l.rows() == 0 {
        return Err(Error::Empty("retrieval set"));
    }
    if pairing.iter().any(|&p| p >= l.rows()) {
        return Err(invalid("pairing index outside text rows"));
    }
    let sims = crate::tensor::matmul_t(v, l, true)?;
    let mut hits = 0;
    for (i, &p) in pairing.iter().enumerate() {
        if rank_of(sims.row(i), p) < k {
            hits += 1;
        }
    }
    let i2t = hits as f64 / pairing.len() as f64;
    let mut queries = 0;
    let mut hits = 0;
    for j in 0..l.rows() {
        let Some(i) = pairing.iter().position(|&p| p == j) else {
            continue;
        };
        let col: Vec<f64> = (0..v.rows()).map(|r| sims.row(r)[j]).collect();
        queries += 1;
        if rank_of(&col, i) < k {
            hits += 1;
        }
    }
    Ok(Recall {
        k,
        image_to_text: i2t,
        text_to_image: hits as f64 / queries as f64,
    })
}

/// CSV rows `direction,K,recall`.
pub fn recall_csv(recalls: &[Recall]) -> String {
    let mut out = String::from("direction,K,recall\n");
    for r in recalls {
        let _ = writeln!(out, "image_to_text,{},{:.6}", r.k, r.image_to_text);
        let _ = writeln!(out, "text_to_image,{},{:.6}", r.k, r.text_to_image);
    }
    out
}

/// Caption templates for glyph pairs; `{size}`, `{color}`, `{shape}` are
/// substituted.
pub const PAIR_TEMPLATES: [&str; 2] = ["a {size} {color} {shape}", "a photo of a {size} {color} {shape}"];

pub fn glyph_text(template: &str, glyph: Glyph) -> String {
    template
        .replace("{size}", glyph.size_name())
        .replace("{color}", glyph.color_name())
        .replace("{shape}", glyph.shape_name())
}

/// `n` random glyph pairs; item `i` depends only on `(seed, stream, i)`.
/// With probability `noise` a caption describes an unrelated random glyph.
pub fn glyph_pairs(
    n: usize,
    seed: u64,
    stream: &str,
    template: &str,
    noise: f64,
    cfg: &VisionConfig,
) -> Result<PairBatch> {
    let mut out = PairBatch::default();
    for i in 0..n {
        let mut rng = crate::rng::item(seed, stream, i as u64);
        let glyph = Glyph::random(&mut rng);
        out.images.push(render_glyph(glyph, cfg, &mut rng)?);
        let described = if rng.gen_bool(noise.clamp(0.0, 1.0)) {
            Glyph::random(&mut rng)
        } else {
            glyph
        };
        out.texts.push(glyph_text(template, described));
    }
    Ok(out)
}

/// One fresh rendering of each of the 64 glyph classes.
pub fn glyph_class_set(seed: u64, stream: &str, template: &str, cfg: &VisionConfig) -> Result<PairBatch> {
    let mut out = PairBatch::default();
    let mut i = 0;
    for color in COLORS {
        for shape in SHAPES {
            for size in SIZES {
                let glyph = Glyph::from_names(color, shape, size)?;
                let mut rng = crate::rng::item(seed, stream, i);
                out.images.push(render_glyph(glyph, cfg, &mut rng)?);
                out.texts.push(glyph_text(template, glyph));
                i += 1;
            }
        }
    }
    Ok(out)
}

/// Uniform sample of `batch` items from `pool`.
pub fn sample_pairs(pool: &PairBatch, batch: usize, rng: &mut impl Rng) -> PairBatch {
    let mut out = PairBatch::default();
    for _ in 0..batch {
        let i = rng.gen_range(0..pool.len());
        out.images.push(pool.images[i].clone());
        out.texts.push(pool.texts[i].clone());
    }
    out
}
