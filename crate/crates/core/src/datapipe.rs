//! Interleaved documents, the token→image index φ, window sampling, paired
//! formatting, synthetic glyph corpora and mixture batching.

use std::path::Path;
use std::sync::Arc;

use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;
use crate::vision::{preprocess, VisionConfig, VisualInput};

pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange"];
pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "cross"];
pub const SIZES: [&str; 2] = ["small", "large"];

const COLOR_RGB: [[f64; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.1],
    [0.15, 0.25, 0.95],
    [0.9, 0.9, 0.1],
    [0.1, 0.9, 0.9],
    [0.9, 0.1, 0.9],
    [0.95, 0.95, 0.95],
    [1.0, 0.55, 0.0],
];

/// Words of the synthetic grammars; each becomes a vocabulary entry.
pub const GRAMMAR_WORDS: &[&str] = &[
    "red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange", "square", "circle",
    "triangle", "cross", "small", "large", "Output:", "Question:", "Answer:", "what", "color?",
    "shape?", "This", "is", "a", "an", "the", "photo", "of", "picture", "glyph", "shape", "Here",
    "are", "some", "glyphs.", "Look", "at", "these", "A", "page", "about", "shapes.", "colors.",
    "and", "with",
];

/// One entry of an interleaved document.
#[derive(Clone, Debug, PartialEq)]
pub enum Segment {
    Text(String),
    Visual(VisualInput),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterleavedDocument {
    pub segments: Vec<Segment>,
}

impl InterleavedDocument {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let doc = InterleavedDocument { segments };
        if doc.images() == 0 {
            return Err(invalid("document without visual items"));
        }
        Ok(doc)
    }

    pub fn images(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, Segment::Visual(_)))
            .count()
    }
}

/// Token ids with `<BOS>`/`<EOS>`, `<image>` tags and `<EOC>` markers, plus
/// the tag positions and the visual items in document order.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedDocument {
    pub tokens: Vec<usize>,
    pub image_positions: Vec<usize>,
    pub images: Vec<VisualInput>,
}

/// Inserts `<image>` at each visual item, `<EOC>` before every `<image>` that
/// does not directly follow `<BOS>` and before the final `<EOS>`.
pub fn tag_document(doc: &InterleavedDocument, vocab: &Vocab) -> TaggedDocument {
    let sp = vocab.specials();
    let mut tokens = vec![sp.bos];
    let mut image_positions = Vec::new();
    let mut images = Vec::new();
    for seg in &doc.segments {
        match seg {
            Segment::Text(t) => tokens.extend(vocab.encode(t)),
            Segment::Visual(v) => {
                if tokens.last() != Some(&sp.bos) {
                    tokens.push(sp.eoc);
                }
                image_positions.push(tokens.len());
                tokens.push(sp.image);
                images.push(v.clone());
            }
        }
    }
    tokens.push(sp.eoc);
    tokens.push(sp.eos);
    TaggedDocument {
        tokens,
        image_positions,
        images,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Previous,
    Next,
}

/// Tag positions (sorted) of `image_id` in `tokens`.
pub fn image_positions(tokens: &[usize], image_id: usize) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == image_id)
        .map(|(i, _)| i)
        .collect()
}

/// 1-based image index per position. `Previous`: number of tags at positions
/// `≤ ℓ`. `Next`: index of the first tag at a position `≥ ℓ`, else 0.
pub fn compute_phi(len: usize, positions: &[usize], direction: Direction) -> Vec<usize> {
    let mut phi = vec![0; len];
    match direction {
        Direction::Previous => {
            let mut seen = 0;
            let mut next = positions.iter().peekable();
            for (l, p) in phi.iter_mut().enumerate() {
                while next.peek().is_some_and(|&&q| q <= l) {
                    next.next();
                    seen += 1;
                }
                *p = seen;
            }
        }
        Direction::Next => {
            let mut k = 0;
            for (l, p) in phi.iter_mut().enumerate() {
                while k < positions.len() && positions[k] < l {
                    k += 1;
                }
                *p = if k < positions.len() { k + 1 } else { 0 };
            }
        }
    }
    phi
}

/// A fixed-length `(images, text, indices)` triple.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance {
    /// Real (non-padding) visual items, in index order.
    pub images: Vec<VisualInput>,
    /// Image slots `N`; slots past `images.len()` are zero padding.
    pub max_images: usize,
    pub text: Vec<usize>,
    pub indices: Vec<usize>,
}

impl TrainingInstance {
    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    /// Highest image index referenced by any token.
    pub fn max_index(&self) -> usize {
        self.indices.iter().copied().max().unwrap_or(0)
    }

    /// `[N, T, H, W, C]` with zero images in unused slots.
    pub fn images_tensor(&self) -> Result<Tensor> {
        let Some(first) = self.images.first() else {
            return Err(Error::Empty("instance images"));
        };
        let shape = first.pixels.shape().to_vec();
        let per: usize = shape.iter().product();
        let mut data = vec![0.0; self.max_images * per];
        for (i, img) in self.images.iter().enumerate() {
            if img.pixels.shape() != shape.as_slice() {
                return Err(invalid("instance images differ in shape"));
            }
            data[i * per..(i + 1) * per].copy_from_slice(img.pixels.data());
        }
        let mut full = vec![self.max_images];
        full.extend(shape);
        Tensor::new(full, data)
    }

    /// Pads with `<pad>` (index 0) or truncates to `len` tokens.
    pub fn padded(mut self, len: usize, pad: usize) -> Self {
        self.text.resize(len, pad);
        self.indices.resize(len, 0);
        self
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.indices.len() != self.text.len() {
            return Err(invalid("indices and text differ in length"));
        }
        if let Some(&id) = self.text.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: vocab_size });
        }
        if self.max_index() > self.images.len() || self.images.len() > self.max_images {
            return Err(invalid(format!(
                "index {} with {} images in {} slots",
                self.max_index(),
                self.images.len(),
                self.max_images
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceConfig {
    pub seq_len: usize,
    pub max_images: usize,
    pub p_next: f64,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        InstanceConfig {
            seq_len: 48,
            max_images: 5,
            p_next: 0.5,
        }
    }
}

/// Samples a window of `seq_len` tokens containing at least one `<image>`
/// tag, keeps the first `max_images` in-window images and computes φ in a
/// direction drawn with probability `p_next` for `Next`.
pub fn sample_instance(
    doc: &TaggedDocument,
    cfg: &InstanceConfig,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> Result<TrainingInstance> {
    if doc.image_positions.is_empty() {
        return Err(invalid("tagged document has no images"));
    }
    if cfg.seq_len == 0 {
        return Err(invalid("sequence length must be positive"));
    }
    let direction = if rng.gen_bool(cfg.p_next.clamp(0.0, 1.0)) {
        Direction::Next
    } else {
        Direction::Previous
    };
    let n = doc.tokens.len();
    let start = if n <= cfg.seq_len {
        0
    } else {
        let starts: Vec<usize> = (0..=n - cfg.seq_len)
            .filter(|&s| doc.image_positions.iter().any(|&p| p >= s && p < s + cfg.seq_len))
            .collect();
        *starts.choose(rng).expect("some window covers an image")
    };
    let end = (start + cfg.seq_len).min(n);
    let text = doc.tokens[start..end].to_vec();
    let in_window: Vec<usize> = doc
        .image_positions
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= start && p < end)
        .map(|(i, _)| i)
        .collect();
    let positions: Vec<usize> = in_window.iter().map(|&i| doc.image_positions[i] - start).collect();
    let mut indices = compute_phi(text.len(), &positions, direction);
    indices.iter_mut().filter(|p| **p > cfg.max_images).for_each(|p| *p = 0);
    let images = in_window
        .iter()
        .take(cfg.max_images)
        .map(|&i| doc.images[i].clone())
        .collect();
    Ok(TrainingInstance {
        images,
        max_images: cfg.max_images,
        text,
        indices,
    }
    .padded(cfg.seq_len, vocab.specials().pad))
}

/// `<BOS> <image> [␣]caption <EOC> <EOS>` with a space prepended with
/// probability `space_prob`; indices are 1 from the tag onward.
pub fn format_paired(
    caption: &str,
    visual: &VisualInput,
    vocab: &Vocab,
    rng: &mut impl Rng,
    space_prob: f64,
) -> Result<TrainingInstance> {
    if caption.is_empty() {
        return Err(invalid("empty caption"));
    }
    let sp = vocab.specials();
    let space = rng.gen_bool(space_prob.clamp(0.0, 1.0));
    let body = if space {
        format!(" {caption}")
    } else {
        caption.to_string()
    };
    let mut text = vec![sp.bos, sp.image];
    text.extend(vocab.encode(&body));
    text.push(sp.eoc);
    text.push(sp.eos);
    let indices = compute_phi(text.len(), &[1], Direction::Previous);
    Ok(TrainingInstance {
        images: vec![visual.clone()],
        max_images: 1,
        text,
        indices,
    })
}

/// Attributes of one synthetic glyph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Glyph {
    pub color: usize,
    pub shape: usize,
    pub size: usize,
}

impl Glyph {
    pub fn random(rng: &mut impl Rng) -> Glyph {
        Glyph {
            color: rng.gen_range(0..COLORS.len()),
            shape: rng.gen_range(0..SHAPES.len()),
            size: rng.gen_range(0..SIZES.len()),
        }
    }

    pub fn from_names(color: &str, shape: &str, size: &str) -> Result<Glyph> {
        let find = |list: &[&str], v: &str| {
            list.iter()
                .position(|x| *x == v)
                .ok_or_else(|| invalid(format!("unknown glyph attribute {v:?}")))
        };
        Ok(Glyph {
            color: find(&COLORS, color)?,
            shape: find(&SHAPES, shape)?,
            size: find(&SIZES, size)?,
        })
    }

    pub fn color_name(&self) -> &'static str {
        COLORS[self.color]
    }

    pub fn shape_name(&self) -> &'static str {
        SHAPES[self.shape]
    }

    pub fn size_name(&self) -> &'static str {
        SIZES[self.size]
    }

    /// Joint color/shape class in `0..32`.
    pub fn class(&self) -> usize {
        self.color * SHAPES.len() + self.shape
    }

    pub fn caption(&self) -> String {
        format!("Output: {} {}", self.color_name(), self.shape_name())
    }

    pub fn vqa(&self) -> String {
        format!("Question: what color? Answer: {}", self.color_name())
    }
}

/// Raw `[size, size, 3]` rendering in `[0, 1]` with position jitter and
/// pixel noise.
pub fn render_glyph_raw(glyph: Glyph, size: usize, rng: &mut impl Rng) -> Tensor {
    let s = size as f64;
    let radius = s * if glyph.size == 0 { 0.2 } else { 0.36 };
    let slack = (s / 2.0 - radius - 1.0).max(0.0).min(s / 8.0);
    let cx = s / 2.0 + rng.gen_range(-slack..=slack);
    let cy = s / 2.0 + rng.gen_range(-slack..=slack);
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let bg = 0.1 + rng.gen_range(-0.03..0.03);
    let rgb = COLOR_RGB[glyph.color];
    let gain = 1.0 + rng.gen_range(-0.05..0.05);
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match glyph.shape {
                0 => dx.abs() <= radius * 0.85 && dy.abs() <= radius * 0.85,
                1 => dx * dx + dy * dy <= radius * radius,
                2 => dy.abs() <= radius && dx.abs() <= (dy + radius) / 2.0,
                _ => {
                    let arm = radius / 3.0;
                    (dx.abs() <= arm && dy.abs() <= radius) || (dy.abs() <= arm && dx.abs() <= radius)
                }
            };
            for c in rgb {
                let v = if inside { c * gain } else { bg };
                data.push((v + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![size, size, 3], data).expect("length matches shape")
}

pub fn render_glyph(glyph: Glyph, cfg: &VisionConfig, rng: &mut impl Rng) -> Result<VisualInput> {
    preprocess(&render_glyph_raw(glyph, cfg.image_size, rng), cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    GlyphCaption,
    GlyphVqa,
    InterleavedPages,
}

/// One dataset item before instance formatting.
#[derive(Clone, Debug, PartialEq)]
pub enum Example {
    Paired {
        caption: String,
        visual: VisualInput,
        glyph: Option<Glyph>,
    },
    Document(TaggedDocument),
}

impl Example {
    pub fn to_instance(
        &self,
        cfg: &InstanceConfig,
        space_prob: f64,
        vocab: &Vocab,
        rng: &mut impl Rng,
    ) -> Result<TrainingInstance> {
        match self {
            Example::Paired { caption, visual, .. } => Ok(format_paired(caption, visual, vocab, rng, space_prob)?
                .padded(cfg.seq_len, vocab.specials().pad)),
            Example::Document(doc) => sample_instance(doc, cfg, vocab, rng),
        }
    }
}

const PAGE_INTROS: [&str; 4] = [
    "Here are some glyphs.",
    "Look at these shapes.",
    "A page about colors.",
    "This is a page of glyphs.",
];

/// Interleaved page of 2–5 glyph chunks sharing one text format, with an
/// optional leading intro sentence.
pub fn synth_page(cfg: &VisionConfig, rng: &mut impl Rng) -> Result<InterleavedDocument> {
    let chunks = rng.gen_range(2..=5);
    let vqa = rng.gen_bool(0.5);
    let mut segments = Vec::with_capacity(2 * chunks + 1);
    if rng.gen_bool(0.3) {
        segments.push(Segment::Text(PAGE_INTROS[rng.gen_range(0..PAGE_INTROS.len())].into()));
    }
    for _ in 0..chunks {
        let glyph = Glyph::random(rng);
        segments.push(Segment::Visual(render_glyph(glyph, cfg, rng)?));
        segments.push(Segment::Text(if vqa { glyph.vqa() } else { glyph.caption() }));
    }
    InterleavedDocument::new(segments)
}

/// `size` items of a synthetic task; item `i` depends only on `(seed, i)`.
pub fn synth_corpus(
    task: SynthTask,
    size: usize,
    seed: u64,
    cfg: &VisionConfig,
    vocab: &Vocab,
) -> Result<Vec<Example>> {
    if size == 0 {
        return Err(invalid("corpus size must be at least 1"));
    }
    let stream = match task {
        SynthTask::GlyphCaption => "corpus.caption",
        SynthTask::GlyphVqa => "corpus.vqa",
        SynthTask::InterleavedPages => "corpus.pages",
    };
    (0..size)
        .map(|i| {
            let mut rng = crate::rng::item(seed, stream, i as u64);
            Ok(match task {
                SynthTask::GlyphCaption | SynthTask::GlyphVqa => {
                    let glyph = Glyph::random(&mut rng);
                    let caption = if task == SynthTask::GlyphCaption {
                        glyph.caption()
                    } else {
                        glyph.vqa()
                    };
                    Example::Paired {
                        caption,
                        visual: render_glyph(glyph, cfg, &mut rng)?,
                        glyph: Some(glyph),
                    }
                }
                SynthTask::InterleavedPages => Example::Document(tag_document(&synth_page(cfg, &mut rng)?, vocab)),
            })
        })
        .collect()
}

/// Image-free text in the synthetic grammars, for language-model pretraining.
pub fn synth_text(size: usize, seed: u64) -> Vec<String> {
    (0..size)
        .map(|i| {
            let mut rng = crate::rng::item(seed, "corpus.text", i as u64);
            let mut parts = Vec::new();
            if rng.gen_bool(0.3) {
                parts.push(PAGE_INTROS[rng.gen_range(0..PAGE_INTROS.len())].to_string());
            }
            let vqa = rng.gen_bool(0.5);
            for _ in 0..rng.gen_range(1..=3) {
                let g = Glyph::random(&mut rng);
                parts.push(if vqa { g.vqa() } else { g.caption() });
            }
            parts.join(" ")
        })
        .collect()
}

/// One dataset of a mixture.
#[derive(Clone, Debug)]
pub struct MixtureDataset {
    pub name: String,
    pub weight: f64,
    pub batch_size: usize,
    pub instance: InstanceConfig,
    pub space_prob: f64,
    pub source: Arc<Vec<Example>>,
}

#[derive(Clone, Debug, Default)]
pub struct MixtureSpec {
    pub datasets: Vec<MixtureDataset>,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(invalid("mixture has no datasets"));
        }
        for d in &self.datasets {
            if !(d.weight > 0.0 && d.weight.is_finite()) {
                return Err(invalid(format!("dataset {} has weight {}", d.name, d.weight)));
            }
            if d.batch_size == 0 {
                return Err(invalid(format!("dataset {} has batch size 0", d.name)));
            }
            if d.source.is_empty() {
                return Err(Error::Empty("mixture dataset source"));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.datasets.iter().map(|d| d.weight).collect()
    }
}

/// One batch per dataset, items drawn uniformly with replacement.
pub fn next_mixture_batches(
    spec: &MixtureSpec,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<TrainingInstance>>> {
    spec.validate()?;
    spec.datasets
        .iter()
        .map(|d| {
            (0..d.batch_size)
                .map(|_| {
                    let ex = &d.source[rng.gen_range(0..d.source.len())];
                    ex.to_instance(&d.instance, d.space_prob, vocab, rng)
                })
                .collect()
        })
        .collect()
}

/// Image reference inside a JSONL record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Path(String),
    Inline { shape: Vec<usize>, base64: String },
    Glyph { glyph: GlyphRef },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphRef {
    pub color: String,
    pub shape: String,
    #[serde(default = "default_size")]
    pub size: String,
    #[serde(default)]
    pub seed: u64,
}

fn default_size() -> String {
    "large".into()
}

impl ImageRef {
    /// Loads and preprocesses the image. Paths resolve against `base`.
    /// Inline tensors are little-endian `f64` values in `[0, 1]`, shaped
    /// `[h, w, 3]`.
    pub fn load(&self, base: &Path, cfg: &VisionConfig) -> Result<VisualInput> {
        match self {
            ImageRef::Path(p) => {
                let img = image::open(base.join(p))?.to_rgb8();
                let (w, h) = img.dimensions();
                let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
                preprocess(&Tensor::new(vec![h as usize, w as usize, 3], data)?, cfg)
            }
            ImageRef::Inline { shape, base64 } => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(base64)
                    .map_err(|e| invalid(format!("inline image: {e}")))?;
                if bytes.len() % 8 != 0 {
                    return Err(invalid("inline image byte length is not a multiple of 8"));
                }
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                preprocess(&Tensor::new(shape.clone(), data)?, cfg)
            }
            ImageRef::Glyph { glyph } => {
                let g = Glyph::from_names(&glyph.color, &glyph.shape, &glyph.size)?;
                let mut rng = crate::rng::item(glyph.seed, "glyph", 0);
                render_glyph(g, cfg, &mut rng)
            }
        }
    }

    pub fn inline(raw: &Tensor) -> ImageRef {
        let bytes: Vec<u8> = raw.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        ImageRef::Inline {
            shape: raw.shape().to_vec(),
            base64: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRecord {
    text: String,
    images: Vec<ImageRef>,
}

/// Parses one document per line: `text` holds literal `<image>` markers that
/// are matched in order with `images`.
pub fn load_jsonl(path: &Path, cfg: &VisionConfig) -> Result<Vec<InterleavedDocument>> {
    let content = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut docs = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let parts: Vec<&str> = rec.text.split(crate::tokenizer::IMAGE).collect();
        if parts.len() - 1 != rec.images.len() {
            return Err(err(format!(
                "{} <image> markers but {} images",
                parts.len() - 1,
                rec.images.len()
            )));
        }
        let mut segments = Vec::new();
        for (k, part) in parts.iter().enumerate() {
            if k > 0 {
                let img = rec.images[k - 1].load(base, cfg).map_err(|e| err(e.to_string()))?;
                segments.push(Segment::Visual(img));
            }
            if !part.is_empty() {
                segments.push(Segment::Text(part.to_string()));
            }
        }
        match InterleavedDocument::new(segments) {
            Ok(d) => docs.push(d),
            Err(_) => continue,
        }
    }
    Ok(docs)
}
