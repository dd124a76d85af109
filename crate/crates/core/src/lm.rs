//! Decoder-only language model and the assembled Flamingo stack.
//!
//! Parameter layout:
//! - `lm.*` the (frozen) text model: `lm.embed`, `lm.pos`, `lm.block{j}.*`,
//!   `lm.ln_f` and, when untied, `lm.head`.
//! - `eoc.embed` the learnt `<EOC>` row, substituted into the embedding and
//!   the tied output head.
//! - `vision.*`, `resampler.*` and `gated.{j}.*` for the gated block placed
//!   before frozen layer `j`.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::TrainingInstance;
use crate::error::{invalid, Error, Result};
use crate::graph::{causal_mask, Graph, Var};
use crate::nn;
use crate::params::{normal, ParamStore};
use crate::resampler::{init_resampler, resample_batch, ResamplerConfig};
use crate::tensor::{log_softmax_row, Activation, Tensor};
use crate::tokenizer::Vocab;
use crate::vision::{encode_batch, init_vision, VisionConfig, VisualInput};
use crate::xattn::{build_phi_mask, PhiMask, gate_magnitudes, gated_block_forward, init_gated_block, XattnConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffw_mult: usize,
    pub max_positions: usize,
    pub tied_head: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_model: 48,
            layers: 2,
            heads: 4,
            ffw_mult: 4,
            max_positions: 96,
            tied_head: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlamingoConfig {
    pub vision: VisionConfig,
    pub resampler: ResamplerConfig,
    pub lm: LmConfig,
    pub xattn: XattnConfig,
}

impl FlamingoConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        let lm = &self.lm;
        if lm.layers == 0 || lm.d_model == 0 || lm.heads == 0 || lm.d_model % lm.heads != 0 {
            return Err(Error::Config(format!(
                "lm: {} layers, width {}, {} heads",
                lm.layers, lm.d_model, lm.heads
            )));
        }
        if self.xattn.every == 0 {
            return Err(Error::Config("xattn.every must be at least 1".into()));
        }
        if self.xattn.heads == 0 || lm.d_model % self.xattn.heads != 0 {
            return Err(Error::Config("xattn.heads must divide lm.d_model".into()));
        }
        if self.resampler.latents == 0 || self.resampler.heads == 0 || lm.d_model % self.resampler.heads != 0 {
            return Err(Error::Config("resampler needs latents and heads dividing lm.d_model".into()));
        }
        Ok(())
    }
}

/// Frozen layers preceded by a gated block: `j % every == 0`, or only the
/// middle layer `layers / 2` when `middle_only` is set.
pub fn gated_schedule(layers: usize, every: usize, middle_only: bool) -> Vec<usize> {
    if middle_only {
        return vec![layers / 2];
    }
    (0..layers).filter(|j| j % every.max(1) == 0).collect()
}

/// Model that maps an instance to next-token logits `[L, V]`.
pub trait SequenceModel {
    fn vocab_size(&self) -> usize;

    fn logits(&self, instance: &TrainingInstance) -> Result<Tensor>;

    /// Logits for several instances; implementations may batch.
    fn logits_many(&self, instances: &[TrainingInstance]) -> Result<Vec<Tensor>> {
        instances.iter().map(|i| self.logits(i)).collect()
    }
}

/// `Σ_{ℓ∈range} log softmax(logits[ℓ−1])[y_ℓ]`.
pub fn sequence_log_likelihood(
    model: &impl SequenceModel,
    instance: &TrainingInstance,
    range: Range<usize>,
) -> Result<f64> {
    let logits = model.logits(instance)?;
    log_likelihood_from_logits(&logits, &instance.text, range)
}

pub fn log_likelihood_from_logits(logits: &Tensor, text: &[usize], range: Range<usize>) -> Result<f64> {
    if range.is_empty() {
        return Err(Error::Empty("score range"));
    }
    if range.start == 0 || range.end > text.len() || logits.rows() < range.end - 1 {
        return Err(invalid(format!(
            "score range {range:?} outside [1, {})",
            text.len()
        )));
    }
    let mut total = 0.0;
    for l in range {
        let lp = log_softmax_row(logits.row(l - 1));
        let y = text[l];
        if y >= lp.len() {
            return Err(Error::TokenOutOfRange { id: y, vocab: lp.len() });
        }
        total += lp[y];
    }
    Ok(total)
}

/// Builds the cross-attention admissibility mask from φ, the image count,
/// tokens per image and the all-previous flag.
pub type MaskRule = fn(&[usize], usize, usize, bool) -> Result<PhiMask>;

#[derive(Clone, Debug)]
pub struct FlamingoModel {
    pub config: FlamingoConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    /// Train and score through the text model alone.
    pub text_only: bool,
    /// Mask construction used by the forward pass.
    pub mask_rule: MaskRule,
    gated_layers: Vec<usize>,
}

/// Parameter counts of one component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ComponentCount {
    pub component: String,
    pub total: usize,
    pub trainable: usize,
}

pub const COMPONENTS: [&str; 5] = ["vision", "resampler", "gated", "lm", "eoc"];

impl FlamingoModel {
    /// Initializes every component. Vision and LM start frozen; the
    /// resampler, gated blocks and `<EOC>` row are trainable.
    pub fn assemble(config: FlamingoConfig, vocab: Vocab, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.lm.d_model;
        init_vision(&mut store, &config.vision, rng)?;
        init_resampler(&mut store, &config.resampler, config.vision.width, d, rng);
        init_lm(&mut store, &config.lm, vocab.len(), rng);
        store.insert("eoc.embed", normal(vec![1, d], 0.1, rng));
        let gated_layers = gated_schedule(config.lm.layers, config.xattn.every, config.xattn.middle_only);
        for &j in &gated_layers {
            init_gated_block(&mut store, &format!("gated.{j}"), d, &config.xattn, rng);
        }
        store.freeze_prefix("vision.", &[]);
        store.freeze_prefix("lm.", &[]);
        Ok(FlamingoModel {
            config,
            vocab,
            store,
            text_only: false,
            mask_rule: build_phi_mask,
            gated_layers,
        })
    }

    /// Rebuilds a model around existing parameters (e.g. a loaded checkpoint).
    pub fn from_parts(config: FlamingoConfig, vocab: Vocab, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let gated_layers = gated_schedule(config.lm.layers, config.xattn.every, config.xattn.middle_only);
        for &j in &gated_layers {
            store.get(&format!("gated.{j}.alpha_attn"))?;
        }
        if store.get("lm.embed")?.rows() != vocab.len() {
            return Err(Error::Config("embedding rows differ from vocabulary size".into()));
        }
        Ok(FlamingoModel {
            config,
            vocab,
            store,
            text_only: false,
            mask_rule: build_phi_mask,
            gated_layers,
        })
    }

    pub fn gated_layers(&self) -> &[usize] {
        &self.gated_layers
    }

    pub fn component_counts(&self) -> Vec<ComponentCount> {
        COMPONENTS
            .iter()
            .map(|c| {
                let prefix = format!("{c}.");
                let total = self.store.count_values(&prefix);
                let trainable = self
                    .store
                    .iter()
                    .filter(|(n, _)| n.starts_with(&prefix) && !self.store.is_frozen(n))
                    .map(|(_, t)| t.len())
                    .sum();
                ComponentCount {
                    component: c.to_string(),
                    total,
                    trainable,
                }
            })
            .collect()
    }

    /// `(|tanh α_attn|, |tanh α_ffw|)` per gated layer.
    pub fn gate_stats(&self) -> Result<Vec<(usize, f64, f64)>> {
        self.gated_layers
            .iter()
            .map(|&j| {
                let (a, f) = gate_magnitudes(&self.store, &format!("gated.{j}"))?;
                Ok((j, a, f))
            })
            .collect()
    }

    /// Logits `[B·L, V]` for instances of equal length stacked in order.
    /// Without `with_gated` only the text model runs.
    pub fn forward(&self, g: &mut Graph, batch: &[&TrainingInstance], with_gated: bool) -> Result<Var> {
        let Some(first) = batch.first() else {
            return Err(Error::Empty("forward batch"));
        };
        let l = first.len();
        if batch.iter().any(|i| i.len() != l) {
            let parts = batch
                .iter()
                .map(|i| self.forward(g, std::slice::from_ref(i), with_gated))
                .collect::<Result<Vec<_>>>()?;
            return g.concat_rows(&parts);
        }
        let cfg = &self.config.lm;
        let v = self.vocab.len();
        if l == 0 {
            return Err(Error::Empty("instance text"));
        }
        if l > cfg.max_positions {
            return Err(invalid(format!("{l} tokens exceed {} positions", cfg.max_positions)));
        }
        for inst in batch {
            inst.validate(v)?;
        }
        let b = batch.len();
        let ids: Vec<usize> = batch.iter().flat_map(|i| i.text.iter().copied()).collect();
        let embed = self.embedding(g)?;
        let x = g.gather_rows(embed, &ids)?;
        let pos = g.param(&self.store, "lm.pos")?;
        let pos_ids: Vec<usize> = (0..b * l).map(|r| r % l).collect();
        let pos = g.gather_rows(pos, &pos_ids)?;
        let mut x = g.add(x, pos)?;

        let visual = if with_gated && !self.gated_layers.is_empty() {
            Some(self.visual_tokens(g, batch)?)
        } else {
            None
        };
        let causal = causal_mask(l);
        for j in 0..cfg.layers {
            if let Some((vis, masks)) = &visual {
                if self.gated_layers.contains(&j) {
                    x = gated_block_forward(g, &self.store, &format!("gated.{j}"), x, *vis, masks, &self.config.xattn)?;
                }
            }
            x = lm_block(g, &self.store, cfg, j, x, b, &causal)?;
        }
        let h = nn::layer_norm(g, &self.store, "lm.ln_f", x)?;
        if cfg.tied_head {
            g.matmul_nt(h, embed)
        } else {
            nn::linear(g, &self.store, "lm.head", h)
        }
    }

    /// Token embedding table with the learnt `<EOC>` row substituted.
    fn embedding(&self, g: &mut Graph) -> Result<Var> {
        let embed = g.param(&self.store, "lm.embed")?;
        let eoc = g.param(&self.store, "eoc.embed")?;
        g.replace_row(embed, self.vocab.specials().eoc, eoc)
    }

    /// Visual tokens for images `1..=max φ` of each instance, padded with zero
    /// rows to a common image count, and the matching φ masks.
    fn visual_tokens(
        &self,
        g: &mut Graph,
        batch: &[&TrainingInstance],
    ) -> Result<(Option<Var>, Vec<PhiMask>)> {
        let r = self.config.resampler.latents;
        let d = self.config.lm.d_model;
        let needs: Vec<usize> = batch.iter().map(|i| i.max_index()).collect();
        let nmax = needs.iter().copied().max().unwrap_or(0);
        let masks = batch
            .iter()
            .map(|i| (self.mask_rule)(&i.indices, nmax, r, self.config.xattn.all_previous))
            .collect::<Result<Vec<_>>>()?;
        if nmax == 0 {
            return Ok((None, masks));
        }
        let images: Vec<&VisualInput> = batch
            .iter()
            .zip(&needs)
            .flat_map(|(i, &n)| i.images[..n].iter())
            .collect();
        let vis_tokens = if images.iter().all(|v| v.frames() == images[0].frames()) {
            let (_, grids) = encode_batch(g, &self.store, &self.config.vision, &images)?;
            resample_batch(g, &self.store, &self.config.resampler, &grids)?
        } else {
            let mut parts = Vec::with_capacity(images.len());
            for img in &images {
                let (_, grids) = encode_batch(g, &self.store, &self.config.vision, std::slice::from_ref(img))?;
                parts.push(resample_batch(g, &self.store, &self.config.resampler, &grids)?);
            }
            g.concat_rows(&parts)?
        };
        if needs.iter().all(|&n| n == nmax) {
            return Ok((Some(vis_tokens), masks));
        }
        let mut parts = Vec::new();
        let mut row = 0;
        for &n in &needs {
            if n > 0 {
                parts.push(g.slice_rows(vis_tokens, row, row + n * r)?);
                row += n * r;
            }
            if n < nmax {
                parts.push(g.constant(Tensor::zeros(vec![(nmax - n) * r, d])));
            }
        }
        Ok((Some(g.concat_rows(&parts)?), masks))
    }

    /// Mean next-token NLL over every non-pad target of the batch.
    pub fn loss(&self, g: &mut Graph, batch: &[TrainingInstance]) -> Result<Var> {
        let refs: Vec<&TrainingInstance> = batch.iter().collect();
        self.loss_refs(g, &refs, true)
    }

    pub fn loss_refs(&self, g: &mut Graph, batch: &[&TrainingInstance], with_gated: bool) -> Result<Var> {
        let logits = self.forward(g, batch, with_gated)?;
        let (targets, weights) = next_token_targets(batch, self.vocab.specials().pad)?;
        g.cross_entropy(logits, &targets, &weights, 0.0)
    }

    /// Logits of the text model alone (no visual conditioning).
    pub fn lm_logits(&self, instance: &TrainingInstance) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let out = self.forward(&mut g, &[instance], false)?;
        Ok(g.value(out).clone())
    }
}

/// Per-row targets `y_{ℓ+1}` and weights `1/count` for non-pad targets; the
/// last position of every instance has no target.
pub fn next_token_targets(batch: &[&TrainingInstance], pad: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for inst in batch {
        let l = inst.len();
        for p in 0..l {
            let t = if p + 1 < l { inst.text[p + 1] } else { pad };
            targets.push(t);
            weights.push(if t == pad { 0.0 } else { 1.0 });
        }
    }
    let count = weights.iter().filter(|w| **w > 0.0).count();
    if count == 0 {
        return Err(invalid("batch has no scored tokens"));
    }
    weights.iter_mut().for_each(|w| *w /= count as f64);
    Ok((targets, weights))
}

impl SequenceModel for FlamingoModel {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn logits(&self, instance: &TrainingInstance) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let out = self.forward(&mut g, &[instance], !self.text_only)?;
        Ok(g.value(out).clone())
    }

    fn logits_many(&self, instances: &[TrainingInstance]) -> Result<Vec<Tensor>> {
        if instances.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::no_grad();
        let refs: Vec<&TrainingInstance> = instances.iter().collect();
        let out = self.forward(&mut g, &refs, !self.text_only)?;
        let all = g.value(out);
        let mut row = 0;
        instances
            .iter()
            .map(|i| {
                let t = all.slice_rows(row, row + i.len());
                row += i.len();
                t
            })
            .collect()
    }
}

pub fn init_lm(store: &mut ParamStore, cfg: &LmConfig, vocab_size: usize, rng: &mut impl Rng) {
    let d = cfg.d_model;
    store.insert("lm.embed", normal(vec![vocab_size, d], 0.3, rng));
    store.insert("lm.pos", normal(vec![cfg.max_positions, d], 0.1, rng));
    for j in 0..cfg.layers {
        let p = format!("lm.block{j}");
        nn::init_layer_norm(store, &format!("{p}.ln_attn"), d);
        nn::init_attention(store, rng, &format!("{p}.attn"), d);
        nn::init_layer_norm(store, &format!("{p}.ln_ffw"), d);
        nn::init_ffw(store, rng, &format!("{p}.ffw"), d, d * cfg.ffw_mult);
    }
    nn::init_layer_norm(store, "lm.ln_f", d);
    if !cfg.tied_head {
        nn::init_linear(store, rng, "lm.head", d, vocab_size, false);
    }
}

/// Pre-norm causal self-attention and GeLU feed-forward, both residual.
fn lm_block(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &LmConfig,
    j: usize,
    x: Var,
    blocks: usize,
    causal: &[bool],
) -> Result<Var> {
    let p = format!("lm.block{j}");
    let n = nn::layer_norm(g, store, &format!("{p}.ln_attn"), x)?;
    let a = nn::attention(g, store, &format!("{p}.attn"), n, n, cfg.heads, blocks, Some(causal))?;
    let x = g.add(x, a)?;
    let n = nn::layer_norm(g, store, &format!("{p}.ln_ffw"), x)?;
    let f = nn::ffw(g, store, &format!("{p}.ffw"), n, Activation::Gelu)?;
    g.add(x, f)
}

/// Text-only instance (no images).
pub fn text_instance(text: Vec<usize>) -> TrainingInstance {
    let indices = vec![0; text.len()];
    TrainingInstance {
        images: Vec::new(),
        max_images: 0,
        text,
        indices,
    }
}
