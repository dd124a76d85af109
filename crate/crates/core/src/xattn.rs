//! Gated cross-attention/dense blocks inserted between frozen LM layers, and
//! the per-image admissibility mask derived from the text→image index φ.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::{Activation, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XattnConfig {
    pub heads: usize,
    pub ffw_mult: usize,
    /// Insert a gated block before every `every`-th frozen layer.
    pub every: usize,
    /// Single gated block before the middle frozen layer instead.
    pub middle_only: bool,
    /// Cross-attention without the dense sub-block (gate retained).
    pub vanilla: bool,
    /// Tokens attend to every image up to φ(ℓ) rather than only image φ(ℓ).
    pub all_previous: bool,
}

impl Default for XattnConfig {
    fn default() -> Self {
        XattnConfig {
            heads: 4,
            ffw_mult: 2,
            every: 1,
            middle_only: false,
            vanilla: false,
            all_previous: false,
        }
    }
}

/// `[L, N·R]` boolean admissibility matrix, row-major. Column `(i−1)·R + r`
/// is visual token `r` of image `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhiMask {
    pub admissible: Vec<bool>,
    pub rows: usize,
    pub cols: usize,
}

impl PhiMask {
    pub fn row(&self, l: usize) -> &[bool] {
        &self.admissible[l * self.cols..(l + 1) * self.cols]
    }
}

/// Token ℓ admits image `i`'s tokens iff `φ(ℓ) == i ≥ 1`, or `1 ≤ i ≤ φ(ℓ)`
/// with `all_previous`.
pub fn build_phi_mask(phi: &[usize], images: usize, per_image: usize, all_previous: bool) -> Result<PhiMask> {
    let cols = images * per_image;
    let mut admissible = vec![false; phi.len() * cols];
    for (l, &p) in phi.iter().enumerate() {
        if p > images {
            return Err(invalid(format!(
                "phi({l}) = {p} exceeds image count {images}"
            )));
        }
        if p == 0 {
            continue;
        }
        let first = if all_previous { 1 } else { p };
        for i in first..=p {
            let start = l * cols + (i - 1) * per_image;
            admissible[start..start + per_image].fill(true);
        }
    }
    Ok(PhiMask {
        admissible,
        rows: phi.len(),
        cols,
    })
}

pub fn init_gated_block(store: &mut ParamStore, prefix: &str, d: usize, cfg: &XattnConfig, rng: &mut impl Rng) {
    nn::init_layer_norm(store, &format!("{prefix}.ln_q"), d);
    nn::init_layer_norm(store, &format!("{prefix}.ln_kv"), d);
    nn::init_attention(store, rng, &format!("{prefix}.attn"), d);
    store.insert(format!("{prefix}.alpha_attn"), Tensor::scalar(0.0));
    if !cfg.vanilla {
        nn::init_layer_norm(store, &format!("{prefix}.ln_ffw"), d);
        nn::init_ffw(store, rng, &format!("{prefix}.ffw"), d, d * cfg.ffw_mult);
        store.insert(format!("{prefix}.alpha_ffw"), Tensor::scalar(0.0));
    }
}

/// `y = x + tanh(α_attn)·XAttn(LN(x), LN(visual), mask)`, then
/// `y + tanh(α_ffw)·FFW(LN(y))` unless the block is vanilla.
///
/// `text` and `visual` hold `masks.len()` instances stacked row-wise; each
/// instance attends only to its own visual rows. Without visual tokens the
/// cross-attention branch is zero.
pub fn gated_block_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    text: Var,
    visual: Option<Var>,
    masks: &[PhiMask],
    cfg: &XattnConfig,
) -> Result<Var> {
    let (l, d) = (g.value(text).rows(), g.value(text).cols());
    let gate = g.param(store, &format!("{prefix}.alpha_attn"))?;
    let gate = g.tanh(gate);
    let attended = match visual {
        None => g.constant(Tensor::zeros(vec![l, d])),
        Some(visual) => {
            let nv = g.value(visual).rows();
            let b = masks.len();
            if b == 0 || l % b != 0 || nv % b != 0 {
                return Err(shape_err(
                    "gated_block_forward",
                    format!("{b} masks for {l} tokens and {nv} visual tokens"),
                ));
            }
            let mut flat = Vec::with_capacity(l * nv / b);
            for m in masks {
                if m.rows != l / b || m.cols != nv / b {
                    return Err(shape_err(
                        "gated_block_forward",
                        format!(
                            "mask [{}, {}] for {} tokens and {} visual tokens",
                            m.rows,
                            m.cols,
                            l / b,
                            nv / b
                        ),
                    ));
                }
                flat.extend_from_slice(&m.admissible);
            }
            let q = nn::layer_norm(g, store, &format!("{prefix}.ln_q"), text)?;
            let kv = nn::layer_norm(g, store, &format!("{prefix}.ln_kv"), visual)?;
            nn::attention(g, store, &format!("{prefix}.attn"), q, kv, cfg.heads, b, Some(&flat))?
        }
    };
    let gated = g.scale_by(attended, gate)?;
    let y = g.add(text, gated)?;
    if cfg.vanilla {
        return Ok(y);
    }
    let gate = g.param(store, &format!("{prefix}.alpha_ffw"))?;
    let gate = g.tanh(gate);
    let n = nn::layer_norm(g, store, &format!("{prefix}.ln_ffw"), y)?;
    let f = nn::ffw(g, store, &format!("{prefix}.ffw"), n, Activation::SquaredRelu)?;
    let gated = g.scale_by(f, gate)?;
    g.add(y, gated)
}

/// `|tanh(α)|` for the attention and dense gates of one block.
pub fn gate_magnitudes(store: &ParamStore, prefix: &str) -> Result<(f64, f64)> {
    let attn = store.get(&format!("{prefix}.alpha_attn"))?.item()?.tanh().abs();
    let ffw = match store.get(&format!("{prefix}.alpha_ffw")) {
        Ok(t) => t.item()?.tanh().abs(),
        Err(_) => 0.0,
    };
    Ok((attn, ffw))
}
