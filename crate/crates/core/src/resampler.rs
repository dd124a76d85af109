//! Perceiver resampler: a fixed set of learnt latent queries cross-attends to
//! a variable-size feature grid and emits exactly `latents` visual tokens.
//!
//! Each layer attends from the current latents to the concatenation of the
//! grid features (first) and the current latents (appended), then applies a
//! Squared-ReLU feed-forward block; both sub-blocks are residual. Queries get
//! their own layer norm; keys and values share one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{normal, ParamStore};
use crate::tensor::{Activation, Tensor};
use crate::vision::{temporal_embed_var, GridVar, VisualFeatureGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResamplerConfig {
    /// Number of output tokens `R`.
    pub latents: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffw_mult: usize,
    /// Rows of the learnt temporal embedding table (`T_train`).
    pub max_frames: usize,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        ResamplerConfig {
            latents: 8,
            layers: 2,
            heads: 1,
            ffw_mult: 2,
            max_frames: 8,
        }
    }
}

/// Exactly `R` visual tokens for one visual input.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokenSet {
    pub tokens: Tensor,
    pub source: usize,
}

pub fn init_resampler(
    store: &mut ParamStore,
    cfg: &ResamplerConfig,
    vision_width: usize,
    width: usize,
    rng: &mut impl Rng,
) {
    store.insert("resampler.latents", normal(vec![cfg.latents, width], 1.0, rng));
    store.insert("resampler.temporal", normal(vec![cfg.max_frames.max(1), vision_width], 0.02, rng));
    nn::init_linear(store, rng, "resampler.proj", vision_width, width, true);
    for l in 0..cfg.layers {
        let p = format!("resampler.layer{l}");
        nn::init_layer_norm(store, &format!("{p}.ln_q"), width);
        nn::init_layer_norm(store, &format!("{p}.ln_kv"), width);
        nn::init_attention(store, rng, &format!("{p}.attn"), width);
        nn::init_layer_norm(store, &format!("{p}.ln_ffw"), width);
        nn::init_ffw(store, rng, &format!("{p}.ffw"), width, width * cfg.ffw_mult);
    }
}

/// Resamples a batch of grids. Returns `[B·R, d]` with each input's tokens
/// contiguous, in input order.
pub fn resample_batch(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ResamplerConfig,
    grids: &[GridVar],
) -> Result<Var> {
    let Some(first) = grids.first() else {
        return Err(Error::Empty("resampler input"));
    };
    let uniform = grids
        .iter()
        .all(|gr| gr.frames * gr.spatial == first.frames * first.spatial);
    if !uniform {
        let parts = grids
            .iter()
            .map(|gr| resample_batch(g, store, cfg, std::slice::from_ref(gr)))
            .collect::<Result<Vec<_>>>()?;
        return g.concat_rows(&parts);
    }
    let b = grids.len();
    let table = g.param(store, "resampler.temporal")?;
    let proj_w = store.get("resampler.proj.w")?;
    let mut feats = Vec::with_capacity(b);
    for gr in grids {
        if gr.frames * gr.spatial == 0 {
            return Err(Error::Empty("feature grid"));
        }
        if g.value(gr.var).cols() != proj_w.rows() {
            return Err(shape_err(
                "resample",
                format!(
                    "grid width {} but projection expects {}",
                    g.value(gr.var).cols(),
                    proj_w.rows()
                ),
            ));
        }
        feats.push(temporal_embed_var(g, *gr, table)?);
    }
    let stacked = if b == 1 { feats[0] } else { g.concat_rows(&feats)? };
    let xf = nn::linear(g, store, "resampler.proj", stacked)?;
    let n_rows = first.frames * first.spatial;

    let latents = g.param(store, "resampler.latents")?;
    let r = g.value(latents).rows();
    let mut x = if b == 1 {
        latents
    } else {
        g.concat_rows(&vec![latents; b])?
    };
    for l in 0..cfg.layers {
        let p = format!("resampler.layer{l}");
        let kv_in = if b == 1 {
            g.concat_rows(&[xf, x])?
        } else {
            let mut parts = Vec::with_capacity(2 * b);
            for i in 0..b {
                parts.push(g.slice_rows(xf, i * n_rows, (i + 1) * n_rows)?);
                parts.push(g.slice_rows(x, i * r, (i + 1) * r)?);
            }
            g.concat_rows(&parts)?
        };
        let q = nn::layer_norm(g, store, &format!("{p}.ln_q"), x)?;
        let kv = nn::layer_norm(g, store, &format!("{p}.ln_kv"), kv_in)?;
        let a = nn::attention(g, store, &format!("{p}.attn"), q, kv, cfg.heads, b, None)?;
        x = g.add(x, a)?;
        let n = nn::layer_norm(g, store, &format!("{p}.ln_ffw"), x)?;
        let f = nn::ffw(g, store, &format!("{p}.ffw"), n, Activation::SquaredRelu)?;
        x = g.add(x, f)?;
    }
    Ok(x)
}

/// Value-level resampling of one grid (no gradients).
pub fn resample(store: &ParamStore, cfg: &ResamplerConfig, grid: &VisualFeatureGrid) -> Result<VisualTokenSet> {
    let mut g = Graph::no_grad();
    let var = g.constant(grid.features.clone());
    let out = resample_batch(
        &mut g,
        store,
        cfg,
        &[GridVar {
            var,
            frames: grid.frames,
            spatial: grid.spatial,
        }],
    )?;
    Ok(VisualTokenSet {
        tokens: g.value(out).clone(),
        source: 0,
    })
}
