//! Toy vision encoder: mean-padded resizing, standardization, a patch-embedding
//! backbone applied independently per frame, and learnt temporal embeddings
//! with linear interpolation to unseen clip lengths.
//!
//! The backbone is patch embedding plus a learnt spatial position table,
//! followed by residual blocks of frame-local self-attention and a GeLU MLP.
//! Frames are flattened frame-major, then raster order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::{Activation, Tensor};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Feature width `d_v`.
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 16,
            patch_size: 4,
            width: 48,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            pixel_mean: [0.25, 0.25, 0.25],
            pixel_std: [0.4, 0.4, 0.4],
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(invalid(format!(
                "resolution {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(invalid(format!(
                "vision heads {} do not divide width {}",
                self.heads, self.width
            )));
        }
        Ok(())
    }

    pub fn spatial_positions(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualKind {
    Image,
    Video,
}

/// Preprocessed pixels `[T, H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualInput {
    pub pixels: Tensor,
    pub kind: VisualKind,
}

impl VisualInput {
    /// Wraps an `[H, W, C]` image as a single-frame input.
    pub fn image(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[2] != CHANNELS {
            return Err(shape_err("VisualInput::image", format!("{s:?}")));
        }
        let shape = vec![1, s[0], s[1], s[2]];
        Ok(VisualInput {
            pixels: pixels.reshape(shape)?,
            kind: VisualKind::Image,
        })
    }

    pub fn video(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 4 || s[3] != CHANNELS || s[0] == 0 {
            return Err(shape_err("VisualInput::video", format!("{s:?}")));
        }
        Ok(VisualInput {
            pixels,
            kind: VisualKind::Video,
        })
    }

    /// All-zero placeholder used to pad instances to a fixed image count.
    pub fn zeros(frames: usize, size: usize) -> Self {
        VisualInput {
            pixels: Tensor::zeros(vec![frames, size, size, CHANNELS]),
            kind: if frames == 1 {
                VisualKind::Image
            } else {
                VisualKind::Video
            },
        }
    }

    pub fn frames(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// The single frame `t` as a one-frame input.
    pub fn frame(&self, t: usize) -> Result<VisualInput> {
        let per = self.height() * self.width() * CHANNELS;
        if t >= self.frames() {
            return Err(invalid(format!("frame {t} of {}", self.frames())));
        }
        let data = self.pixels.data()[t * per..(t + 1) * per].to_vec();
        Ok(VisualInput {
            pixels: Tensor::new(vec![1, self.height(), self.width(), CHANNELS], data)?,
            kind: VisualKind::Image,
        })
    }
}

/// Flattened spatio-temporal features `[T·S, d_v]`, frame-major then raster.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatureGrid {
    pub features: Tensor,
    pub frames: usize,
    pub spatial: usize,
}

/// A feature grid living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GridVar {
    pub var: Var,
    pub frames: usize,
    pub spatial: usize,
}

/// Resizes the larger side of an `[h, w, 3]` image to `target` with bilinear
/// sampling (half-pixel centers), keeps the aspect ratio, and fills the
/// remaining bottom/right area with the image's per-channel mean.
pub fn resize_with_pad(raw: &Tensor, target: usize) -> Result<Tensor> {
    if target == 0 {
        return Err(invalid("resize target must be positive"));
    }
    let s = raw.shape();
    if s.len() != 3 || s[2] != CHANNELS || s[0] == 0 || s[1] == 0 {
        return Err(shape_err("resize_with_pad", format!("{s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let px = |y: usize, x: usize, c: usize| raw.data()[(y * w + x) * CHANNELS + c];
    let mut mean = [0.0; CHANNELS];
    for y in 0..h {
        for x in 0..w {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += px(y, x, c);
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= (h * w) as f64);

    let scale = target as f64 / h.max(w) as f64;
    let nh = ((h as f64 * scale).round() as usize).clamp(1, target);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, target);
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let mut out = vec![0.0; target * target * CHANNELS];
    for y in 0..target {
        for x in 0..target {
            let dst = &mut out[(y * target + x) * CHANNELS..(y * target + x + 1) * CHANNELS];
            if y >= nh || x >= nw {
                dst.copy_from_slice(&mean);
                continue;
            }
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            for (c, d) in dst.iter_mut().enumerate() {
                let top = px(y0, x0, c) * (1.0 - tx) + px(y0, x1, c) * tx;
                let bot = px(y1, x0, c) * (1.0 - tx) + px(y1, x1, c) * tx;
                *d = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Tensor::new(vec![target, target, CHANNELS], out)
}

/// Per-channel `(x − mean) / std` over a tensor whose last extent is 3.
pub fn standardize(pixels: &Tensor, mean: [f64; 3], std: [f64; 3]) -> Result<Tensor> {
    if pixels.cols() != CHANNELS {
        return Err(shape_err("standardize", format!("{:?}", pixels.shape())));
    }
    let mut out = pixels.clone();
    for px in out.data_mut().chunks_mut(CHANNELS) {
        for c in 0..CHANNELS {
            px[c] = (px[c] - mean[c]) / std[c];
        }
    }
    Ok(out)
}

/// Full preprocessing of a raw `[h, w, 3]` image with values in `[0, 1]`.
pub fn preprocess(raw: &Tensor, cfg: &VisionConfig) -> Result<VisualInput> {
    let resized = resize_with_pad(raw, cfg.image_size)?;
    VisualInput::image(standardize(&resized, cfg.pixel_mean, cfg.pixel_std)?)
}

/// Rows of `p·p·3` raw patch values, one per patch, for every frame.
pub fn patchify(v: &VisualInput, patch: usize) -> Result<Tensor> {
    let (t, h, w) = (v.frames(), v.height(), v.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(invalid(format!(
            "resolution {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row_len = patch * patch * CHANNELS;
    let src = v.pixels.data();
    let mut out = Vec::with_capacity(t * gh * gw * row_len);
    for f in 0..t {
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = ((f * h + y) * w + px * patch) * CHANNELS;
                    out.extend_from_slice(&src[start..start + patch * CHANNELS]);
                }
            }
        }
    }
    Tensor::new(vec![t * gh * gw, row_len], out)
}

pub fn init_vision(store: &mut ParamStore, cfg: &VisionConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.width;
    nn::init_linear(store, rng, "vision.patch", cfg.patch_size * cfg.patch_size * CHANNELS, d, true);
    store.insert("vision.pos", crate::params::normal(vec![cfg.spatial_positions(), d], 0.02, rng));
    for b in 0..cfg.blocks {
        let p = format!("vision.block{b}");
        nn::init_layer_norm(store, &format!("{p}.ln_attn"), d);
        nn::init_attention(store, rng, &format!("{p}.attn"), d);
        nn::init_layer_norm(store, &format!("{p}.ln_mlp"), d);
        nn::init_ffw(store, rng, &format!("{p}.mlp"), d, d * cfg.mlp_ratio);
    }
    Ok(())
}

/// Encodes a batch of same-resolution visual inputs. Returns one grid per
/// input; all grids share a single stacked node (rows in input order).
pub fn encode_batch(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &VisionConfig,
    inputs: &[&VisualInput],
) -> Result<(Var, Vec<GridVar>)> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(crate::Error::Empty("visual input batch"));
    }
    let mut patches = Vec::with_capacity(inputs.len());
    let mut grids = Vec::with_capacity(inputs.len());
    let mut total_frames = 0;
    for v in inputs {
        if v.height() != cfg.image_size || v.width() != cfg.image_size {
            return Err(shape_err(
                "encode_frames",
                format!(
                    "input {}x{}, configured resolution {}",
                    v.height(),
                    v.width(),
                    cfg.image_size
                ),
            ));
        }
        patches.push(patchify(v, cfg.patch_size)?);
        total_frames += v.frames();
    }
    let spatial = cfg.spatial_positions();
    let x = g.constant(Tensor::concat_rows(&patches)?);
    let h = nn::linear(g, store, "vision.patch", x)?;
    let pos = g.param(store, "vision.pos")?;
    let pos_rows: Vec<usize> = (0..total_frames * spatial).map(|r| r % spatial).collect();
    let pos = g.gather_rows(pos, &pos_rows)?;
    let mut h = g.add(h, pos)?;
    for b in 0..cfg.blocks {
        let p = format!("vision.block{b}");
        let n = nn::layer_norm(g, store, &format!("{p}.ln_attn"), h)?;
        let a = nn::attention(g, store, &format!("{p}.attn"), n, n, cfg.heads, total_frames, None)?;
        h = g.add(h, a)?;
        let n = nn::layer_norm(g, store, &format!("{p}.ln_mlp"), h)?;
        let m = nn::ffw(g, store, &format!("{p}.mlp"), n, Activation::Gelu)?;
        h = g.add(h, m)?;
    }
    let mut row = 0;
    for v in inputs {
        let rows = v.frames() * spatial;
        let var = if inputs.len() == 1 {
            h
        } else {
            g.slice_rows(h, row, row + rows)?
        };
        grids.push(GridVar {
            var,
            frames: v.frames(),
            spatial,
        });
        row += rows;
    }
    Ok((h, grids))
}

/// Encodes one visual input without recording gradients.
pub fn encode_frames(store: &ParamStore, cfg: &VisionConfig, v: &VisualInput) -> Result<VisualFeatureGrid> {
    let mut g = Graph::no_grad();
    let (_, grids) = encode_batch(&mut g, store, cfg, &[v])?;
    let gv = grids[0];
    Ok(VisualFeatureGrid {
        features: g.value(gv.var).clone(),
        frames: gv.frames,
        spatial: gv.spatial,
    })
}

/// `[T_eval, T_train]` row-stochastic interpolation weights. Matching lengths
/// give the identity; otherwise frame `t` samples the table at fractional
/// position `t·(T_train−1)/(T_eval−1)` (endpoints anchored).
pub fn temporal_weights(t_train: usize, t_eval: usize) -> Result<Tensor> {
    if t_train == 0 {
        return Err(crate::Error::Empty("temporal embedding table"));
    }
    if t_eval == 0 {
        return Err(invalid("evaluation clip length must be positive"));
    }
    let mut w = vec![0.0; t_eval * t_train];
    for t in 0..t_eval {
        if t_eval == t_train {
            w[t * t_train + t] = 1.0;
            continue;
        }
        let pos = if t_eval == 1 {
            0.0
        } else {
            t as f64 * (t_train - 1) as f64 / (t_eval - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t_train - 1);
        let frac = pos - lo as f64;
        w[t * t_train + lo] += 1.0 - frac;
        if frac > 0.0 {
            w[t * t_train + hi] += frac;
        }
    }
    Tensor::new(vec![t_eval, t_train], w)
}

/// Adds the (possibly interpolated) temporal embedding of each frame to all of
/// that frame's feature rows, on a graph.
pub fn temporal_embed_var(g: &mut Graph, grid: GridVar, table: Var) -> Result<Var> {
    let t_train = g.value(table).rows();
    let w = g.constant(temporal_weights(t_train, grid.frames)?);
    let per_frame = g.matmul(w, table)?;
    let frame_of_row: Vec<usize> = (0..grid.frames * grid.spatial).map(|r| r / grid.spatial).collect();
    let e = g.gather_rows(per_frame, &frame_of_row)?;
    g.add(grid.var, e)
}

/// Value-level temporal embedding.
pub fn temporal_embed(grid: &VisualFeatureGrid, table: &Tensor, t_eval: usize) -> Result<VisualFeatureGrid> {
    if t_eval != grid.frames {
        return Err(invalid(format!(
            "grid has {} frames, requested {t_eval}",
            grid.frames
        )));
    }
    let mut g = Graph::no_grad();
    let var = g.constant(grid.features.clone());
    let tv = g.constant(table.clone());
    let out = temporal_embed_var(
        &mut g,
        GridVar {
            var,
            frames: grid.frames,
            spatial: grid.spatial,
        },
        tv,
    )?;
    Ok(VisualFeatureGrid {
        features: g.value(out).clone(),
        frames: grid.frames,
        spatial: grid.spatial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(size: usize, rng: &mut impl Rng) -> VisualInput {
        let data = (0..size * size * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        VisualInput::image(Tensor::new(vec![size, size, 3], data).unwrap()).unwrap()
    }

    #[test]
    fn resize_identity_at_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = random_image(4, &mut rng).pixels.reshape(vec![4, 4, 3]).unwrap();
        assert_eq!(resize_with_pad(&raw, 4).unwrap(), raw);
    }

    #[test]
    fn resize_wide_image_pads_bottom_with_mean() {
        // 2 rows x 4 cols, target 4 -> content occupies the top two rows.
        let mut data = Vec::new();
        for i in 0..8 {
            data.extend_from_slice(&[i as f64, 0.5, 1.0]);
        }
        let raw = Tensor::new(vec![2, 4, 3], data).unwrap();
        let out = resize_with_pad(&raw, 4).unwrap();
        let mean = [3.5, 0.5, 1.0];
        for y in 2..4 {
            for x in 0..4 {
                let p = &out.data()[(y * 4 + x) * 3..(y * 4 + x + 1) * 3];
                assert_eq!(p, &mean);
            }
        }
        assert_eq!(&out.data()[0..3], &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let raw = Tensor::full(vec![3, 6, 3], 0.7);
        let out = resize_with_pad(&raw, 4).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(resize_with_pad(&raw, 0).is_err());
    }

    #[test]
    fn grid_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = VisionConfig {
            image_size: 16,
            patch_size: 8,
            width: 8,
            heads: 2,
            ..VisionConfig::default()
        };
        let mut store = ParamStore::new();
        init_vision(&mut store, &cfg, &mut rng).unwrap();
        let img = random_image(16, &mut rng);
        let grid = encode_frames(&store, &cfg, &img).unwrap();
        assert_eq!(grid.features.shape(), &[4, 8]);

        let frames: Vec<VisualInput> = (0..8).map(|_| random_image(16, &mut rng)).collect();
        let stacked = Tensor::concat_rows(
            &frames.iter().map(|f| f.pixels.reshape(vec![16 * 16, 3]).unwrap()).collect::<Vec<_>>(),
        )
        .unwrap();
        let video = VisualInput::video(stacked.reshape(vec![8, 16, 16, 3]).unwrap()).unwrap();
        let grid = encode_frames(&store, &cfg, &video).unwrap();
        assert_eq!(grid.features.shape(), &[32, 8]);
        assert_eq!((grid.frames, grid.spatial), (8, 4));
        for (t, f) in frames.iter().enumerate() {
            let single = encode_frames(&store, &cfg, f).unwrap();
            assert_eq!(
                grid.features.slice_rows(t * 4, t * 4 + 4).unwrap(),
                single.features,
                "frame {t} differs from its standalone encoding"
            );
        }
    }

    #[test]
    fn rejects_indivisible_patch() {
        let cfg = VisionConfig {
            image_size: 10,
            patch_size: 4,
            ..VisionConfig::default()
        };
        assert!(cfg.validate().is_err());
        let v = VisualInput::zeros(1, 10);
        assert!(patchify(&v, 4).is_err());
    }

    #[test]
    fn temporal_examples() {
        let table = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        let grid = VisualFeatureGrid {
            features: Tensor::zeros(vec![2, 2]),
            frames: 2,
            spatial: 1,
        };
        let out = temporal_embed(&grid, &table, 2).unwrap();
        assert_eq!(out.features, table);

        let grid3 = VisualFeatureGrid {
            features: Tensor::zeros(vec![3, 2]),
            frames: 3,
            spatial: 1,
        };
        let out = temporal_embed(&grid3, &table, 3).unwrap();
        assert_eq!(out.features.row(1), &[2.0, 4.0]);

        let w = temporal_weights(8, 30).unwrap();
        assert_eq!(w.row(0)[0], 1.0);
        assert_eq!(w.row(29)[7], 1.0);
        assert!(temporal_weights(0, 3).is_err());
        let single = temporal_weights(8, 1).unwrap();
        assert_eq!(single.row(0)[0], 1.0);
    }
}
