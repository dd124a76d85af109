use flamingo::params::ParamStore;
use flamingo::resampler::{init_resampler, resample, ResamplerConfig};
use flamingo::rng;
use flamingo::vision::{encode_frames, init_vision, temporal_embed, temporal_weights, VisionConfig, VisualFeatureGrid, VisualInput};
use flamingo::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut r = rng::item(seed, "test", 0);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn vision_store(cfg: &VisionConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    init_vision(&mut s, cfg, &mut rng::stream(seed, "init")).unwrap();
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn video_encoding_is_framewise(frames in 1usize..4, seed in any::<u64>()) {
        let cfg = VisionConfig::default();
        let store = vision_store(&cfg, seed);
        let video = VisualInput::video(random_tensor(vec![frames, 16, 16, 3], seed)).unwrap();
        let joint = encode_frames(&store, &cfg, &video).unwrap();
        prop_assert_eq!(joint.frames, frames);
        for t in 0..frames {
            let alone = encode_frames(&store, &cfg, &video.frame(t).unwrap()).unwrap();
            let s = cfg.spatial_positions();
            let part = joint.features.slice_rows(t * s, (t + 1) * s).unwrap();
            prop_assert!(part.max_abs_diff(&alone.features) <= 1e-12);
        }
    }

    #[test]
    fn patch_local_encoder_is_permutation_equivariant(seed in any::<u64>(), perm in Just((0..16usize).collect::<Vec<_>>()).prop_shuffle()) {
        let cfg = VisionConfig { blocks: 0, ..VisionConfig::default() };
        let mut store = vision_store(&cfg, seed);
        *store.get_mut("vision.pos").unwrap() = Tensor::zeros(vec![16, cfg.width]);
        let img = random_tensor(vec![16, 16, 3], seed);
        let mut permuted = Tensor::zeros(vec![16, 16, 3]);
        for (dst, &src) in perm.iter().enumerate() {
            let (sy, sx, dy, dx) = (src / 4 * 4, src % 4 * 4, dst / 4 * 4, dst % 4 * 4);
            for y in 0..4 {
                for x in 0..4 {
                    for c in 0..3 {
                        permuted.data_mut()[((dy + y) * 16 + dx + x) * 3 + c] = img.data()[((sy + y) * 16 + sx + x) * 3 + c];
                    }
                }
            }
        }
        let a = encode_frames(&store, &cfg, &VisualInput::image(img).unwrap()).unwrap();
        let b = encode_frames(&store, &cfg, &VisualInput::image(permuted).unwrap()).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            prop_assert_eq!(a.features.row(src), b.features.row(dst));
        }
    }

    #[test]
    fn resampler_output_shape_is_fixed(t in 1usize..=8, s in prop::sample::select(vec![1usize, 4, 16]), seed in any::<u64>()) {
        let cfg = ResamplerConfig::default();
        let mut store = ParamStore::new();
        init_resampler(&mut store, &cfg, 12, 16, &mut rng::stream(seed, "init"));
        let grid = VisualFeatureGrid { features: random_tensor(vec![t * s, 12], seed), frames: t, spatial: s };
        let out = resample(&store, &cfg, &grid).unwrap();
        prop_assert_eq!(out.tokens.shape(), &[cfg.latents, 16]);
        prop_assert!(out.tokens.is_finite());
    }

    #[test]
    fn uniform_attention_resampler_ignores_row_order(seed in any::<u64>(), perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle()) {
        let cfg = ResamplerConfig::default();
        let mut store = ParamStore::new();
        init_resampler(&mut store, &cfg, 8, 16, &mut rng::stream(seed, "init"));
        for l in 0..cfg.layers {
            *store.get_mut(&format!("resampler.layer{l}.attn.wk.w")).unwrap() = Tensor::zeros(vec![16, 16]);
        }
        let x = random_tensor(vec![6, 8], seed);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
        let y = Tensor::from_rows(&rows).unwrap();
        let a = resample(&store, &cfg, &VisualFeatureGrid { features: x, frames: 1, spatial: 6 }).unwrap();
        let b = resample(&store, &cfg, &VisualFeatureGrid { features: y, frames: 1, spatial: 6 }).unwrap();
        prop_assert!(a.tokens.max_abs_diff(&b.tokens) <= 1e-12);
    }
}

#[test]
fn temporal_interpolation_is_exact_at_matching_length() {
    for t in 1..=8 {
        let w = temporal_weights(t, t).unwrap();
        for r in 0..t {
            for c in 0..t {
                assert_eq!(w.row(r)[c], if r == c { 1.0 } else { 0.0 });
            }
        }
    }
    let w = temporal_weights(4, 7).unwrap();
    for r in 0..7 {
        assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(w.row(0)[0], 1.0);
    assert_eq!(w.row(6)[3], 1.0);
    let table = random_tensor(vec![3, 5], 1);
    let grid = VisualFeatureGrid { features: Tensor::zeros(vec![6, 5]), frames: 3, spatial: 2 };
    let out = temporal_embed(&grid, &table, 3).unwrap();
    for r in 0..6 {
        assert_eq!(out.features.row(r), table.row(r / 2));
    }
}

#[test]
fn resampler_gradients_reach_every_parameter() {
    let cfg = ResamplerConfig::default();
    let mut store = ParamStore::new();
    init_resampler(&mut store, &cfg, 8, 16, &mut rng::stream(5, "init"));
    let mut g = Graph::new();
    let var = g.input(random_tensor(vec![2 * 4, 8], 5));
    let grid = flamingo::vision::GridVar { var, frames: 2, spatial: 4 };
    let out = flamingo::resampler::resample_batch(&mut g, &store, &cfg, &[grid]).unwrap();
    let w = g.constant(random_tensor(vec![cfg.latents, 16], 6));
    let p = g.mul(out, w).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    for name in store.names() {
        let gr = grads.params().get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        if name.ends_with(".b") || name.ends_with(".offset") {
            continue;
        }
        assert!(gr.sq_norm() > 0.0, "zero gradient for {name}");
    }
}

#[test]
fn wrong_resolution_is_rejected() {
    let cfg = VisionConfig::default();
    let store = vision_store(&cfg, 0);
    let err = encode_frames(&store, &cfg, &VisualInput::zeros(1, 8)).unwrap_err();
    assert!(err.to_string().contains("resolution"), "{err}");
}
