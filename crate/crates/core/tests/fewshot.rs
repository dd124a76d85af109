use std::hash::{Hash, Hasher};

use flamingo::datapipe::{compute_phi, image_positions, Direction, TrainingInstance};
use flamingo::fewshot::{
    build_fewshot_prompt, decode, rices_select, score_candidates, trim_at_keywords, DecodeMode, Shot, TaskFormat,
};
use flamingo::lm::SequenceModel;
use flamingo::rng;
use flamingo::tokenizer::Vocab;
use flamingo::vision::VisualInput;
use flamingo::{Result, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Logits are a fixed pseudo-random function of the prefix, plus an
/// optional per-position offset.
struct HashModel {
    vocab: usize,
    seed: u64,
    shift: f64,
}

impl SequenceModel for HashModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn logits(&self, inst: &TrainingInstance) -> Result<Tensor> {
        let mut data = Vec::with_capacity(inst.len() * self.vocab);
        for l in 0..inst.len() {
            let mut h = std::collections::hash_map::DefaultHasher::new();
            (self.seed, &inst.text[..=l]).hash(&mut h);
            let mut r = rng::item(h.finish(), "logits", 0);
            let offset = self.shift * (l as f64 + 1.0);
            data.extend((0..self.vocab).map(|_| r.gen_range(-3.0..3.0) + offset));
        }
        Tensor::new(vec![inst.len(), self.vocab], data)
    }
}

fn prompt(vocab: &Vocab) -> TrainingInstance {
    let shots = vec![Shot { visual: Some(VisualInput::zeros(1, 16)), text: "a red square".into() }];
    build_fewshot_prompt(&shots, Some(VisualInput::zeros(1, 16)), "a", &mut rng::stream(0, "x"), false)
        .render(vocab)
        .unwrap()
}

proptest! {
    #[test]
    fn rendered_shots_map_to_their_own_images(n in 0usize..5, with_query in any::<bool>(), seed in any::<u64>()) {
        let vocab = Vocab::synthetic();
        let texts = ["a red square", "a blue circle", "a small cross", "a green triangle", "a cyan square"];
        let shots: Vec<Shot> = (0..n).map(|i| Shot { visual: Some(VisualInput::zeros(1, 16)), text: texts[i].into() }).collect();
        let query = with_query.then(|| VisualInput::zeros(1, 16));
        let spec = build_fewshot_prompt(&shots, query, "a", &mut rng::stream(seed, "shuffle"), true);
        let inst = spec.render(&vocab).unwrap();
        let sp = vocab.specials();
        let pos = image_positions(&inst.text, sp.image);
        prop_assert_eq!(pos.len(), n + usize::from(with_query));
        prop_assert_eq!(compute_phi(inst.len(), &pos, Direction::Previous), inst.indices.clone());
        for (k, shot) in spec.support.iter().enumerate() {
            let ids = vocab.encode(&shot.text);
            let start = pos[k] + 1;
            prop_assert_eq!(&inst.text[start..start + ids.len()], ids.as_slice());
            for l in start..start + ids.len() + 1 {
                prop_assert_eq!(inst.indices[l], k + 1);
            }
            prop_assert_eq!(inst.text[start + ids.len()], sp.eoc);
        }
    }

    #[test]
    fn scoring_ranks_ignore_logit_shifts(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let vocab = Vocab::synthetic();
        let p = prompt(&vocab);
        let cands: Vec<String> = ["red", "green", "blue", "a small cross", "white"].iter().map(|s| s.to_string()).collect();
        let base = HashModel { vocab: vocab.len(), seed, shift: 0.0 };
        let shifted = HashModel { vocab: vocab.len(), seed, shift };
        let a = score_candidates(&base, &vocab, &p, &cands).unwrap();
        let b = score_candidates(&shifted, &vocab, &p, &cands).unwrap();
        let order = |v: &[flamingo::fewshot::Candidate]| v.iter().map(|c| c.index).collect::<Vec<_>>();
        prop_assert_eq!(order(&a), order(&b));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.score - y.score).abs() <= 1e-9);
        }
    }

    #[test]
    fn decoded_text_is_clean_after_trimming(seed in any::<u64>(), width in 1usize..4) {
        let vocab = Vocab::synthetic();
        let model = HashModel { vocab: vocab.len(), seed, shift: 0.0 };
        let p = prompt(&vocab);
        let c = decode(&model, &p, DecodeMode::Beam(width), 6, vocab.specials().eoc).unwrap();
        prop_assert!(!c.tokens.contains(&vocab.specials().eoc));
        let text = trim_at_keywords(&vocab.decode(&c.tokens).unwrap(), &TaskFormat::Caption.keywords());
        prop_assert!(!text.contains("<EOC>") && !text.contains("<image>"));
    }

    #[test]
    fn retrieval_ignores_pool_order(seed in any::<u64>(), k in 1usize..8, perm in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle()) {
        let mut r = rng::stream(seed, "pool");
        let pool: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let query: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| pool[i].clone()).collect();
        let a = rices_select(&query, &pool, k).unwrap();
        let b: Vec<usize> = rices_select(&query, &shuffled, k).unwrap().into_iter().map(|i| perm[i]).collect();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn greedy_is_width_one_beam() {
    let vocab = Vocab::synthetic();
    let p = prompt(&vocab);
    for seed in 0..10 {
        let model = HashModel { vocab: vocab.len(), seed, shift: 0.0 };
        let g = decode(&model, &p, DecodeMode::Greedy, 5, vocab.specials().eoc).unwrap();
        let b = decode(&model, &p, DecodeMode::Beam(1), 5, vocab.specials().eoc).unwrap();
        assert_eq!(g, b);
    }
}

#[test]
fn retrieval_breaks_ties_toward_lower_indices() {
    let pool = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]];
    assert_eq!(rices_select(&[1.0, 0.0], &pool, 2).unwrap(), vec![1, 0]);
    assert!(rices_select(&[1.0, 0.0], &pool, 4).is_err());
}
