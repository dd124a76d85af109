use flamingo::contrastive::{
    contrastive_loss, contrastive_loss_var, glyph_class_set, retrieval_recall, ContrastiveConfig, DualEncoder,
    PAIR_TEMPLATES,
};
use flamingo::pipeline::{heldout_recall, pretrain_contrastive, ContrastivePretrainConfig};
use flamingo::rng;
use flamingo::tokenizer::Vocab;
use flamingo::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn unit_rows(n: usize, d: usize, r: &mut impl Rng) -> Tensor {
    let mut t = Tensor::new(vec![n, d], (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    for i in 0..n {
        let norm: f64 = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        t.data_mut()[i * d..(i + 1) * d].iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
}

proptest! {
    #[test]
    fn loss_is_symmetric_under_joint_permutation(seed in any::<u64>(), perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(), beta in 0.5f64..30.0, smoothing in 0.0f64..0.3) {
        let mut r = rng::stream(seed, "x");
        let v = unit_rows(6, 5, &mut r);
        let l = unit_rows(6, 5, &mut r);
        let a = contrastive_loss(&v, &l, beta, smoothing).unwrap();
        let b = contrastive_loss(&permute(&v, &perm), &permute(&l, &perm), beta, smoothing).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn sharper_temperature_helps_separable_batches(seed in any::<u64>(), log_beta in -1.0f64..2.0) {
        let mut r = rng::stream(seed, "x");
        let v = unit_rows(5, 5, &mut r);
        let mut g = Graph::new();
        let vv = g.constant(v.clone());
        let ll = g.constant(v);
        let lb = g.input(Tensor::scalar(log_beta));
        let loss = contrastive_loss_var(&mut g, vv, ll, lb, 0.0).unwrap();
        let grad = g.backward(loss).unwrap().wrt(lb).unwrap().item().unwrap();
        prop_assert!(grad < 0.0, "d loss / d log beta = {grad}");
    }

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>()) {
        let mut r = rng::stream(seed, "x");
        let v = unit_rows(10, 4, &mut r);
        let l = unit_rows(10, 4, &mut r);
        let pairing: Vec<usize> = (0..10).collect();
        let mut prev = (0.0, 0.0);
        for k in 1..=10 {
            let rec = retrieval_recall(&v, &l, &pairing, k).unwrap();
            prop_assert!(rec.image_to_text >= prev.0 && rec.text_to_image >= prev.1);
            prev = (rec.image_to_text, rec.text_to_image);
        }
        prop_assert_eq!(prev, (1.0, 1.0));
    }
}

#[test]
fn retrieval_examples() {
    let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let rec = retrieval_recall(&v, &v, &[0, 1], 1).unwrap();
    assert_eq!((rec.image_to_text, rec.text_to_image), (1.0, 1.0));
    let rec = retrieval_recall(&v, &v, &[1, 0], 1).unwrap();
    assert_eq!((rec.image_to_text, rec.text_to_image), (0.0, 0.0));
    let tied = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let rec = retrieval_recall(&v, &tied, &[1, 0], 1).unwrap();
    assert_eq!(rec.image_to_text, 0.5);
    let rec = retrieval_recall(&v, &tied, &[1, 1], 1).unwrap();
    assert_eq!(rec.image_to_text, 0.0);
    assert!(retrieval_recall(&v, &v, &[0, 1], 0).is_err());
}

#[test]
fn short_pretraining_beats_chance_at_zero_shot_classification() {
    let mut enc = DualEncoder::new(ContrastiveConfig::default(), Vocab::synthetic(), &mut rng::stream(0, "init")).unwrap();
    let before = heldout_recall(&enc, 0, PAIR_TEMPLATES[0], 1).unwrap();
    let cfg = ContrastivePretrainConfig { steps: 200, batch_size: 16, pool_size: 500, ..ContrastivePretrainConfig::default() };
    let log = pretrain_contrastive(&mut enc, &cfg, 0, |_, _| {}).unwrap();
    assert_eq!(log.rows(), 200);
    let set = glyph_class_set(0, "data.heldout", PAIR_TEMPLATES[0], &enc.config.vision).unwrap();
    let classes: Vec<String> = set.texts.iter().map(|t| t.trim_start_matches("a ").to_string()).collect();
    let templates = vec!["a {class_name}".to_string()];
    let correct = set
        .images
        .iter()
        .enumerate()
        .filter(|(i, img)| flamingo::contrastive::zero_shot_classify(&enc, img, &classes, &templates).unwrap() == *i)
        .count();
    let accuracy = correct as f64 / 64.0;
    assert!(accuracy >= 0.2, "zero-shot accuracy {accuracy} (chance 1/64)");
    let after = heldout_recall(&enc, 0, PAIR_TEMPLATES[0], 1).unwrap();
    assert!(after.image_to_text > before.image_to_text);
}
