use flamingo::datapipe::{
    compute_phi, format_paired, load_jsonl, sample_instance, synth_corpus, tag_document, Direction, Example,
    ImageRef, InstanceConfig, SynthTask,
};
use flamingo::lm::next_token_targets;
use flamingo::rng;
use flamingo::tokenizer::Vocab;
use flamingo::vision::{VisionConfig, VisualInput};
use flamingo::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sampled_instances_satisfy_index_invariants(item in 0u64..200, seed in any::<u64>(), seq_len in 6usize..40, max_images in 1usize..5, p_next in prop::sample::select(vec![0.0, 1.0])) {
        let vocab = Vocab::synthetic();
        let cfg = VisionConfig::default();
        let mut r = rng::item(seed, "test", item);
        let page = flamingo::datapipe::synth_page(&cfg, &mut r).unwrap();
        let doc = tag_document(&page, &vocab);
        let icfg = InstanceConfig { seq_len, max_images, p_next };
        let inst = sample_instance(&doc, &icfg, &vocab, &mut r).unwrap();
        let image = vocab.specials().image;
        prop_assert_eq!(inst.len(), seq_len);
        prop_assert!(inst.text.contains(&image));
        prop_assert!(inst.images.len() <= max_images);
        prop_assert!(inst.max_index() <= inst.images.len());
        inst.validate(vocab.len()).unwrap();
        let tags: Vec<usize> = inst.text.iter().enumerate().filter(|(_, &t)| t == image).map(|(i, _)| i).collect();
        for (l, &p) in inst.indices.iter().enumerate() {
            if p == 0 {
                continue;
            }
            if p_next == 0.0 {
                prop_assert!(tags[p - 1] <= l);
            } else {
                prop_assert!(tags[p - 1] >= l);
            }
        }
        if p_next == 0.0 {
            prop_assert!(inst.indices.windows(2).all(|w| w[0] <= w[1] || w[1] == 0));
        }
    }

    #[test]
    fn paired_formatting_round_trips(seed in any::<u64>(), space in any::<bool>()) {
        let vocab = Vocab::synthetic();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let inst = format_paired("a small red circle", &VisualInput::zeros(1, 16), &vocab, &mut r, if space { 1.0 } else { 0.0 }).unwrap();
        let positions = flamingo::datapipe::image_positions(&inst.text, vocab.specials().image);
        prop_assert_eq!(compute_phi(inst.len(), &positions, Direction::Previous), inst.indices.clone());
        let text = vocab.decode(&inst.text).unwrap();
        let expected = if space { "<BOS><image> a small red circle<EOC><EOS>" } else { "<BOS><image>a small red circle<EOC><EOS>" };
        prop_assert_eq!(text, expected);
    }

    #[test]
    fn padding_never_reaches_the_loss(pad_tail in 1usize..6, seed in any::<u64>()) {
        let vocab = Vocab::synthetic();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let inst = format_paired("a blue cross", &VisualInput::zeros(1, 16), &vocab, &mut r, 0.0).unwrap();
        let len = inst.len() + pad_tail;
        let inst = inst.padded(len, vocab.specials().pad);
        let (targets, weights) = next_token_targets(&[&inst], vocab.specials().pad).unwrap();
        let mut g = Graph::new();
        let data: Vec<f64> = (0..len * vocab.len()).map(|i| ((i * 7919) % 13) as f64 / 5.0).collect();
        let logits = g.input(Tensor::new(vec![len, vocab.len()], data).unwrap());
        let loss = g.cross_entropy(logits, &targets, &weights, 0.0).unwrap();
        let grad = g.backward(loss).unwrap().wrt(logits).unwrap().clone();
        for l in 0..len {
            let target_is_pad = l + 1 >= len || inst.text[l + 1] == vocab.specials().pad;
            if target_is_pad {
                prop_assert!(grad.row(l).iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn corpus_items_depend_only_on_seed_and_index() {
    let vocab = Vocab::synthetic();
    let cfg = VisionConfig::default();
    for task in [SynthTask::GlyphCaption, SynthTask::GlyphVqa, SynthTask::InterleavedPages] {
        let a = synth_corpus(task, 6, 11, &cfg, &vocab).unwrap();
        let b = synth_corpus(task, 3, 11, &cfg, &vocab).unwrap();
        assert_eq!(&a[..3], &b[..]);
        assert_ne!(a, synth_corpus(task, 6, 12, &cfg, &vocab).unwrap());
    }
}

#[test]
fn jsonl_documents_load_with_line_numbered_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = VisionConfig::default();
    let raw = Tensor::full(vec![20, 12, 3], 0.5);
    let inline = serde_json::to_string(&ImageRef::inline(&raw)).unwrap();
    let glyph = r#"{"glyph":{"color":"red","shape":"circle"}}"#;
    let good = format!(
        "{{\"text\":\"Look. <image>a red circle <image>a thing\",\"images\":[{glyph},{inline}]}}\n\n"
    );
    let path = dir.path().join("docs.jsonl");
    std::fs::write(&path, &good).unwrap();
    let docs = load_jsonl(&path, &cfg).unwrap();
    assert_eq!(docs.len(), 1);
    assert_eq!(docs[0].images(), 2);
    let vocab = Vocab::synthetic();
    let tagged = tag_document(&docs[0], &vocab);
    assert_eq!(vocab.decode(&tagged.tokens).unwrap(), "<BOS>Look. <EOC><image>a red circle <EOC><image>a thing<EOC><EOS>");

    std::fs::write(&path, format!("{good}{{\"text\":\"<image><image>\",\"images\":[{glyph}]}}\n")).unwrap();
    let err = load_jsonl(&path, &cfg).unwrap_err().to_string();
    assert!(err.contains(":3:") && err.contains("markers"), "{err}");
    std::fs::write(&path, "{\"text\":1}\n").unwrap();
    assert!(load_jsonl(&path, &cfg).unwrap_err().to_string().contains(":1:"));
}

#[test]
fn examples_become_fixed_length_instances() {
    let vocab = Vocab::synthetic();
    let cfg = VisionConfig::default();
    let icfg = InstanceConfig::default();
    let mut r = rng::stream(0, "shuffle");
    for ex in synth_corpus(SynthTask::GlyphVqa, 4, 0, &cfg, &vocab).unwrap() {
        assert!(matches!(ex, Example::Paired { .. }));
        let inst = ex.to_instance(&icfg, 0.5, &vocab, &mut r).unwrap();
        assert_eq!(inst.len(), icfg.seq_len);
        assert_eq!(inst.images.len(), 1);
    }
}
