use flamingo::graph::causal_mask;
use flamingo::tensor::masked_softmax;
use flamingo::{Activation, Graph, Tensor};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    let d = (a - b).abs();
    d <= 1e-8 || d <= 1e-4 * a.abs().max(b.abs())
}

/// Sum of a fixed random projection of `build(x)`, so every output element
/// carries a distinct weight.
fn scalar_of(build: fn(&mut Graph, flamingo::Var) -> flamingo::Var, x: &Tensor, weights: &Tensor) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = build(&mut g, xv);
    let w = g.constant(weights.clone());
    let p = g.mul(y, w).unwrap();
    let s = g.sum(p);
    let value = g.value(s).item().unwrap();
    let grads = g.backward(s).unwrap();
    (value, grads.wrt(xv).unwrap().data().to_vec())
}

fn check_op(build: fn(&mut Graph, flamingo::Var) -> flamingo::Var, x: &Tensor, w: &Tensor) -> Result<(), TestCaseError> {
    let (_, analytic) = scalar_of(build, x, w);
    let numeric = numeric_grad(&|t| scalar_of(build, t, w).0, x);
    for (a, n) in analytic.iter().zip(&numeric) {
        prop_assert!(close(*a, *n), "analytic {a} numeric {n}");
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_ops_match_finite_differences(x in tensor(3, 4), w in tensor(3, 4)) {
        check_op(|g, x| g.tanh(x), &x, &w)?;
        check_op(|g, x| g.exp(x), &x, &w)?;
        check_op(|g, x| g.activation(x, Activation::Gelu), &x, &w)?;
        check_op(|g, x| g.l2_normalize_rows(x), &x, &w)?;
        check_op(|g, x| g.masked_softmax(x, &[true, false, true, true].repeat(3)).unwrap(), &x, &w)?;
        check_op(|g, x| { let y = g.matmul_nt(x, x).unwrap(); g.slice_rows(y, 0, 3).unwrap() }, &x, &Tensor::full(vec![3, 3], 0.7))?;
    }

    #[test]
    fn attention_matches_finite_differences(x in tensor(4, 4), w in tensor(4, 4)) {
        check_op(|g, x| {
            let m = causal_mask(4);
            g.attention(x, x, x, 2, Some(&m)).unwrap()
        }, &x, &w)?;
    }

    #[test]
    fn softmax_rows_sum_to_one(x in tensor(5, 6), mask in prop::collection::vec(any::<bool>(), 30)) {
        let s = masked_softmax(&x, &mask).unwrap();
        for r in 0..5 {
            let row = s.row(r);
            let admissible = mask[r * 6..(r + 1) * 6].iter().any(|&b| b);
            let total: f64 = row.iter().sum();
            if admissible {
                prop_assert!((total - 1.0).abs() <= 1e-9);
            } else {
                prop_assert_eq!(total, 0.0);
            }
            for c in 0..6 {
                if !mask[r * 6 + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn backward_is_deterministic(x in tensor(4, 4)) {
        let run = || {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let a = g.attention(xv, xv, xv, 2, None).unwrap();
            let t = g.tanh(a);
            let s = g.sum(t);
            let grads = g.backward(s).unwrap();
            let once = grads.wrt(xv).unwrap().clone();
            let again = g.backward(s).unwrap().wrt(xv).unwrap().clone();
            (once, again)
        };
        let (a, b) = run();
        let (c, _) = run();
        prop_assert_eq!(a.data(), b.data());
        prop_assert_eq!(a.data(), c.data());
    }

    #[test]
    fn block_attention_equals_separate_calls(x in tensor(6, 4)) {
        let mut g = Graph::no_grad();
        let xv = g.input(x.clone());
        let joint = g.attention_blocks(xv, xv, xv, 2, 2, None).unwrap();
        let joint = g.value(joint).clone();
        for b in 0..2 {
            let mut h = Graph::no_grad();
            let part = h.input(x.slice_rows(3 * b, 3 * b + 3).unwrap());
            let alone = h.attention(part, part, part, 2, None).unwrap();
            let expected = joint.slice_rows(3 * b, 3 * b + 3).unwrap();
            prop_assert_eq!(h.value(alone).data(), expected.data());
        }
    }
}

#[test]
fn constants_and_inference_graphs_carry_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(vec![2, 2], 1.0));
    let x = g.input(Tensor::full(vec![2, 2], 2.0));
    let y = g.mul(c, x).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.wrt(c).is_none());
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 4]);

    let mut store = flamingo::ParamStore::new();
    store.insert("w", Tensor::scalar(1.0));
    store.insert("frozen", Tensor::scalar(1.0));
    store.freeze("frozen");
    let mut ng = Graph::no_grad();
    let w = ng.param(&store, "w").unwrap();
    assert!(!ng.requires_grad(w));
    let mut tg = Graph::new();
    let w = tg.param(&store, "w").unwrap();
    let f = tg.param(&store, "frozen").unwrap();
    assert!(tg.requires_grad(w));
    assert!(!tg.requires_grad(f));
}

#[test]
fn fully_masked_rows_attend_to_nothing() {
    let mut g = Graph::no_grad();
    let q = g.input(Tensor::full(vec![2, 2], 1.0));
    let kv = g.input(Tensor::full(vec![3, 2], 5.0));
    let mask = [false, false, false, true, true, false];
    let out = g.attention(q, kv, kv, 1, Some(&mask)).unwrap();
    assert_eq!(g.value(out).row(0), &[0.0, 0.0]);
    assert_eq!(g.value(out).row(1), &[5.0, 5.0]);
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(vec![2, 3]));
    let b = g.input(Tensor::zeros(vec![2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, flamingo::Error::Shape { .. }), "{err}");
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
}
