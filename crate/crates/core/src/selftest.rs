//! End-to-end self-check suites: autodiff against finite differences, gate
//! identity at initialization, future-image masking and accumulation
//! equivalence.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::datapipe::{
    next_mixture_batches, synth_corpus, Example, InstanceConfig, MixtureDataset, MixtureSpec,
    SynthTask, TrainingInstance,
};
use crate::error::{Error, Result};
use crate::graph::{causal_mask, Graph, Var};
use crate::lm::{FlamingoConfig, FlamingoModel, MaskRule, SequenceModel};
use crate::rng;
use crate::tensor::{Activation, Tensor};
use crate::tokenizer::Vocab;
use crate::train::{mixture_gradient, Grads, Objective};
use crate::vision::VisualInput;
use crate::xattn::PhiMask;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    /// Worst observed discrepancy.
    pub worst: f64,
    pub tolerance: f64,
    pub checks: usize,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} checks, worst {:.3e} (tol {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checks,
            self.worst,
            self.tolerance
        )
    }
}

fn report(name: &str, worst: f64, tolerance: f64, checks: usize) -> SuiteReport {
    SuiteReport {
        name: name.into(),
        passed: checks > 0 && worst <= tolerance,
        worst,
        tolerance,
        checks,
    }
}

fn randn(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("length matches shape")
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Build,
}

fn random_mask(rows: usize, cols: usize, seed: u64) -> Vec<bool> {
    let mut r = rng::item(seed, "mask", 0);
    let mut m: Vec<bool> = (0..rows * cols).map(|_| r.gen_bool(0.6)).collect();
    for row in 0..rows {
        m[row * cols] = true;
    }
    m
}

fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, shapes: &[&[usize]], build: Build) -> OpCase {
        OpCase {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            build,
        }
    }
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |g, x| g.matmul(x[0], x[1])),
        case("matmul_nt", &[&[3, 4], &[2, 4]], |g, x| g.matmul_nt(x[0], x[1])),
        case("add", &[&[2, 3], &[2, 3]], |g, x| g.add(x[0], x[1])),
        case("sub", &[&[2, 3], &[2, 3]], |g, x| g.sub(x[0], x[1])),
        case("mul", &[&[2, 3], &[2, 3]], |g, x| g.mul(x[0], x[1])),
        case("add_row", &[&[3, 4], &[4]], |g, x| g.add_row(x[0], x[1])),
        case("scale", &[&[2, 3]], |g, x| Ok(g.scale(x[0], -1.7))),
        case("scale_by", &[&[2, 3], &[]], |g, x| g.scale_by(x[0], x[1])),
        case("tanh", &[&[2, 3]], |g, x| Ok(g.tanh(x[0]))),
        case("exp", &[&[2, 3]], |g, x| Ok(g.exp(x[0]))),
        case("gelu", &[&[2, 5]], |g, x| Ok(g.activation(x[0], Activation::Gelu))),
        case("squared_relu", &[&[2, 5]], |g, x| Ok(g.activation(x[0], Activation::SquaredRelu))),
        case("layer_norm", &[&[3, 5], &[5], &[5]], |g, x| g.layer_norm(x[0], x[1], x[2])),
        case("masked_softmax", &[&[3, 4]], |g, x| g.masked_softmax(x[0], &random_mask(3, 4, 1))),
        case("attention", &[&[3, 4], &[5, 4], &[5, 4]], |g, x| {
            g.attention(x[0], x[1], x[2], 2, Some(&random_mask(3, 5, 2)))
        }),
        case("attention_causal", &[&[4, 4], &[4, 4], &[4, 4]], |g, x| {
            g.attention(x[0], x[1], x[2], 1, Some(&causal_mask(4)))
        }),
        case("attention_blocks", &[&[4, 4], &[6, 4], &[6, 4]], |g, x| {
            g.attention_blocks(x[0], x[1], x[2], 2, 2, Some(&random_mask(4, 3, 3)))
        }),
        case("gather_rows", &[&[4, 3]], |g, x| g.gather_rows(x[0], &[2, 0, 2, 3])),
        case("replace_row", &[&[3, 4], &[1, 4]], |g, x| g.replace_row(x[0], 1, x[1])),
        case("concat_rows", &[&[2, 3], &[1, 3]], |g, x| g.concat_rows(&[x[0], x[1], x[0]])),
        case("slice_rows", &[&[4, 3]], |g, x| g.slice_rows(x[0], 1, 3)),
        case("mean_rows", &[&[4, 3]], |g, x| g.mean_rows(x[0])),
        case("sum", &[&[2, 3]], |g, x| Ok(g.sum(x[0]))),
        case("l2_normalize_rows", &[&[3, 4]], |g, x| Ok(g.l2_normalize_rows(x[0]))),
        case("cross_entropy", &[&[3, 5]], |g, x| {
            g.cross_entropy(x[0], &[1, 4, 0], &[0.5, 1.0, 0.25], 0.1)
        }),
        case("reshape", &[&[2, 6]], |g, x| g.reshape(x[0], vec![3, 4])),
    ]
}

/// Scalar `Σ out ⊙ R` for a fixed random `R`, plus the input leaves.
fn eval_case(case: &OpCase, inputs: &[Tensor], proj_seed: u64) -> Result<(f64, Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let shape = g.value(out).shape().to_vec();
    let r = randn(shape, &mut rng::item(proj_seed, "proj", 0));
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    let loss = g.sum(prod);
    Ok((g.value(loss).item()?, g, vars, loss))
}

/// Compares analytic gradients of every op kind with central differences at
/// `probes` random coordinates.
pub fn gradcheck_suite(probes: usize, seed: u64) -> Result<SuiteReport> {
    let cases = op_cases();
    let mut r = rng::stream(seed, "gradcheck");
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for p in 0..probes {
        let case = &cases[p % cases.len()];
        let mut inputs: Vec<Tensor> = case.shapes.iter().map(|s| randn(s.clone(), &mut r)).collect();
        if case.name == "layer_norm" {
            inputs[1].data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        let proj = r.gen();
        let (_, g, vars, loss) = eval_case(case, &inputs, proj)?;
        let grads = g.backward(loss)?;
        let which = r.gen_range(0..inputs.len());
        let idx = r.gen_range(0..inputs[which].len());
        let analytic = grads.wrt(vars[which]).map_or(0.0, |t| t.data()[idx]);
        let mut shifted = inputs.clone();
        shifted[which].data_mut()[idx] += h;
        let up = eval_case(case, &shifted, proj)?.0;
        shifted[which].data_mut()[idx] -= 2.0 * h;
        let down = eval_case(case, &shifted, proj)?.0;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    Ok(report("gradcheck", worst, 1e-4, probes))
}

/// Random interleaved instances from synthetic pages and pairs.
pub fn random_instances(n: usize, seed: u64, model: &FlamingoModel) -> Result<Vec<TrainingInstance>> {
    let vision = &model.config.vision;
    let pages = synth_corpus(SynthTask::InterleavedPages, n.max(1), seed, vision, &model.vocab)?;
    let pairs = synth_corpus(SynthTask::GlyphCaption, n.max(1), seed, vision, &model.vocab)?;
    let cfg = InstanceConfig {
        seq_len: 40.min(model.config.lm.max_positions),
        max_images: 5,
        p_next: 0.5,
    };
    let mut r = rng::stream(seed, "data");
    (0..n)
        .map(|i| {
            let ex: &Example = if i % 4 == 3 { &pairs[i] } else { &pages[i] };
            ex.to_instance(&cfg, 0.5, &model.vocab, &mut r)
        })
        .collect()
}

/// Fresh model logits against text-model logits.
pub fn gate_identity_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let model = FlamingoModel::assemble(FlamingoConfig::default(), Vocab::synthetic(), &mut rng::stream(seed, "init"))?;
    gate_identity_check(&model, &random_instances(instances, seed, &model)?)
}

pub fn gate_identity_check(model: &FlamingoModel, instances: &[TrainingInstance]) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    let full = model.logits_many(instances)?;
    for (inst, f) in instances.iter().zip(&full) {
        worst = worst.max(f.max_abs_diff(&model.lm_logits(inst)?));
    }
    Ok(report("gate identity", worst, 1e-10, instances.len()))
}

/// Sets every gate to a random value in `[0.3, 1.0)` so the visual path
/// contributes.
pub fn open_gates(model: &mut FlamingoModel, seed: u64) -> Result<()> {
    let mut r = rng::stream(seed, "gates");
    let names: Vec<String> = model.store.names().filter(|n| n.contains(".alpha_")).cloned().collect();
    for n in names {
        *model.store.get_mut(&n)? = Tensor::scalar(r.gen_range(0.3..1.0));
    }
    Ok(())
}

fn noise_like(v: &VisualInput, r: &mut impl Rng) -> VisualInput {
    let mut out = v.clone();
    out.pixels = randn(v.pixels.shape().to_vec(), r);
    out
}

/// For random positions ℓ, replaces every image with index `> φ(ℓ)` by
/// noise and measures the change of `logits[ℓ]`. Positions are drawn where
/// no earlier token admits a later image than ℓ does, since text
/// self-attention legitimately carries earlier tokens' visual context.
pub fn mask_invariance_suite(instances: usize, seed: u64, rule: Option<MaskRule>) -> Result<SuiteReport> {
    let mut model =
        FlamingoModel::assemble(FlamingoConfig::default(), Vocab::synthetic(), &mut rng::stream(seed, "init"))?;
    open_gates(&mut model, seed)?;
    if let Some(rule) = rule {
        model.mask_rule = rule;
    }
    let mut r = rng::stream(seed, "positions");
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for inst in random_instances(instances, seed, &model)? {
        let mut prefix_max = 0;
        let mut candidates = Vec::new();
        for (l, &p) in inst.indices.iter().enumerate() {
            prefix_max = prefix_max.max(p);
            if p == prefix_max && p < inst.images.len() {
                candidates.push(l);
            }
        }
        let Some(&l) = candidates.choose(&mut r) else {
            continue;
        };
        let base = model.logits(&inst)?;
        let mut noisy = inst.clone();
        for img in noisy.images.iter_mut().skip(inst.indices[l]) {
            *img = noise_like(img, &mut r);
        }
        let changed = model.logits(&noisy)?;
        let d = base
            .row(l)
            .iter()
            .zip(changed.row(l))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(d);
        checks += 1;
    }
    Ok(report("mask invariance", worst, 1e-10, checks))
}

/// A faulty mask builder that also admits the image after φ(ℓ); used as a
/// negative control.
pub fn leaky_mask_rule(phi: &[usize], images: usize, per_image: usize, all_previous: bool) -> Result<PhiMask> {
    let mut m = crate::xattn::build_phi_mask(phi, images, per_image, all_previous)?;
    for (l, &p) in phi.iter().enumerate() {
        if p < images {
            let start = l * m.cols + p * per_image;
            m.admissible[start..start + per_image].fill(true);
        }
    }
    Ok(m)
}

fn max_rel_diff(a: &Grads, b: &Grads) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("gradient sets differ".into()));
    }
    let mut worst: f64 = 0.0;
    for (name, ta) in a {
        let tb = b
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        let scale = tb.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        worst = worst.max(ta.max_abs_diff(tb) / scale);
    }
    Ok(worst)
}

/// Accumulated mixture gradient against independently computed
/// `Σ λ_m ∇L_m` for three datasets with random weights.
pub fn accumulation_suite(seed: u64) -> Result<SuiteReport> {
    let mut model =
        FlamingoModel::assemble(FlamingoConfig::default(), Vocab::synthetic(), &mut rng::stream(seed, "init"))?;
    open_gates(&mut model, seed)?;
    let mut r = rng::stream(seed, "data");
    let vision = model.config.vision.clone();
    let tasks = [SynthTask::GlyphCaption, SynthTask::GlyphVqa, SynthTask::InterleavedPages];
    let datasets = tasks
        .iter()
        .enumerate()
        .map(|(m, &task)| {
            Ok(MixtureDataset {
                name: format!("d{m}"),
                weight: r.gen_range(0.1..2.0),
                batch_size: 2 + m,
                instance: InstanceConfig::default(),
                space_prob: 0.5,
                source: std::sync::Arc::new(synth_corpus(task, 8, seed, &vision, &model.vocab)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = MixtureSpec { datasets };
    let batches = next_mixture_batches(&spec, &model.vocab, &mut r)?;
    let weights = spec.weights();
    let (_, _, accumulated) = mixture_gradient(&model, &batches, &weights)?;
    let mut reference: Grads = Grads::new();
    for (batch, w) in batches.iter().zip(&weights) {
        let (_, g) = model.loss_and_grad(batch)?;
        for (name, t) in g {
            let entry = reference
                .entry(name)
                .or_insert_with(|| Tensor::zeros(t.shape().to_vec()));
            for (e, v) in entry.data_mut().iter_mut().zip(t.data()) {
                *e += w * v;
            }
        }
    }
    Ok(report("accumulation equivalence", max_rel_diff(&accumulated, &reference)?, 1e-10, weights.len()))
}

/// Every suite plus the negative control. The control passes when the
/// leaky mask is caught.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    let mut out = vec![
        gradcheck_suite(200, seed)?,
        gate_identity_suite(20, seed)?,
        mask_invariance_suite(20, seed, None)?,
        accumulation_suite(seed)?,
    ];
    let leaky = mask_invariance_suite(20, seed, Some(leaky_mask_rule))?;
    out.push(SuiteReport {
        name: "mask negative control".into(),
        passed: !leaky.passed,
        ..leaky
    });
    Ok(out)
}
