//! Weighted multi-dataset objective, dataset-combination strategies, AdamW,
//! warmup schedule, gradient clipping and freeze policies.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datapipe::TrainingInstance;
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::lm::FlamingoModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub type Grads = BTreeMap<String, Tensor>;

/// A differentiable loss over batches of some item type.
pub trait Objective {
    type Batch: Clone;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Loss value and gradients of every trainable parameter it reaches.
    fn loss_and_grad(&self, batch: &Self::Batch) -> Result<(f64, Grads)>;

    /// Loss value only.
    fn loss(&self, batch: &Self::Batch) -> Result<f64> {
        Ok(self.loss_and_grad(batch)?.0)
    }

    /// One batch holding every item of `batches`.
    fn merge(batches: &[Self::Batch]) -> Self::Batch;
}

impl Objective for FlamingoModel {
    type Batch = Vec<TrainingInstance>;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn loss_and_grad(&self, batch: &Self::Batch) -> Result<(f64, Grads)> {
        let mut g = Graph::new();
        let refs: Vec<&TrainingInstance> = batch.iter().collect();
        let loss = self.loss_refs(&mut g, &refs, !self.text_only)?;
        let value = g.value(loss).item()?;
        Ok((value, g.backward(loss)?.into_params()))
    }

    fn loss(&self, batch: &Self::Batch) -> Result<f64> {
        let mut g = Graph::no_grad();
        let refs: Vec<&TrainingInstance> = batch.iter().collect();
        let loss = self.loss_refs(&mut g, &refs, !self.text_only)?;
        g.value(loss).item()
    }

    fn merge(batches: &[Self::Batch]) -> Self::Batch {
        batches.concat()
    }
}

/// Which parameter groups are trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezePolicy {
    pub freeze_vision: bool,
    pub freeze_lm: bool,
    /// Learning-rate factor on `lm.*` when the LM is trained.
    pub lm_lr_multiplier: f64,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        FreezePolicy {
            freeze_vision: true,
            freeze_lm: true,
            lm_lr_multiplier: 1.0,
        }
    }
}

impl FreezePolicy {
    pub fn apply(&self, store: &mut ParamStore) {
        for (prefix, frozen) in [("vision.", self.freeze_vision), ("lm.", self.freeze_lm)] {
            if frozen {
                store.freeze_prefix(prefix, &[]);
            } else {
                store.unfreeze_prefix(prefix);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Parameters under these prefixes get no weight decay.
    pub no_decay_prefixes: Vec<String>,
    /// `(prefix, factor)` learning-rate multipliers; first match wins.
    pub lr_multipliers: Vec<(String, f64)>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            peak_lr: 1e-4,
            warmup_steps: 5000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            no_decay_prefixes: vec!["resampler.".into()],
            lr_multipliers: Vec::new(),
        }
    }
}

impl AdamWConfig {
    /// `peak · min(1, step / warmup)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.peak_lr;
        }
        self.peak_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }

    pub fn weight_decay_for(&self, name: &str) -> f64 {
        if self.no_decay_prefixes.iter().any(|p| name.starts_with(p.as_str())) {
            0.0
        } else {
            self.weight_decay
        }
    }

    pub fn lr_multiplier_for(&self, name: &str) -> f64 {
        self.lr_multipliers
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(1.0, |(_, m)| *m)
    }
}

/// Moment accumulators for trainable parameters and the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        OptimState {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn has_moments(&self, name: &str) -> bool {
        self.m.contains_key(name)
    }

    /// Applies one update; the `t`-th update (from 1) uses `lr_at(t)`.
    /// Frozen parameters and gradients of unknown names are ignored.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<f64> {
        self.step += 1;
        let t = self.step;
        let cfg = &self.config;
        let lr = cfg.lr_at(t);
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for (name, grad) in grads {
            if store.is_frozen(name) || !store.contains(name) {
                continue;
            }
            grad.ensure_finite("gradient")?;
            let lr_p = lr * cfg.lr_multiplier_for(name);
            let wd = cfg.weight_decay_for(name);
            let param = store.get_mut(name)?;
            if param.shape() != grad.shape() {
                return Err(invalid(format!("gradient shape mismatch for {name}")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for (((p, &g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr_p * (mhat / (vhat.sqrt() + cfg.eps) + wd * *p);
            }
        }
        Ok(lr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    GlobalNorm { max_norm: f64 },
    Agc { lambda: f64, eps: f64 },
}

/// Clipping applied to the gradients whose names start with `prefix`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRule {
    pub prefix: String,
    pub mode: ClipMode,
}

pub fn global_norm(grads: &Grads) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Clips `grads` in place; returns the pre-clip global norm.
pub fn clip_gradients(grads: &mut Grads, params: &ParamStore, mode: ClipMode) -> Result<f64> {
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite gradient for {name}")));
        }
    }
    let norm = global_norm(grads);
    match mode {
        ClipMode::GlobalNorm { max_norm } => {
            if norm > max_norm {
                let s = max_norm / norm;
                for g in grads.values_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        ClipMode::Agc { lambda, eps } => {
            for (name, g) in grads.iter_mut() {
                let w = params.get(name)?.sq_norm().sqrt();
                let gn = g.sq_norm().sqrt();
                let limit = lambda * (w + eps);
                if gn > limit {
                    let s = limit / gn;
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
    }
    Ok(norm)
}

/// Applies each rule to its prefix group. Returns the pre-clip global norm.
pub fn apply_clip_rules(grads: &mut Grads, params: &ParamStore, rules: &[ClipRule]) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm"));
    }
    for rule in rules {
        let mut group: Grads = grads
            .iter()
            .filter(|(n, _)| n.starts_with(rule.prefix.as_str()))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        clip_gradients(&mut group, params, rule.mode)?;
        grads.extend(group);
    }
    Ok(norm)
}

/// `Σ_m λ_m · g_m` in dataset order.
pub fn weighted_sum(parts: &[(f64, Grads)]) -> Grads {
    let mut out: Grads = BTreeMap::new();
    for (w, grads) in parts {
        for (name, g) in grads {
            let dst = out
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            dst.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += w * b);
        }
    }
    out
}

/// `Σ_m λ_m · L_m` and the per-dataset losses.
pub fn mixture_loss<O: Objective>(obj: &O, batches: &[O::Batch], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_mixture(batches.len(), weights)?;
    let parts = batches.iter().map(|b| obj.loss(b)).collect::<Result<Vec<_>>>()?;
    let total = parts.iter().zip(weights).map(|(l, w)| l * w).sum();
    Ok((total, parts))
}

/// Weighted mixture gradient without applying it.
pub fn mixture_gradient<O: Objective>(obj: &O, batches: &[O::Batch], weights: &[f64]) -> Result<(f64, Vec<f64>, Grads)> {
    check_mixture(batches.len(), weights)?;
    let mut losses = Vec::with_capacity(batches.len());
    let mut parts = Vec::with_capacity(batches.len());
    for (b, &w) in batches.iter().zip(weights) {
        let (l, g) = obj.loss_and_grad(b)?;
        losses.push(l);
        parts.push((w, g));
    }
    let total = losses.iter().zip(weights).map(|(l, w)| l * w).sum();
    Ok((total, losses, weighted_sum(&parts)))
}

fn check_mixture(n: usize, weights: &[f64]) -> Result<()> {
    if n == 0 {
        return Err(Error::Empty("mixture batches"));
    }
    if n != weights.len() {
        return Err(invalid(format!("{n} batches but {} weights", weights.len())));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// One update on `Σ λ_m g_m` per round of one batch per dataset.
    Accumulation,
    /// One update per dataset batch, cycling through datasets.
    RoundRobin,
    /// One update on a single batch concatenating all datasets.
    Merged,
}

/// Outcome of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Per-dataset losses (`NaN` for datasets not visited this step).
    pub losses: Vec<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub updates: usize,
}

/// Accumulates `Σ λ_m g_m` over all datasets and applies one update.
pub fn accumulation_step<O: Objective>(
    obj: &mut O,
    opt: &mut OptimState,
    batches: &[O::Batch],
    weights: &[f64],
    clip: &[ClipRule],
) -> Result<StepReport> {
    let (total, losses, mut grads) = mixture_gradient(obj, batches, weights)?;
    let grad_norm = apply_clip_rules(&mut grads, obj.params(), clip)?;
    let lr = opt.update(obj.params_mut(), &grads)?;
    Ok(StepReport {
        losses,
        total,
        grad_norm,
        lr,
        updates: 1,
    })
}

/// One update using only `λ_m g_m` of dataset `m`.
pub fn round_robin_step<O: Objective>(
    obj: &mut O,
    opt: &mut OptimState,
    batch: &O::Batch,
    m: usize,
    weights: &[f64],
    clip: &[ClipRule],
) -> Result<StepReport> {
    let w = *weights
        .get(m)
        .ok_or_else(|| invalid(format!("dataset index {m} of {}", weights.len())))?;
    let (loss, g) = obj.loss_and_grad(batch)?;
    let mut grads = weighted_sum(&[(w, g)]);
    let grad_norm = apply_clip_rules(&mut grads, obj.params(), clip)?;
    let lr = opt.update(obj.params_mut(), &grads)?;
    let mut losses = vec![f64::NAN; weights.len()];
    losses[m] = loss;
    Ok(StepReport {
        losses,
        total: w * loss,
        grad_norm,
        lr,
        updates: 1,
    })
}

/// One update on the concatenation of all batches.
pub fn merged_step<O: Objective>(
    obj: &mut O,
    opt: &mut OptimState,
    batches: &[O::Batch],
    clip: &[ClipRule],
) -> Result<StepReport> {
    if batches.is_empty() {
        return Err(Error::Empty("mixture batches"));
    }
    let merged = O::merge(batches);
    let (loss, mut grads) = obj.loss_and_grad(&merged)?;
    let grad_norm = apply_clip_rules(&mut grads, obj.params(), clip)?;
    let lr = opt.update(obj.params_mut(), &grads)?;
    Ok(StepReport {
        losses: vec![f64::NAN; batches.len()],
        total: loss,
        grad_norm,
        lr,
        updates: 1,
    })
}

/// Runs one step of `strategy`. Round robin visits dataset `step % M`.
pub fn strategy_step<O: Objective>(
    strategy: Strategy,
    obj: &mut O,
    opt: &mut OptimState,
    batches: &[O::Batch],
    weights: &[f64],
    clip: &[ClipRule],
    step: u64,
) -> Result<StepReport> {
    match strategy {
        Strategy::Accumulation => accumulation_step(obj, opt, batches, weights, clip),
        Strategy::RoundRobin => {
            let m = (step % batches.len().max(1) as u64) as usize;
            let batch = batches.get(m).ok_or(Error::Empty("mixture batches"))?;
            round_robin_step(obj, opt, batch, m, weights, clip)
        }
        Strategy::Merged => merged_step(obj, opt, batches, clip),
    }
}

/// Per-step CSV log with a fixed column set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricLog {
    columns: Vec<String>,
    body: String,
}

impl MetricLog {
    /// Columns: `step`, `loss_<name>` per dataset, `total`, `grad_norm`, `lr`,
    /// then `extra`.
    pub fn new(datasets: &[String], extra: &[String]) -> Self {
        let mut columns = vec!["step".to_string()];
        columns.extend(datasets.iter().map(|d| format!("loss_{d}")));
        columns.extend(["total", "grad_norm", "lr"].map(String::from));
        columns.extend(extra.iter().cloned());
        MetricLog {
            columns,
            body: String::new(),
        }
    }

    pub fn push(&mut self, step: u64, report: &StepReport, extra: &[f64]) -> Result<()> {
        let mut row = vec![step.to_string()];
        row.extend(report.losses.iter().map(|v| fmt_metric(*v)));
        row.extend([report.total, report.grad_norm, report.lr].map(fmt_metric));
        row.extend(extra.iter().map(|v| fmt_metric(*v)));
        if row.len() != self.columns.len() {
            return Err(invalid(format!("{} values for {} metric columns", row.len(), self.columns.len())));
        }
        let _ = writeln!(self.body, "{}", row.join(","));
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.body.lines().count()
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", self.columns.join(","), self.body)
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.12e}")
    }
}

/// Gate CSV columns for a model: `gate_attn_{j}` and `gate_ffw_{j}`.
pub fn gate_columns(model: &FlamingoModel) -> Vec<String> {
    model
        .gated_layers()
        .iter()
        .flat_map(|j| [format!("gate_attn_{j}"), format!("gate_ffw_{j}")])
        .collect()
}

pub fn gate_values(model: &FlamingoModel) -> Result<Vec<f64>> {
    Ok(model
        .gate_stats()?
        .into_iter()
        .flat_map(|(_, a, f)| [a, f])
        .collect())
}
