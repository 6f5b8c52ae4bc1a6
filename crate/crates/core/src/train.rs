//! The classification step: Wasserstein loss with gradient penalty, the
//! cross-entropy alternative, the supervised hybrid loss, and Adam.

use rand::{Rng, RngCore};

use crate::autodiff::{Graph, Mode, NodeId, LOG_SIGMOID_FLOOR_PROB};
use crate::error::{Result, WinnError};
use crate::nn::ArchitectureSpec;
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const DEFAULT_INNER_STEPS: usize = 3;
/// Positives (and, separately, pseudo-negatives) per classification batch.
pub const DEFAULT_HALF_BATCH: usize = 50;
pub const DEFAULT_SUPERVISED_WEIGHT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Wasserstein,
    CrossEntropy,
}

/// Terms of one classification-step loss evaluation.
///
/// In Wasserstein mode `total = wasserstein + lambda * penalty`; in
/// cross-entropy mode `total = cross_entropy` and `penalty` is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub mode: LossMode,
    pub wasserstein: f64,
    /// Unweighted `mean (‖∇f(x̂)‖ − 1)²`.
    pub penalty: f64,
    pub lambda: f64,
    pub cross_entropy: f64,
    pub total: f64,
    pub mean_f_pos: f64,
    pub mean_f_neg: f64,
    /// Scores whose sigmoid was clamped at `1e-12` in cross-entropy mode.
    pub clamped: usize,
}

fn non_empty(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(WinnError::usage(format!("{name} score batch is empty")));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `−[mean f(x⁺) − mean f(x⁻)]`.
pub fn wasserstein_loss(f_pos: &[f64], f_neg: &[f64]) -> Result<f64> {
    non_empty("positive", f_pos)?;
    non_empty("pseudo-negative", f_neg)?;
    Ok(-(mean(f_pos) - mean(f_neg)))
}

fn ln_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `ln σ(x)` clamped at `ln 1e-12`, and whether the clamp fired.
fn clamped_ln_sigmoid(x: f64) -> (f64, bool) {
    let floor = LOG_SIGMOID_FLOOR_PROB.ln();
    let v = ln_sigmoid(x);
    if v < floor {
        (floor, true)
    } else {
        (v, false)
    }
}

/// `−[mean ln σ(f(x⁺)) + mean ln σ(−f(x⁻))]` with the sigmoid clamped below
/// at `1e-12`. Returns the loss and the number of clamped terms.
pub fn cross_entropy_loss(f_pos: &[f64], f_neg: &[f64]) -> Result<(f64, usize)> {
    non_empty("positive", f_pos)?;
    non_empty("pseudo-negative", f_neg)?;
    let mut clamped = 0;
    let mut term = |x: f64| {
        let (v, c) = clamped_ln_sigmoid(x);
        clamped += c as usize;
        v
    };
    let pos: f64 = f_pos.iter().map(|&x| term(x)).sum::<f64>() / f_pos.len() as f64;
    let neg: f64 = f_neg.iter().map(|&x| term(-x)).sum::<f64>() / f_neg.len() as f64;
    Ok((-(pos + neg), clamped))
}

/// `mean (‖gᵢ‖₂ − 1)²` over the samples of an input-gradient node.
pub fn penalty_node(g: &mut Graph, grad: NodeId) -> Result<NodeId> {
    let norm = g.sample_l2_norm(grad)?;
    let dev = g.add_scalar(norm, -1.0)?;
    let sq = g.square(dev)?;
    g.mean(sq)
}

/// `x̂ᵢ = αᵢ x⁺ᵢ + (1 − αᵢ) x⁻ᵢ`.
pub fn interpolate(x_pos: &Tensor, x_neg: &Tensor, alphas: &[f64]) -> Result<Tensor> {
    if x_pos.shape() != x_neg.shape() {
        return Err(WinnError::usage(format!(
            "positive batch {:?} and pseudo-negative batch {:?} differ",
            x_pos.shape(),
            x_neg.shape()
        )));
    }
    if alphas.len() != x_pos.batch() {
        return Err(WinnError::usage(format!(
            "{} interpolation weights for {} pairs",
            alphas.len(),
            x_pos.batch()
        )));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(WinnError::usage(format!("interpolation weight {a} outside [0, 1]")));
    }
    let mut out = x_pos.clone();
    let len = x_pos.sample_len();
    for (i, &a) in alphas.iter().enumerate() {
        let (p, n) = (x_pos.sample(i), x_neg.sample(i));
        for (j, o) in out.sample_mut(i).iter_mut().enumerate() {
            *o = a * p[j] + (1.0 - a) * n[j];
        }
        debug_assert_eq!(len, p.len());
    }
    Ok(out)
}

/// Records `W + λ·GP` on `g` given parameter leaves; returns
/// `(wasserstein, penalty, total, f_pos, f_neg)` nodes.
#[allow(clippy::too_many_arguments)]
fn record_wasserstein(
    g: &mut Graph,
    spec: &ArchitectureSpec,
    leaves: &[NodeId],
    x_pos: &Tensor,
    x_neg: &Tensor,
    alphas: &[f64],
    lambda: f64,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<[NodeId; 5]> {
    let xhat = interpolate(x_pos, x_neg, alphas)?;
    let p = g.constant(x_pos.clone());
    let n = g.constant(x_neg.clone());
    let fp = spec.forward_bound(g, leaves, p, mode, rng)?.score;
    let fn_ = spec.forward_bound(g, leaves, n, mode, rng)?.score;
    let mp = g.mean(fp)?;
    let mn = g.mean(fn_)?;
    let w = g.sub(mn, mp)?;

    let xh = g.leaf(xhat);
    let fh = spec.forward_bound(g, leaves, xh, mode, rng)?.score;
    let sh = g.sum(fh)?;
    let mut pen = None;
    let (total, _) = g.grad_of_input_grad(sh, xh, &[], |g, grad| {
        let p = penalty_node(g, grad)?;
        pen = Some(p);
        let weighted = g.scale(p, lambda)?;
        g.add(w, weighted)
    })?;
    Ok([w, pen.expect("penalty recorded"), total, fp, fn_])
}

/// Gradient penalty `λ·mean (‖∇f(x̂ᵢ)‖ − 1)²` at the interpolates of paired
/// batches, and its parameter gradients by double backprop.
#[allow(clippy::too_many_arguments)]
pub fn gradient_penalty(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    x_pos: &Tensor,
    x_neg: &Tensor,
    alphas: &[f64],
    lambda: f64,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(f64, Vec<Tensor>)> {
    let xhat = interpolate(x_pos, x_neg, alphas)?;
    let mut g = Graph::new();
    let leaves = params.bind(&mut g);
    let xh = g.leaf(xhat);
    let fh = spec.forward_bound(&mut g, &leaves, xh, mode, rng)?.score;
    let sh = g.sum(fh)?;
    let (pen, grads) = g.grad_of_input_grad(sh, xh, &leaves, |g, grad| {
        let p = penalty_node(g, grad)?;
        g.scale(p, lambda)
    })?;
    Ok((g.value(pen).item(), grads.into_iter().map(|id| g.value(id).clone()).collect()))
}

/// Loss and parameter gradients for one classification batch.
#[allow(clippy::too_many_arguments)]
pub fn critic_loss(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    x_pos: &Tensor,
    x_neg: &Tensor,
    alphas: &[f64],
    loss: LossMode,
    lambda: f64,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(LossReport, Vec<Tensor>)> {
    let mut g = Graph::new();
    let leaves = params.bind(&mut g);
    match loss {
        LossMode::Wasserstein => {
            let [w, pen, total, fp, fn_] =
                record_wasserstein(&mut g, spec, &leaves, x_pos, x_neg, alphas, lambda, mode, rng)?;
            let grads = g.grad_values(total, &leaves)?;
            let report = LossReport {
                mode: loss,
                wasserstein: g.value(w).item(),
                penalty: g.value(pen).item(),
                lambda,
                cross_entropy: 0.0,
                total: g.value(total).item(),
                mean_f_pos: g.value(fp).mean(),
                mean_f_neg: g.value(fn_).mean(),
                clamped: 0,
            };
            Ok((report, grads))
        }
        LossMode::CrossEntropy => {
            let p = g.constant(x_pos.clone());
            let n = g.constant(x_neg.clone());
            let fp = spec.forward_bound(&mut g, &leaves, p, mode, rng)?.score;
            let fn_ = spec.forward_bound(&mut g, &leaves, n, mode, rng)?.score;
            let lp = g.log_sigmoid(fp)?;
            let neg = g.scale(fn_, -1.0)?;
            let ln = g.log_sigmoid(neg)?;
            let mp = g.mean(lp)?;
            let mn = g.mean(ln)?;
            let s = g.add(mp, mn)?;
            let total = g.scale(s, -1.0)?;
            let grads = g.grad_values(total, &leaves)?;
            let (fpos, fneg) = (g.value(fp).data().to_vec(), g.value(fn_).data().to_vec());
            let (_, clamped) = cross_entropy_loss(&fpos, &fneg)?;
            let report = LossReport {
                mode: loss,
                wasserstein: wasserstein_loss(&fpos, &fneg)?,
                penalty: 0.0,
                lambda: 0.0,
                cross_entropy: g.value(total).item(),
                total: g.value(total).item(),
                mean_f_pos: mean(&fpos),
                mean_f_neg: mean(&fneg),
                clamped,
            };
            Ok((report, grads))
        }
    }
}

/// Records mean softmax cross-entropy of `logits` (`[n, K]`) against
/// `labels` (0-based).
pub fn softmax_cross_entropy_node(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    let (n, k) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(WinnError::usage(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= k) {
        return Err(WinnError::usage(format!("label {y} out of range for {k} classes")));
    }
    // Row maxima are treated as constants: log-sum-exp is shift invariant,
    // so this changes only the rounding, not the derivative.
    let lv = g.value(logits).clone();
    let maxes: Vec<f64> = (0..n)
        .map(|i| lv.sample(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let m = g.constant(Tensor::new(vec![n], maxes)?);
    let mb = g.sample_broadcast(m, &shape)?;
    let z = g.sub(logits, mb)?;
    let e = g.exp(z)?;
    let s = g.sample_sum(e)?;
    let lse = g.log(s)?;
    let onehot = g.constant(Tensor::from_fn(&shape, |i| (labels[i / k] == i % k) as u8 as f64));
    let picked = g.mul(z, onehot)?;
    let picked = g.sample_sum(picked)?;
    let nll = g.sub(lse, picked)?;
    g.mean(nll)
}

/// Result of the supervised hybrid loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedReport {
    pub softmax: f64,
    /// Present when the critic term is active (`weight > 0`).
    pub critic: Option<LossReport>,
    pub weight: f64,
    pub total: f64,
}

/// Softmax cross-entropy over labeled positives plus
/// `weight · (W + λ·GP)` against pseudo-negatives.
#[allow(clippy::too_many_arguments)]
pub fn supervised_loss(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    x: &Tensor,
    labels: &[usize],
    x_neg: Option<&Tensor>,
    alphas: &[f64],
    weight: f64,
    lambda: f64,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(SupervisedReport, Vec<Tensor>)> {
    let mut g = Graph::new();
    let leaves = params.bind(&mut g);
    let xi = g.constant(x.clone());
    let fw = spec.forward_bound(&mut g, &leaves, xi, mode, rng)?;
    let logits = fw
        .logits
        .ok_or_else(|| WinnError::config(format!("{} has no class head", spec.name)))?;
    let ce = softmax_cross_entropy_node(&mut g, logits, labels)?;
    let (total, critic) = match x_neg {
        Some(neg) if weight != 0.0 => {
            let pos = x.gather(&(0..neg.batch()).collect::<Vec<_>>());
            let [w, pen, t, fp, fn_] = record_wasserstein(&mut g, spec, &leaves, &pos, neg, alphas, lambda, mode, rng)?;
            let wt = g.scale(t, weight)?;
            let total = g.add(ce, wt)?;
            let report = LossReport {
                mode: LossMode::Wasserstein,
                wasserstein: g.value(w).item(),
                penalty: g.value(pen).item(),
                lambda,
                cross_entropy: 0.0,
                total: g.value(t).item(),
                mean_f_pos: g.value(fp).mean(),
                mean_f_neg: g.value(fn_).mean(),
                clamped: 0,
            };
            (total, Some(report))
        }
        _ => (ce, None),
    };
    let grads = g.grad_values(total, &leaves)?;
    let report = SupervisedReport {
        softmax: g.value(ce).item(),
        critic,
        weight,
        total: g.value(total).item(),
    };
    Ok((report, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Classifier settings: lr 1e-4, β₁ = 0, β₂ = 0.9.
    pub const CLASSIFIER: AdamConfig = AdamConfig {
        lr: 1e-4,
        beta1: 0.0,
        beta2: 0.9,
        eps: 1e-8,
    };
    /// Input-space ascent settings: lr 0.01, β₁ = 0.9, β₂ = 0.99.
    pub const SYNTHESIS: AdamConfig = AdamConfig {
        lr: 0.01,
        beta1: 0.9,
        beta2: 0.99,
        eps: 1e-8,
    };
}

/// One bias-corrected Adam update of `x` in place, at step `t ≥ 1`.
/// `direction` is `-1` for descent and `+1` for ascent.
pub fn adam_update(cfg: &AdamConfig, t: u64, x: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], direction: f64) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..x.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        x[i] += direction * cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Adam moments for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.values().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One descent step. Non-finite or mis-shaped gradients abort the step
    /// with the parameters and moments untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(WinnError::usage(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (e, gr) in params.entries().iter().zip(grads) {
            if e.value.shape() != gr.shape() {
                return Err(WinnError::usage(format!(
                    "gradient for {} has shape {:?}, expected {:?}",
                    e.name,
                    gr.shape(),
                    e.value.shape()
                )));
            }
            if !gr.is_finite() {
                return Err(WinnError::numeric(
                    format!("adam step {}", self.step + 1),
                    format!("non-finite gradient for {}", e.name),
                ));
            }
        }
        self.step += 1;
        for (((p, gr), m), v) in params.values_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            adam_update(&self.config, self.step, p.data_mut(), gr.data(), m.data_mut(), v.data_mut(), -1.0);
        }
        Ok(())
    }
}

/// `adam_step` as a free function.
pub fn adam_step(state: &mut AdamState, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
    state.step(params, grads)
}

/// Produces batches of a requested size.
pub trait BatchSource {
    fn next_batch(&mut self, count: usize, rng: &mut dyn RngCore) -> Result<Tensor>;
}

impl<F: FnMut(usize, &mut dyn RngCore) -> Result<Tensor>> BatchSource for F {
    fn next_batch(&mut self, count: usize, rng: &mut dyn RngCore) -> Result<Tensor> {
        self(count, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationSettings {
    pub inner_steps: usize,
    pub half_batch: usize,
    pub lambda: f64,
    pub loss: LossMode,
    /// Run the network in train mode (dropout active).
    pub dropout: bool,
}

impl Default for ClassificationSettings {
    fn default() -> Self {
        ClassificationSettings {
            inner_steps: DEFAULT_INNER_STEPS,
            half_batch: DEFAULT_HALF_BATCH,
            lambda: DEFAULT_LAMBDA,
            loss: LossMode::Wasserstein,
            dropout: false,
        }
    }
}

/// `k` Adam steps, each on a fresh batch of positives and pseudo-negatives
/// with fresh interpolation weights.
pub fn classification_step(
    spec: &ArchitectureSpec,
    params: &mut ModelParams,
    adam: &mut AdamState,
    positives: &mut dyn BatchSource,
    negatives: &mut dyn BatchSource,
    settings: &ClassificationSettings,
    rng: &mut dyn RngCore,
) -> Result<Vec<LossReport>> {
    let mode = if settings.dropout { Mode::Train } else { Mode::Eval };
    let mut reports = Vec::with_capacity(settings.inner_steps);
    for _ in 0..settings.inner_steps {
        let xp = positives.next_batch(settings.half_batch, rng)?;
        let xn = negatives.next_batch(settings.half_batch, rng)?;
        if xp.batch() != settings.half_batch || xn.batch() != settings.half_batch {
            return Err(WinnError::config(format!(
                "sampler returned {} positives and {} pseudo-negatives, expected {} each",
                xp.batch(),
                xn.batch(),
                settings.half_batch
            )));
        }
        let alphas: Vec<f64> = (0..settings.half_batch).map(|_| rng.random::<f64>()).collect();
        let (report, grads) = critic_loss(spec, params, &xp, &xn, &alphas, settings.loss, settings.lambda, mode, rng)?;
        adam.step(params, &grads)?;
        reports.push(report);
    }
    Ok(reports)
}
