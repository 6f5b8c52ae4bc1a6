//! The synthesis step: pseudo-negatives by gradient ascent on the input,
//! with the random early-stopping threshold, optional Langevin noise, and
//! anysize texture generation by patch-gradient averaging.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::autodiff::Mode;
use crate::error::{Result, WinnError};
use crate::nn::alt_init::AltInitializer;
use crate::nn::ArchitectureSpec;
use crate::params::ModelParams;
use crate::tensor::Tensor;
use crate::train::{adam_update, AdamConfig};

/// Elements beyond this magnitude (before clipping) count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    Gaussian { sigma: f64 },
    AltInitializer(AltInitializer),
    /// Uniform draws (with replacement) from a previous cascade's samples.
    FromSamples(Tensor),
}

/// `ε_t = eps · decay^(t−1)` for step `t ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpsSchedule {
    pub eps: f64,
    pub decay: f64,
}

impl EpsSchedule {
    pub fn at(&self, step: usize) -> f64 {
        self.eps * self.decay.powi(step as i32 - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ascent {
    /// Adam ascent on pixels; with `noise`, `η ~ N(0, ε_t)` is added after
    /// every update.
    Adam { adam: AdamConfig, noise: Option<EpsSchedule> },
    /// The literal Langevin rule `Δx = (ε_t/2)·∇f + η`, `η ~ N(0, ε_t)`.
    Langevin(EpsSchedule),
}

impl Ascent {
    pub const DEFAULT: Ascent = Ascent::Adam {
        adam: AdamConfig::SYNTHESIS,
        noise: None,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisConfig {
    pub init: InitMode,
    pub ascent: Ascent,
    pub max_steps: usize,
    /// Evaluate the network in train mode so dropout stays active.
    pub dropout: bool,
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(WinnError::config("synthesis.max_steps must be at least 1"));
        }
        if let InitMode::Gaussian { sigma } = self.init {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(WinnError::config(format!("synthesis.sigma must be positive, got {sigma}")));
            }
        }
        if let InitMode::FromSamples(t) = &self.init {
            if t.batch() == 0 {
                return Err(WinnError::config("no previous-cascade samples to initialize from"));
            }
        }
        let sched = match self.ascent {
            Ascent::Adam { noise, .. } => noise,
            Ascent::Langevin(s) => Some(s),
        };
        if let Some(s) = sched {
            if !(s.eps >= 0.0 && s.decay > 0.0 && s.eps.is_finite() && s.decay.is_finite()) {
                return Err(WinnError::config(format!("invalid step-size schedule {s:?}")));
            }
        }
        Ok(())
    }
}

/// Draws `count` initial samples of `shape` (without batch axis).
pub fn init_samples(init: &InitMode, count: usize, shape: &[usize], rng: &mut dyn RngCore) -> Result<Tensor> {
    let mut full = vec![count];
    full.extend_from_slice(shape);
    match init {
        InitMode::Gaussian { sigma } => Ok(Tensor::gaussian(&full, 0.0, *sigma, rng)),
        InitMode::AltInitializer(net) => {
            if net.output_shape()[..] != shape[..] {
                return Err(WinnError::config(format!(
                    "initializer produces {:?}, model expects {shape:?}",
                    net.output_shape()
                )));
            }
            net.sample(count, rng)
        }
        InitMode::FromSamples(src) => {
            if src.shape()[1..] != shape[..] {
                return Err(WinnError::config(format!(
                    "previous samples have shape {:?}, model expects {shape:?}",
                    &src.shape()[1..]
                )));
            }
            if src.batch() == 0 {
                return Err(WinnError::config("no previous-cascade samples to initialize from"));
            }
            let idx: Vec<usize> = (0..count).map(|_| rng.random_range(0..src.batch())).collect();
            Ok(src.gather(&idx))
        }
    }
}

/// `u ~ U[min f⁺, max f⁺]`.
pub fn early_stop_threshold(f_pos: &[f64], rng: &mut dyn RngCore) -> Result<f64> {
    if f_pos.is_empty() {
        return Err(WinnError::usage("early-stopping threshold needs at least one positive score"));
    }
    let lo = f_pos.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = f_pos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(lo);
    }
    let u: f64 = rng.random();
    Ok((lo + u * (hi - lo)).min(hi))
}

/// A differentiable score over a batch of inputs.
pub trait ScoreField {
    /// Input shape without the batch axis.
    fn input_shape(&self) -> Vec<usize>;
    /// Per-sample scores `[n]` and input gradients (same shape as `batch`).
    fn score_and_grad(&mut self, batch: &Tensor) -> Result<(Tensor, Tensor)>;
}

/// `f_W` of a trained network.
pub struct NetField<'a, R: RngCore> {
    pub spec: &'a ArchitectureSpec,
    pub params: &'a ModelParams,
    pub mode: Mode,
    /// Drives dropout masks in train mode.
    pub rng: R,
}

impl<'a, R: RngCore> NetField<'a, R> {
    pub fn new(spec: &'a ArchitectureSpec, params: &'a ModelParams, dropout: bool, rng: R) -> Self {
        NetField {
            spec,
            params,
            mode: if dropout { Mode::Train } else { Mode::Eval },
            rng,
        }
    }
}

impl<R: RngCore> ScoreField for NetField<'_, R> {
    fn input_shape(&self) -> Vec<usize> {
        self.spec.input.clone()
    }

    fn score_and_grad(&mut self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        self.spec.score_and_input_grad(self.params, batch, self.mode, &mut self.rng)
    }
}

/// A closure-backed field `x ↦ (f(x), ∇f(x))` applied per sample.
pub struct FnField<F> {
    pub shape: Vec<usize>,
    pub f: F,
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> ScoreField for FnField<F> {
    fn input_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn score_and_grad(&mut self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = batch.batch();
        let mut scores = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(batch.numel());
        for i in 0..n {
            let (s, g) = (self.f)(batch.sample(i));
            scores.push(s);
            grads.extend(g);
        }
        Ok((Tensor::new(vec![n], scores)?, Tensor::new(batch.shape().to_vec(), grads)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisResult {
    /// Emitted samples, every element in `[-1, 1]`.
    pub samples: Tensor,
    /// Evaluation (1-based) at which the threshold was met; `max_steps` when
    /// the budget ran out.
    pub stop_step: Vec<usize>,
    /// `f` of each emitted sample.
    pub scores: Vec<f64>,
    pub budget_exhausted: Vec<bool>,
    pub reinitialized: Vec<bool>,
    pub threshold: f64,
}

impl SynthesisResult {
    /// Every sample either reached the threshold or is flagged.
    pub fn stop_contract_holds(&self) -> bool {
        self.scores
            .iter()
            .zip(&self.budget_exhausted)
            .all(|(&s, &flag)| flag || s >= self.threshold)
    }
}

struct Particle {
    x: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Particle {
    fn new(x: &[f64]) -> Self {
        Particle {
            x: x.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            m: vec![0.0; x.len()],
            v: vec![0.0; x.len()],
            t: 0,
        }
    }
}

fn gaussian_noise(x: &mut [f64], variance: f64, rng: &mut dyn RngCore) {
    if variance <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("valid noise scale");
    for xi in x {
        *xi += normal.sample(rng);
    }
}

/// Applies one ascent update to a particle; returns false on divergence.
fn ascend(p: &mut Particle, grad: &[f64], ascent: &Ascent, rng: &mut dyn RngCore) -> bool {
    p.t += 1;
    match ascent {
        Ascent::Adam { adam, noise } => {
            adam_update(adam, p.t, &mut p.x, grad, &mut p.m, &mut p.v, 1.0);
            if let Some(s) = noise {
                gaussian_noise(&mut p.x, s.at(p.t as usize), rng);
            }
        }
        Ascent::Langevin(s) => {
            let eps = s.at(p.t as usize);
            for (xi, gi) in p.x.iter_mut().zip(grad) {
                *xi += 0.5 * eps * gi;
            }
            gaussian_noise(&mut p.x, eps, rng);
        }
    }
    let ok = p.x.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT);
    for v in &mut p.x {
        *v = v.clamp(-1.0, 1.0);
    }
    ok
}

/// Raises `f` on `count` fresh samples until each reaches `threshold` or the
/// step budget runs out.
///
/// The iterate is projected onto `[-1, 1]` after every update, so the
/// stopping test and the reported scores apply to exactly the emitted
/// samples. A sample that diverges is re-initialized once; a second
/// divergence is a numeric error.
pub fn synthesize(
    field: &mut dyn ScoreField,
    config: &SynthesisConfig,
    count: usize,
    threshold: f64,
    rng: &mut dyn RngCore,
) -> Result<SynthesisResult> {
    config.validate()?;
    if !threshold.is_finite() {
        return Err(WinnError::usage(format!("early-stopping threshold {threshold} is not finite")));
    }
    let shape = field.input_shape();
    let init = init_samples(&config.init, count, &shape, rng)?;
    let mut particles: Vec<Particle> = (0..count).map(|i| Particle::new(init.sample(i))).collect();
    let mut stop_step = vec![config.max_steps; count];
    let mut scores = vec![f64::NAN; count];
    let mut flagged = vec![false; count];
    let mut reinit = vec![false; count];
    let mut active: Vec<usize> = (0..count).collect();

    for step in 1..=config.max_steps {
        if active.is_empty() {
            break;
        }
        let batch = Tensor::stack(&shape, &active.iter().map(|&i| particles[i].x.as_slice()).collect::<Vec<_>>())?;
        let (f, grad) = field.score_and_grad(&batch)?;
        let mut still = Vec::with_capacity(active.len());
        for (j, &i) in active.iter().enumerate() {
            let s = f.data()[j];
            if s >= threshold {
                stop_step[i] = step;
                scores[i] = s;
                continue;
            }
            if !ascend(&mut particles[i], grad.sample(j), &config.ascent, rng) {
                if reinit[i] {
                    return Err(WinnError::numeric(
                        format!("synthesis sample {i}, step {step}"),
                        "diverged twice",
                    ));
                }
                reinit[i] = true;
                let fresh = init_samples(&config.init, 1, &shape, rng)?;
                particles[i] = Particle::new(fresh.data());
            }
            still.push(i);
        }
        active = still;
    }
    if !active.is_empty() {
        let batch = Tensor::stack(&shape, &active.iter().map(|&i| particles[i].x.as_slice()).collect::<Vec<_>>())?;
        let (f, _) = field.score_and_grad(&batch)?;
        for (j, &i) in active.iter().enumerate() {
            scores[i] = f.data()[j];
            flagged[i] = scores[i] < threshold;
            stop_step[i] = config.max_steps;
        }
    }
    let samples = Tensor::stack(&shape, &particles.iter().map(|p| p.x.as_slice()).collect::<Vec<_>>())?;
    Ok(SynthesisResult {
        samples,
        stop_step,
        scores,
        budget_exhausted: flagged,
        reinitialized: reinit,
        threshold,
    })
}

/// Working-canvas geometry for anysize generation.
///
/// The canvas is treated as a torus: patch top-left corners are uniform over
/// all `working²` positions and patches wrap around the edges, so every
/// canvas pixel — in particular every pixel of the central crop — is covered
/// with the same probability `patch² / working²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Canvas {
    pub working: usize,
    pub center: usize,
    pub patch: usize,
}

impl Canvas {
    pub const DEFAULT: Canvas = Canvas {
        working: 320,
        center: 256,
        patch: 64,
    };

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.working < self.patch || self.center > self.working {
            return Err(WinnError::config(format!(
                "canvas {}×{} cannot hold {}×{} patches and a {}×{} center",
                self.working, self.working, self.patch, self.patch, self.center, self.center
            )));
        }
        if (self.working - self.center) % 2 != 0 {
            return Err(WinnError::config("canvas margin must be even"));
        }
        Ok(())
    }

    pub fn margin(&self) -> usize {
        (self.working - self.center) / 2
    }

    /// A patch top-left `(row, col)`.
    pub fn sample_location(&self, rng: &mut dyn RngCore) -> (usize, usize) {
        (rng.random_range(0..self.working), rng.random_range(0..self.working))
    }

    /// Canvas pixel index `(row, col)` of patch pixel `(i, j)`.
    pub fn pixel(&self, loc: (usize, usize), i: usize, j: usize) -> (usize, usize) {
        ((loc.0 + i) % self.working, (loc.1 + j) % self.working)
    }
}

/// Copies the patches at `locs` out of a `[c, W, W]` canvas.
pub fn extract_patches(canvas: &Tensor, geom: &Canvas, locs: &[(usize, usize)]) -> Tensor {
    let c = canvas.shape()[0];
    let (w, p) = (geom.working, geom.patch);
    let src = canvas.data();
    let mut out = Vec::with_capacity(locs.len() * c * p * p);
    for &loc in locs {
        for ch in 0..c {
            for i in 0..p {
                for j in 0..p {
                    let (r, q) = geom.pixel(loc, i, j);
                    out.push(src[(ch * w + r) * w + q]);
                }
            }
        }
    }
    Tensor::new(vec![locs.len(), c, p, p], out).expect("patch batch shape")
}

/// Scatters per-patch gradients back onto the canvas and divides every pixel
/// by the number of patches covering it. Uncovered pixels get zero.
pub fn average_patch_gradients(canvas_shape: &[usize], geom: &Canvas, locs: &[(usize, usize)], grads: &Tensor) -> Tensor {
    let c = canvas_shape[0];
    let (w, p) = (geom.working, geom.patch);
    let mut sum = vec![0.0; c * w * w];
    let mut count = vec![0u32; w * w];
    for (k, &loc) in locs.iter().enumerate() {
        let g = grads.sample(k);
        for i in 0..p {
            for j in 0..p {
                let (r, q) = geom.pixel(loc, i, j);
                count[r * w + q] += 1;
                for ch in 0..c {
                    sum[(ch * w + r) * w + q] += g[(ch * p + i) * p + j];
                }
            }
        }
    }
    for ch in 0..c {
        for px in 0..w * w {
            if count[px] > 0 {
                sum[ch * w * w + px] /= count[px] as f64;
            }
        }
    }
    Tensor::new(canvas_shape.to_vec(), sum).expect("canvas shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnysizeResult {
    /// The central `[c, center, center]` crop.
    pub image: Tensor,
    /// The whole working canvas.
    pub canvas: Tensor,
    /// Mean patch score per iteration.
    pub mean_scores: Vec<f64>,
}

/// Texture synthesis beyond the model's input size: every iteration samples
/// `patches` locations, averages their input gradients on overlapping
/// pixels, and takes one Adam ascent step on the whole canvas.
pub fn anysize_synthesize(
    field: &mut dyn ScoreField,
    geom: &Canvas,
    patches: usize,
    iters: usize,
    adam: &AdamConfig,
    init_sigma: f64,
    rng: &mut dyn RngCore,
) -> Result<AnysizeResult> {
    geom.validate()?;
    let shape = field.input_shape();
    if shape.len() != 3 || shape[1] != geom.patch || shape[2] != geom.patch {
        return Err(WinnError::config(format!(
            "patch model input {shape:?} does not match {}×{} patches",
            geom.patch, geom.patch
        )));
    }
    if patches == 0 {
        return Err(WinnError::config("patches per iteration must be at least 1"));
    }
    let c = shape[0];
    let cshape = [c, geom.working, geom.working];
    let mut canvas = Tensor::gaussian(&cshape, 0.0, init_sigma, rng).clamp(-1.0, 1.0);
    let (mut m, mut v) = (vec![0.0; canvas.numel()], vec![0.0; canvas.numel()]);
    let mut mean_scores = Vec::with_capacity(iters);
    for t in 1..=iters {
        let locs: Vec<(usize, usize)> = (0..patches).map(|_| geom.sample_location(rng)).collect();
        let batch = extract_patches(&canvas, geom, &locs);
        let (f, g) = field.score_and_grad(&batch)?;
        mean_scores.push(f.mean());
        let avg = average_patch_gradients(&cshape, geom, &locs, &g);
        adam_update(adam, t as u64, canvas.data_mut(), avg.data(), &mut m, &mut v, 1.0);
        if !canvas.is_finite() {
            return Err(WinnError::numeric(format!("anysize iteration {t}"), "canvas became non-finite"));
        }
        canvas = canvas.clamp(-1.0, 1.0);
    }
    let (mg, cs) = (geom.margin(), geom.center);
    let w = geom.working;
    let image = Tensor::from_fn(&[c, cs, cs], |idx| {
        let ch = idx / (cs * cs);
        let r = (idx / cs) % cs;
        let q = idx % cs;
        canvas.data()[(ch * w + r + mg) * w + q + mg]
    });
    Ok(AnysizeResult {
        image,
        canvas,
        mean_scores,
    })
}
