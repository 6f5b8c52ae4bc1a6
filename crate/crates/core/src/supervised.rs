//! Supervised introspective classification and the FGSM robustness
//! protocol.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode};
use crate::cascade::{PseudoNegativePool, Streams};
use crate::error::{Result, WinnError};
use crate::nn::ArchitectureSpec;
use crate::params::ModelParams;
use crate::seeds::{derive_seed, stream};
use crate::synthesis::{early_stop_threshold, init_samples, synthesize, NetField, SynthesisConfig};
use crate::tensor::Tensor;
use crate::train::{softmax_cross_entropy_node, supervised_loss, AdamConfig, AdamState, SupervisedReport};

/// Something that assigns labels to a batch.
pub trait Classifier {
    fn predict(&mut self, x: &Tensor) -> Result<Vec<usize>>;
}

/// A network with a class head.
#[derive(Debug, Clone, Copy)]
pub struct NetClassifier<'a> {
    pub spec: &'a ArchitectureSpec,
    pub params: &'a ModelParams,
}

impl Classifier for NetClassifier<'_> {
    fn predict(&mut self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(classify(self.spec, self.params, x)?.0)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted labels (0-based) and the `[n, K]` logits.
pub fn classify(spec: &ArchitectureSpec, params: &ModelParams, x: &Tensor) -> Result<(Vec<usize>, Tensor)> {
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    // Eval mode never draws from the generator.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let fw = spec.forward(&mut g, params, xi, Mode::Eval, &mut unused)?;
    let logits = fw
        .logits
        .ok_or_else(|| WinnError::config(format!("{} has no class head", spec.name)))?;
    let l = g.value(logits).clone();
    let labels = (0..l.batch()).map(|i| argmax(l.sample(i))).collect();
    Ok((labels, l))
}

/// `∇ₓ` of each sample's own softmax cross-entropy.
pub fn cross_entropy_input_grad(
    spec: &ArchitectureSpec,
    params: &ModelParams,
    x: &Tensor,
    labels: &[usize],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xi = g.leaf(x.clone());
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let fw = spec.forward(&mut g, params, xi, Mode::Eval, &mut unused)?;
    let logits = fw
        .logits
        .ok_or_else(|| WinnError::config(format!("{} has no class head", spec.name)))?;
    let ce = softmax_cross_entropy_node(&mut g, logits, labels)?;
    // The loss is a batch mean; scale back so each sample sees its own loss.
    let total = g.scale(ce, x.batch() as f64)?;
    Ok(g.grad_values(total, &[xi])?.remove(0))
}

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clip(x + ε·sign(g), −1, 1)`.
pub fn fgsm_step(x: &Tensor, grad: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(WinnError::usage(format!("FGSM epsilon must be non-negative, got {eps}")));
    }
    if x.shape() != grad.shape() {
        return Err(WinnError::usage(format!(
            "input {:?} and gradient {:?} differ",
            x.shape(),
            grad.shape()
        )));
    }
    Ok(x.zip_map(grad, |a, g| (a + eps * sign(g)).clamp(-1.0, 1.0)))
}

/// Fast gradient sign attack on the true-label cross-entropy.
pub fn fgsm(spec: &ArchitectureSpec, params: &ModelParams, x: &Tensor, labels: &[usize], eps: f64) -> Result<Tensor> {
    let grad = cross_entropy_input_grad(spec, params, x, labels)?;
    fgsm_step(x, &grad, eps)
}

/// Counts for attacks generated against method A and re-classified by B.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackReport {
    pub n: usize,
    /// Adversarial examples misclassified by A.
    pub n_a: usize,
    /// Of those, also misclassified by B.
    pub n_ab: usize,
}

impl AttackReport {
    pub fn adversarial_error(&self) -> f64 {
        self.n_a as f64 / self.n as f64
    }

    /// `1 − N_{A∩B}/N_A`; `None` when A made no mistakes.
    pub fn correction_rate(&self) -> Option<f64> {
        (self.n_a > 0).then(|| 1.0 - self.n_ab as f64 / self.n_a as f64)
    }

    pub fn csv_header() -> &'static str {
        "n,n_a,n_ab,adversarial_error,correction_rate"
    }

    pub fn csv_row(&self) -> String {
        let cr = self.correction_rate().map(|c| format!("{c}")).unwrap_or_default();
        format!("{},{},{},{},{}", self.n, self.n_a, self.n_ab, self.adversarial_error(), cr)
    }
}

impl std::fmt::Display for AttackReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "N = {}, N_A = {}, N_A∩B = {}; adversarial error {:.2}%",
            self.n,
            self.n_a,
            self.n_ab,
            100.0 * self.adversarial_error()
        )?;
        match self.correction_rate() {
            Some(c) => write!(f, ", correction rate by B {:.2}%", 100.0 * c),
            None => write!(f, ", correction rate undefined (A made no mistakes)"),
        }
    }
}

/// Attacks `(x, labels)` against A with FGSM at `eps` (in chunks of
/// `chunk`) and counts mistakes of A and B on the adversarial inputs.
pub fn evaluate_attack(
    spec_a: &ArchitectureSpec,
    params_a: &ModelParams,
    b: &mut dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    chunk: usize,
) -> Result<AttackReport> {
    if x.batch() == 0 {
        return Err(WinnError::usage("attack evaluation needs a non-empty test set"));
    }
    if labels.len() != x.batch() {
        return Err(WinnError::usage(format!("{} labels for {} inputs", labels.len(), x.batch())));
    }
    let mut report = AttackReport { n: 0, n_a: 0, n_ab: 0 };
    let chunk = chunk.max(1);
    let mut a = NetClassifier {
        spec: spec_a,
        params: params_a,
    };
    for start in (0..x.batch()).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(x.batch())).collect();
        let xs = x.gather(&idx);
        let ys = &labels[start..start + idx.len()];
        let adv = fgsm(spec_a, params_a, &xs, ys, eps)?;
        let pa = a.predict(&adv)?;
        let pb = b.predict(&adv)?;
        for ((y, ya), yb) in ys.iter().zip(pa).zip(pb) {
            report.n += 1;
            if ya != *y {
                report.n_a += 1;
                if yb != *y {
                    report.n_ab += 1;
                }
            }
        }
    }
    Ok(report)
}

/// Fraction of `(x, labels)` misclassified by `c`.
pub fn error_rate(c: &mut dyn Classifier, x: &Tensor, labels: &[usize], chunk: usize) -> Result<f64> {
    if x.batch() == 0 {
        return Err(WinnError::usage("error rate of an empty set"));
    }
    let mut wrong = 0;
    for start in (0..x.batch()).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk).min(x.batch())).collect();
        let pred = c.predict(&x.gather(&idx))?;
        wrong += pred.iter().zip(&labels[start..]).filter(|(p, y)| p != y).count();
    }
    Ok(wrong as f64 / x.batch() as f64)
}

/// Pseudo-negative generation for supervised training.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrospectionSettings {
    /// Critic weight α in `CE + α(W + λ·GP)`.
    pub weight: f64,
    pub lambda: f64,
    /// New pseudo-negatives per epoch.
    pub per_epoch: usize,
    pub threshold_batch: usize,
    pub synthesis: SynthesisConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// `None` trains the plain cross-entropy baseline.
    pub introspection: Option<IntrospectionSettings>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedEpoch {
    pub epoch: usize,
    pub mean_softmax: f64,
    pub mean_total: f64,
    pub pool_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedRun {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epochs: Vec<SupervisedEpoch>,
    pub pool: Option<PseudoNegativePool>,
    /// Critic, synthesis and mini-batch order streams, in that order.
    pub streams: Streams,
}

/// Trains a supervised-head network. The baseline and the introspective
/// variant draw parameters and mini-batch order from the same seeds, so they
/// differ only in the critic term.
pub fn train_supervised(
    spec: &ArchitectureSpec,
    x: &Tensor,
    labels: &[usize],
    settings: &SupervisedSettings,
    master_seed: u64,
) -> Result<SupervisedRun> {
    if settings.epochs == 0 || settings.batch_size == 0 {
        return Err(WinnError::config("supervised.epochs and supervised.batch_size must be at least 1"));
    }
    if x.batch() == 0 || labels.len() != x.batch() {
        return Err(WinnError::usage("supervised training needs labeled inputs"));
    }
    let mut params = spec.init_params(derive_seed(master_seed, stream::PARAMS, 1))?;
    let mut adam = AdamState::new(settings.adam, &params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, stream::DATA, 1));
    let mut critic_rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, stream::CLASSIFY, 1));
    let mut synth_rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, stream::SYNTHESIS, 1));
    let mut pool = match &settings.introspection {
        Some(intro) => {
            intro.synthesis.validate()?;
            let mut pool = PseudoNegativePool::new(&spec.input);
            let init = init_samples(&intro.synthesis.init, intro.per_epoch, &spec.input, &mut synth_rng)?;
            pool.append(&init.clamp(-1.0, 1.0), 0, 1)?;
            Some(pool)
        }
        None => None,
    };
    let mut order: Vec<usize> = (0..x.batch()).collect();
    let mut epochs = Vec::with_capacity(settings.epochs);
    for epoch in 1..=settings.epochs {
        order.shuffle(&mut order_rng);
        let (mut soft, mut tot, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(settings.batch_size) {
            let xb = x.gather(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (report, grads) = match (&settings.introspection, pool.as_mut()) {
                (Some(intro), Some(pool)) => {
                    let m = chunk.len();
                    let neg = pool.sample(m, &mut critic_rng)?;
                    let alphas: Vec<f64> = (0..m).map(|_| rand::Rng::random::<f64>(&mut critic_rng)).collect();
                    supervised_loss(
                        spec,
                        &params,
                        &xb,
                        &yb,
                        Some(&neg),
                        &alphas,
                        intro.weight,
                        intro.lambda,
                        Mode::Eval,
                        &mut critic_rng,
                    )?
                }
                _ => supervised_loss(spec, &params, &xb, &yb, None, &[], 0.0, 0.0, Mode::Eval, &mut critic_rng)?,
            };
            adam.step(&mut params, &grads)?;
            let SupervisedReport { softmax, total, .. } = report;
            soft += softmax;
            tot += total;
            batches += 1;
        }
        if let (Some(intro), Some(pool)) = (&settings.introspection, pool.as_mut()) {
            let idx: Vec<usize> = (0..intro.threshold_batch)
                .map(|_| rand::Rng::random_range(&mut synth_rng, 0..x.batch()))
                .collect();
            let reference = x.gather(&idx);
            let f_pos = spec.eval_f(&params, &reference, Mode::Eval, &mut synth_rng)?;
            let threshold = early_stop_threshold(f_pos.data(), &mut synth_rng)?;
            let dropout = ChaCha8Rng::seed_from_u64(rand::Rng::random(&mut synth_rng));
            let mut field = NetField::new(spec, &params, intro.synthesis.dropout, dropout);
            let result = synthesize(&mut field, &intro.synthesis, intro.per_epoch, threshold, &mut synth_rng)?;
            pool.append(&result.samples, epoch, 1)?;
        }
        epochs.push(SupervisedEpoch {
            epoch,
            mean_softmax: soft / batches as f64,
            mean_total: tot / batches as f64,
            pool_size: pool.as_ref().map_or(0, |p| p.len()),
        });
    }
    Ok(SupervisedRun {
        params,
        adam,
        epochs,
        pool,
        streams: Streams {
            classify: critic_rng,
            synthesis: synth_rng,
            pool: order_rng,
        },
    })
}
