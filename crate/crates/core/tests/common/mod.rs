//! Finite-difference oracles shared by the gradient tests and the acceptance
//! suite. Nothing here uses the tape's backward pass.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use winn::autodiff::{Graph, NodeId};
use winn::nn::{ArchitectureSpec, Head, Layer};
use winn::{Mode, ModelParams, Result, Tensor};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a − b| / max(|a|, |b|)`, falling back to the absolute difference when
/// both are below `1e-10`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

fn shifted(inputs: &[Tensor], dir: &[Tensor], h: f64) -> Vec<Tensor> {
    inputs
        .iter()
        .zip(dir)
        .map(|(x, d)| x.zip_map(d, |a, b| a + h * b))
        .collect()
}

/// Central difference of `f` along `dir`.
pub fn directional_fd(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], dir: &[Tensor], h: f64) -> f64 {
    let plus = f(&shifted(inputs, dir, h));
    let minus = f(&shifted(inputs, dir, -h));
    (plus - minus) / (2.0 * h)
}

/// A direction with entries drawn from [−1, 1], rescaled to unit Euclidean
/// norm across all tensors so that the step `h` is a true step length.
pub fn unit_direction(like: &[Tensor], r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let raw: Vec<Tensor> = like.iter().map(|t| Tensor::uniform(t.shape(), -1.0, 1.0, r)).collect();
    let norm = raw.iter().map(|t| t.dot(t)).sum::<f64>().sqrt();
    raw.into_iter().map(|t| t.map(|v| v / norm)).collect()
}

pub fn dot_all(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// A builder turning input leaves into an output node.
pub type Build = fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

pub struct PrimitiveCase {
    pub name: &'static str,
    /// Shape and sampling interval of each input.
    pub inputs: Vec<(Vec<usize>, f64, f64)>,
    pub build: Build,
}

/// Scalarizes `out` with fixed pseudo-random weights so every output element
/// contributes to the checked derivative.
pub fn scalarize(g: &mut Graph, out: NodeId) -> Result<NodeId> {
    let shape = g.shape(out).to_vec();
    let mut r = rng(0xC0FFEE);
    let w = g.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut r));
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

pub fn case_value(case: &PrimitiveCase, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.build)(&mut g, &ids).expect("forward");
    let s = scalarize(&mut g, out).expect("scalarize");
    g.value(s).item()
}

pub fn case_grad(case: &PrimitiveCase, inputs: &[Tensor]) -> Vec<Tensor> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.build)(&mut g, &ids).expect("forward");
    let s = scalarize(&mut g, out).expect("scalarize");
    g.grad_values(s, &ids).expect("backward")
}

/// Worst relative error over `trials` random points and directions.
pub fn check_case(case: &PrimitiveCase, trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let inputs: Vec<Tensor> = case
            .inputs
            .iter()
            .map(|(s, lo, hi)| Tensor::uniform(s, *lo, *hi, &mut r))
            .collect();
        let dir = unit_direction(&inputs, &mut r);
        let analytic = dot_all(&case_grad(case, &inputs), &dir);
        let f = |x: &[Tensor]| case_value(case, x);
        let numeric = directional_fd(&f, &inputs, &dir, FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

fn u(shape: &[usize]) -> (Vec<usize>, f64, f64) {
    (shape.to_vec(), -1.0, 1.0)
}

fn pos(shape: &[usize]) -> (Vec<usize>, f64, f64) {
    (shape.to_vec(), 0.5, 1.5)
}

/// Every tape primitive plus the composite layers built from them. Inputs are
/// drawn from [−1, 1] except where the primitive needs a positive domain.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    vec![
        PrimitiveCase { name: "add", inputs: vec![u(&[3, 4]), u(&[3, 4])], build: |g, x| g.add(x[0], x[1]) },
        PrimitiveCase { name: "sub", inputs: vec![u(&[3, 4]), u(&[3, 4])], build: |g, x| g.sub(x[0], x[1]) },
        PrimitiveCase { name: "mul", inputs: vec![u(&[3, 4]), u(&[3, 4])], build: |g, x| g.mul(x[0], x[1]) },
        PrimitiveCase { name: "scale", inputs: vec![u(&[5])], build: |g, x| g.scale(x[0], -1.7) },
        PrimitiveCase { name: "add_scalar", inputs: vec![u(&[5])], build: |g, x| g.add_scalar(x[0], 0.3) },
        PrimitiveCase { name: "square", inputs: vec![u(&[6])], build: |g, x| g.square(x[0]) },
        PrimitiveCase { name: "pow_cube", inputs: vec![u(&[6])], build: |g, x| g.pow_scalar(x[0], 3.0) },
        PrimitiveCase { name: "pow_sqrt", inputs: vec![pos(&[6])], build: |g, x| g.pow_scalar(x[0], 0.5) },
        PrimitiveCase { name: "pow_rsqrt", inputs: vec![pos(&[6])], build: |g, x| g.pow_scalar(x[0], -0.5) },
        PrimitiveCase { name: "pow_recip", inputs: vec![pos(&[6])], build: |g, x| g.pow_scalar(x[0], -1.0) },
        PrimitiveCase { name: "exp", inputs: vec![u(&[6])], build: |g, x| g.exp(x[0]) },
        PrimitiveCase { name: "log", inputs: vec![pos(&[6])], build: |g, x| g.log(x[0]) },
        PrimitiveCase { name: "sigmoid", inputs: vec![u(&[6])], build: |g, x| g.sigmoid(x[0]) },
        PrimitiveCase { name: "swish", inputs: vec![u(&[6])], build: |g, x| g.swish(x[0]) },
        PrimitiveCase { name: "log_sigmoid", inputs: vec![u(&[6])], build: |g, x| g.log_sigmoid(x[0]) },
        PrimitiveCase { name: "matmul", inputs: vec![u(&[3, 4]), u(&[4, 2])], build: |g, x| g.matmul(x[0], x[1]) },
        PrimitiveCase { name: "transpose", inputs: vec![u(&[3, 4])], build: |g, x| g.transpose(x[0]) },
        PrimitiveCase {
            name: "conv3x3",
            inputs: vec![u(&[2, 3, 5, 4]), u(&[2, 3, 3, 3])],
            build: |g, x| g.conv2d(x[0], x[1]),
        },
        PrimitiveCase {
            name: "conv5x5",
            inputs: vec![u(&[2, 2, 6, 6]), u(&[3, 2, 5, 5])],
            build: |g, x| g.conv2d(x[0], x[1]),
        },
        PrimitiveCase {
            name: "conv_back_input",
            inputs: vec![u(&[2, 3, 4, 4]), u(&[3, 2, 3, 3])],
            build: |g, x| g.conv2d_back_input(x[0], x[1]),
        },
        PrimitiveCase {
            name: "conv_back_weight",
            inputs: vec![u(&[2, 2, 4, 4]), u(&[2, 3, 4, 4])],
            build: |g, x| g.conv2d_back_weight(x[0], x[1], 3),
        },
        PrimitiveCase { name: "avg_pool2", inputs: vec![u(&[2, 3, 4, 6])], build: |g, x| g.avg_pool2(x[0]) },
        PrimitiveCase { name: "upsample2", inputs: vec![u(&[2, 3, 2, 3])], build: |g, x| g.upsample2(x[0]) },
        PrimitiveCase { name: "channel_sum", inputs: vec![u(&[2, 3, 2, 2])], build: |g, x| g.channel_sum(x[0]) },
        PrimitiveCase {
            name: "channel_broadcast",
            inputs: vec![u(&[3])],
            build: |g, x| g.channel_broadcast(x[0], &[2, 3, 2, 2]),
        },
        PrimitiveCase { name: "sample_sum", inputs: vec![u(&[3, 2, 2])], build: |g, x| g.sample_sum(x[0]) },
        PrimitiveCase {
            name: "sample_broadcast",
            inputs: vec![u(&[3])],
            build: |g, x| g.sample_broadcast(x[0], &[3, 2, 2]),
        },
        PrimitiveCase { name: "sum", inputs: vec![u(&[3, 2])], build: |g, x| g.sum(x[0]) },
        PrimitiveCase {
            name: "broadcast_scalar",
            inputs: vec![u(&[1])],
            build: |g, x| g.broadcast_scalar(x[0], &[2, 3]),
        },
        PrimitiveCase { name: "reshape", inputs: vec![u(&[2, 6])], build: |g, x| g.reshape(x[0], &[3, 4]) },
        PrimitiveCase { name: "mean", inputs: vec![u(&[4, 3])], build: |g, x| g.mean(x[0]) },
        PrimitiveCase { name: "l2_norm", inputs: vec![u(&[2, 5])], build: |g, x| g.sample_l2_norm(x[0]) },
        PrimitiveCase {
            name: "dense",
            inputs: vec![u(&[3, 4]), u(&[4, 2]), u(&[2])],
            build: |g, x| g.dense(x[0], x[1], x[2]),
        },
        PrimitiveCase {
            name: "layer_norm",
            inputs: vec![u(&[2, 3, 2, 2]), u(&[3]), u(&[3])],
            build: |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5),
        },
        PrimitiveCase {
            name: "dropout_recorded_mask",
            inputs: vec![u(&[4, 5])],
            build: |g, x| {
                let mut r = rng(42);
                g.dropout(x[0], 0.5, winn::Mode::Train, &mut r)
            },
        },
    ]
}

/// A small network containing every primitive family the gradient penalty
/// path touches: convolution, layer norm, swish, pooling and dense layers.
pub fn penalty_test_net() -> ArchitectureSpec {
    ArchitectureSpec {
        name: "penalty-test".into(),
        input: vec![2, 8, 8],
        layers: vec![
            Layer::Conv { k: 3, out: 3, layer_norm: false, swish: true },
            Layer::Conv { k: 3, out: 4, layer_norm: true, swish: true },
            Layer::AvgPool,
            Layer::Conv { k: 5, out: 4, layer_norm: true, swish: true },
            Layer::AvgPool,
            Layer::Dense { out: 6, layer_norm: true, swish: true },
        ],
        head: Head::Score,
    }
}

/// The WGAN-GP penalty `mean_i (‖∇ f(x̂ᵢ)‖ − 1)²` of `spec` at `params`, and
/// its parameter gradient from double backprop.
pub fn penalty_and_grad(spec: &ArchitectureSpec, params: &ModelParams, xhat: &Tensor) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let x = g.leaf(xhat.clone());
    let fw = spec.forward(&mut g, params, x, Mode::Eval, &mut rng(0)).unwrap();
    let total = g.sum(fw.score).unwrap();
    let (p, grads) = g
        .grad_of_input_grad(total, x, &fw.params, |g, gx| {
            let n = g.sample_l2_norm(gx)?;
            let d = g.add_scalar(n, -1.0)?;
            let sq = g.square(d)?;
            g.mean(sq)
        })
        .unwrap();
    let grads = grads.iter().map(|&id| g.value(id).clone()).collect();
    (g.value(p).item(), grads)
}

pub fn with_values(params: &ModelParams, values: &[Tensor]) -> ModelParams {
    let mut out = params.clone();
    for (dst, src) in out.values_mut().zip(values) {
        *dst = src.clone();
    }
    out
}

/// Jitters freshly initialized parameters so biases and gains are not at
/// their degenerate initial values.
pub fn perturbed_params(spec: &ArchitectureSpec, seed: u64, weight_scale: f64) -> ModelParams {
    let mut params = spec.init_params(seed).unwrap();
    let mut r = rng(seed ^ 0x5151);
    for v in params.values_mut() {
        let jitter = Tensor::uniform(v.shape(), -1.0, 1.0, &mut r);
        *v = v.zip_map(&jitter, |a, b| a + weight_scale * b);
    }
    params
}

/// Stacks every patch gradient at the canvas pixels it covers (wrapping at
/// the edges), then averages each pixel's stack. Uncovered pixels get 0.
pub fn stacking_oracle(channels: usize, working: usize, patch: usize, locs: &[(usize, usize)], grads: &Tensor) -> Vec<f64> {
    let mut stack: Vec<Vec<f64>> = vec![Vec::new(); channels * working * working];
    for (k, &(r0, c0)) in locs.iter().enumerate() {
        for ch in 0..channels {
            for i in 0..patch {
                for j in 0..patch {
                    let px = ((r0 + i) % working) * working + (c0 + j) % working;
                    stack[ch * working * working + px].push(grads.sample(k)[(ch * patch + i) * patch + j]);
                }
            }
        }
    }
    stack
        .iter()
        .map(|v| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 })
        .collect()
}

/// Chi-square test of equal coverage of the central crop by the patch
/// sampler: each sampled patch votes for one uniformly chosen pixel it
/// covers, so the vote distribution is the normalized per-pixel coverage.
/// Returns (statistic, p-value, fraction of votes landing in the crop).
pub fn coverage_chi_square(geom: &winn::synthesis::Canvas, draws: usize, seed: u64) -> (f64, f64, f64) {
    use rand::Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let (p, cs, mg) = (geom.patch, geom.center, geom.margin());
    let mut r = rng(seed);
    let mut counts = vec![0u64; cs * cs];
    for _ in 0..draws {
        let loc = geom.sample_location(&mut r);
        let (i, j) = (r.random_range(0..p), r.random_range(0..p));
        let (y, x) = geom.pixel(loc, i, j);
        if (mg..mg + cs).contains(&y) && (mg..mg + cs).contains(&x) {
            counts[(y - mg) * cs + (x - mg)] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    (stat, 1.0 - dist.cdf(stat), total as f64 / draws as f64)
}
