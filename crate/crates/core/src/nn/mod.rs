//! Architecture presets and the forward pass `f_W(x)`.

pub mod alt_init;

pub use alt_init::AltInitializer;

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, NodeId};
use crate::error::{Result, WinnError};
use crate::params::{ModelParams, Role};
use crate::tensor::{numel, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Standard deviation of trainable weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Stride-1 "same" convolution, optionally followed by layer
    /// normalization and then swish.
    Conv {
        k: usize,
        out: usize,
        layer_norm: bool,
        swish: bool,
    },
    AvgPool,
    Upsample,
    /// Affine layer; a multi-axis input is flattened first.
    Dense {
        out: usize,
        layer_norm: bool,
        swish: bool,
    },
    Dropout {
        p: f64,
    },
}

/// What the last layer produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// A single unsquashed score per sample (`FC-1`).
    Score,
    /// `K` class logits plus a separate score head sharing the same features.
    Supervised(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub name: String,
    /// Per-sample input shape: `[c, h, w]` or `[d]`.
    pub input: Vec<usize>,
    pub layers: Vec<Layer>,
    pub head: Head,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preset {
    /// The 64×64×3 texture / face network, exactly as tabulated.
    AppendixC64,
    /// The same topology with every channel count divided by
    /// `channel_div` and an `input_size`×`input_size` input.
    AppendixCScaled { channel_div: usize, input_size: usize },
    /// Three swish hidden layers of width `hidden` on 2-D points.
    Mlp2d { hidden: usize },
    /// A small digit CNN with `classes` logits and a score head.
    SupervisedHead { classes: usize, input_size: usize },
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Preset::AppendixC64 => write!(f, "appendixC64"),
            Preset::AppendixCScaled { channel_div, input_size } => {
                write!(f, "appendixC_scaled({channel_div},{input_size})")
            }
            Preset::Mlp2d { hidden } => write!(f, "mlp2d({hidden})"),
            Preset::SupervisedHead { classes, input_size } => {
                write!(f, "supervised_head({classes},{input_size})")
            }
        }
    }
}

impl FromStr for Preset {
    type Err = WinnError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "appendixC64" {
            return Ok(Preset::AppendixC64);
        }
        let (name, args) = s
            .strip_suffix(')')
            .and_then(|head| head.split_once('('))
            .ok_or_else(|| WinnError::config(format!("unknown architecture preset {s:?}")))?;
        let nums = args
            .split(',')
            .map(|a| a.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| WinnError::config(format!("preset {s:?}: {e}")))?;
        match (name, nums.as_slice()) {
            ("appendixC_scaled", [c, size]) => Ok(Preset::AppendixCScaled {
                channel_div: *c,
                input_size: *size,
            }),
            ("mlp2d", [h]) => Ok(Preset::Mlp2d { hidden: *h }),
            ("supervised_head", [k]) => Ok(Preset::SupervisedHead {
                classes: *k,
                input_size: 14,
            }),
            ("supervised_head", [k, size]) => Ok(Preset::SupervisedHead {
                classes: *k,
                input_size: *size,
            }),
            _ => Err(WinnError::config(format!("unknown architecture preset {s:?}"))),
        }
    }
}

const APPENDIX_C_CHANNELS: [usize; 8] = [32, 64, 64, 128, 128, 256, 256, 512];

impl Preset {
    pub fn spec(&self) -> Result<ArchitectureSpec> {
        match *self {
            Preset::AppendixC64 => appendix_c(1, 64, self.to_string()),
            Preset::AppendixCScaled { channel_div, input_size } => {
                appendix_c(channel_div, input_size, self.to_string())
            }
            Preset::Mlp2d { hidden } => {
                if hidden == 0 {
                    return Err(WinnError::config("mlp2d needs at least one hidden unit"));
                }
                let hidden_layer = Layer::Dense {
                    out: hidden,
                    layer_norm: false,
                    swish: true,
                };
                let spec = ArchitectureSpec {
                    name: self.to_string(),
                    input: vec![2],
                    layers: vec![hidden_layer.clone(), hidden_layer.clone(), hidden_layer],
                    head: Head::Score,
                };
                spec.validate()?;
                Ok(spec)
            }
            Preset::SupervisedHead { classes, input_size } => {
                if classes < 2 {
                    return Err(WinnError::config(format!("supervised head needs K >= 2, got {classes}")));
                }
                if input_size % 2 != 0 || input_size == 0 {
                    return Err(WinnError::config(format!(
                        "supervised input size {input_size} must be even"
                    )));
                }
                let conv = |out| Layer::Conv {
                    k: 3,
                    out,
                    layer_norm: false,
                    swish: true,
                };
                let spec = ArchitectureSpec {
                    name: self.to_string(),
                    input: vec![1, input_size, input_size],
                    layers: vec![
                        conv(16),
                        Layer::AvgPool,
                        conv(32),
                        Layer::Dense {
                            out: 64,
                            layer_norm: false,
                            swish: true,
                        },
                    ],
                    head: Head::Supervised(classes),
                };
                spec.validate()?;
                Ok(spec)
            }
        }
    }

    /// Builds the architecture and a deterministic initialization.
    pub fn build(&self, seed: u64) -> Result<(ArchitectureSpec, ModelParams)> {
        let spec = self.spec()?;
        let params = spec.init_params(seed)?;
        Ok((spec, params))
    }
}

fn appendix_c(channel_div: usize, input_size: usize, name: String) -> Result<ArchitectureSpec> {
    if channel_div == 0 || APPENDIX_C_CHANNELS.iter().any(|c| c % channel_div != 0) {
        return Err(WinnError::config(format!(
            "channel divisor {channel_div} does not divide every channel count of {APPENDIX_C_CHANNELS:?}"
        )));
    }
    if input_size == 0 || input_size % 16 != 0 {
        return Err(WinnError::config(format!(
            "input size {input_size} does not survive four 2x2 poolings with an integer size"
        )));
    }
    let mut layers = Vec::new();
    for (i, &c) in APPENDIX_C_CHANNELS.iter().enumerate() {
        layers.push(Layer::Conv {
            k: 3,
            out: c / channel_div,
            layer_norm: i != 0,
            swish: true,
        });
        if i % 2 == 1 {
            layers.push(Layer::AvgPool);
        }
    }
    let spec = ArchitectureSpec {
        name,
        input: vec![3, input_size, input_size],
        layers,
        head: Head::Score,
    };
    spec.validate()?;
    Ok(spec)
}

/// Parameter and output names of one layer, by position.
fn layer_name(i: usize, layer: &Layer) -> String {
    match layer {
        Layer::Conv { .. } => format!("conv{i}"),
        Layer::Dense { .. } => format!("dense{i}"),
        Layer::AvgPool => format!("pool{i}"),
        Layer::Upsample => format!("upsample{i}"),
        Layer::Dropout { .. } => format!("dropout{i}"),
    }
}

/// The nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Parameter leaves, in [`ModelParams`] order.
    pub params: Vec<NodeId>,
    /// Features entering the head, `[n, f]`.
    pub features: NodeId,
    /// `f_W(x)`, one score per sample: `[n]`.
    pub score: NodeId,
    /// Class logits `[n, K]` for supervised heads.
    pub logits: Option<NodeId>,
}

impl ArchitectureSpec {
    /// Inserts `Dropout { p }` after each of the last `top` convolution or
    /// dense layers. `p = 0` or `top = 0` leaves the spec unchanged.
    pub fn with_dropout(mut self, p: f64, top: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(WinnError::config(format!("model.dropout must be in [0, 1), got {p}")));
        }
        if p == 0.0 || top == 0 {
            return Ok(self);
        }
        let weighted: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv { .. } | Layer::Dense { .. }))
            .map(|(i, _)| i)
            .collect();
        for &i in weighted.iter().rev().take(top) {
            self.layers.insert(i + 1, Layer::Dropout { p });
        }
        self.validate()?;
        Ok(self)
    }

    /// Per-sample output shape after each layer (not including the head).
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input.clone();
        if shape.is_empty() || shape.contains(&0) {
            return Err(WinnError::config(format!("{}: bad input shape {shape:?}", self.name)));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let name = layer_name(i, layer);
            shape = match *layer {
                Layer::Conv { k, out: oc, .. } => {
                    if shape.len() != 3 {
                        return Err(WinnError::config(format!("{name}: convolution needs [c, h, w], got {shape:?}")));
                    }
                    if k % 2 == 0 || oc == 0 {
                        return Err(WinnError::config(format!("{name}: kernel {k} / channels {oc}")));
                    }
                    vec![oc, shape[1], shape[2]]
                }
                Layer::AvgPool => {
                    if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                        return Err(WinnError::config(format!(
                            "{name}: 2x2 pooling of {shape:?} gives a non-integer size"
                        )));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                Layer::Upsample => {
                    if shape.len() != 3 {
                        return Err(WinnError::config(format!("{name}: upsampling needs [c, h, w]")));
                    }
                    vec![shape[0], shape[1] * 2, shape[2] * 2]
                }
                Layer::Dense { out: o, .. } => {
                    if o == 0 {
                        return Err(WinnError::config(format!("{name}: zero outputs")));
                    }
                    vec![o]
                }
                Layer::Dropout { p } => {
                    if !(0.0..1.0).contains(&p) {
                        return Err(WinnError::config(format!("{name}: dropout p={p}")));
                    }
                    shape
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn feature_len(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        Ok(numel(shapes.last().unwrap_or(&self.input)))
    }

    pub fn output_arity(&self) -> usize {
        match self.head {
            Head::Score => 1,
            Head::Supervised(k) => k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_shapes().map(|_| ())
    }

    /// Gaussian(0, 0.02²) weights, zero biases, unit gains.
    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        let shapes = self.layer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        let mut prev = self.input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let name = layer_name(i, layer);
            match *layer {
                Layer::Conv { k, out, layer_norm, .. } => {
                    params.push(
                        format!("{name}.weight"),
                        Tensor::gaussian(&[out, prev[0], k, k], 0.0, INIT_STD, &mut rng),
                        Role::Internal,
                    )?;
                    params.push(format!("{name}.bias"), Tensor::zeros(&[out]), Role::Internal)?;
                    if layer_norm {
                        params.push(format!("{name}.ln_gain"), Tensor::ones(&[out]), Role::Internal)?;
                        params.push(format!("{name}.ln_bias"), Tensor::zeros(&[out]), Role::Internal)?;
                    }
                }
                Layer::Dense { out, layer_norm, .. } => {
                    params.push(
                        format!("{name}.weight"),
                        Tensor::gaussian(&[numel(&prev), out], 0.0, INIT_STD, &mut rng),
                        Role::Internal,
                    )?;
                    params.push(format!("{name}.bias"), Tensor::zeros(&[out]), Role::Internal)?;
                    if layer_norm {
                        params.push(format!("{name}.ln_gain"), Tensor::ones(&[out]), Role::Internal)?;
                        params.push(format!("{name}.ln_bias"), Tensor::zeros(&[out]), Role::Internal)?;
                    }
                }
                Layer::AvgPool | Layer::Upsample | Layer::Dropout { .. } => {}
            }
            prev = shapes[i].clone();
        }
        let features = numel(&prev);
        match self.head {
            Head::Score => {
                params.push("head.weight", Tensor::gaussian(&[features, 1], 0.0, INIT_STD, &mut rng), Role::Top)?;
                params.push("head.bias", Tensor::zeros(&[1]), Role::Top)?;
            }
            Head::Supervised(k) => {
                params.push(
                    "class_head.weight",
                    Tensor::gaussian(&[features, k], 0.0, INIT_STD, &mut rng),
                    Role::Top,
                )?;
                params.push("class_head.bias", Tensor::zeros(&[k]), Role::Top)?;
                params.push(
                    "critic_head.weight",
                    Tensor::gaussian(&[features, 1], 0.0, INIT_STD, &mut rng),
                    Role::Top,
                )?;
                params.push("critic_head.bias", Tensor::zeros(&[1]), Role::Top)?;
            }
        }
        Ok(params)
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.input.len() + 1 || shape[1..] != self.input[..] {
            return Err(WinnError::config(format!(
                "{}: batch shape {shape:?} does not match input [n, {:?}]",
                self.name, self.input
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `input` (a node holding a batch) on
    /// `graph`. `rng` drives dropout masks in train mode.
    pub fn forward(
        &self,
        graph: &mut Graph,
        params: &ModelParams,
        input: NodeId,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Forward> {
        let leaves = params.bind(graph);
        self.forward_bound(graph, &leaves, input, mode, rng)
    }

    /// Like [`ArchitectureSpec::forward`] but reuses parameter leaves that
    /// are already on the graph, so several batches can share one set of
    /// parameter nodes (and their gradients accumulate).
    pub fn forward_bound(
        &self,
        graph: &mut Graph,
        leaves: &[NodeId],
        input: NodeId,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Forward> {
        self.check_batch(graph.shape(input))?;
        let n = graph.shape(input)[0];
        let mut next = 0usize;
        let mut take = |count: usize| {
            let ids = leaves[next..next + count].to_vec();
            next += count;
            ids
        };
        let mut x = input;
        for layer in &self.layers {
            match *layer {
                Layer::Conv { layer_norm, swish, .. } => {
                    let p = take(if layer_norm { 4 } else { 2 });
                    x = graph.conv2d(x, p[0])?;
                    x = graph.bias_add(x, p[1])?;
                    if layer_norm {
                        x = graph.layer_norm(x, p[2], p[3], LAYER_NORM_EPS)?;
                    }
                    if swish {
                        x = graph.swish(x)?;
                    }
                }
                Layer::Dense { layer_norm, swish, .. } => {
                    let p = take(if layer_norm { 4 } else { 2 });
                    if graph.shape(x).len() != 2 {
                        let len = graph.value(x).sample_len();
                        x = graph.reshape(x, &[n, len])?;
                    }
                    x = graph.dense(x, p[0], p[1])?;
                    if layer_norm {
                        x = graph.layer_norm(x, p[2], p[3], LAYER_NORM_EPS)?;
                    }
                    if swish {
                        x = graph.swish(x)?;
                    }
                }
                Layer::AvgPool => x = graph.avg_pool2(x)?,
                Layer::Upsample => x = graph.upsample2(x)?,
                Layer::Dropout { p } => x = graph.dropout(x, p, mode, rng)?,
            }
        }
        if graph.shape(x).len() != 2 {
            let len = graph.value(x).sample_len();
            x = graph.reshape(x, &[n, len])?;
        }
        let features = x;
        let (score, logits) = match self.head {
            Head::Score => {
                let p = take(2);
                let s = graph.dense(features, p[0], p[1])?;
                (graph.reshape(s, &[n])?, None)
            }
            Head::Supervised(_) => {
                let p = take(4);
                let logits = graph.dense(features, p[0], p[1])?;
                let s = graph.dense(features, p[2], p[3])?;
                (graph.reshape(s, &[n])?, Some(logits))
            }
        };
        if next != leaves.len() {
            return Err(WinnError::config(format!(
                "{}: parameters do not match the architecture ({} used of {})",
                self.name,
                next,
                leaves.len()
            )));
        }
        Ok(Forward {
            params: leaves.to_vec(),
            features,
            score,
            logits,
        })
    }

    /// `f_W` on a batch: one raw score per sample (no sigmoid).
    pub fn eval_f(&self, params: &ModelParams, batch: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let fw = self.forward(&mut g, params, x, mode, rng)?;
        Ok(g.value(fw.score).clone())
    }

    /// Scores and their input gradients `∇ₓ f(xᵢ)` for every sample.
    pub fn score_and_input_grad(
        &self,
        params: &ModelParams,
        batch: &Tensor,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.leaf(batch.clone());
        let fw = self.forward(&mut g, params, x, mode, rng)?;
        let total = g.sum(fw.score)?;
        let grad = g.grad_values(total, &[x])?.remove(0);
        Ok((g.value(fw.score).clone(), grad))
    }
}
