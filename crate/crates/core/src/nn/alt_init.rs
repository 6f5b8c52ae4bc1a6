use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Result, WinnError};
use crate::nn::LAYER_NORM_EPS;
use crate::tensor::Tensor;

pub const ALT_INIT_WEIGHT_STD: f64 = 0.1;
const ALT_INIT_CHANNELS: [usize; 4] = [256, 128, 64, 3];
const ALT_INIT_CODE_CHANNELS: usize = 512;

/// A frozen, randomly weighted decoder that turns `U[-1, 1]` codes into
/// initial pseudo-negative images.
///
/// Four 5×5 convolutions, each followed by ×2 nearest upsampling; the first
/// three are layer-normalized (unit gain, zero bias). No nonlinearities and
/// no biases. Weights are drawn from `N(0, 0.1²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AltInitializer {
    code_shape: [usize; 3],
    weights: Vec<Tensor>,
}

impl AltInitializer {
    /// The full-size network: 4×4×512 codes to 64×64×3 images.
    pub fn new(seed: u64) -> Self {
        Self::scaled(1, 64, seed).expect("full-size initializer is valid")
    }

    /// Channel counts divided by `channel_div` (the RGB output stays 3) and
    /// an `out_size`×`out_size` output, reached by starting the four
    /// upsamplings from `out_size / 16`.
    pub fn scaled(channel_div: usize, out_size: usize, seed: u64) -> Result<Self> {
        if channel_div == 0 || ALT_INIT_CHANNELS[..3].iter().any(|c| c % channel_div != 0) {
            return Err(WinnError::config(format!("initializer channel divisor {channel_div}")));
        }
        if out_size == 0 || out_size % 16 != 0 {
            return Err(WinnError::config(format!(
                "initializer output size {out_size} is not a multiple of 16"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let code_ch = ALT_INIT_CODE_CHANNELS / channel_div;
        let mut prev = code_ch;
        let mut weights = Vec::new();
        for (i, &c) in ALT_INIT_CHANNELS.iter().enumerate() {
            let out = if i == 3 { c } else { c / channel_div };
            weights.push(Tensor::gaussian(&[out, prev, 5, 5], 0.0, ALT_INIT_WEIGHT_STD, &mut rng));
            prev = out;
        }
        let s = out_size / 16;
        Ok(AltInitializer {
            code_shape: [code_ch, s, s],
            weights,
        })
    }

    pub fn code_shape(&self) -> [usize; 3] {
        self.code_shape
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [3, self.code_shape[1] * 16, self.code_shape[2] * 16]
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    /// Per-layer output shapes (without batch axis), conv and upsample
    /// alternating.
    pub fn layer_shapes(&self) -> Vec<[usize; 3]> {
        let [_, mut h, mut w] = self.code_shape;
        let mut out = Vec::new();
        for wt in &self.weights {
            out.push([wt.shape()[0], h, w]);
            h *= 2;
            w *= 2;
            out.push([wt.shape()[0], h, w]);
        }
        out
    }

    /// Decodes a batch of codes `[n, c, s, s]`.
    pub fn decode(&self, codes: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(codes.clone());
        let mut h = x;
        let last = self.weights.len() - 1;
        for (i, wt) in self.weights.iter().enumerate() {
            let w = g.constant(wt.clone());
            h = g.conv2d(h, w)?;
            if i != last {
                let c = wt.shape()[0];
                let gain = g.constant(Tensor::ones(&[c]));
                let bias = g.constant(Tensor::zeros(&[c]));
                h = g.layer_norm(h, gain, bias, LAYER_NORM_EPS)?;
            }
            h = g.upsample2(h)?;
        }
        Ok(g.value(h).clone())
    }

    /// Draws `count` codes from `U[-1, 1]` and decodes them.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Tensor> {
        let [c, h, w] = self.code_shape;
        if count == 0 {
            let [oc, oh, ow] = self.output_shape();
            return Tensor::new(vec![0, oc, oh, ow], vec![]);
        }
        let codes = Tensor::uniform(&[count, c, h, w], -1.0, 1.0, rng);
        self.decode(&codes)
    }
}
