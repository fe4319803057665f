//! Residual MLP feature extractor with spectral normalization and exact
//! reverse-mode gradients.
//!
//! Layout: `x → affine(hidden) → [z ← z + act(z·W + b)] × blocks → affine(out)`,
//! optionally followed by a parameter-free layer normalization of the output.
//! Spectral normalization is a projection applied between optimizer steps,
//! so it never appears in the traced computation.

use serde::{Deserialize, Serialize};

use crate::dense::{Dense, DenseGrad, Params};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{spectral_norm, Matrix, Rng};

const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    /// Linear blocks; used for closed-form gradient checks.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// How the spectral bound `c` is enforced after each optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralNormMode {
    Off,
    /// Rescale `W ← c·W/σ` only when `σ > c`.
    Clip,
    /// Always rescale so that `σ = c`.
    Project,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureExtractorConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_residual_blocks: usize,
    pub output_dim: usize,
    pub spectral_bound: f64,
    pub sn_power_iters: usize,
    pub activation: Activation,
    pub spectral_norm: SpectralNormMode,
    /// Zero-mean, unit-variance normalization of each output vector.
    pub layer_norm_output: bool,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_dim: 128,
            num_residual_blocks: 6,
            output_dim: 128,
            spectral_bound: 6.0,
            sn_power_iters: 20,
            activation: Activation::Relu,
            spectral_norm: SpectralNormMode::Clip,
            layer_norm_output: false,
        }
    }
}

impl FeatureExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_residual_blocks", self.num_residual_blocks),
            ("output_dim", self.output_dim),
            ("sn_power_iters", self.sn_power_iters),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(self.spectral_bound > 0.0) || !self.spectral_bound.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "spectral_bound must be positive, got {}",
                self.spectral_bound
            )));
        }
        Ok(())
    }

    /// Upper bound on the Lipschitz constant of the network under the
    /// spectral bound: `c` for each affine layer and `1 + c` per block
    /// (activations are 1-Lipschitz). Layer normalization is not covered.
    pub fn lipschitz_bound(&self) -> f64 {
        let c = self.spectral_bound;
        c * c * (1.0 + c).powi(self.num_residual_blocks as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub config: FeatureExtractorConfig,
    pub input: Dense,
    pub blocks: Vec<Dense>,
    pub output: Dense,
    /// Power-iteration left vectors, one per weight matrix in
    /// `input, blocks.., output` order.
    pub u_states: Vec<Vec<f64>>,
}

/// Intermediate values of one forward pass, consumed by [`FeatureExtractor::backward`].
#[derive(Debug)]
pub struct Tape {
    x: Matrix,
    /// Input of each block (`block_inputs[0]` is the input layer's output).
    block_inputs: Vec<Matrix>,
    /// Pre-activations `z·W + b` of each block.
    block_pre: Vec<Matrix>,
    last: Matrix,
    /// Normalized output and per-row inverse scale, when layer norm is on.
    norm: Option<(Matrix, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrads {
    pub input: DenseGrad,
    pub blocks: Vec<DenseGrad>,
    pub output: DenseGrad,
}

impl FeatureExtractor {
    pub fn new(config: FeatureExtractorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let input = Dense::init(config.input_dim, config.hidden_dim, 2f64.sqrt(), rng);
        let blocks = (0..config.num_residual_blocks)
            .map(|_| Dense::init(config.hidden_dim, config.hidden_dim, 2f64.sqrt(), rng))
            .collect();
        let output = Dense::init(config.hidden_dim, config.output_dim, 1.0, rng);
        let mut net = Self {
            config,
            input,
            blocks,
            output,
            u_states: Vec::new(),
        };
        net.u_states = net
            .weights()
            .map(|w| {
                let mut u: Vec<f64> = (0..w.rows()).map(|_| rng.normal()).collect();
                let n = crate::linalg::norm(&u).max(f64::MIN_POSITIVE);
                u.iter_mut().for_each(|v| *v /= n);
                u
            })
            .collect();
        Ok(net)
    }

    /// All weights and biases zero; the `u` states stay usable.
    pub fn zeroed(config: FeatureExtractorConfig) -> Result<Self> {
        let mut net = Self::new(config, &mut Rng::new(0))?;
        for p in net.param_slices_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    fn weights(&self) -> impl Iterator<Item = &Matrix> {
        std::iter::once(&self.input.w)
            .chain(self.blocks.iter().map(|b| &b.w))
            .chain(std::iter::once(&self.output.w))
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut out = vec![&mut self.input];
        out.extend(self.blocks.iter_mut());
        out.push(&mut self.output);
        out
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Tape)> {
        if x.cols() != self.config.input_dim {
            return Err(shape_err(
                "FeatureExtractor::forward",
                format!("{} input columns", self.config.input_dim),
                x.cols(),
            ));
        }
        let act = self.config.activation;
        let mut z = self.input.forward(x)?;
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut block_pre = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let pre = block.forward(&z)?;
            let mut next = z.clone();
            for (o, &p) in next.data_mut().iter_mut().zip(pre.data()) {
                *o += act.apply(p);
            }
            block_inputs.push(z);
            block_pre.push(pre);
            z = next;
        }
        let raw = self.output.forward(&z)?;
        let tape_last = z;
        if self.config.layer_norm_output {
            let (normed, inv_scale) = layer_norm(&raw);
            let tape = Tape {
                x: x.clone(),
                block_inputs,
                block_pre,
                last: tape_last,
                norm: Some((normed.clone(), inv_scale)),
            };
            Ok((normed, tape))
        } else {
            let tape = Tape {
                x: x.clone(),
                block_inputs,
                block_pre,
                last: tape_last,
                norm: None,
            };
            Ok((raw, tape))
        }
    }

    /// Convenience forward that drops the tape.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(x).map(|(h, _)| h)
    }

    pub fn backward(&self, tape: Tape, grad_h: &Matrix) -> Result<(FeatureGrads, Matrix)> {
        if tape.block_pre.len() != self.blocks.len()
            || tape.x.cols() != self.config.input_dim
            || tape.last.cols() != self.config.hidden_dim
            || tape.norm.is_some() != self.config.layer_norm_output
        {
            return Err(Error::TapeMismatch);
        }
        if grad_h.rows() != tape.x.rows() || grad_h.cols() != self.config.output_dim {
            return Err(shape_err(
                "FeatureExtractor::backward",
                format!("{}x{}", tape.x.rows(), self.config.output_dim),
                format!("{}x{}", grad_h.rows(), grad_h.cols()),
            ));
        }
        let grad_raw = match &tape.norm {
            Some((normed, inv_scale)) => layer_norm_backward(normed, inv_scale, grad_h),
            None => grad_h.clone(),
        };
        let (output, mut gz) = self.output.backward(&tape.last, &grad_raw)?;
        let act = self.config.activation;
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for ((block, z_in), pre) in self
            .blocks
            .iter()
            .zip(&tape.block_inputs)
            .zip(&tape.block_pre)
            .rev()
        {
            let mut g_pre = gz.clone();
            for (g, &p) in g_pre.data_mut().iter_mut().zip(pre.data()) {
                *g *= act.derivative(p);
            }
            let (bg, gz_through) = block.backward(z_in, &g_pre)?;
            gz.add_assign(&gz_through)?;
            block_grads.push(bg);
        }
        block_grads.reverse();
        let (input, grad_x) = self.input.backward(&tape.x, &gz)?;
        Ok((
            FeatureGrads {
                input,
                blocks: block_grads,
                output,
            },
            grad_x,
        ))
    }

    /// Enforces the spectral bound with the configured number of
    /// warm-started power iterations.
    pub fn apply_spectral_normalization(&mut self) -> Result<()> {
        let iters = self.config.sn_power_iters;
        self.apply_spectral_normalization_with(iters)
    }

    pub fn apply_spectral_normalization_with(&mut self, iters: usize) -> Result<()> {
        let mode = self.config.spectral_norm;
        if mode == SpectralNormMode::Off {
            return Ok(());
        }
        let c = self.config.spectral_bound;
        let mut states = std::mem::take(&mut self.u_states);
        for (layer, u) in self.layers_mut().into_iter().zip(states.iter_mut()) {
            let (sigma, next) = spectral_norm(&layer.w, iters, u)?;
            *u = next;
            let rescale = match mode {
                SpectralNormMode::Clip => sigma > c,
                SpectralNormMode::Project => sigma > 0.0,
                SpectralNormMode::Off => false,
            };
            if rescale {
                layer.w.scale(c / sigma);
            }
        }
        self.u_states = states;
        Ok(())
    }

    /// Current power-iteration estimates of each weight's spectral norm.
    pub fn spectral_norm_estimates(&self, iters: usize) -> Result<Vec<f64>> {
        self.weights()
            .zip(&self.u_states)
            .map(|(w, u)| spectral_norm(w, iters, u).map(|(s, _)| s))
            .collect()
    }

    pub fn weight_matrices(&self) -> Vec<&Matrix> {
        self.weights().collect()
    }
}

fn layer_norm(x: &Matrix) -> (Matrix, Vec<f64>) {
    let d = x.cols() as f64;
    let mut out = x.clone();
    let mut inv_scale = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_scale.push(inv);
    }
    (out, inv_scale)
}

fn layer_norm_backward(normed: &Matrix, inv_scale: &[f64], grad: &Matrix) -> Matrix {
    let d = normed.cols() as f64;
    let mut out = Matrix::zeros(grad.rows(), grad.cols());
    for r in 0..grad.rows() {
        let g = grad.row(r);
        let xh = normed.row(r);
        let mean_g = g.iter().sum::<f64>() / d;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        for ((o, &gv), &xv) in out.row_mut(r).iter_mut().zip(g).zip(xh) {
            *o = inv_scale[r] * (gv - mean_g - xv * mean_gx);
        }
    }
    out
}

impl Params for FeatureExtractor {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.input.param_slices();
        for b in &self.blocks {
            out.extend(b.param_slices());
        }
        out.extend(self.output.param_slices());
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.input.param_slices_mut();
        for b in &mut self.blocks {
            out.extend(b.param_slices_mut());
        }
        out.extend(self.output.param_slices_mut());
        out
    }
}

impl Params for FeatureGrads {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.input.param_slices();
        for b in &self.blocks {
            out.extend(b.param_slices());
        }
        out.extend(self.output.param_slices());
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.input.param_slices_mut();
        for b in &mut self.blocks {
            out.extend(b.param_slices_mut());
        }
        out.extend(self.output.param_slices_mut());
        out
    }
}
