//! Affine layers and the parameter-visiting plumbing shared by every
//! trainable component.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::linalg::{Matrix, Rng};

/// Anything that exposes its trainable tensors as flat slices in a fixed
/// order. Gradients mirror their parameters' layout so the two can be zipped.
pub trait Params {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn squared_norm(&self) -> f64 {
        self.param_slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum()
    }

    fn all_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Matrix::zeros(input, output),
            b: vec![0.0; output],
        }
    }

    /// He-style Gaussian initialization, `N(0, gain²/fan_in)`, zero bias.
    pub fn init(input: usize, output: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain / (input as f64).sqrt();
        let mut w = Matrix::zeros(input, output);
        for v in w.data_mut() {
            *v = std * rng.normal();
        }
        Self {
            w,
            b: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(shape_err("Dense::forward", self.input_dim(), x.cols()));
        }
        let mut y = x.matmul(&self.w)?;
        y.add_row_vector(&self.b)?;
        Ok(y)
    }

    /// Gradients of parameters and of the input, given the input that was fed
    /// forward and the output cotangent.
    pub fn backward(&self, x: &Matrix, grad_y: &Matrix) -> Result<(DenseGrad, Matrix)> {
        let grad = self.param_grad(x, grad_y)?;
        let grad_x = grad_y.matmul_nt(&self.w)?;
        Ok((grad, grad_x))
    }

    pub fn param_grad(&self, x: &Matrix, grad_y: &Matrix) -> Result<DenseGrad> {
        if grad_y.cols() != self.output_dim() || grad_y.rows() != x.rows() {
            return Err(shape_err(
                "Dense::backward",
                format!("{}x{}", x.rows(), self.output_dim()),
                format!("{}x{}", grad_y.rows(), grad_y.cols()),
            ));
        }
        Ok(DenseGrad {
            w: x.matmul_tn(grad_y)?,
            b: grad_y.sum_rows(),
        })
    }
}

impl DenseGrad {
    pub fn zeros_like(layer: &Dense) -> Self {
        Self {
            w: Matrix::zeros(layer.w.rows(), layer.w.cols()),
            b: vec![0.0; layer.b.len()],
        }
    }
}

impl Params for Dense {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.w.data(), &self.b]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.data_mut(), &mut self.b]
    }
}

impl Params for DenseGrad {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.w.data(), &self.b]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.data_mut(), &mut self.b]
    }
}

/// `p ← p − lr·(g + 2·decay·p)` over matching parameter/gradient layouts.
pub fn sgd_update<P: Params + ?Sized, G: Params + ?Sized>(
    params: &mut P,
    grads: &G,
    lr: f64,
    decay: f64,
) {
    let gs = grads.param_slices();
    let ps = params.param_slices_mut();
    debug_assert_eq!(gs.len(), ps.len());
    for (p, g) in ps.into_iter().zip(gs) {
        debug_assert_eq!(p.len(), g.len());
        for (pv, gv) in p.iter_mut().zip(g) {
            *pv -= lr * (gv + 2.0 * decay * *pv);
        }
    }
}
