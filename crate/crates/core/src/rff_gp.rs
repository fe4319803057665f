//! Random-Fourier-feature Gaussian-process output layer.
//!
//! Features are `Φ(h) = √(2/m)·cos(W·h/λ + b)` with frozen `W ~ N(0, 1)` and
//! `b ~ U(0, 2π)`, so `Φ(h)·Φ(h') ≈ exp(−‖h − h'‖² / (2λ²))`. Class logits are
//! `Φ·β_c`; each `β_c` gets a Laplace posterior whose precision is
//! `I_m + Σ_i p_ic (1 − p_ic) Φ_i Φ_iᵀ`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{
    cholesky, cholesky_inverse, sample_gaussian, sample_uniform, Matrix, Rng,
};

#[derive(Clone, Debug, PartialEq)]
pub struct RffProjection {
    /// `m × latent_dim`, standard normal entries.
    pub w: Matrix,
    /// Phases in `[0, 2π)`, length `m`.
    pub b: Vec<f64>,
    pub lengthscale: f64,
}

/// Pre-activations of one featurization, for the backward pass to `h`.
#[derive(Debug)]
pub struct RffTape {
    pre: Matrix,
}

impl RffProjection {
    pub fn new(latent_dim: usize, num_features: usize, lengthscale: f64, rng: &mut Rng) -> Result<Self> {
        if !(lengthscale > 0.0) || !lengthscale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lengthscale must be positive, got {lengthscale}"
            )));
        }
        let w = sample_gaussian(rng, num_features, latent_dim)?;
        let b = sample_uniform(rng, 1, num_features, 0.0, TAU)?.into_vec();
        Ok(Self { w, b, lengthscale })
    }

    pub fn num_features(&self) -> usize {
        self.w.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn featurize(&self, h: &Matrix) -> Result<Matrix> {
        self.featurize_traced(h).map(|(phi, _)| phi)
    }

    pub fn featurize_traced(&self, h: &Matrix) -> Result<(Matrix, RffTape)> {
        if h.cols() != self.latent_dim() {
            return Err(shape_err("featurize", self.latent_dim(), h.cols()));
        }
        let mut pre = h.matmul_nt(&self.w)?;
        pre.scale(1.0 / self.lengthscale);
        pre.add_row_vector(&self.b)?;
        let amp = (2.0 / self.num_features() as f64).sqrt();
        let phi = pre.map(|a| amp * a.cos());
        Ok((phi, RffTape { pre }))
    }

    /// Gradient with respect to the latent input given `∂L/∂Φ`.
    pub fn backward(&self, tape: RffTape, grad_phi: &Matrix) -> Result<Matrix> {
        if tape.pre.shape() != grad_phi.shape() || tape.pre.cols() != self.num_features() {
            return Err(Error::TapeMismatch);
        }
        let amp = (2.0 / self.num_features() as f64).sqrt();
        let mut g_pre = grad_phi.clone();
        for (g, &a) in g_pre.data_mut().iter_mut().zip(tape.pre.data()) {
            *g *= -amp * a.sin();
        }
        let mut g_h = g_pre.matmul(&self.w)?;
        g_h.scale(1.0 / self.lengthscale);
        Ok(g_h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovarianceMode {
    /// Exact sum over one full pass, starting from `I_m`.
    ExactSum,
    /// `P ← γ·P + (1 − γ)·batch` starting from zero; `I_m` is added when
    /// finalizing.
    Momentum { gamma: f64 },
}

impl Default for CovarianceMode {
    fn default() -> Self {
        CovarianceMode::ExactSum
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpPosterior {
    /// MAP weights, `m × K`.
    pub beta_hat: Matrix,
    /// Per-class precision accumulators, `m × m` each.
    pub precisions: Vec<Matrix>,
    /// Lower Cholesky factors of the per-class covariances, once finalized.
    pub cov_factors: Option<Vec<Matrix>>,
    pub mode: CovarianceMode,
    pub batches_accumulated: usize,
}

impl GpPosterior {
    pub fn new(num_features: usize, num_classes: usize, mode: CovarianceMode) -> Self {
        let mut p = Self {
            beta_hat: Matrix::zeros(num_features, num_classes),
            precisions: Vec::new(),
            cov_factors: None,
            mode,
            batches_accumulated: 0,
        };
        p.reset_precision();
        p
    }

    pub fn num_features(&self) -> usize {
        self.beta_hat.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.beta_hat.cols()
    }

    pub fn is_finalized(&self) -> bool {
        self.cov_factors.is_some()
    }

    /// Discards accumulated curvature and any finalized factors.
    pub fn reset_precision(&mut self) {
        let m = self.num_features();
        let start = match self.mode {
            CovarianceMode::ExactSum => Matrix::identity(m),
            CovarianceMode::Momentum { .. } => Matrix::zeros(m, m),
        };
        self.precisions = vec![start; self.num_classes()];
        self.cov_factors = None;
        self.batches_accumulated = 0;
    }

    /// `Φ·β̂`.
    pub fn logits_mean(&self, phi: &Matrix) -> Result<Matrix> {
        if phi.cols() != self.num_features() {
            return Err(shape_err("logits_mean", self.num_features(), phi.cols()));
        }
        phi.matmul(&self.beta_hat)
    }

    pub fn accumulate_precision(&mut self, phi: &Matrix, probs: &Matrix) -> Result<()> {
        if self.is_finalized() {
            return Err(Error::AlreadyFinalized);
        }
        let (m, k) = (self.num_features(), self.num_classes());
        if phi.cols() != m {
            return Err(shape_err("accumulate_precision", m, phi.cols()));
        }
        if probs.cols() != k || probs.rows() != phi.rows() {
            return Err(shape_err(
                "accumulate_precision",
                format!("{}x{k} probabilities", phi.rows()),
                format!("{}x{}", probs.rows(), probs.cols()),
            ));
        }
        for r in 0..probs.rows() {
            let row = probs.row(r);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < -1e-12) {
                return Err(Error::InvalidConfig(format!(
                    "probability row {r} is not on the simplex (sum {s})"
                )));
            }
        }
        for c in 0..k {
            let weights: Vec<f64> = (0..probs.rows())
                .map(|i| {
                    let p = probs[(i, c)];
                    p * (1.0 - p)
                })
                .collect();
            let batch = weighted_gram(phi, &weights);
            let acc = &mut self.precisions[c];
            match self.mode {
                CovarianceMode::ExactSum => acc.add_assign(&batch)?,
                CovarianceMode::Momentum { gamma } => {
                    acc.scale(gamma);
                    acc.axpy(1.0 - gamma, &batch)?;
                }
            }
            acc.symmetrize();
        }
        self.batches_accumulated += 1;
        Ok(())
    }

    /// Precision matrix of class `c` as used for the posterior.
    pub fn precision(&self, c: usize) -> Matrix {
        let mut p = self.precisions[c].clone();
        if let CovarianceMode::Momentum { .. } = self.mode {
            p.add_diagonal(1.0);
        }
        p
    }

    /// Inverts each precision through its Cholesky factor and stores the
    /// Cholesky factor of the covariance. Finalizing without any accumulated
    /// batch yields the prior.
    pub fn finalize(&mut self) -> Result<()> {
        let mut factors = Vec::with_capacity(self.num_classes());
        for c in 0..self.num_classes() {
            let p = self.precision(c);
            let lp = cholesky(&p, 0.0)?;
            let cov = cholesky_inverse(&lp)?;
            factors.push(cholesky(&cov, 0.0)?);
        }
        self.cov_factors = Some(factors);
        Ok(())
    }

    /// Multiplies every precision accumulator by `factor` and drops the
    /// finalized state.
    pub fn scale_precisions(&mut self, factor: f64) {
        for p in &mut self.precisions {
            p.scale(factor);
        }
        self.cov_factors = None;
    }

    /// One posterior draw `β̂_c + L_c z`, `z ~ N(0, I_m)`, per class.
    pub fn sample_beta(&self, rng: &mut Rng) -> Result<Matrix> {
        let factors = self.cov_factors.as_ref().ok_or(Error::NotFinalized)?;
        sample_from_factors(&self.beta_hat, factors, rng)
    }

    /// `Σ_c Φ_iᵀ Σ_c Φ_i` per row of `phi`.
    pub fn predictive_variance(&self, phi: &Matrix) -> Result<Vec<f64>> {
        let factors = self.cov_factors.as_ref().ok_or(Error::NotFinalized)?;
        let mut out = vec![0.0; phi.rows()];
        for l in factors {
            let proj = phi.matmul(l)?;
            for (o, r) in out.iter_mut().zip(0..proj.rows()) {
                *o += proj.row(r).iter().map(|v| v * v).sum::<f64>();
            }
        }
        Ok(out)
    }
}

/// `β̂_c + L_c z` per class column, given covariance Cholesky factors.
pub fn sample_from_factors(beta_hat: &Matrix, factors: &[Matrix], rng: &mut Rng) -> Result<Matrix> {
    if factors.len() != beta_hat.cols() {
        return Err(shape_err("sample_beta", beta_hat.cols(), factors.len()));
    }
    let m = beta_hat.rows();
    let mut out = beta_hat.clone();
    let mut z = vec![0.0; m];
    for (c, l) in factors.iter().enumerate() {
        rng.fill_normal(&mut z);
        let lz = l.matvec(&z)?;
        for (i, v) in lz.into_iter().enumerate() {
            out[(i, c)] += v;
        }
    }
    Ok(out)
}

/// `Φᵀ diag(w) Φ`, computed on the upper triangle and mirrored.
fn weighted_gram(phi: &Matrix, weights: &[f64]) -> Matrix {
    let m = phi.cols();
    let mut out = Matrix::zeros(m, m);
    let data = out.data_mut();
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let row = phi.row(i);
        for a in 0..m {
            let wa = w * row[a];
            if wa == 0.0 {
                continue;
            }
            let dst = &mut data[a * m + a..(a + 1) * m];
            for (d, &rb) in dst.iter_mut().zip(&row[a..]) {
                *d += wa * rb;
            }
        }
    }
    for a in 0..m {
        for b in (a + 1)..m {
            data[b * m + a] = data[a * m + b];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cholesky_inverse;

    fn softmax_rows(logits: &Matrix) -> Matrix {
        let mut out = logits.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            row.iter_mut().for_each(|v| *v = (*v - mx).exp() / s);
        }
        out
    }

    #[test]
    fn zero_input_zero_phase_gives_constant_features() {
        let mut proj = RffProjection::new(3, 8, 1.0, &mut Rng::new(1)).unwrap();
        proj.b = vec![0.0; 8];
        let phi = proj.featurize(&Matrix::zeros(2, 3)).unwrap();
        let amp = (2.0f64 / 8.0).sqrt();
        assert!(phi.data().iter().all(|&v| (v - amp).abs() < 1e-15));
    }

    #[test]
    fn features_are_bounded() {
        let mut rng = Rng::new(2);
        let proj = RffProjection::new(4, 32, 0.7, &mut rng).unwrap();
        let h = sample_gaussian(&mut rng, 50, 4).unwrap().scaled(10.0);
        let phi = proj.featurize(&h).unwrap();
        let amp = (2.0f64 / 32.0).sqrt();
        assert!(phi.data().iter().all(|v| v.abs() <= amp + 1e-15));
        assert!(proj.featurize(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn lengthscale_must_be_positive() {
        assert!(RffProjection::new(2, 4, 0.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn logits_mean_basis_cases() {
        let mut post = GpPosterior::new(3, 2, CovarianceMode::ExactSum);
        let phi = Matrix::identity(3);
        assert!(post.logits_mean(&phi).unwrap().data().iter().all(|&v| v == 0.0));
        post.beta_hat[(1, 0)] = 1.0;
        let logits = post.logits_mean(&phi).unwrap();
        for j in 0..3 {
            for c in 0..2 {
                let want = if (j, c) == (1, 0) { 1.0 } else { 0.0 };
                assert_eq!(logits[(j, c)], want);
            }
        }
    }

    #[test]
    fn certain_probabilities_leave_precision_unchanged() {
        let mut rng = Rng::new(3);
        let mut post = GpPosterior::new(4, 2, CovarianceMode::ExactSum);
        let phi = sample_gaussian(&mut rng, 5, 4).unwrap();
        let probs = Matrix::from_fn(5, 2, |r, c| if (r + c) % 2 == 0 { 1.0 } else { 0.0 });
        post.accumulate_precision(&phi, &probs).unwrap();
        assert_eq!(post.precisions[0], Matrix::identity(4));
        assert_eq!(post.precisions[1], Matrix::identity(4));
    }

    #[test]
    fn single_point_hand_case() {
        let mut post = GpPosterior::new(3, 1, CovarianceMode::ExactSum);
        let phi = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        // A one-class simplex row is [1]; use two classes to get p = 0.5.
        post.accumulate_precision(&phi, &Matrix::from_rows(&[[1.0]]).unwrap())
            .unwrap();
        assert_eq!(post.precisions[0], Matrix::identity(3));

        let mut post = GpPosterior::new(3, 2, CovarianceMode::ExactSum);
        let probs = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        post.accumulate_precision(&phi, &probs).unwrap();
        let mut want = Matrix::identity(3);
        want[(0, 0)] += 0.25;
        assert_eq!(post.precisions[0], want);
    }

    #[test]
    fn rejects_off_simplex_and_finalized() {
        let mut post = GpPosterior::new(2, 2, CovarianceMode::ExactSum);
        let phi = Matrix::identity(2);
        let bad = Matrix::from_rows(&[[0.7, 0.7], [0.5, 0.5]]).unwrap();
        assert!(post.accumulate_precision(&phi, &bad).is_err());
        post.finalize().unwrap();
        let ok = Matrix::filled(2, 2, 0.5);
        assert!(matches!(
            post.accumulate_precision(&phi, &ok),
            Err(Error::AlreadyFinalized)
        ));
    }

    #[test]
    fn momentum_mode_blends_and_adds_identity_at_the_end() {
        let mut post = GpPosterior::new(2, 2, CovarianceMode::Momentum { gamma: 0.5 });
        let phi = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let probs = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        post.accumulate_precision(&phi, &probs).unwrap();
        post.accumulate_precision(&phi, &probs).unwrap();
        // 0.5·(0.5·0.25) + 0.5·0.25 = 0.1875
        assert!((post.precisions[0][(0, 0)] - 0.1875).abs() < 1e-15);
        assert!((post.precision(0)[(0, 0)] - 1.1875).abs() < 1e-15);
        assert_eq!(post.precision(0)[(1, 1)], 1.0);
    }

    #[test]
    fn finalize_diagonal_cases() {
        let mut post = GpPosterior::new(2, 1, CovarianceMode::ExactSum);
        post.finalize().unwrap();
        assert_eq!(post.cov_factors.as_ref().unwrap()[0], Matrix::identity(2));

        post.reset_precision();
        post.precisions[0] = Matrix::identity(2).scaled(4.0);
        post.finalize().unwrap();
        let l = &post.cov_factors.as_ref().unwrap()[0];
        assert!(l.sub(&Matrix::identity(2).scaled(0.5)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn finalize_reconstructs_precision() {
        let mut rng = Rng::new(4);
        let mut post = GpPosterior::new(6, 3, CovarianceMode::ExactSum);
        let phi = sample_gaussian(&mut rng, 20, 6).unwrap();
        let probs = softmax_rows(&sample_gaussian(&mut rng, 20, 3).unwrap());
        post.accumulate_precision(&phi, &probs).unwrap();
        post.finalize().unwrap();
        for c in 0..3 {
            let l = &post.cov_factors.as_ref().unwrap()[c];
            let back = cholesky_inverse(l).unwrap();
            let p = post.precision(c);
            let rel = back.sub(&p).unwrap().max_abs() / p.max_abs();
            assert!(rel < 1e-8, "class {c}: {rel}");
        }
    }

    #[test]
    fn sample_requires_finalization() {
        let post = GpPosterior::new(2, 2, CovarianceMode::ExactSum);
        assert!(matches!(
            post.sample_beta(&mut Rng::new(0)),
            Err(Error::NotFinalized)
        ));
    }

    #[test]
    fn degenerate_covariance_sample_is_the_mean() {
        let mut rng = Rng::new(5);
        let mut post = GpPosterior::new(4, 2, CovarianceMode::ExactSum);
        post.beta_hat = sample_gaussian(&mut rng, 4, 2).unwrap();
        post.scale_precisions(1e12);
        post.finalize().unwrap();
        let s = post.sample_beta(&mut rng).unwrap();
        assert!(s.sub(&post.beta_hat).unwrap().max_abs() < 1e-5);
    }

    #[test]
    fn prior_samples_have_unit_variance() {
        let mut post = GpPosterior::new(3, 1, CovarianceMode::ExactSum);
        post.finalize().unwrap();
        let mut rng = Rng::new(6);
        let n = 10_000;
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let s = post.sample_beta(&mut rng).unwrap();
            for (i, v) in sq.iter_mut().enumerate() {
                *v += s[(i, 0)] * s[(i, 0)];
            }
        }
        for v in sq {
            assert!((v / n as f64 - 1.0).abs() < 0.05);
        }
        let a = post.sample_beta(&mut Rng::new(7)).unwrap();
        let b = post.sample_beta(&mut Rng::new(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn featurize_backward_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let proj = RffProjection::new(3, 16, 0.8, &mut rng).unwrap();
        let h = sample_gaussian(&mut rng, 2, 3).unwrap();
        let g_phi = sample_gaussian(&mut rng, 2, 16).unwrap();
        let loss = |h: &Matrix| -> f64 {
            let phi = proj.featurize(h).unwrap();
            phi.data().iter().zip(g_phi.data()).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = proj.featurize_traced(&h).unwrap();
        let g = proj.backward(tape, &g_phi).unwrap();
        for i in 0..h.data().len() {
            let mut hp = h.clone();
            hp.data_mut()[i] += 1e-5;
            let mut hm = h.clone();
            hm.data_mut()[i] -= 1e-5;
            let fd = (loss(&hp) - loss(&hm)) / 2e-5;
            assert!((fd - g.data()[i]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }
}
