//! Input-dependent low-rank logit noise `V(x)·ε_R + d(x) ⊙ ε_K`, whose
//! covariance is `V(x)V(x)ᵀ + diag(d(x)²)`.

use serde::{Deserialize, Serialize};

use crate::dense::{Dense, DenseGrad, Params};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HetVariant {
    /// `V(x)` is an affine map of the latent into `K·R` entries.
    Standard,
    /// `V(x) = v(x)·1_Rᵀ ⊙ V` with a free `K × R` matrix `V`.
    ParameterEfficient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HetHeadConfig {
    pub num_classes: usize,
    pub rank: usize,
    pub variant: HetVariant,
    pub min_scale: f64,
}

impl Default for HetHeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            rank: 2,
            variant: HetVariant::Standard,
            min_scale: 1e-3,
        }
    }
}

impl HetHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 || self.rank < 1 {
            return Err(Error::InvalidConfig(
                "heteroscedastic head needs num_classes >= 1 and rank >= 1".into(),
            ));
        }
        if self.variant == HetVariant::Standard && self.rank > self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "rank {} exceeds num_classes {} for the standard parameterization",
                self.rank, self.num_classes
            )));
        }
        if !(self.min_scale >= 0.0) || !self.min_scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "min_scale must be a nonnegative finite number, got {}",
                self.min_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HetHead {
    pub config: HetHeadConfig,
    /// Standard: latent → K·R (row-major `K × R` per point).
    /// Parameter-efficient: latent → K.
    pub v_map: Dense,
    /// latent → K, passed through softplus.
    pub d_map: Dense,
    /// `K × R` free matrix of the parameter-efficient variant.
    pub free_v: Option<Matrix>,
}

/// Per-point factors for a batch of `n` points.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseFactors {
    /// `n × (K·R)`; row `i` holds `V(x_i)` row-major.
    pub v: Matrix,
    /// `n × K`.
    pub d: Matrix,
    pub rank: usize,
}

impl NoiseFactors {
    pub fn num_points(&self) -> usize {
        self.d.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.d.cols()
    }

    /// `V(x_i)` as a `K × R` matrix.
    pub fn v_of(&self, i: usize) -> Matrix {
        Matrix::from_vec(self.num_classes(), self.rank, self.v.row(i).to_vec())
            .expect("row length is K·R")
    }

    pub fn d_of(&self, i: usize) -> &[f64] {
        self.d.row(i)
    }
}

/// Everything the pathwise backward pass needs, including the `ε` draws.
#[derive(Debug)]
pub struct NoiseTape {
    h: Matrix,
    raw_v: Matrix,
    raw_d: Matrix,
    factors: NoiseFactors,
    /// One `n × K` matrix per Monte-Carlo sample.
    eps_k: Vec<Matrix>,
    /// One `n × R` matrix per Monte-Carlo sample.
    eps_r: Vec<Matrix>,
}

impl NoiseTape {
    pub fn factors(&self) -> &NoiseFactors {
        &self.factors
    }

    pub fn num_samples(&self) -> usize {
        self.eps_k.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HetGrads {
    pub v_map: DenseGrad,
    pub d_map: DenseGrad,
    pub free_v: Option<Matrix>,
}

impl HetHead {
    pub fn new(config: HetHeadConfig, latent_dim: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (k, r) = (config.num_classes, config.rank);
        let (v_out, free_v) = match config.variant {
            HetVariant::Standard => (k * r, None),
            HetVariant::ParameterEfficient => {
                let scale = 1.0 / (r as f64).sqrt();
                let f = Matrix::from_fn(k, r, |_, _| scale * rng.normal());
                (k, Some(f))
            }
        };
        let v_map = Dense::init(latent_dim, v_out, 0.1, rng);
        let d_map = Dense::init(latent_dim, k, 0.1, rng);
        Ok(Self {
            config,
            v_map,
            d_map,
            free_v,
        })
    }

    /// All affine parameters zero; the free matrix (if any) is kept.
    pub fn zeroed(config: HetHeadConfig, latent_dim: usize) -> Result<Self> {
        let mut head = Self::new(config, latent_dim, &mut Rng::new(0))?;
        head.v_map = Dense::zeros(head.v_map.input_dim(), head.v_map.output_dim());
        head.d_map = Dense::zeros(latent_dim, head.config.num_classes);
        Ok(head)
    }

    /// Makes the head emit (numerically) zero noise: `V = 0` and
    /// `d = softplus(−50) + min_scale`.
    pub fn silence(&mut self, min_scale: f64) {
        for p in self.v_map.param_slices_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        self.d_map.w.scale(0.0);
        self.d_map.b.iter_mut().for_each(|v| *v = -50.0);
        self.config.min_scale = min_scale;
    }

    pub fn latent_dim(&self) -> usize {
        self.d_map.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn rank(&self) -> usize {
        self.config.rank
    }

    pub fn covariance_factors(&self, h: &Matrix) -> Result<NoiseFactors> {
        self.factors_traced(h).map(|(f, _, _)| f)
    }

    fn factors_traced(&self, h: &Matrix) -> Result<(NoiseFactors, Matrix, Matrix)> {
        if h.cols() != self.latent_dim() {
            return Err(shape_err("covariance_factors", self.latent_dim(), h.cols()));
        }
        if !self.all_finite() {
            return Err(Error::InvalidConfig(
                "heteroscedastic head has non-finite parameters".into(),
            ));
        }
        let (k, r) = (self.config.num_classes, self.config.rank);
        let raw_v = self.v_map.forward(h)?;
        let raw_d = self.d_map.forward(h)?;
        let min_scale = self.config.min_scale;
        let d = raw_d.map(|x| softplus(x) + min_scale);
        let v = match &self.free_v {
            None => raw_v.clone(),
            Some(free) => {
                let mut v = Matrix::zeros(h.rows(), k * r);
                for i in 0..h.rows() {
                    let vi = raw_v.row(i);
                    let out = v.row_mut(i);
                    for c in 0..k {
                        for j in 0..r {
                            out[c * r + j] = vi[c] * free[(c, j)];
                        }
                    }
                }
                v
            }
        };
        Ok((NoiseFactors { v, d, rank: r }, raw_v, raw_d))
    }

    /// Draws `samples` noise matrices (`n × K` each) with fresh `ε` per point
    /// and sample, and keeps the draws for [`HetHead::backward_noise`].
    pub fn forward_noise(
        &self,
        h: &Matrix,
        samples: usize,
        rng: &mut Rng,
    ) -> Result<(Vec<Matrix>, NoiseTape)> {
        let (factors, raw_v, raw_d) = self.factors_traced(h)?;
        let (n, k, r) = (h.rows(), self.config.num_classes, self.config.rank);
        let mut eps_k = Vec::with_capacity(samples);
        let mut eps_r = Vec::with_capacity(samples);
        let mut noise = Vec::with_capacity(samples);
        for _ in 0..samples {
            let mut ek = Matrix::zeros(n, k);
            rng.fill_normal(ek.data_mut());
            let mut er = Matrix::zeros(n, r);
            rng.fill_normal(er.data_mut());
            noise.push(apply_factors(&factors, &ek, &er));
            eps_k.push(ek);
            eps_r.push(er);
        }
        let tape = NoiseTape {
            h: h.clone(),
            raw_v,
            raw_d,
            factors,
            eps_k,
            eps_r,
        };
        Ok((noise, tape))
    }

    /// Pathwise gradients with the cached `ε` held fixed. Returns parameter
    /// gradients and the gradient with respect to the latent input.
    pub fn backward_noise(&self, tape: NoiseTape, grad_u: &[Matrix]) -> Result<(HetGrads, Matrix)> {
        let (k, r) = (self.config.num_classes, self.config.rank);
        let n = tape.h.rows();
        if grad_u.len() != tape.eps_k.len()
            || tape.h.cols() != self.latent_dim()
            || tape.factors.rank != r
            || tape.raw_d.cols() != k
            || tape.raw_v.cols() != self.v_map.output_dim()
        {
            return Err(Error::TapeMismatch);
        }
        for g in grad_u {
            if g.shape() != (n, k) {
                return Err(shape_err("backward_noise", format!("{n}x{k}"), format!("{:?}", g.shape())));
            }
        }
        // ∂L/∂d and ∂L/∂V summed over samples.
        let mut g_d = Matrix::zeros(n, k);
        let mut g_v = Matrix::zeros(n, k * r);
        for ((g, ek), er) in grad_u.iter().zip(&tape.eps_k).zip(&tape.eps_r) {
            for i in 0..n {
                let gi = g.row(i);
                let eki = ek.row(i);
                let eri = er.row(i);
                for c in 0..k {
                    g_d[(i, c)] += gi[c] * eki[c];
                    let dst = &mut g_v.row_mut(i)[c * r..(c + 1) * r];
                    for (dv, &e) in dst.iter_mut().zip(eri) {
                        *dv += gi[c] * e;
                    }
                }
            }
        }
        let mut g_raw_d = g_d;
        for (g, &x) in g_raw_d.data_mut().iter_mut().zip(tape.raw_d.data()) {
            *g *= sigmoid(x);
        }
        let (g_raw_v, free_grad) = match &self.free_v {
            None => (g_v, None),
            Some(free) => {
                let mut g_small = Matrix::zeros(n, k);
                let mut g_free = Matrix::zeros(k, r);
                for i in 0..n {
                    let gvi = g_v.row(i);
                    let vi = tape.raw_v.row(i);
                    for c in 0..k {
                        let mut acc = 0.0;
                        for j in 0..r {
                            acc += gvi[c * r + j] * free[(c, j)];
                            g_free[(c, j)] += gvi[c * r + j] * vi[c];
                        }
                        g_small[(i, c)] = acc;
                    }
                }
                (g_small, Some(g_free))
            }
        };
        let (v_grad, mut grad_h) = self.v_map.backward(&tape.h, &g_raw_v)?;
        let (d_grad, grad_h_d) = self.d_map.backward(&tape.h, &g_raw_d)?;
        grad_h.add_assign(&grad_h_d)?;
        Ok((
            HetGrads {
                v_map: v_grad,
                d_map: d_grad,
                free_v: free_grad,
            },
            grad_h,
        ))
    }
}

fn apply_factors(f: &NoiseFactors, eps_k: &Matrix, eps_r: &Matrix) -> Matrix {
    let (n, k, r) = (f.num_points(), f.num_classes(), f.rank);
    let mut out = Matrix::zeros(n, k);
    for i in 0..n {
        let vi = f.v.row(i);
        let di = f.d.row(i);
        let eki = eps_k.row(i);
        let eri = eps_r.row(i);
        let o = out.row_mut(i);
        for c in 0..k {
            let low_rank: f64 = vi[c * r..(c + 1) * r].iter().zip(eri).map(|(a, b)| a * b).sum();
            o[c] = di[c] * eki[c] + low_rank;
        }
    }
    out
}

/// One draw of `d ⊙ ε_K + V·ε_R`.
pub fn sample_noise(v: &Matrix, d: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    if v.rows() != d.len() {
        return Err(shape_err("sample_noise", v.rows(), d.len()));
    }
    let eps_k: Vec<f64> = (0..d.len()).map(|_| rng.normal()).collect();
    let eps_r: Vec<f64> = (0..v.cols()).map(|_| rng.normal()).collect();
    let low_rank = v.matvec(&eps_r)?;
    Ok(d
        .iter()
        .zip(&eps_k)
        .zip(low_rank)
        .map(|((di, e), l)| di * e + l)
        .collect())
}

/// `V·Vᵀ + diag(d²)`.
pub fn full_covariance(v: &Matrix, d: &[f64]) -> Result<Matrix> {
    if v.rows() != d.len() {
        return Err(shape_err("full_covariance", v.rows(), d.len()));
    }
    let mut cov = v.matmul_nt(v)?;
    for (i, di) in d.iter().enumerate() {
        cov[(i, i)] += di * di;
    }
    Ok(cov)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Params for HetHead {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.v_map.param_slices();
        out.extend(self.d_map.param_slices());
        if let Some(f) = &self.free_v {
            out.push(f.data());
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.v_map.param_slices_mut();
        out.extend(self.d_map.param_slices_mut());
        if let Some(f) = &mut self.free_v {
            out.push(f.data_mut());
        }
        out
    }
}

impl Params for HetGrads {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.v_map.param_slices();
        out.extend(self.d_map.param_slices());
        if let Some(f) = &self.free_v {
            out.push(f.data());
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.v_map.param_slices_mut();
        out.extend(self.d_map.param_slices_mut());
        if let Some(f) = &mut self.free_v {
            out.push(f.data_mut());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sample_gaussian;

    fn config(variant: HetVariant, k: usize, r: usize) -> HetHeadConfig {
        HetHeadConfig {
            num_classes: k,
            rank: r,
            variant,
            min_scale: 1e-3,
        }
    }

    #[test]
    fn zero_head_gives_softplus_floor() {
        let head = HetHead::zeroed(config(HetVariant::Standard, 3, 2), 4).unwrap();
        let f = head.covariance_factors(&Matrix::filled(2, 4, 1.5)).unwrap();
        assert!(f.v.data().iter().all(|&v| v == 0.0));
        let want = 2f64.ln() + 1e-3;
        assert!(f.d.data().iter().all(|&v| (v - want).abs() < 1e-15));
        assert!((want - 0.6941).abs() < 1e-4);
    }

    #[test]
    fn efficient_variant_with_unit_v_returns_free_matrix() {
        let mut head =
            HetHead::new(config(HetVariant::ParameterEfficient, 3, 2), 2, &mut Rng::new(1)).unwrap();
        head.v_map = Dense::zeros(2, 3);
        head.v_map.b = vec![1.0; 3];
        let f = head.covariance_factors(&Matrix::filled(1, 2, 0.3)).unwrap();
        assert_eq!(&f.v_of(0), head.free_v.as_ref().unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(config(HetVariant::Standard, 2, 3).validate().is_err());
        assert!(config(HetVariant::ParameterEfficient, 2, 3).validate().is_ok());
        let mut c = config(HetVariant::Standard, 2, 1);
        c.min_scale = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_covariance_hand_cases() {
        let eye = full_covariance(&Matrix::zeros(3, 1), &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(eye, Matrix::identity(3));
        let ones = full_covariance(&Matrix::from_rows(&[[1.0], [1.0]]).unwrap(), &[0.0, 0.0]).unwrap();
        assert_eq!(ones, Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn full_covariance_matches_loops() {
        let mut rng = Rng::new(2);
        let v = sample_gaussian(&mut rng, 4, 2).unwrap();
        let d = [0.1, 0.5, 1.0, 2.0];
        let cov = full_covariance(&v, &d).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut want = 0.0;
                for r in 0..2 {
                    want += v[(i, r)] * v[(j, r)];
                }
                if i == j {
                    want += d[i] * d[i];
                }
                assert!((cov[(i, j)] - want).abs() < 1e-14);
                assert!((cov[(i, j)] - cov[(j, i)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sample_noise_degenerate_and_unit() {
        let mut rng = Rng::new(3);
        let z = sample_noise(&Matrix::zeros(3, 2), &[0.0; 3], &mut rng).unwrap();
        assert_eq!(z, vec![0.0; 3]);
        let n = 10_000;
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let s = sample_noise(&Matrix::zeros(2, 1), &[1.0, 1.0], &mut rng).unwrap();
            sq[0] += s[0] * s[0];
            sq[1] += s[1] * s[1];
        }
        for v in sq {
            assert!((v / n as f64 - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn zero_cotangent_zero_grads() {
        let mut rng = Rng::new(4);
        let head = HetHead::new(config(HetVariant::Standard, 3, 2), 4, &mut rng).unwrap();
        let h = sample_gaussian(&mut rng, 5, 4).unwrap();
        let (noise, tape) = head.forward_noise(&h, 3, &mut rng).unwrap();
        let zeros: Vec<Matrix> = noise.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        let (g, gh) = head.backward_noise(tape, &zeros).unwrap();
        assert!(g.param_slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(gh.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_sample_count_must_match() {
        let mut rng = Rng::new(5);
        let head = HetHead::new(config(HetVariant::Standard, 2, 1), 2, &mut rng).unwrap();
        let (_, tape) = head.forward_noise(&Matrix::zeros(1, 2), 2, &mut rng).unwrap();
        assert!(matches!(
            head.backward_noise(tape, &[Matrix::zeros(1, 2)]),
            Err(Error::TapeMismatch)
        ));
    }

    #[test]
    fn efficient_free_matrix_gradient_hand_case() {
        // One point, K = 2, R = 1, one sample: noise_c = d_c ε_K,c + v_c F_c ε_R.
        // With L = Σ_c g_c noise_c: ∂L/∂F_c = g_c v_c ε_R.
        let mut head =
            HetHead::new(config(HetVariant::ParameterEfficient, 2, 1), 1, &mut Rng::new(6)).unwrap();
        head.v_map = Dense::zeros(1, 2);
        head.v_map.b = vec![2.0, -3.0];
        let h = Matrix::zeros(1, 1);
        let (_, tape) = head.forward_noise(&h, 1, &mut Rng::new(7)).unwrap();
        let eps_r = tape.eps_r[0][(0, 0)];
        let g = Matrix::from_rows(&[[0.5, 1.5]]).unwrap();
        let (grads, _) = head.backward_noise(tape, &[g]).unwrap();
        let gf = grads.free_v.unwrap();
        assert!((gf[(0, 0)] - 0.5 * 2.0 * eps_r).abs() < 1e-12);
        assert!((gf[(1, 0)] - 1.5 * -3.0 * eps_r).abs() < 1e-12);
    }

    #[test]
    fn parameter_counts() {
        let latent = 7;
        let (k, r) = (5, 3);
        let std = HetHead::new(config(HetVariant::Standard, k, r), latent, &mut Rng::new(0)).unwrap();
        assert_eq!(std.num_params(), k * r * (latent + 1) + k * (latent + 1));
        for r in [1, 3, 9] {
            let pe = HetHead::new(config(HetVariant::ParameterEfficient, k, r), latent, &mut Rng::new(0))
                .unwrap();
            let affine = pe.v_map.num_params() + pe.d_map.num_params();
            assert_eq!(affine, 2 * k * (latent + 1));
            assert_eq!(pe.num_params(), 2 * k * (latent + 1) + k * r);
        }
    }

    #[test]
    fn silenced_head_emits_negligible_noise() {
        let mut rng = Rng::new(8);
        let mut head = HetHead::new(config(HetVariant::Standard, 3, 2), 4, &mut rng).unwrap();
        head.silence(0.0);
        let h = sample_gaussian(&mut rng, 6, 4).unwrap();
        let (noise, _) = head.forward_noise(&h, 4, &mut rng).unwrap();
        assert!(noise.iter().all(|m| m.max_abs() < 1e-20));
    }
}
