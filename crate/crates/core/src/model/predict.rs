use super::{argmax, softmax_in_place, tempered_softmax, HetSngpModel, MeanHead};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::rff_gp::sample_from_factors;

/// Posterior draws are pushed through `Φ` this many at a time.
const SAMPLE_CHUNK: usize = 32;

impl HetSngpModel {
    /// Monte-Carlo predictive `(1/S) Σ_s softmax(u^s/τ)` with
    /// `u^s = Φβ^s + d ⊙ ε_K^s + V ε_R^s`. Variants without any randomness
    /// return the exact tempered softmax regardless of `samples`.
    pub fn predict_proba(&self, x: &Matrix, samples: usize, rng: &mut Rng) -> Result<Matrix> {
        if samples == 0 {
            return Err(Error::InvalidConfig("mc_samples must be >= 1".into()));
        }
        let tau = self.predict.temperature;
        let sample_beta = self.samples_beta();
        let h = self.features.embed(x)?;
        let (phi, mean) = match &self.mean {
            MeanHead::Affine(d) => (None, d.forward(&h)?),
            MeanHead::Gp(g) => {
                let phi = g.projection.featurize(&h)?;
                let mean = g.posterior.logits_mean(&phi)?;
                (Some(phi), mean)
            }
        };
        if !sample_beta && self.het.is_none() {
            return Ok(tempered_softmax(&mean, tau));
        }

        let (n, k) = (x.rows(), self.num_classes);
        let factors = match &self.het {
            Some(head) => Some(head.covariance_factors(&h)?),
            None => None,
        };
        let mut probs = Matrix::zeros(n, k);
        let mut u = vec![0.0; k];
        let mut eps_r = Vec::new();
        let mut done = 0;
        while done < samples {
            let chunk = SAMPLE_CHUNK.min(samples - done);
            // n × (K·chunk) block of GP function draws, or None for the mean.
            let draws = if sample_beta {
                let g = self.gp().expect("sampling requires a GP head");
                let cov = g
                    .posterior
                    .cov_factors
                    .as_ref()
                    .ok_or(Error::NotFinalized)?;
                let m = g.posterior.num_features();
                let mut stacked = Matrix::zeros(m, k * chunk);
                for s in 0..chunk {
                    let beta = sample_from_factors(&g.posterior.beta_hat, cov, rng)?;
                    for i in 0..m {
                        stacked.row_mut(i)[s * k..(s + 1) * k].copy_from_slice(beta.row(i));
                    }
                }
                Some(phi.as_ref().expect("GP head featurized").matmul(&stacked)?)
            } else {
                None
            };
            for s in 0..chunk {
                for i in 0..n {
                    match &draws {
                        Some(d) => u.copy_from_slice(&d.row(i)[s * k..(s + 1) * k]),
                        None => u.copy_from_slice(mean.row(i)),
                    }
                    if let Some(f) = &factors {
                        let r = f.rank;
                        let v = f.v.row(i);
                        let d = f.d.row(i);
                        eps_r.resize(r, 0.0);
                        rng.fill_normal(&mut eps_r);
                        for c in 0..k {
                            let low: f64 = v[c * r..(c + 1) * r]
                                .iter()
                                .zip(&eps_r)
                                .map(|(a, b)| a * b)
                                .sum();
                            u[c] += d[c] * rng.normal() + low;
                        }
                    }
                    softmax_in_place(&mut u, tau);
                    for (p, &q) in probs.row_mut(i).iter_mut().zip(&u) {
                        *p += q;
                    }
                }
            }
            done += chunk;
        }
        probs.scale(1.0 / samples as f64);
        Ok(probs)
    }

    /// Argmax of [`HetSngpModel::predict_proba`], ties to the lowest class.
    pub fn predict_label(&self, x: &Matrix, samples: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        let p = self.predict_proba(x, samples, rng)?;
        Ok((0..p.rows()).map(|i| argmax(p.row(i))).collect())
    }

    /// `1 − max_c p(y = c | x)`; larger means more uncertain.
    pub fn uncertainty_score(&self, x: &Matrix, samples: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let p = self.predict_proba(x, samples, rng)?;
        Ok(uncertainty_from_probs(&p))
    }
}

pub fn uncertainty_from_probs(p: &Matrix) -> Vec<f64> {
    (0..p.rows())
        .map(|i| 1.0 - p.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Mean of the members' predictive distributions. Members consume `rng`
/// in order, so a single-member ensemble reproduces that member exactly.
pub fn ensemble_predict(
    models: &[HetSngpModel],
    x: &Matrix,
    samples: usize,
    rng: &mut Rng,
) -> Result<Matrix> {
    let first = models.first().ok_or(Error::EmptyInput)?;
    for m in &models[1..] {
        if m.num_classes != first.num_classes {
            return Err(Error::HeterogeneousEnsemble(first.num_classes, m.num_classes));
        }
    }
    let mut acc = first.predict_proba(x, samples, rng)?;
    for m in &models[1..] {
        acc.add_assign(&m.predict_proba(x, samples, rng)?)?;
    }
    if models.len() > 1 {
        acc.scale(1.0 / models.len() as f64);
    }
    Ok(acc)
}
