use serde::{Deserialize, Serialize};

use super::{
    argmax, softmax_in_place, tempered_softmax, BetaPriorScaling, GpLayer, HetSngpModel,
    LaplacePass, LrSchedule, McLoss, MeanHead, NOISE_STREAM, SHUFFLE_STREAM,
};
use crate::data::Dataset;
use crate::dense::{sgd_update, DenseGrad, Params};
use crate::error::{shape_err, Error, Result};
use crate::feature_net::FeatureGrads;
use crate::het_noise::HetGrads;
use crate::linalg::{Matrix, Rng};
use crate::metrics;
use crate::rff_gp::sample_from_factors;

/// Gradients laid out exactly like [`HetSngpModel`]'s parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub features: FeatureGrads,
    pub mean: MeanGrads,
    pub het: Option<HetGrads>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MeanGrads {
    Affine(DenseGrad),
    Beta(Matrix),
}

impl Params for ModelGrads {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.features.param_slices();
        match &self.mean {
            MeanGrads::Affine(d) => out.extend(d.param_slices()),
            MeanGrads::Beta(b) => out.push(b.data()),
        }
        if let Some(h) = &self.het {
            out.extend(h.param_slices());
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.features.param_slices_mut();
        match &mut self.mean {
            MeanGrads::Affine(d) => out.extend(d.param_slices_mut()),
            MeanGrads::Beta(b) => out.push(b.data_mut()),
        }
        if let Some(h) = &mut self.het {
            out.extend(h.param_slices_mut());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Running accuracy of the mean logits over the epoch's minibatches.
    pub train_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Accuracy of the full predictive on the training set after
    /// finalization, using [`HetSngpModel::prediction_rng`].
    pub final_train_accuracy: f64,
    pub lengthscale: Option<f64>,
}

struct StepOutput {
    loss: f64,
    grads: ModelGrads,
    phi: Option<Matrix>,
    mean_logits: Matrix,
}

impl HetSngpModel {
    /// Loss and exact gradients for one batch. `ε` (and `β` draws, if any)
    /// come from `rng`, so cloning the generator reproduces the same draws.
    pub fn loss_and_grads(&self, x: &Matrix, y: &[usize], rng: &mut Rng) -> Result<(f64, ModelGrads)> {
        let out = self.forward_backward(x, y, rng, None, self.beta_scale(x.rows()))?;
        Ok((out.loss, out.grads))
    }

    /// One SGD step at the configured learning rate followed by spectral
    /// normalization. Returns the batch loss before the update.
    pub fn train_step(&mut self, x: &Matrix, y: &[usize], rng: &mut Rng) -> Result<f64> {
        let scale = self.beta_scale(x.rows());
        let lr = self.train.learning_rate;
        let out = self.forward_backward(x, y, rng, None, scale)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: 0,
                step: 0,
                loss: out.loss,
            });
        }
        self.apply_update(&out.grads, lr)?;
        Ok(out.loss)
    }

    fn beta_scale(&self, n_total: usize) -> f64 {
        match self.train.beta_prior_scaling {
            BetaPriorScaling::PerBatch => self.train.beta_penalty,
            BetaPriorScaling::PerDataset => self.train.beta_penalty / n_total.max(1) as f64,
        }
    }

    fn apply_update(&mut self, grads: &ModelGrads, lr: f64) -> Result<()> {
        sgd_update(self, grads, lr, 0.0);
        if self.gp().is_some() {
            self.features.apply_spectral_normalization_with(1)?;
        }
        Ok(())
    }

    fn forward_backward(
        &self,
        x: &Matrix,
        y: &[usize],
        rng: &mut Rng,
        beta_factors: Option<&[Matrix]>,
        beta_scale: f64,
    ) -> Result<StepOutput> {
        let n = x.rows();
        let k = self.num_classes;
        if y.len() != n {
            return Err(shape_err("train_step", format!("{n} labels"), y.len()));
        }
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= k) {
            return Err(Error::InvalidConfig(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let tau = self.train.temperature;
        let (h, ftape) = self.features.forward(x)?;

        let mut phi_tape = None;
        let (mean_logits, phi) = match &self.mean {
            MeanHead::Affine(d) => (d.forward(&h)?, None),
            MeanHead::Gp(g) => {
                let (phi, tape) = g.projection.featurize_traced(&h)?;
                phi_tape = Some(tape);
                (g.posterior.logits_mean(&phi)?, Some(phi))
            }
        };

        let needs_mc = self.het.is_some() || beta_factors.is_some();
        let samples = if needs_mc { self.train.mc_samples } else { 1 };
        let (noise, noise_tape) = match &self.het {
            Some(head) => {
                let (noise, tape) = head.forward_noise(&h, samples, rng)?;
                (Some(noise), Some(tape))
            }
            None => (None, None),
        };
        let beta_draws: Option<Vec<Matrix>> = match (beta_factors, &self.mean) {
            (Some(factors), MeanHead::Gp(g)) => Some(
                (0..samples)
                    .map(|_| sample_from_factors(&g.posterior.beta_hat, factors, rng))
                    .collect::<Result<_>>()?,
            ),
            _ => None,
        };

        let mut us = Vec::with_capacity(samples);
        for s in 0..samples {
            let mut u = match (&beta_draws, &phi) {
                (Some(draws), Some(phi)) => phi.matmul(&draws[s])?,
                _ => mean_logits.clone(),
            };
            if let Some(noise) = &noise {
                u.add_assign(&noise[s])?;
            }
            us.push(u);
        }

        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut grad_u: Vec<Matrix> = (0..samples).map(|_| Matrix::zeros(n, k)).collect();
        let mut logp = vec![0.0; samples];
        let mut weights = vec![1.0 / samples as f64; samples];
        for i in 0..n {
            for (lp, u) in logp.iter_mut().zip(&us) {
                let row = u.row(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx / tau
                    + row.iter().map(|v| ((v - mx) / tau).exp()).sum::<f64>().ln();
                *lp = row[y[i]] / tau - lse;
            }
            match self.train.mc_loss {
                McLoss::MeanLogProb => {
                    loss -= logp.iter().sum::<f64>() / samples as f64 * inv_n;
                }
                McLoss::LogMeanProb => {
                    // Each sample's share of the averaged likelihood.
                    let mx = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logp.iter().map(|l| (l - mx).exp()).sum();
                    loss -= (mx + z.ln() - (samples as f64).ln()) * inv_n;
                    for (w, l) in weights.iter_mut().zip(&logp) {
                        *w = (l - mx).exp() / z;
                    }
                }
            }
            for ((g, u), w) in grad_u.iter_mut().zip(&us).zip(&weights) {
                let gi = g.row_mut(i);
                gi.copy_from_slice(u.row(i));
                softmax_in_place(gi, tau);
                gi[y[i]] -= 1.0;
                gi.iter_mut().for_each(|v| *v *= w * inv_n / tau);
            }
        }

        let mut g_mean = grad_u[0].clone();
        for g in &grad_u[1..] {
            g_mean.add_assign(g)?;
        }

        let (mean_grad, mut grad_h) = match &self.mean {
            MeanHead::Affine(d) => {
                let (dg, gh) = d.backward(&h, &g_mean)?;
                (MeanGrads::Affine(dg), gh)
            }
            MeanHead::Gp(g) => {
                let phi = phi.as_ref().expect("GP head featurized");
                let g_beta = phi.matmul_tn(&g_mean)?;
                let g_phi = match &beta_draws {
                    None => g_mean.matmul_nt(&g.posterior.beta_hat)?,
                    Some(draws) => {
                        let mut acc = Matrix::zeros(n, phi.cols());
                        for (gs, b) in grad_u.iter().zip(draws) {
                            acc.add_assign(&gs.matmul_nt(b)?)?;
                        }
                        acc
                    }
                };
                let gh = g
                    .projection
                    .backward(phi_tape.take().expect("tape recorded"), &g_phi)?;
                (MeanGrads::Beta(g_beta), gh)
            }
        };

        let het_grad = match (&self.het, noise_tape) {
            (Some(head), Some(tape)) => {
                let (hg, gh) = head.backward_noise(tape, &grad_u)?;
                grad_h.add_assign(&gh)?;
                Some(hg)
            }
            _ => None,
        };

        let (feature_grad, _) = self.features.backward(ftape, &grad_h)?;
        let mut grads = ModelGrads {
            features: feature_grad,
            mean: mean_grad,
            het: het_grad,
        };

        // Penalties: β̂ gets its prior term, everything else weight decay.
        let wd = self.train.weight_decay;
        loss += wd * self.features.squared_norm();
        add_scaled(grads.features.param_slices_mut(), self.features.param_slices(), 2.0 * wd);
        match (&self.mean, &mut grads.mean) {
            (MeanHead::Affine(d), MeanGrads::Affine(dg)) => {
                loss += wd * d.squared_norm();
                add_scaled(dg.param_slices_mut(), d.param_slices(), 2.0 * wd);
            }
            (MeanHead::Gp(g), MeanGrads::Beta(gb)) => {
                loss += beta_scale * g.posterior.beta_hat.squared_norm();
                gb.axpy(2.0 * beta_scale, &g.posterior.beta_hat)?;
            }
            _ => unreachable!("gradient layout follows the model"),
        }
        if let (Some(head), Some(hg)) = (&self.het, &mut grads.het) {
            loss += wd * head.squared_norm();
            add_scaled(hg.param_slices_mut(), head.param_slices(), 2.0 * wd);
        }

        Ok(StepOutput {
            loss,
            grads,
            phi,
            mean_logits,
        })
    }

    /// Trains on `data` with the model's [`super::TrainConfig`], then
    /// finalizes the Laplace posterior (GP variants).
    pub fn fit(&mut self, data: &Dataset) -> Result<TrainReport> {
        self.train.validate()?;
        if data.num_classes != self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "dataset has {} classes, model expects {}",
                data.num_classes, self.num_classes
            )));
        }
        if data.x.cols() != self.input_dim() {
            return Err(shape_err("fit", self.input_dim(), data.x.cols()));
        }
        let index: Vec<usize> = (0..data.len())
            .filter(|&i| !data.is_ood.as_ref().is_some_and(|f| f[i]))
            .collect();
        if index.is_empty() {
            return Err(Error::EmptyInput);
        }
        let x = data.x.select_rows(&index);
        let y: Vec<usize> = index.iter().map(|&i| data.y[i]).collect();
        let n = x.rows();

        let seed = self.train.seed;
        let mut shuffle_rng = Rng::with_stream(seed, SHUFFLE_STREAM);
        let mut noise_rng = Rng::with_stream(seed, NOISE_STREAM);
        let epochs = self.train.epochs;
        let batch = self.train.batch_size.min(n);
        let steps_per_epoch = n.div_ceil(batch);
        let total_steps = epochs * steps_per_epoch;
        let beta_scale = self.beta_scale(n);
        let sample_beta = self.train.sample_beta && self.gp().is_some();
        let laplace_pass = self.train.laplace_pass;

        if self.rff_config.median_lengthscale {
            let probe: Vec<usize> = (0..n.min(256)).collect();
            let h = self.features.embed(&x.select_rows(&probe))?;
            let median = median_pairwise_distance(&h);
            if let Some(g) = self.gp_mut() {
                if median > 0.0 && median.is_finite() {
                    g.projection.lengthscale = median;
                }
            }
        }

        if let Some(g) = self.gp_mut() {
            g.posterior.reset_precision();
        }
        let mut sampling_factors: Option<Vec<Matrix>> = None;
        let mut order: Vec<usize> = (0..n).collect();
        let mut logs = Vec::with_capacity(epochs);
        let mut step = 0usize;
        for epoch in 0..epochs {
            let final_epoch = epoch + 1 == epochs;
            let accumulate = self.gp().is_some()
                && (sample_beta || (final_epoch && laplace_pass == LaplacePass::FinalEpoch));
            if accumulate {
                if let Some(g) = self.gp_mut() {
                    g.posterior.reset_precision();
                }
            }
            shuffle_rng.shuffle(&mut order);
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            for (b, chunk) in order.chunks(batch).enumerate() {
                let xb = x.select_rows(chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
                let out = self.forward_backward(
                    &xb,
                    &yb,
                    &mut noise_rng,
                    sampling_factors.as_deref(),
                    beta_scale,
                )?;
                if !out.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step: b,
                        loss: out.loss,
                    });
                }
                loss_sum += out.loss * chunk.len() as f64;
                correct += (0..chunk.len())
                    .filter(|&i| argmax(out.mean_logits.row(i)) == yb[i])
                    .count();
                if accumulate {
                    let probs = tempered_softmax(&out.mean_logits, 1.0);
                    let phi = out.phi.as_ref().expect("GP head featurized");
                    if let Some(g) = self.gp_mut() {
                        g.posterior.accumulate_precision(phi, &probs)?;
                    }
                }
                let lr = self.learning_rate_at(step, total_steps);
                self.apply_update(&out.grads, lr)?;
                step += 1;
            }
            if accumulate && !final_epoch {
                if let Some(g) = self.gp_mut() {
                    g.posterior.finalize()?;
                    sampling_factors = g.posterior.cov_factors.take();
                }
            }
            logs.push(EpochLog {
                epoch,
                loss: loss_sum / n as f64,
                train_acc: correct as f64 / n as f64,
            });
        }

        if laplace_pass == LaplacePass::PostTraining && self.gp().is_some() {
            self.laplace_pass_over(&x)?;
        }
        if let Some(g) = self.gp_mut() {
            g.posterior.finalize()?;
        }

        let mut rng = self.prediction_rng();
        let probs = self.predict_proba(&x, self.predict.mc_samples, &mut rng)?;
        let final_train_accuracy = metrics::accuracy(&probs, &y)?;
        Ok(TrainReport {
            epochs: logs,
            final_train_accuracy,
            lengthscale: self.gp().map(|g| g.projection.lengthscale),
        })
    }

    /// Recomputes the Laplace precision over `x` with `β̂` frozen.
    pub fn laplace_pass_over(&mut self, x: &Matrix) -> Result<()> {
        let batch = self.train.batch_size.max(1);
        let h = self.features.embed(x)?;
        let g: &mut GpLayer = self
            .gp_mut()
            .ok_or_else(|| Error::InvalidConfig("model has no GP head".into()))?;
        g.posterior.reset_precision();
        let rows: Vec<usize> = (0..h.rows()).collect();
        for chunk in rows.chunks(batch) {
            let phi = g.projection.featurize(&h.select_rows(chunk))?;
            let probs = tempered_softmax(&g.posterior.logits_mean(&phi)?, 1.0);
            g.posterior.accumulate_precision(&phi, &probs)?;
        }
        Ok(())
    }

    fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let base = self.train.learning_rate;
        match self.train.lr_schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

fn add_scaled(grads: Vec<&mut [f64]>, params: Vec<&[f64]>, scale: f64) {
    for (g, p) in grads.into_iter().zip(params) {
        for (gv, pv) in g.iter_mut().zip(p) {
            *gv += scale * pv;
        }
    }
}

fn median_pairwise_distance(h: &Matrix) -> f64 {
    let mut d = Vec::with_capacity(h.rows() * h.rows().saturating_sub(1) / 2);
    for i in 0..h.rows() {
        for j in (i + 1)..h.rows() {
            let s: f64 = h
                .row(i)
                .iter()
                .zip(h.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    d[d.len() / 2]
}
