//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use hetsngp::dense::Params;
use hetsngp::feature_net::Activation;
use hetsngp::het_noise::HetVariant;
use hetsngp::linalg::{sample_gaussian, Matrix, Rng};
use hetsngp::model::{build_variant, McLoss, ModelConfig, ModelDims};
use hetsngp::VariantKind;

/// Largest singular value by one-sided Jacobi rotations.
pub fn jacobi_max_singular_value(a: &Matrix) -> f64 {
    // Work on the wider orientation's transpose so columns <= rows.
    let m = if a.rows() >= a.cols() { a.clone() } else { a.transpose() };
    let (rows, cols) = (m.rows(), m.cols());
    let mut cols_v: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..rows {
                    alpha += cols_v[p][r] * cols_v[p][r];
                    beta += cols_v[q][r] * cols_v[q][r];
                    gamma += cols_v[p][r] * cols_v[q][r];
                }
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let (x, y) = (cols_v[p][r], cols_v[q][r]);
                    cols_v[p][r] = c * x - s * y;
                    cols_v[q][r] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    cols_v
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// `I + Σ_i p_ic (1 − p_ic) φ_i φ_iᵀ`, one class at a time, by plain loops.
pub fn direct_precision(phi: &Matrix, probs: &Matrix, class: usize) -> Matrix {
    let m = phi.cols();
    let mut out = Matrix::identity(m);
    for i in 0..phi.rows() {
        let p = probs[(i, class)];
        let w = p * (1.0 - p);
        for a in 0..m {
            for b in 0..m {
                out[(a, b)] += w * phi[(i, a)] * phi[(i, b)];
            }
        }
    }
    out
}

pub fn brute_accuracy(probs: &Matrix, labels: &[usize]) -> f64 {
    let mut hits = 0;
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

pub fn brute_nll(probs: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = if probs[(i, y)] < 1e-12 { 1e-12 } else { probs[(i, y)] };
        total -= p.ln();
    }
    total / labels.len() as f64
}

/// ECE by scanning every bin's `(lo, hi]` interval separately.
pub fn brute_ece(probs: &Matrix, labels: &[usize], bins: usize) -> f64 {
    let n = labels.len();
    let mut conf = vec![0.0; n];
    let mut correct = vec![false; n];
    for i in 0..n {
        let row = probs.row(i);
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        conf[i] = row[best];
        correct[i] = best == labels[i];
    }
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..n)
            .filter(|&i| {
                let c = conf[i];
                if b == 0 {
                    c <= hi
                } else {
                    c > lo && c <= hi
                }
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / members.len() as f64;
        let avg = members.iter().map(|&i| conf[i]).sum::<f64>() / members.len() as f64;
        total += members.len() as f64 / n as f64 * (acc - avg).abs();
    }
    total
}

/// Pairwise AUROC with ties counted as 1/2.
pub fn brute_auroc(scores: &[f64], is_ood: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        if !is_ood[i] {
            continue;
        }
        for j in 0..scores.len() {
            if is_ood[j] {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Sweeps every candidate threshold and keeps the largest one that accepts
/// at least 95% of ID points.
pub fn brute_fpr95(confidence: &[f64], is_ood: &[bool]) -> f64 {
    let n_id = is_ood.iter().filter(|&&o| !o).count() as f64;
    let n_ood = is_ood.iter().filter(|&&o| o).count() as f64;
    let mut best_t = f64::NEG_INFINITY;
    for (&t, &o) in confidence.iter().zip(is_ood) {
        if o {
            continue;
        }
        let accepted = confidence
            .iter()
            .zip(is_ood)
            .filter(|(&s, &o)| !o && s >= t)
            .count() as f64;
        if accepted * 100.0 >= 95.0 * n_id && t > best_t {
            best_t = t;
        }
    }
    confidence
        .iter()
        .zip(is_ood)
        .filter(|(&s, &o)| o && s >= best_t)
        .count() as f64
        / n_ood
}

/// Worst per-tensor relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the
/// analytic loss gradient and central differences on a randomized small
/// configuration.
pub fn gradient_check(kind: VariantKind, het_variant: HetVariant, mc_loss: McLoss, rep: u64) -> f64 {
    let mut r = Rng::new(1000 + rep);
    let k = 2 + r.below(3);
    let input_dim = 1 + r.below(4);
    let mut cfg = ModelConfig::default();
    cfg.features.hidden_dim = 3 + r.below(4);
    cfg.features.output_dim = 2 + r.below(4);
    cfg.features.num_residual_blocks = 1 + r.below(2);
    cfg.features.activation = Activation::Tanh;
    cfg.rff.num_features = 6 + r.below(6);
    cfg.rff.lengthscale = 1.5;
    cfg.het.rank = 1 + r.below(k);
    cfg.het.variant = het_variant;
    cfg.train.mc_samples = 3;
    cfg.train.temperature = 0.8;
    cfg.train.weight_decay = 0.01;
    cfg.train.beta_penalty = 0.3;
    cfg.train.mc_loss = mc_loss;
    cfg.train.seed = rep;
    let dims = ModelDims {
        input_dim,
        num_classes: k,
    };
    let mut model = build_variant(kind, dims, &cfg).unwrap();
    if let Some(g) = model.gp_mut() {
        let m = g.posterior.num_features();
        let mut beta = sample_gaussian(&mut r, m, k).unwrap();
        beta.scale(0.5);
        g.posterior.beta_hat = beta;
    }
    let n = 5;
    let x = sample_gaussian(&mut r, n, input_dim).unwrap();
    let y: Vec<usize> = (0..n).map(|_| r.below(k)).collect();
    let noise = Rng::new(77 + rep);

    let (_, grads) = model.loss_and_grads(&x, &y, &mut noise.clone()).unwrap();
    let analytic: Vec<Vec<f64>> = grads.param_slices().iter().map(|s| s.to_vec()).collect();
    assert_eq!(analytic.len(), model.param_slices().len());
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (t, a) in analytic.iter().enumerate() {
        assert_eq!(a.len(), model.param_slices()[t].len());
        let mut numeric = vec![0.0; a.len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let orig = model.param_slices()[t][j];
            model.param_slices_mut()[t][j] = orig + eps;
            let lp = model.loss_and_grads(&x, &y, &mut noise.clone()).unwrap().0;
            model.param_slices_mut()[t][j] = orig - eps;
            let lm = model.loss_and_grads(&x, &y, &mut noise.clone()).unwrap().0;
            model.param_slices_mut()[t][j] = orig;
            *num = (lp - lm) / (2.0 * eps);
        }
        let diff: f64 = a.iter().zip(&numeric).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = na.max(nn);
        if denom > 1e-9 {
            worst = worst.max(diff / denom);
        }
    }
    worst
}

/// A random metrics instance: `n × k` probability rows (sometimes with
/// exact ties and bin-edge confidences), labels, and per-row OOD flags with
/// both classes present.
pub struct MetricsInstance {
    pub probs: Matrix,
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
    pub is_ood: Vec<bool>,
}

pub fn random_metrics_instance(seed: u64) -> MetricsInstance {
    let mut r = Rng::new(seed);
    let n = 2 + r.below(60);
    let k = 2 + r.below(4);
    let coarse = r.bernoulli(0.4);
    let mut probs = Matrix::zeros(n, k);
    for i in 0..n {
        let row = probs.row_mut(i);
        if coarse {
            // Integer weights make ties and exact bin edges common.
            row.iter_mut().for_each(|v| *v = r.below(4) as f64);
            if row.iter().all(|&v| v == 0.0) {
                row[0] = 1.0;
            }
        } else {
            row.iter_mut().for_each(|v| *v = r.uniform(0.0, 1.0).powi(3));
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let labels = (0..n).map(|_| r.below(k)).collect();
    let mut is_ood: Vec<bool> = (0..n).map(|_| r.bernoulli(0.4)).collect();
    is_ood[0] = true;
    is_ood[1] = false;
    let levels = 1 + r.below(8);
    let scores = (0..n)
        .map(|_| {
            if coarse {
                r.below(levels) as f64 / levels as f64
            } else {
                r.uniform(0.0, 1.0)
            }
        })
        .collect();
    MetricsInstance {
        probs,
        labels,
        scores,
        is_ood,
    }
}

/// Worst absolute disagreement of the library metrics with the brute-force
/// references over `count` random instances.
pub fn metrics_oracle_worst(count: u64) -> f64 {
    use hetsngp::metrics::{accuracy, auroc, ece, fpr_at_95, nll, ECE_BINS, NLL_FLOOR};
    let mut worst = 0.0f64;
    for seed in 0..count {
        let t = random_metrics_instance(seed);
        let pairs = [
            (accuracy(&t.probs, &t.labels).unwrap(), brute_accuracy(&t.probs, &t.labels)),
            (nll(&t.probs, &t.labels, NLL_FLOOR).unwrap(), brute_nll(&t.probs, &t.labels)),
            (
                ece(&t.probs, &t.labels, ECE_BINS).unwrap(),
                brute_ece(&t.probs, &t.labels, ECE_BINS),
            ),
            (auroc(&t.scores, &t.is_ood).unwrap(), brute_auroc(&t.scores, &t.is_ood)),
            (
                fpr_at_95(&t.scores, &t.is_ood).unwrap(),
                brute_fpr95(&t.scores, &t.is_ood),
            ),
        ];
        for (a, b) in pairs {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Largest elementwise gap between the library's accumulated Laplace
/// precisions and [`direct_precision`] on a 10-point, K=3, m=16 instance fed
/// in uneven batches.
pub fn laplace_oracle_worst(seed: u64) -> f64 {
    use hetsngp::rff_gp::{CovarianceMode, GpPosterior, RffProjection};
    let mut r = Rng::new(seed);
    let (n, k, m, d) = (10, 3, 16, 4);
    let proj = RffProjection::new(d, m, 1.3, &mut r).unwrap();
    let h = sample_gaussian(&mut r, n, d).unwrap();
    let phi = proj.featurize(&h).unwrap();
    let mut probs = Matrix::zeros(n, k);
    for i in 0..n {
        let row = probs.row_mut(i);
        row.iter_mut().for_each(|v| *v = r.uniform(0.01, 1.0));
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let mut post = GpPosterior::new(m, k, CovarianceMode::ExactSum);
    for rows in [0..3usize, 3..4, 4..10] {
        let idx: Vec<usize> = rows.collect();
        post.accumulate_precision(&phi.select_rows(&idx), &probs.select_rows(&idx))
            .unwrap();
    }
    let mut worst = 0.0f64;
    for c in 0..k {
        let lib = post.precision(c);
        let oracle = direct_precision(&phi, &probs, c);
        for (a, b) in lib.data().iter().zip(oracle.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Mean `|Φ_i·Φ_j − exp(−‖h−h′‖²/(2λ²))|` over `pairs` random pairs with
/// separations uniform in `[0, 3λ]`.
pub fn rff_kernel_error(m: usize, pairs: usize, seed: u64) -> f64 {
    use hetsngp::rff_gp::RffProjection;
    let mut r = Rng::new(seed);
    let (d, lambda) = (8, 1.7);
    let proj = RffProjection::new(d, m, lambda, &mut r).unwrap();
    let mut total = 0.0;
    for _ in 0..pairs {
        let a = sample_gaussian(&mut r, 1, d).unwrap();
        let mut dir = sample_gaussian(&mut r, 1, d).unwrap();
        let len = dir.frobenius_norm();
        dir.scale(r.uniform(0.0, 3.0 * lambda) / len);
        let b = a.add(&dir).unwrap();
        let fa = proj.featurize(&a).unwrap();
        let fb = proj.featurize(&b).unwrap();
        let approx: f64 = fa.row(0).iter().zip(fb.row(0)).map(|(x, y)| x * y).sum();
        let dist2 = dir.squared_norm();
        let exact = (-dist2 / (2.0 * lambda * lambda)).exp();
        total += (approx - exact).abs();
    }
    total / pairs as f64
}

/// Trains `kind` for exactly `steps` SGD steps (ten epochs) and returns the
/// largest SVD-oracle `σ / c` over the feature extractor's weights.
pub fn spectral_ratio_after_steps(
    kind: VariantKind,
    data: &hetsngp::data::Dataset,
    config: &ModelConfig,
    steps: usize,
) -> f64 {
    assert_eq!(steps % 10, 0);
    let per_epoch = steps / 10;
    let n = data.in_distribution().len();
    let mut cfg = config.clone();
    cfg.train.epochs = 10;
    cfg.train.batch_size = n.div_ceil(per_epoch);
    assert_eq!(n.div_ceil(cfg.train.batch_size), per_epoch, "n = {n}");
    let dims = ModelDims {
        input_dim: data.dim(),
        num_classes: data.num_classes,
    };
    let mut model = build_variant(kind, dims, &cfg).unwrap();
    model.fit(data).unwrap();
    let c = model.features.config.spectral_bound;
    model
        .features
        .weight_matrices()
        .into_iter()
        .map(|w| jacobi_max_singular_value(w) / c)
        .fold(0.0, f64::max)
}

/// Worst gaps for the degenerate-noise collapse, over the given sample
/// counts: (silenced hetsngp with MAP weights vs sngp sharing its network
/// and posterior, silenced hetsngp with a vanishing posterior covariance vs
/// the tempered softmax of its mean logits).
pub fn collapse_gaps(sample_counts: &[usize]) -> (f64, f64) {
    use hetsngp::model::tempered_softmax;
    let data = hetsngp::data::two_moons(200, 0.1, 1).unwrap();
    let mut cfg = ModelConfig::default();
    cfg.features.hidden_dim = 16;
    cfg.features.output_dim = 16;
    cfg.features.num_residual_blocks = 1;
    cfg.rff.num_features = 32;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 50;
    cfg.predict.temperature = 0.7;
    let dims = ModelDims {
        input_dim: 2,
        num_classes: 2,
    };
    let mut het = build_variant(VariantKind::Hetsngp, dims, &cfg).unwrap();
    het.fit(&data).unwrap();
    het.het.as_mut().unwrap().silence(0.0);
    let mut sngp = build_variant(VariantKind::Sngp, dims, &cfg).unwrap();
    sngp.features = het.features.clone();
    sngp.mean = het.mean.clone();
    let x = sample_gaussian(&mut Rng::new(5), 40, 2).unwrap();

    let mut map_gap = 0.0f64;
    het.predict.map_mode = true;
    sngp.predict.map_mode = true;
    for &s in sample_counts {
        let a = het.predict_proba(&x, s, &mut Rng::new(1)).unwrap();
        let b = sngp.predict_proba(&x, s, &mut Rng::new(2)).unwrap();
        map_gap = map_gap.max(a.sub(&b).unwrap().max_abs());
    }

    het.predict.map_mode = false;
    let g = het.gp_mut().unwrap();
    g.posterior.scale_precisions(1e16);
    g.posterior.finalize().unwrap();
    let target = tempered_softmax(&het.mean_logits(&x).unwrap(), 0.7);
    let mut softmax_gap = 0.0f64;
    for &s in sample_counts {
        let p = het.predict_proba(&x, s, &mut Rng::new(s as u64)).unwrap();
        softmax_gap = softmax_gap.max(p.sub(&target).unwrap().max_abs());
    }
    (map_gap, softmax_gap)
}
