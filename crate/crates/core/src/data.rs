//! Synthetic benchmark generators, CSV ingestion/export, splitting and
//! standardization.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    /// Labels before noise injection, when known.
    pub y_clean: Option<Vec<usize>>,
    pub is_ood: Option<Vec<bool>>,
    pub num_classes: usize,
    /// Name of each class index (CSV label mapping).
    pub label_names: Vec<String>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        let d = x.cols();
        let ds = Self {
            x,
            y,
            y_clean: None,
            is_ood: None,
            num_classes,
            label_names: (0..num_classes).map(|c| c.to_string()).collect(),
            feature_names: (0..d).map(|j| format!("x{j}")).collect(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        if self.y.len() != n {
            return Err(Error::InvalidConfig(format!(
                "{} labels for {n} rows",
                self.y.len()
            )));
        }
        if let Some(&c) = self.y.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::InvalidConfig(format!(
                "label {c} outside [0, {})",
                self.num_classes
            )));
        }
        if let Some(clean) = &self.y_clean {
            if clean.len() != n || clean.iter().any(|&c| c >= self.num_classes) {
                return Err(Error::InvalidConfig("invalid clean-label column".into()));
            }
        }
        if self.is_ood.as_ref().is_some_and(|f| f.len() != n) {
            return Err(Error::InvalidConfig("OOD flag column has wrong length".into()));
        }
        if !self.x.is_finite() {
            return Err(Error::InvalidConfig("non-finite feature value".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn is_ood_at(&self, i: usize) -> bool {
        self.is_ood.as_ref().is_some_and(|f| f[i])
    }

    /// Rows in the given order, carrying every optional column along.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            y_clean: self
                .y_clean
                .as_ref()
                .map(|c| idx.iter().map(|&i| c[i]).collect()),
            is_ood: self
                .is_ood
                .as_ref()
                .map(|f| idx.iter().map(|&i| f[i]).collect()),
            num_classes: self.num_classes,
            label_names: self.label_names.clone(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Points not flagged as out-of-distribution.
    pub fn in_distribution(&self) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| !self.is_ood_at(i)).collect();
        self.subset(&idx)
    }

    /// Points flagged as out-of-distribution.
    pub fn out_of_distribution(&self) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.is_ood_at(i)).collect();
        self.subset(&idx)
    }

    /// Clean labels if present, otherwise the observed ones.
    pub fn clean_labels(&self) -> &[usize] {
        self.y_clean.as_deref().unwrap_or(&self.y)
    }
}

/// Two interleaving unit half-circles with isotropic Gaussian jitter.
/// Class 0 is the upper arc centred at the origin, class 1 the lower arc
/// centred at `(1, 0.5)`.
pub fn two_moons(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "two_moons needs an even n >= 2, got {n}"
        )));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::InvalidConfig("noise_sd must be >= 0".into()));
    }
    let half = n / 2;
    let mut rng = Rng::new(seed);
    let mut x = Matrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..half {
        let t = if half > 1 {
            PI * i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        x[(i, 0)] = t.cos();
        x[(i, 1)] = t.sin();
        y.push(0);
    }
    for i in 0..half {
        let t = if half > 1 {
            PI * i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        x[(half + i, 0)] = 1.0 - t.cos();
        x[(half + i, 1)] = 0.5 - t.sin();
        y.push(1);
    }
    if noise_sd > 0.0 {
        for v in x.data_mut() {
            *v += noise_sd * rng.normal();
        }
    }
    Dataset::new(x, y, 2)
}

/// Radius of the circle the mixture components sit on.
pub const MIXTURE_RADIUS: f64 = 3.0;

/// Parameters of [`gaussian_mixture_with_ood`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSpec {
    pub n_per_class: usize,
    pub k_classes: usize,
    pub ood_n: usize,
    pub ood_offset: f64,
    /// Standard deviation of the OOD cluster.
    pub ood_sd: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            n_per_class: 200,
            k_classes: 3,
            ood_n: 100,
            ood_offset: 8.0,
            ood_sd: 0.25,
            seed: 0,
        }
    }
}

/// `k` unit-variance Gaussian blobs on a circle of radius 3 around the
/// origin, plus an OOD cluster `ood_offset` away from the centroid in the
/// direction halfway between the first two blobs. OOD rows are flagged and
/// labelled 0.
pub fn gaussian_mixture_with_ood(spec: &MixtureSpec) -> Result<Dataset> {
    let k = spec.k_classes;
    if k < 2 {
        return Err(Error::InvalidConfig("gaussian mixture needs k_classes >= 2".into()));
    }
    if !(spec.ood_offset >= 0.0) || !(spec.ood_sd >= 0.0) || spec.n_per_class == 0 {
        return Err(Error::InvalidConfig(
            "gaussian mixture needs n_per_class >= 1 and nonnegative ood_offset/ood_sd".into(),
        ));
    }
    let mut rng = Rng::new(spec.seed);
    let n = spec.n_per_class * k + spec.ood_n;
    let mut x = Matrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    let mut is_ood = Vec::with_capacity(n);
    let mut row = 0;
    for c in 0..k {
        let (cx, cy) = mixture_mean(c, k);
        for _ in 0..spec.n_per_class {
            x[(row, 0)] = cx + rng.normal();
            x[(row, 1)] = cy + rng.normal();
            y.push(c);
            is_ood.push(false);
            row += 1;
        }
    }
    let angle = PI / 2.0 + PI / k as f64;
    let (ox, oy) = (spec.ood_offset * angle.cos(), spec.ood_offset * angle.sin());
    for _ in 0..spec.ood_n {
        x[(row, 0)] = ox + spec.ood_sd * rng.normal();
        x[(row, 1)] = oy + spec.ood_sd * rng.normal();
        y.push(0);
        is_ood.push(true);
        row += 1;
    }
    let mut ds = Dataset::new(x, y, k)?;
    ds.is_ood = Some(is_ood);
    Ok(ds)
}

/// Mean of mixture component `c` out of `k`.
pub fn mixture_mean(c: usize, k: usize) -> (f64, f64) {
    let a = PI / 2.0 + TAU * c as f64 / k as f64;
    (MIXTURE_RADIUS * a.cos(), MIXTURE_RADIUS * a.sin())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CirclesSpec {
    pub n_per_class: usize,
    pub radii: [f64; 3],
    pub flip_rates: [f64; 3],
    pub radial_sd: f64,
    pub seed: u64,
}

impl Default for CirclesSpec {
    fn default() -> Self {
        Self {
            n_per_class: 1000,
            radii: [1.0, 2.0, 3.0],
            flip_rates: [0.05, 0.20, 0.40],
            radial_sd: 0.12,
            seed: 0,
        }
    }
}

/// Three concentric rings; ring `r`'s labels are flipped to a uniformly
/// chosen other ring with probability `flip_rates[r]`. `y_clean` keeps the
/// ring index.
pub fn noisy_concentric_circles(spec: &CirclesSpec) -> Result<Dataset> {
    let r = spec.radii;
    if !(r[0] > 0.0 && r[0] < r[1] && r[1] < r[2]) {
        return Err(Error::InvalidConfig(format!(
            "radii must be positive and strictly increasing, got {r:?}"
        )));
    }
    if spec.flip_rates.iter().any(|&p| !(0.0..1.0).contains(&p)) {
        return Err(Error::InvalidConfig(format!(
            "flip rates must lie in [0, 1), got {:?}",
            spec.flip_rates
        )));
    }
    if !(spec.radial_sd >= 0.0) || spec.n_per_class == 0 {
        return Err(Error::InvalidConfig(
            "circles need n_per_class >= 1 and radial_sd >= 0".into(),
        ));
    }
    let mut rng = Rng::new(spec.seed);
    let n = 3 * spec.n_per_class;
    let mut x = Matrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    let mut y_clean = Vec::with_capacity(n);
    for ring in 0..3 {
        for _ in 0..spec.n_per_class {
            let row = y.len();
            let theta = rng.uniform(0.0, TAU);
            let radius = r[ring] + spec.radial_sd * rng.normal();
            x[(row, 0)] = radius * theta.cos();
            x[(row, 1)] = radius * theta.sin();
            y_clean.push(ring);
            let label = if rng.bernoulli(spec.flip_rates[ring]) {
                let other = rng.below(2);
                if other >= ring {
                    other + 1
                } else {
                    other
                }
            } else {
                ring
            };
            y.push(label);
        }
    }
    let mut ds = Dataset::new(x, y, 3)?;
    ds.y_clean = Some(y_clean);
    Ok(ds)
}

/// Reads a headered CSV. Every column except the label column (and the
/// optional `y_clean` / `is_ood` columns) must be numeric. Labels are mapped
/// to `0..K` in sorted order: numeric when every label is an integer,
/// lexicographic otherwise.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str, delimiter: u8) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::MissingColumn(label_column.to_string()))?;
    let clean_idx = headers.iter().position(|h| h == "y_clean");
    let ood_idx = headers.iter().position(|h| h == "is_ood");
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&j| j != label_idx && Some(j) != clean_idx && Some(j) != ood_idx)
        .collect();

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    let mut raw_clean = Vec::new();
    let mut flags = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: record.len().min(headers.len()) + 1,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for &j in &feature_idx {
            let field = record[j].trim();
            let v: f64 = field.parse().map_err(|_| Error::NonNumericFeature {
                row,
                column: headers[j].clone(),
                value: field.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: j + 1,
                    message: format!("non-finite value `{field}`"),
                });
            }
            features.push(v);
        }
        raw_labels.push(record[label_idx].trim().to_string());
        if let Some(j) = clean_idx {
            raw_clean.push(record[j].trim().to_string());
        }
        if let Some(j) = ood_idx {
            let f = record[j].trim();
            let flag = match f {
                "1" | "true" | "True" | "TRUE" => true,
                "0" | "false" | "False" | "FALSE" => false,
                _ => {
                    return Err(Error::Parse {
                        row,
                        column: j + 1,
                        message: format!("`{f}` is not a boolean"),
                    })
                }
            };
            flags.push(flag);
        }
    }

    let names = label_mapping(raw_labels.iter().chain(&raw_clean));
    let lookup = |s: &String| names.iter().position(|n| n == s).expect("label was collected");
    let n = raw_labels.len();
    let x = Matrix::from_vec(n, feature_idx.len(), features)?;
    let ds = Dataset {
        x,
        y: raw_labels.iter().map(lookup).collect(),
        y_clean: clean_idx.map(|_| raw_clean.iter().map(lookup).collect()),
        is_ood: ood_idx.map(|_| flags),
        num_classes: names.len(),
        label_names: names,
        feature_names: feature_idx.iter().map(|&j| headers[j].clone()).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

fn label_mapping<'a>(labels: impl Iterator<Item = &'a String>) -> Vec<String> {
    let unique: BTreeSet<&String> = labels.collect();
    let mut names: Vec<String> = unique.into_iter().cloned().collect();
    if names.iter().all(|s| s.parse::<i64>().is_ok()) {
        names.sort_by_key(|s| s.parse::<i64>().expect("checked"));
    }
    names
}

/// Writes `features.., label[, y_clean][, is_ood]` with a header row.
pub fn export_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header: Vec<String> = data.feature_names.clone();
    header.push("label".into());
    if data.y_clean.is_some() {
        header.push("y_clean".into());
    }
    if data.is_ood.is_some() {
        header.push("is_ood".into());
    }
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.x.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(data.label_names[data.y[i]].clone());
        if let Some(c) = &data.y_clean {
            rec.push(data.label_names[c[i]].clone());
        }
        if let Some(f) = &data.is_ood {
            rec.push(if f[i] { "1".into() } else { "0".into() });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Seeded split into `(train, test)`. `fractions` must sum to one; OOD rows
/// always go to the test part.
pub fn split(data: &Dataset, fractions: (f64, f64), seed: u64) -> Result<(Dataset, Dataset)> {
    let (train_f, test_f) = fractions;
    if train_f < 0.0 || test_f < 0.0 || ((train_f + test_f) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    let mut id: Vec<usize> = (0..data.len()).filter(|&i| !data.is_ood_at(i)).collect();
    let ood: Vec<usize> = (0..data.len()).filter(|&i| data.is_ood_at(i)).collect();
    Rng::new(seed).shuffle(&mut id);
    let n_train = ((id.len() as f64) * train_f).round() as usize;
    let n_train = n_train.min(id.len());
    let train_idx = &id[..n_train];
    let mut test_idx = id[n_train..].to_vec();
    test_idx.extend(ood);
    Ok((data.subset(train_idx), data.subset(&test_idx)))
}

/// Per-feature affine standardization fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Standardizer {
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        let n = x.rows() as f64;
        let mean: Vec<f64> = x.sum_rows().into_iter().map(|s| s / n).collect();
        let mut var = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for ((v, &xv), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *v += (xv - m) * (xv - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(crate::error::shape_err(
                "Standardizer::transform",
                self.mean.len(),
                x.cols(),
            ));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn transform_dataset(&self, data: &Dataset) -> Result<Dataset> {
        let mut out = data.clone();
        out.x = self.transform(&data.x)?;
        Ok(out)
    }
}

/// Fits on `train` (in-distribution rows only) and applies to both parts.
pub fn standardize_fit_transform(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, Standardizer)> {
    let s = Standardizer::fit(&train.in_distribution().x)?;
    Ok((s.transform_dataset(train)?, s.transform_dataset(test)?, s))
}
