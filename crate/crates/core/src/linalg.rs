//! Dense row-major matrices, Cholesky factorization, power iteration and a
//! seeded random stream. Only what the model needs; no general BLAS coverage.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Smallest jitter tried when a factorization fails without one.
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter on the escalation ladder.
pub const JITTER_MAX: f64 = 1e-4;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    /// Copies the listed rows into a new matrix, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn vstack(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(shape_err("Matrix::vstack", self.cols, other.cols));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                format!("inner dim {}", self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(n, m);
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out.data[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Self> {
        if self.rows != other.rows {
            return Err(shape_err(
                "matmul_tn",
                format!("shared rows {}", self.rows),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(n, m);
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &other.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * m..(i + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(shape_err(
                "matmul_nt",
                format!("shared cols {}", self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        self.matmul(&other.transpose())
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(shape_err("matvec", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(shape_err("matvec_t", self.rows, v.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &a) in v.iter().enumerate() {
            for (o, &b) in out.iter_mut().zip(self.row(r)) {
                *o += a * b;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.axpy(1.0, other)
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "axpy",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Adds `bias[c]` to every entry of column `c`.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(shape_err("add_row_vector", self.cols, bias.len()));
        }
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Column sums.
    pub fn sum_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry magnitude.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }

    /// Replaces the matrix with `(A + Aᵀ)/2`.
    pub fn symmetrize(&mut self) {
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
    }

    pub fn add_diagonal(&mut self, v: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += v;
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Lower Cholesky factor of `a + jitter·I`.
///
/// When the factorization breaks down the jitter is escalated by ×10 (starting
/// at [`JITTER_START`] if zero was requested) up to [`JITTER_MAX`].
pub fn cholesky(a: &Matrix, jitter: f64) -> Result<Matrix> {
    cholesky_with_jitter(a, jitter).map(|(l, _)| l)
}

/// Like [`cholesky`], also returning the jitter that was finally used.
pub fn cholesky_with_jitter(a: &Matrix, jitter: f64) -> Result<(Matrix, f64)> {
    if !a.is_square() {
        return Err(shape_err(
            "cholesky",
            "square matrix",
            format!("{}x{}", a.rows, a.cols),
        ));
    }
    let asym = a.asymmetry();
    if asym > 1e-8 {
        return Err(Error::NotSymmetric(asym));
    }
    let mut jitter = jitter.max(0.0);
    loop {
        if let Some(l) = try_cholesky(a, jitter) {
            return Ok((l, jitter));
        }
        let next = if jitter == 0.0 {
            JITTER_START
        } else {
            jitter * 10.0
        };
        if next > JITTER_MAX * (1.0 + 1e-12) {
            return Err(Error::NotPositiveDefinite { jitter });
        }
        jitter = next;
    }
}

fn try_cholesky(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = &l.data[j * n..j * n + j];
        let d = a[(j, j)] + jitter - dot(lj, lj);
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l.data[j * n + j] = djj;
        for i in (j + 1)..n {
            let (head, tail) = l.data.split_at_mut(i * n);
            let li = &tail[..j];
            let lj = &head[j * n..j * n + j];
            let s = a[(i, j)] - dot(li, lj);
            tail[j] = s / djj;
        }
    }
    Some(l)
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = l.rows;
    if !l.is_square() || b.rows != n {
        return Err(shape_err("solve_lower", n, b.rows));
    }
    let m = b.cols;
    let mut x = b.clone();
    for i in 0..n {
        let lii = l[(i, i)];
        for k in 0..i {
            let lik = l[(i, k)];
            if lik == 0.0 {
                continue;
            }
            let (done, rest) = x.data.split_at_mut(i * m);
            let xk = &done[k * m..(k + 1) * m];
            for (xi, xkv) in rest[..m].iter_mut().zip(xk) {
                *xi -= lik * xkv;
            }
        }
        for v in &mut x.data[i * m..(i + 1) * m] {
            *v /= lii;
        }
    }
    Ok(x)
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = l.rows;
    if !l.is_square() || b.rows != n {
        return Err(shape_err("solve_lower_transpose", n, b.rows));
    }
    let m = b.cols;
    let mut x = b.clone();
    for i in (0..n).rev() {
        let lii = l[(i, i)];
        for k in (i + 1)..n {
            let lki = l[(k, i)];
            if lki == 0.0 {
                continue;
            }
            let (head, tail) = x.data.split_at_mut(k * m);
            let xk = &tail[..m];
            for (xi, xkv) in head[i * m..(i + 1) * m].iter_mut().zip(xk) {
                *xi -= lki * xkv;
            }
        }
        for v in &mut x.data[i * m..(i + 1) * m] {
            *v /= lii;
        }
    }
    Ok(x)
}

/// `(L Lᵀ)⁻¹` from a lower Cholesky factor, via two triangular solves.
pub fn cholesky_inverse(l: &Matrix) -> Result<Matrix> {
    let y = solve_lower(l, &Matrix::identity(l.rows))?;
    let mut inv = solve_lower_transpose(l, &y)?;
    inv.symmetrize();
    Ok(inv)
}

/// Power-iteration estimate of the largest singular value of `w`.
///
/// `u_state` (length `w.rows()`) is the left singular-vector estimate carried
/// between calls; the updated vector is returned for warm starts.
pub fn spectral_norm(w: &Matrix, iters: usize, u_state: &[f64]) -> Result<(f64, Vec<f64>)> {
    if u_state.len() != w.rows {
        return Err(shape_err("spectral_norm", w.rows, u_state.len()));
    }
    if iters == 0 {
        return Err(Error::InvalidConfig(
            "spectral_norm needs at least one iteration".into(),
        ));
    }
    let mut u = u_state.to_vec();
    if norm(&u) == 0.0 {
        u.iter_mut().for_each(|v| *v = 1.0);
    }
    normalize(&mut u);
    let mut v = vec![0.0; w.cols];
    for _ in 0..iters {
        v = w.matvec_t(&u)?;
        if normalize(&mut v) == 0.0 {
            return Ok((0.0, u));
        }
        u = w.matvec(&v)?;
        if normalize(&mut u) == 0.0 {
            return Ok((0.0, u_state.to_vec()));
        }
    }
    let wv = w.matvec(&v)?;
    Ok((dot(&u, &wv), u))
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Seeded, splittable random stream (ChaCha20).
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream number `stream` for `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Draws a child seed and returns a fresh generator on it.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `rows × cols` matrix of i.i.d. standard normal draws.
pub fn sample_gaussian(rng: &mut Rng, rows: usize, cols: usize) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(shape_err("sample_gaussian", "rows, cols >= 1", format!("{rows}x{cols}")));
    }
    let mut m = Matrix::zeros(rows, cols);
    rng.fill_normal(m.data_mut());
    Ok(m)
}

/// `rows × cols` matrix of i.i.d. draws from `U[lo, hi)`.
pub fn sample_uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(shape_err("sample_uniform", "rows, cols >= 1", format!("{rows}x{cols}")));
    }
    if !(lo < hi) {
        return Err(Error::InvalidConfig(format!(
            "uniform bounds must satisfy lo < hi, got [{lo}, {hi})"
        )));
    }
    let dist = Uniform::new(lo, hi).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = dist.sample(&mut rng.inner);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(rng: &mut Rng, n: usize) -> Matrix {
        let a = sample_gaussian(rng, n, n).unwrap();
        let mut s = a.matmul_tn(&a).unwrap();
        s.add_diagonal(0.1);
        s.symmetrize();
        s
    }

    fn assert_reconstructs(a: &Matrix, l: &Matrix, jitter: f64, tol: f64) {
        let llt = l.matmul_nt(l).unwrap();
        let mut target = a.clone();
        target.add_diagonal(jitter);
        let scale = target.max_abs();
        for (x, y) in llt.data().iter().zip(target.data()) {
            assert!((x - y).abs() <= tol * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn cholesky_identity_is_identity() {
        let l = cholesky(&Matrix::identity(3), 0.0).unwrap();
        assert_eq!(l, Matrix::identity(3));
    }

    #[test]
    fn cholesky_small_spd_reconstructs() {
        let a = Matrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]).unwrap();
        let l = cholesky(&a, 0.0).unwrap();
        assert_eq!(l[(0, 1)], 0.0);
        assert_reconstructs(&a, &l, 0.0, 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky(&a, 0.0),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn cholesky_rejects_non_square() {
        assert!(matches!(
            cholesky(&Matrix::zeros(2, 3), 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cholesky_escalates_jitter_on_singular_input() {
        let a = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let (l, j) = cholesky_with_jitter(&a, 0.0).unwrap();
        assert!(j >= JITTER_START && j <= JITTER_MAX);
        assert_reconstructs(&a, &l, j, 1e-8);
    }

    #[test]
    fn cholesky_random_spd_up_to_256() {
        let mut rng = Rng::new(11);
        for n in [1, 5, 32, 256] {
            let a = random_spd(&mut rng, n);
            let (l, j) = cholesky_with_jitter(&a, 0.0).unwrap();
            assert_reconstructs(&a, &l, j, 1e-8);
        }
    }

    #[test]
    fn cholesky_inverse_inverts() {
        let mut rng = Rng::new(3);
        let a = random_spd(&mut rng, 12);
        let inv = cholesky_inverse(&cholesky(&a, 0.0).unwrap()).unwrap();
        let prod = a.matmul(&inv).unwrap();
        let eye = Matrix::identity(12);
        assert!(prod.sub(&eye).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn spectral_norm_of_diagonal_and_identity() {
        let d = Matrix::diag(&[3.0, 1.0]);
        let (s, _) = spectral_norm(&d, 20, &[0.6, 0.8]).unwrap();
        assert!((s - 3.0).abs() < 1e-6);
        let (s, _) = spectral_norm(&Matrix::identity(4), 1, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_checks_state_length() {
        assert!(spectral_norm(&Matrix::identity(3), 1, &[1.0]).is_err());
    }

    #[test]
    fn spectral_norm_warm_start_converges() {
        let mut rng = Rng::new(8);
        let w = sample_gaussian(&mut rng, 6, 4).unwrap();
        let mut u = vec![1.0; 6];
        let mut last = 0.0;
        for _ in 0..60 {
            let (s, next) = spectral_norm(&w, 1, &u).unwrap();
            u = next;
            last = s;
        }
        let (s, _) = spectral_norm(&w, 200, &u).unwrap();
        assert!((last - s).abs() < 1e-8);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = Rng::new(1);
        let m = sample_gaussian(&mut rng, 1000, 100).unwrap();
        let n = m.data().len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.03);
    }

    #[test]
    fn uniform_range_and_mean() {
        let tau = std::f64::consts::TAU;
        let mut rng = Rng::new(2);
        let m = sample_uniform(&mut rng, 100_000, 1, 0.0, tau).unwrap();
        assert!(m.data().iter().all(|&v| (0.0..tau).contains(&v)));
        let mean = m.data().iter().sum::<f64>() / 1e5;
        assert!((mean - std::f64::consts::PI).abs() < 0.02);
        assert!(sample_uniform(&mut rng, 1, 1, 1.0, 1.0).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let a = sample_gaussian(&mut Rng::new(99), 7, 3).unwrap();
        let b = sample_gaussian(&mut Rng::new(99), 7, 3).unwrap();
        assert_eq!(a.data(), b.data());
        let c = sample_gaussian(&mut Rng::new(100), 7, 3).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = Rng::new(4);
        let a = sample_gaussian(&mut rng, 5, 7).unwrap();
        let b = sample_gaussian(&mut rng, 7, 3).unwrap();
        let ab = a.matmul(&b).unwrap();
        let via_tn = a.transpose().matmul_tn(&b).unwrap();
        let via_nt = a.matmul_nt(&b.transpose()).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let naive: f64 = (0..7).map(|p| a[(i, p)] * b[(p, j)]).sum();
                assert!((ab[(i, j)] - naive).abs() < 1e-12);
                assert!((via_tn[(i, j)] - naive).abs() < 1e-12);
                assert!((via_nt[(i, j)] - naive).abs() < 1e-12);
            }
        }
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn triangular_solves() {
        let mut rng = Rng::new(5);
        let a = random_spd(&mut rng, 6);
        let l = cholesky(&a, 0.0).unwrap();
        let b = sample_gaussian(&mut rng, 6, 2).unwrap();
        let x = solve_lower(&l, &b).unwrap();
        assert!(l.matmul(&x).unwrap().sub(&b).unwrap().max_abs() < 1e-10);
        let y = solve_lower_transpose(&l, &b).unwrap();
        assert!(l.transpose().matmul(&y).unwrap().sub(&b).unwrap().max_abs() < 1e-10);
    }
}
