//! Dense f64 vectors/matrices, seeded random streams, and numerically stable
//! nonlinearities. Everything here is deterministic given its inputs; the
//! finite-difference oracle at the bottom backs every gradient test in the
//! crate.

use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense vector of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("vector entry is not finite".into()));
        }
        Ok(Self { data })
    }

    /// Construct without the finiteness check; callers that produce entries
    /// from already-finite arithmetic use this on hot paths.
    pub fn from_raw(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(n: usize) -> Self {
        Self { data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix entry is not finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// y += M^T x, used by backward passes.
    pub fn transpose_matvec_acc(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            let row = self.row(r);
            for (yj, &m) in y.iter_mut().zip(row) {
                *yj += xr * m;
            }
        }
    }
}

/// Dot product with four accumulators; the fixed summation order keeps results
/// reproducible while still pipelining on one core.
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

/// result[i] = sum_j W[i,j] x[j] + b[i]
pub fn affine(w: &Matrix, x: &Vector, b: &Vector) -> Result<Vector> {
    if w.cols() != x.len() || b.len() != w.rows() {
        return Err(Error::Shape(format!(
            "affine: W is {}x{}, x has length {}, b has length {}",
            w.rows(),
            w.cols(),
            x.len(),
            b.len()
        )));
    }
    let mut out = Vec::with_capacity(w.rows());
    for i in 0..w.rows() {
        out.push(dot(w.row(i), x.as_slice()) + b[i]);
    }
    Ok(Vector::from_raw(out))
}

/// Softmax with max-subtraction; safe for entries up to +-1e300.
pub fn stable_softmax(v: &Vector) -> Result<Vector> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Vector::from_raw(exps.into_iter().map(|e| e / sum).collect()))
}

/// Logistic function, stable for |x| >= 700.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh_act(x: f64) -> f64 {
    x.tanh()
}

/// Relative error metric used by all gradient comparisons.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Deterministic, splittable random stream. A stream is identified by a 64-bit
/// seed; [`RngStream::derive`] hashes (seed, label) so per-region streams do
/// not depend on the order in which they are created or consumed.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: rand_chacha::ChaCha8Rng,
    gauss_spare: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
            gauss_spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for `label`, a pure function of (seed, label).
    pub fn derive(&self, label: &str) -> RngStream {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(label.as_bytes());
        let digest = h.finalize();
        let child = u64::from_le_bytes(digest[..8].try_into().unwrap());
        RngStream::new(child)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via the Box-Muller transform on consecutive uniform
    /// pairs; the second value of each pair is cached so the draw sequence is
    /// fully determined by the seed.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return z;
        }
        // u1 in (0, 1] so the log never sees zero.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, sigma: f64) -> f64 {
        mean + sigma * self.next_gaussian()
    }

    /// Exponential with the given mean, via inverse CDF.
    pub fn exponential(&mut self, mean: f64) -> f64 {
        let u = 1.0 - self.next_f64();
        -mean * u.ln()
    }

    /// Deterministic Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

/// Central finite differences: component i is (f(x+h e_i) - f(x-h e_i)) / 2h.
pub fn finite_diff_gradient<F>(mut f: F, x: &Vector, h: f64) -> Result<Vector>
where
    F: FnMut(&Vector) -> f64,
{
    if h <= 0.0 {
        return Err(Error::Domain(format!("finite difference step {h} must be positive")));
    }
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "objective returned a non-finite value near component {i}"
            )));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(Vector::from_raw(grad))
}

/// Default step for gradient checks.
pub const FD_STEP: f64 = 1e-5;
