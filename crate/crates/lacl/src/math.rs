//! Dense vector arithmetic shared by every other module: numerically stable
//! softmax, L2 normalization, KL divergence, and a central-difference
//! gradient checker.
//!
//! All arithmetic is 64-bit. Sums that feed tolerance checks use compensated
//! (Kahan) summation so their error does not grow with vector length.

use std::ops::Deref;

use crate::error::{Error, Result};

/// Norms below this are treated as degenerate and refuse to normalize.
pub const NORM_EPS: f64 = 1e-12;

/// Admission tolerance for vectors that must already be unit-norm.
pub const UNIT_TOL: f64 = 1e-6;

/// A vector normalized to unit L2 norm.
///
/// Construction goes through [`l2_normalize`] or [`Embedding::from_unit`],
/// so a held value is always within [`UNIT_TOL`] of unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wrap a vector that is already unit-norm (within [`UNIT_TOL`]).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotUnitNorm {
                norm: n,
                tol: UNIT_TOL,
            });
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A discrete probability distribution: entries in [0, 1] summing to 1
/// within 1e-12 (compensated sum).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput(
                "probability vector must have length >= 1".into(),
            ));
        }
        for (i, &p) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!(
                    "probability entry {i} = {p} outside [0, 1]"
                )));
            }
        }
        let total = kahan_sum(values.iter().copied());
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "probability entries sum to {total}, not 1"
            )));
        }
        Ok(ProbVector(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Compensated summation; error stays O(eps) regardless of length.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for x in values {
        let y = x - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Stable softmax: exp(v_i - max) / sum_j exp(v_j - max).
pub fn softmax(v: &[f64]) -> Result<ProbVector> {
    if v.is_empty() {
        return Err(Error::InvalidInput("softmax input must be non-empty".into()));
    }
    if let Some(&bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "softmax input contains non-finite entry {bad}"
        )));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total = kahan_sum(exps.iter().copied());
    ProbVector::new(exps.into_iter().map(|e| e / total).collect())
}

/// Scale to unit L2 norm; norms below [`NORM_EPS`] are refused.
pub fn l2_normalize(v: &[f64]) -> Result<Embedding> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::InvalidInput(
            "cannot normalize a non-finite vector".into(),
        ));
    }
    if n < NORM_EPS {
        return Err(Error::DegenerateVector {
            norm: n,
            min: NORM_EPS,
        });
    }
    Ok(Embedding(v.iter().map(|x| x / n).collect()))
}

/// D_KL(p || q) = sum_i p_i ln(p_i / q_i), with p_i = 0 terms contributing 0.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!(
            "KL divergence over mismatched lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut terms = Vec::with_capacity(p.len());
    for (i, (&pi, &qi)) in p.iter().zip(q.iter()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::DivergenceUndefined { index: i, p: pi });
        }
        terms.push(pi * (pi / qi).ln());
    }
    Ok(kahan_sum(terms))
}

/// Central-difference gradient: (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidInput(format!(
            "step size h = {h} must be finite and > 0"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        let g = (plus - minus) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::InvalidInput(format!(
                "finite difference at coordinate {i} is non-finite (f+ = {plus}, f- = {minus})"
            )));
        }
        grad.push(g);
    }
    Ok(grad)
}

/// Row-major dense matrix used by the encoder/projector layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for (yr, row) in y.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *yr = dot(row, x);
        }
        y
    }

    /// x = A^T y
    pub fn matvec_transpose(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut x = vec![0.0; self.cols];
        for (row, &yr) in self.data.chunks_exact(self.cols).zip(y) {
            for (xi, &a) in x.iter_mut().zip(row) {
                *xi += a * yr;
            }
        }
        x
    }

    /// A += scale * g x^T
    pub fn add_scaled_outer(&mut self, g: &[f64], x: &[f64], scale: f64) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (row, &gr) in self.data.chunks_exact_mut(self.cols).zip(g) {
            for (a, &xc) in row.iter_mut().zip(x) {
                *a += scale * gr * xc;
            }
        }
    }
}
