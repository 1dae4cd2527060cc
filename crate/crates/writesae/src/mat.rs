//! Dense f64 matrices and vector helpers.
//!
//! Everything in this workspace is tiny (dimensions ≤ 256), so the storage is
//! a flat row-major `Vec<f64>` and the kernels are plain loops. The SVD is a
//! one-sided Jacobi, accurate enough for rank checks and top-1 extraction on
//! these sizes.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    /// Outer product `a bᵀ` with shape (a.len(), b.len()).
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        Mat::from_fn(a.len(), b.len(), |r, c| a[r] * b[c])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, x: f64) {
        self.data[r * self.cols + c] = x;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · x`, x of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for c in 0..self.cols {
                acc += row[c] * x[c];
            }
            y[r] = acc;
        }
        y
    }

    /// `selfᵀ · x`, x of length `rows`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let w = x[r];
            let row = self.row(r);
            for c in 0..self.cols {
                y[c] += w * row[c];
            }
        }
        y
    }

    pub fn scale(&mut self, c: f64) {
        for x in &mut self.data {
            *x *= c;
        }
    }

    /// `self += c · other`.
    pub fn add_scaled(&mut self, other: &Mat, c: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    /// `self += c · a bᵀ`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], c: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for r in 0..self.rows {
            let ca = c * a[r];
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (y, bv) in row.iter_mut().zip(b) {
                *y += ca * bv;
            }
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn frob_dot(&self, other: &Mat) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Singular values in descending order plus left/right singular vectors.
    ///
    /// One-sided Jacobi on the wider-than-tall orientation; columns of `u`
    /// and `v` are the singular vectors.
    pub fn svd(&self) -> Svd {
        if self.rows < self.cols {
            let t = self.transpose().svd();
            return Svd { s: t.s, u: t.v, v: t.u };
        }
        let m = self.rows;
        let n = self.cols;
        // Work on a column copy of A; accumulate V.
        let mut a: Vec<Vec<f64>> = (0..n).map(|c| (0..m).map(|r| self.get(r, c)).collect()).collect();
        let mut v: Vec<Vec<f64>> = (0..n)
            .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
            .collect();
        let eps = 1e-14;
        for _sweep in 0..60 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in (p + 1)..n {
                    let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                    let beta: f64 = a[q].iter().map(|x| x * x).sum();
                    let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                    if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == 0.0 {
                        continue;
                    }
                    off += gamma.abs();
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..m {
                        let ap = a[p][i];
                        let aq = a[q][i];
                        a[p][i] = c * ap - s * aq;
                        a[q][i] = s * ap + c * aq;
                    }
                    for i in 0..n {
                        let vp = v[p][i];
                        let vq = v[q][i];
                        v[p][i] = c * vp - s * vq;
                        v[q][i] = s * vp + c * vq;
                    }
                }
            }
            if off == 0.0 {
                break;
            }
        }
        let mut cols: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..n)
            .map(|c| {
                let sigma = a[c].iter().map(|x| x * x).sum::<f64>().sqrt();
                let u = if sigma > 0.0 {
                    a[c].iter().map(|x| x / sigma).collect()
                } else {
                    vec![0.0; m]
                };
                (sigma, u, v[c].clone())
            })
            .collect();
        cols.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
        let s: Vec<f64> = cols.iter().map(|c| c.0).collect();
        let u = Mat::from_fn(m, n, |r, c| cols[c].1[r]);
        let vm = Mat::from_fn(n, n, |r, c| cols[c].2[r]);
        Svd { s, u, v: vm }
    }

    /// Leading singular triple (σ₁, u₁, v₁).
    pub fn top_singular(&self) -> (f64, Vec<f64>, Vec<f64>) {
        let svd = self.svd();
        let u: Vec<f64> = (0..self.rows.min(svd.u.rows)).map(|r| svd.u.get(r, 0)).collect();
        let v: Vec<f64> = (0..svd.v.rows).map(|r| svd.v.get(r, 0)).collect();
        (svd.s[0], u, v)
    }
}

/// Thin SVD result; singular vectors are the columns of `u` and `v`.
pub struct Svd {
    pub s: Vec<f64>,
    pub u: Mat,
    pub v: Mat,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += c · x`.
pub fn axpy(y: &mut [f64], x: &[f64], c: f64) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += c * xi;
    }
}

/// Unit-normalized copy; errors on (near-)zero input.
pub fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n < 1e-300 || !n.is_finite() {
        return Err(Error::Degenerate("cannot normalize zero or non-finite vector".into()));
    }
    Ok(a.iter().map(|x| x / n).collect())
}

/// Cosine between two vectors; 0 when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Softmax in f64 with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    for x in &mut e {
        *x /= z;
    }
    e
}

/// KL(p ‖ q) in nats over two distributions on the same support.
pub fn kl_div(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (pi / qi).ln();
        }
    }
    // Clamp the tiny negative values float cancellation can produce.
    acc.max(0.0)
}
