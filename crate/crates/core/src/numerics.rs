//! Dense vector/matrix arithmetic, numerically stable similarity and softmax
//! kernels, and the central-difference gradient oracle used to certify every
//! analytic gradient in this crate.
//!
//! All arithmetic is f64. Softmax-family kernels are computed with the
//! max-shift form because the classification temperature in this pipeline is
//! 0.01 and naive exponentials overflow long before that.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default step for [`finite_diff_grad`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// L2-normalize, rejecting zero-norm input.
pub fn normalized(a: &[f64], context: &'static str) -> Result<Vec<f64>> {
    let n = norm(a);
    if n <= 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm { context });
    }
    Ok(a.iter().map(|x| x / n).collect())
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `acc += s * x`
pub fn axpy(acc: &mut [f64], s: f64, x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, v) in acc.iter_mut().zip(x) {
        *a += s * v;
    }
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

pub fn argmax(a: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in a.iter().enumerate() {
        if *x > a[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Mat
// ---------------------------------------------------------------------------

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch {
                    context: "Mat::from_rows",
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Mat { rows: r, cols: c, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `self^T * x`.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            axpy(&mut out, x[i], self.row(i));
        }
        out
    }

    /// `self += s * u * v^T`
    pub fn add_scaled_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for i in 0..self.rows {
            let su = s * u[i];
            axpy(self.row_mut(i), su, v);
        }
    }

    /// `self += s * other` (same shape).
    pub fn add_scaled(&mut self, s: f64, other: &Mat) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        axpy(&mut self.data, s, &other.data);
    }
}

// ---------------------------------------------------------------------------
// Similarity and softmax kernels
// ---------------------------------------------------------------------------

/// Cosine similarity, clamped to [-1, 1] against rounding.
///
/// Rejects zero-norm inputs: a degenerate embedding has no direction to
/// compare.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na <= 0.0 || nb <= 0.0 {
        return Err(Error::ZeroNorm {
            context: "cosine_sim",
        });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cosine_sim(a, b)` with respect to `a` (away from the clamp
/// boundary).
pub fn cosine_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let na = norm(a);
    let nb = norm(b);
    if na <= 0.0 || nb <= 0.0 {
        return Err(Error::ZeroNorm {
            context: "cosine_grad",
        });
    }
    let d = dot(a, b);
    let inv = 1.0 / (na * nb);
    let ca = d / (na * na * na * nb);
    Ok(a.iter()
        .zip(b)
        .map(|(ai, bi)| bi * inv - ai * ca)
        .collect())
}

/// Temperature-scaled softmax `exp(l_i/tau) / sum_j exp(l_j/tau)` in the
/// max-shift stable form.
pub fn tempered_softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    let log_p = log_softmax(logits, tau)?;
    Ok(log_p.iter().map(|lp| lp.exp()).collect())
}

/// Log-probabilities of the temperature-scaled softmax.
///
/// Computed directly as log-softmax (never as the log of [`tempered_softmax`])
/// so that tiny temperatures stay representable.
pub fn log_softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput("log_softmax logits"));
    }
    if !all_finite(logits) {
        return Err(Error::NonFinite {
            context: "log_softmax logits",
        });
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = scaled.iter().map(|z| (z - m).exp()).sum::<f64>().ln() + m;
    Ok(scaled.iter().map(|z| z - lse).collect())
}

/// `ln(sum_i exp(x_i))` with max-shift.
pub fn logsumexp(xs: &[f64]) -> f64 {
    debug_assert!(!xs.is_empty());
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m
}

/// `ln(exp(a) + exp(b))`.
pub fn logsumexp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m.is_infinite() && m < 0.0 {
        return m;
    }
    ((a - m).exp() + (b - m).exp()).ln() + m
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Central-difference gradient estimate `(f(x+h e_i) - f(x-h e_i)) / 2h`.
///
/// This is the independent oracle every analytic gradient in the crate is
/// checked against; it must stay a straight re-evaluation of `f` and nothing
/// else.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut work = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: "finite_diff_grad evaluation",
            });
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Norm-wise relative disagreement between an analytic gradient and its
/// finite-difference estimate: `max_i |a_i - n_i| / max(||a||_inf, ||n||_inf, 1e-12)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(1e-12_f64, |m, x| m.max(x.abs()));
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}
