//! Restricted cubic splines of log time.
//!
//! The basis with knots `k_min < k_1 < … < k_m < k_max` has `m + 1` columns:
//! `v₁(x) = x` and, for each interior knot `k_j`,
//!
//! ```text
//! v(x) = (x − k_j)³₊ − λ_j (x − k_min)³₊ − (1 − λ_j)(x − k_max)³₊,
//! λ_j = (k_max − k_j) / (k_max − k_min)
//! ```
//!
//! which is cubic between knots and linear outside the boundary knots.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::linalg::Matrix;

pub const MAX_DF: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SplineError {
    #[error("df must be between 1 and {MAX_DF}")]
    DfOutOfRange,
    #[error("knot placement needs at least one uncensored time")]
    NoEvents,
    #[error("knots must be strictly increasing and inside the boundary knots")]
    KnotOrder,
    #[error("spline basis is rank deficient over the fitting sample")]
    RankDeficient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    low: f64,
    interior: Vec<f64>,
    high: f64,
}

impl KnotVector {
    pub fn new(low: f64, interior: Vec<f64>, high: f64) -> Result<Self, SplineError> {
        let mut prev = low;
        for &k in interior.iter().chain(core::iter::once(&high)) {
            if !(k > prev) && !(interior.is_empty() && k == prev) {
                return Err(SplineError::KnotOrder);
            }
            prev = k;
        }
        if !low.is_finite() || !high.is_finite() {
            return Err(SplineError::KnotOrder);
        }
        Ok(Self { low, interior, high })
    }

    pub fn low(&self) -> f64 {
        self.low
    }

    pub fn high(&self) -> f64 {
        self.high
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    pub fn df(&self) -> usize {
        self.interior.len() + 1
    }

    /// Boundary and interior knots in ascending order.
    pub fn all(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.interior.len() + 2);
        v.push(self.low);
        v.extend_from_slice(&self.interior);
        v.push(self.high);
        v
    }
}

/// Nearest-rank centile of sorted data: the order statistic whose 1-based
/// rank is closest to `p·n` (halves round up), clamped to `[1, n]`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64 + 0.5).floor() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Boundary knots at the extremes of the uncensored log times and `df − 1`
/// interior knots at their evenly spaced nearest-rank centiles.
///
/// Tied centiles are collapsed, which lowers the effective df.
pub fn place_default_knots(event_log_times: &[f64], df: usize) -> Result<KnotVector, SplineError> {
    if !(1..=MAX_DF).contains(&df) {
        return Err(SplineError::DfOutOfRange);
    }
    if event_log_times.is_empty() {
        return Err(SplineError::NoEvents);
    }
    let mut sorted = event_log_times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let (low, high) = (sorted[0], sorted[sorted.len() - 1]);
    let mut interior = Vec::with_capacity(df - 1);
    for k in 1..df {
        let c = nearest_rank(&sorted, k as f64 / df as f64);
        if c > low && c < high && interior.last().map_or(true, |&last| c > last) {
            interior.push(c);
        }
    }
    if interior.len() + 1 < df {
        log::warn!(
            "tied event times: {} interior knots requested, {} distinct; df reduced to {}",
            df - 1,
            interior.len(),
            interior.len() + 1
        );
    }
    KnotVector::new(low, interior, high)
}

/// Knots from user-supplied interior locations on the time scale, with
/// boundaries at the extremes of the uncensored log times.
pub fn knots_from_times(event_log_times: &[f64], interior_times: &[f64]) -> Result<KnotVector, SplineError> {
    if event_log_times.is_empty() {
        return Err(SplineError::NoEvents);
    }
    if interior_times.len() + 1 > MAX_DF {
        return Err(SplineError::DfOutOfRange);
    }
    let low = event_log_times.iter().copied().fold(f64::INFINITY, f64::min);
    let high = event_log_times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let interior = interior_times
        .iter()
        .map(|&t| if t > 0.0 { t.ln() } else { f64::NAN })
        .collect();
    KnotVector::new(low, interior, high)
}

#[inline]
fn cube_pos(x: f64) -> f64 {
    if x > 0.0 {
        x * x * x
    } else {
        0.0
    }
}

#[inline]
fn sq_pos(x: f64) -> f64 {
    if x > 0.0 {
        x * x
    } else {
        0.0
    }
}

#[inline]
fn pos(x: f64) -> f64 {
    x.max(0.0)
}

fn lambda(knots: &KnotVector, kj: f64) -> f64 {
    (knots.high - kj) / (knots.high - knots.low)
}

pub fn rcs_eval(x: f64, knots: &KnotVector) -> Vec<f64> {
    let mut out = vec![0.0; knots.df()];
    rcs_eval_into(x, knots, &mut out);
    out
}

pub fn rcs_eval_into(x: f64, knots: &KnotVector, out: &mut [f64]) {
    out[0] = x;
    for (o, &kj) in out[1..].iter_mut().zip(&knots.interior) {
        let l = lambda(knots, kj);
        *o = cube_pos(x - kj) - l * cube_pos(x - knots.low) - (1.0 - l) * cube_pos(x - knots.high);
    }
}

pub fn rcs_deriv(x: f64, knots: &KnotVector) -> Vec<f64> {
    let mut out = vec![0.0; knots.df()];
    rcs_deriv_into(x, knots, &mut out);
    out
}

pub fn rcs_deriv_into(x: f64, knots: &KnotVector, out: &mut [f64]) {
    out[0] = 1.0;
    for (o, &kj) in out[1..].iter_mut().zip(&knots.interior) {
        let l = lambda(knots, kj);
        *o = 3.0 * (sq_pos(x - kj) - l * sq_pos(x - knots.low) - (1.0 - l) * sq_pos(x - knots.high));
    }
}

pub fn rcs_second_deriv(x: f64, knots: &KnotVector) -> Vec<f64> {
    let mut out = vec![0.0; knots.df()];
    for (o, &kj) in out[1..].iter_mut().zip(&knots.interior) {
        let l = lambda(knots, kj);
        *o = 6.0 * (pos(x - kj) - l * pos(x - knots.low) - (1.0 - l) * pos(x - knots.high));
    }
    out
}

/// A spline basis, optionally orthogonalized against a constant over the
/// fitting sample.
///
/// With orthogonalization, `transform` is the upper-triangular inverse `R⁻¹`
/// of the Gram-Schmidt factor of `[1, v(x)]`, normalized so that the
/// orthogonalized columns have mean zero and `(1/n) VᵀV = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    knots: KnotVector,
    transform: Option<Matrix>,
}

impl SplineBasis {
    pub fn plain(knots: KnotVector) -> Self {
        Self { knots, transform: None }
    }

    pub fn orthogonalized(knots: KnotVector, sample: &[f64]) -> Result<Self, SplineError> {
        let p = knots.df() + 1;
        let n = sample.len();
        if n < p {
            return Err(SplineError::RankDeficient);
        }
        let nf = n as f64;
        // Columns of [1, v(x)].
        let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
        let mut buf = vec![0.0; knots.df()];
        let mut raw = vec![vec![0.0; n]; knots.df()];
        for (i, &x) in sample.iter().enumerate() {
            rcs_eval_into(x, &knots, &mut buf);
            for (c, v) in raw.iter_mut().zip(&buf) {
                c[i] = *v;
            }
        }
        cols.extend(raw);
        let mut r = Matrix::zeros(p, p);
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(p);
        for j in 0..p {
            let mut a = cols[j].clone();
            let scale: f64 = (a.iter().map(|v| v * v).sum::<f64>() / nf).sqrt();
            for (i, qi) in q.iter().enumerate() {
                let rij = qi.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>() / nf;
                r[(i, j)] = rij;
                a.iter_mut().zip(qi).for_each(|(v, qv)| *v -= rij * qv);
            }
            let rjj = (a.iter().map(|v| v * v).sum::<f64>() / nf).sqrt();
            if !(rjj > 1e-10 * scale.max(1e-300)) {
                return Err(SplineError::RankDeficient);
            }
            r[(j, j)] = rjj;
            a.iter_mut().for_each(|v| *v /= rjj);
            q.push(a);
        }
        // Invert the upper-triangular R column by column.
        let mut t = Matrix::zeros(p, p);
        for j in 0..p {
            t[(j, j)] = 1.0 / r[(j, j)];
            for i in (0..j).rev() {
                let s: f64 = (i + 1..=j).map(|k| r[(i, k)] * t[(k, j)]).sum();
                t[(i, j)] = -s / r[(i, i)];
            }
        }
        Ok(Self { knots, transform: Some(t) })
    }

    /// Rebuild from a stored transform (model files).
    pub fn from_parts(knots: KnotVector, transform: Option<Matrix>) -> Result<Self, SplineError> {
        if let Some(t) = &transform {
            let p = knots.df() + 1;
            if t.rows() != p || t.cols() != p {
                return Err(SplineError::RankDeficient);
            }
        }
        Ok(Self { knots, transform })
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn transform(&self) -> Option<&Matrix> {
        self.transform.as_ref()
    }

    pub fn df(&self) -> usize {
        self.knots.df()
    }

    fn apply(&self, lead: f64, raw: &mut [f64]) {
        if let Some(t) = &self.transform {
            let p = raw.len() + 1;
            let mut out = [0.0; MAX_DF + 1];
            for j in 1..p {
                let mut s = lead * t[(0, j)];
                for i in 1..=j {
                    s += raw[i - 1] * t[(i, j)];
                }
                out[j] = s;
            }
            raw.copy_from_slice(&out[1..p]);
        }
    }

    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        rcs_eval_into(x, &self.knots, out);
        self.apply(1.0, out);
    }

    pub fn deriv_into(&self, x: f64, out: &mut [f64]) {
        rcs_deriv_into(x, &self.knots, out);
        self.apply(0.0, out);
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.df()];
        self.eval_into(x, &mut out);
        out
    }

    pub fn deriv(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.df()];
        self.deriv_into(x, &mut out);
        out
    }

    /// `Σ coef_j · basis_j(x)` and its derivative in `x`.
    pub fn dot(&self, x: f64, coef: &[f64]) -> (f64, f64) {
        let mut v = [0.0; MAX_DF];
        let mut d = [0.0; MAX_DF];
        let k = self.df();
        self.eval_into(x, &mut v[..k]);
        self.deriv_into(x, &mut d[..k]);
        let s = v[..k].iter().zip(coef).map(|(a, b)| a * b).sum();
        let ds = d[..k].iter().zip(coef).map(|(a, b)| a * b).sum();
        (s, ds)
    }
}
