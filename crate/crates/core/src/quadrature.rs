//! Integration rules for the random-effect integrals.
//!
//! All rules here integrate against the standard normal measure in the
//! standardized random-effect space `z` (with `b = L z`, `L Lᵀ = Σ`), so a
//! cluster integral is `Σ_k exp(log_weight_k + log F(z_k))`. Adaptive rules
//! fold the change of variables and the prior ratio into their log weights,
//! which keeps the summation identical for every method.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::covariance::ReDistribution;
use crate::linalg::{self, Matrix};
use crate::math::{first_primes, normal_quantile, radical_inverse};

pub const DEFAULT_HERMITE_POINTS: usize = 7;
pub const DEFAULT_MC_POINTS: usize = 150;
pub const DEFAULT_ADAPT_ITERATIONS: usize = 1001;
pub const DEFAULT_ADAPT_TOLERANCE: f64 = 1e-8;
pub const MAX_TENSOR_POINTS: usize = 10_000_000;
pub const HALTON_SKIP: u64 = 20;
pub const MAX_HALTON_DIM: usize = 20;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuadratureError {
    #[error("number of points must be between 1 and 200 for Gauss-Hermite, got {0}")]
    HermitePoints(usize),
    #[error("tensor grid of {0} points exceeds the limit of 10^7; use intmethod mcarlo")]
    TooManyPoints(u128),
    #[error("Monte-Carlo integration needs at least 2 draws")]
    TooFewDraws,
    #[error("Halton draws support at most {MAX_HALTON_DIM} dimensions, got {0}")]
    HaltonDimension(usize),
    #[error("integration interval must satisfy a < b")]
    Interval,
    #[error("node count must be positive")]
    ZeroPoints,
    #[error("adaptive quadrature did not converge")]
    AdaptFailed,
    #[error("eigen decomposition failed while building Gauss-Hermite nodes")]
    Eigen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrationMethod {
    /// Mean-variance adaptive Gauss-Hermite at the top level, non-adaptive below.
    AdaptiveHermite,
    Hermite,
    MonteCarlo,
}

impl IntegrationMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::AdaptiveHermite => "mvaghermite",
            Self::Hermite => "ghermite",
            Self::MonteCarlo => "mcarlo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mvaghermite" => Some(Self::AdaptiveHermite),
            "ghermite" => Some(Self::Hermite),
            "mcarlo" => Some(Self::MonteCarlo),
            _ => None,
        }
    }

    pub fn default_points(self) -> usize {
        match self {
            Self::MonteCarlo => DEFAULT_MC_POINTS,
            _ => DEFAULT_HERMITE_POINTS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationSettings {
    pub method: IntegrationMethod,
    pub points: usize,
    pub adapt_iterations: usize,
    pub adapt_tolerance: f64,
    pub seed: u64,
}

impl IntegrationSettings {
    pub fn new(method: IntegrationMethod) -> Self {
        Self {
            method,
            points: method.default_points(),
            adapt_iterations: DEFAULT_ADAPT_ITERATIONS,
            adapt_tolerance: DEFAULT_ADAPT_TOLERANCE,
            seed: 0,
        }
    }

    pub fn with_points(mut self, points: usize) -> Self {
        self.points = points;
        self
    }
}

impl Default for IntegrationSettings {
    fn default() -> Self {
        Self::new(IntegrationMethod::AdaptiveHermite)
    }
}

/// Integration points in `dim` dimensions with log weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    dim: usize,
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

impl NodeSet {
    pub fn new(dim: usize, nodes: Vec<f64>, log_weights: Vec<f64>) -> Self {
        debug_assert_eq!(nodes.len(), dim * log_weights.len());
        Self { dim, nodes, log_weights }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn log_weight(&self, k: usize) -> f64 {
        self.log_weights[k]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weight_sum(&self) -> f64 {
        self.log_weights.iter().map(|w| w.exp()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.nodes.chunks_exact(self.dim.max(1)).zip(self.log_weights.iter().copied())
    }
}

/// `n`-point Gauss-Hermite rule for `E[f(Z)]`, `Z ~ N(0, 1)`, from the
/// eigen-decomposition of the Jacobi matrix of the probabilists' Hermite
/// polynomials.
pub fn gauss_hermite(n: usize) -> Result<NodeSet, QuadratureError> {
    if !(1..=200).contains(&n) {
        return Err(QuadratureError::HermitePoints(n));
    }
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    let (mut x, first) = linalg::tridiagonal_eigen(&diag, &off).map_err(|_| QuadratureError::Eigen)?;
    let mut w: Vec<f64> = first.iter().map(|v| v * v).collect();
    // Enforce exact symmetry about zero.
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let a = 0.5 * (x[j] - x[i]);
        x[i] = -a;
        x[j] = a;
        let m = 0.5 * (w[i] + w[j]);
        w[i] = m;
        w[j] = m;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let total: f64 = w.iter().sum();
    let log_weights = w.iter().map(|v| (v / total).ln()).collect();
    Ok(NodeSet::new(1, x, log_weights))
}

/// Full tensor product of a one-dimensional rule.
pub fn tensor_nodes(base: &NodeSet, q: usize) -> Result<NodeSet, QuadratureError> {
    assert_eq!(base.dim(), 1, "tensor_nodes expects a one-dimensional rule");
    if q == 0 {
        return Ok(NodeSet::new(0, Vec::new(), vec![0.0]));
    }
    let n = base.len();
    let total = (n as u128).pow(q as u32);
    if total > MAX_TENSOR_POINTS as u128 {
        return Err(QuadratureError::TooManyPoints(total));
    }
    let total = total as usize;
    let mut nodes = Vec::with_capacity(total * q);
    let mut logw = Vec::with_capacity(total);
    let mut idx = vec![0usize; q];
    for _ in 0..total {
        let mut lw = 0.0;
        for &i in &idx {
            nodes.push(base.node(i)[0]);
            lw += base.log_weight(i);
        }
        logw.push(lw);
        for d in (0..q).rev() {
            idx[d] += 1;
            if idx[d] < n {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(NodeSet::new(q, nodes, logw))
}

/// Gauss-Legendre rule on `[a, b]` (plain weights, not logs, in the second vector).
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Result<(Vec<f64>, Vec<f64>), QuadratureError> {
    if n == 0 {
        return Err(QuadratureError::ZeroPoints);
    }
    if !(a < b) {
        return Err(QuadratureError::Interval);
    }
    let (x, w) = legendre_unit(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    Ok((x.iter().map(|t| mid + half * t).collect(), w.iter().map(|v| v * half).collect()))
}

/// Nodes and weights on `[-1, 1]` by Newton iteration on `P_n`.
pub fn legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        let mut z = (core::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        // Recompute the derivative at the converged root.
        let (mut p1, mut p2) = (1.0, 0.0);
        for j in 0..n {
            let p3 = p2;
            p2 = p1;
            p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
        }
        if z * z != 1.0 {
            dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Standardized Monte-Carlo draws with equal weights.
///
/// Gaussian effects use Halton points in the first `q` prime bases (skipping
/// the first 20) mapped through the normal quantile. Student-t effects use
/// antithetic pseudo-random draws scaled to unit covariance; an odd `n` is
/// rounded up to keep the draws in `±` pairs.
pub fn mc_draws(q: usize, n: usize, dist: ReDistribution, seed: u64) -> Result<NodeSet, QuadratureError> {
    if n < 2 {
        return Err(QuadratureError::TooFewDraws);
    }
    match dist {
        ReDistribution::Gaussian => {
            if q > MAX_HALTON_DIM {
                return Err(QuadratureError::HaltonDimension(q));
            }
            let bases = first_primes(q);
            let mut nodes = Vec::with_capacity(n * q);
            for i in 0..n as u64 {
                for &b in &bases {
                    nodes.push(normal_quantile(radical_inverse(i + 1 + HALTON_SKIP, b)));
                }
            }
            let lw = -(n as f64).ln();
            Ok(NodeSet::new(q, nodes, vec![lw; n]))
        }
        ReDistribution::StudentT { dof } => {
            let pairs = (n + 1) / 2;
            let n = 2 * pairs;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let chi = ChiSquared::new(dof).map_err(|_| QuadratureError::TooFewDraws)?;
            let mut nodes = Vec::with_capacity(n * q);
            let mut draw = vec![0.0; q];
            for _ in 0..pairs {
                let w: f64 = chi.sample(&mut rng);
                let scale = ((dof - 2.0) / w).sqrt();
                for d in draw.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *d = z * scale;
                }
                nodes.extend_from_slice(&draw);
                nodes.extend(draw.iter().map(|v| -v));
            }
            let lw = -(n as f64).ln();
            Ok(NodeSet::new(q, nodes, vec![lw; n]))
        }
    }
}

/// Standardized node set for one random-effect level.
pub fn level_nodes(
    settings: &IntegrationSettings,
    q: usize,
    dist: ReDistribution,
    seed_offset: u64,
) -> Result<NodeSet, QuadratureError> {
    match settings.method {
        IntegrationMethod::MonteCarlo => {
            mc_draws(q, settings.points, dist, settings.seed.wrapping_add(seed_offset))
        }
        _ => tensor_nodes(&gauss_hermite(settings.points)?, q),
    }
}

/// A log integrand `log F(z)` against the standard normal measure.
pub trait LogTarget {
    fn dim(&self) -> usize;
    fn log_f(&self, z: &[f64]) -> f64;
    /// Analytic gradient and Hessian of `log F`, if available.
    fn derivatives(&self, _z: &[f64]) -> Option<(Vec<f64>, Matrix)> {
        None
    }
}

/// Location and scale used to move a rule onto the integrand
/// `F(z)·φ(z)`: first the mode and curvature, then the posterior mean and
/// covariance.
#[derive(Debug, Clone)]
pub struct Adaptation {
    pub mode: Vec<f64>,
    /// Lower-triangular `A`; `A Aᵀ` is the inverse negative Hessian at the
    /// mode, or the posterior covariance after refinement.
    pub scale: Matrix,
    pub iterations: usize,
}

fn objective<T: LogTarget + ?Sized>(t: &T, z: &[f64]) -> f64 {
    t.log_f(z) - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

fn objective_derivatives<T: LogTarget + ?Sized>(t: &T, z: &[f64]) -> Option<(Vec<f64>, Matrix)> {
    let q = z.len();
    let (mut g, mut h) = match t.derivatives(z) {
        Some(d) => d,
        None => {
            let step = 1e-4;
            let mut x = z.to_vec();
            let f0 = t.log_f(z);
            let mut g = vec![0.0; q];
            let mut h = Matrix::zeros(q, q);
            let mut fp = vec![0.0; q];
            let mut fm = vec![0.0; q];
            for i in 0..q {
                x[i] = z[i] + step;
                fp[i] = t.log_f(&x);
                x[i] = z[i] - step;
                fm[i] = t.log_f(&x);
                x[i] = z[i];
                g[i] = (fp[i] - fm[i]) / (2.0 * step);
                h[(i, i)] = (fp[i] - 2.0 * f0 + fm[i]) / (step * step);
            }
            for i in 0..q {
                for j in 0..i {
                    let mut s = 0.0;
                    for (si, sj, sign) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                        x[i] = z[i] + si * step;
                        x[j] = z[j] + sj * step;
                        s += sign * t.log_f(&x);
                    }
                    x[i] = z[i];
                    x[j] = z[j];
                    let v = s / (4.0 * step * step);
                    h[(i, j)] = v;
                    h[(j, i)] = v;
                }
            }
            (g, h)
        }
    };
    for i in 0..q {
        g[i] -= z[i];
        h[(i, i)] -= 1.0;
    }
    if g.iter().all(|v| v.is_finite()) && h.as_slice().iter().all(|v| v.is_finite()) {
        Some((g, h))
    } else {
        None
    }
}

/// Newton search for the mode of `log F(z) − ½|z|²` starting at the origin.
pub fn find_mode<T: LogTarget + ?Sized>(
    target: &T,
    max_iter: usize,
    tol: f64,
) -> Result<Adaptation, QuadratureError> {
    let q = target.dim();
    let mut z = vec![0.0; q];
    let mut f = objective(target, &z);
    if !f.is_finite() {
        return Err(QuadratureError::AdaptFailed);
    }
    for iter in 0..max_iter {
        let (g, h) = objective_derivatives(target, &z).ok_or(QuadratureError::AdaptFailed)?;
        let neg = h.scale(-1.0);
        let mut ridge = 0.0;
        let chol = loop {
            let mut m = neg.clone();
            for i in 0..q {
                m[(i, i)] += ridge;
            }
            match linalg::cholesky(&m) {
                Ok(l) => break l,
                Err(_) => {
                    ridge = if ridge == 0.0 { 1e-6 } else { ridge * 10.0 };
                    if ridge > 1e12 {
                        return Err(QuadratureError::AdaptFailed);
                    }
                }
            }
        };
        let step = linalg::cholesky_solve(&chol, &g);
        let mut t = 1.0;
        let mut accepted = false;
        let mut trial = z.clone();
        for _ in 0..60 {
            for i in 0..q {
                trial[i] = z[i] + t * step[i];
            }
            let ft = objective(target, &trial);
            if ft.is_finite() && ft >= f - 1e-14 * f.abs().max(1.0) {
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(QuadratureError::AdaptFailed);
        }
        let change = step.iter().map(|s| (t * s).abs()).fold(0.0, f64::max);
        z.copy_from_slice(&trial);
        if change < tol {
            let (_, h) = objective_derivatives(target, &z).ok_or(QuadratureError::AdaptFailed)?;
            let cov = linalg::spd_inverse(&h.scale(-1.0)).map_err(|_| QuadratureError::AdaptFailed)?;
            let scale = linalg::cholesky(&cov).map_err(|_| QuadratureError::AdaptFailed)?;
            return Ok(Adaptation { mode: z, scale, iterations: iter + 1 });
        }
    }
    Err(QuadratureError::AdaptFailed)
}

/// Shift and scale a standardized rule to the mode and curvature of the
/// target. The returned weights integrate `F` (not `F·φ`) against the same
/// summation as the non-adaptive rule.
pub fn adapt_nodes<T: LogTarget + ?Sized>(
    base: &NodeSet,
    target: &T,
    settings: &IntegrationSettings,
) -> Result<NodeSet, QuadratureError> {
    let a = find_mode(target, settings.adapt_iterations, settings.adapt_tolerance)?;
    let a = refine_mean_variance(base, target, a, settings.adapt_iterations, settings.adapt_tolerance);
    Ok(apply_adaptation(base, &a))
}

/// Re-centre and re-scale the rule at the posterior mean and covariance that
/// the rule itself estimates, starting from `start` and iterating until both
/// move by less than `tol`.
///
/// Keeps the last usable adaptation if an update degenerates.
pub fn refine_mean_variance<T: LogTarget + ?Sized>(
    base: &NodeSet,
    target: &T,
    start: Adaptation,
    max_iter: usize,
    tol: f64,
) -> Adaptation {
    let q = base.dim();
    if base.len() < 2 || q == 0 {
        return start;
    }
    let mut current = start;
    for iter in 1..=max_iter {
        let rule = apply_adaptation(base, &current);
        let lp: Vec<f64> = rule.iter().map(|(z, lw)| lw + target.log_f(z)).collect();
        let m = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            break;
        }
        let w: Vec<f64> = lp.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut mean = vec![0.0; q];
        for (k, wk) in w.iter().enumerate() {
            for (mi, zi) in mean.iter_mut().zip(rule.node(k)) {
                *mi += wk * zi / total;
            }
        }
        let mut cov = Matrix::zeros(q, q);
        for (k, wk) in w.iter().enumerate() {
            let z = rule.node(k);
            for i in 0..q {
                for j in 0..=i {
                    cov[(i, j)] += wk * (z[i] - mean[i]) * (z[j] - mean[j]) / total;
                }
            }
        }
        for i in 0..q {
            for j in 0..i {
                cov[(j, i)] = cov[(i, j)];
            }
        }
        let Ok(scale) = linalg::cholesky(&cov) else { break };
        let old_cov = current.scale.matmul(&current.scale.transpose()).expect("square");
        let mut change: f64 = mean.iter().zip(&current.mode).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        for (a, b) in cov.as_slice().iter().zip(old_cov.as_slice()) {
            change = change.max((a - b).abs());
        }
        current = Adaptation { mode: mean, scale, iterations: current.iterations + 1 };
        if change < tol || iter == max_iter {
            break;
        }
    }
    current
}

pub fn apply_adaptation(base: &NodeSet, a: &Adaptation) -> NodeSet {
    let q = base.dim();
    let log_det: f64 = (0..q).map(|i| a.scale[(i, i)].ln()).sum();
    let mut nodes = Vec::with_capacity(base.len() * q);
    let mut logw = Vec::with_capacity(base.len());
    for (xi, lw) in base.iter() {
        let shifted: Vec<f64> = a.scale.matvec(xi).iter().zip(&a.mode).map(|(s, m)| s + m).collect();
        let xi2: f64 = xi.iter().map(|v| v * v).sum();
        let z2: f64 = shifted.iter().map(|v| v * v).sum();
        logw.push(lw + log_det + 0.5 * xi2 - 0.5 * z2);
        nodes.extend_from_slice(&shifted);
    }
    NodeSet::new(q, nodes, logw)
}
