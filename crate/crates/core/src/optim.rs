//! Quasi-Newton maximization with numerical derivatives.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Convergence needs `max |gradient|` below this...
    pub grad_tol: f64,
    /// ...and a relative objective change below this.
    pub rel_tol: f64,
    /// The gradient test is also met when `gᵀ H⁻¹ g` (with the quasi-Newton
    /// inverse curvature) is below this. Parameters with very large curvature
    /// cannot push `|g|` under `grad_tol` in double precision.
    pub scaled_grad_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self { max_iter: 300, grad_tol: 1e-6, rel_tol: 1e-8, scaled_grad_tol: 1e-12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub value: f64,
    /// The quasi-Newton direction was not an ascent direction and a
    /// steepest-ascent step was taken instead.
    pub not_concave: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_max: f64,
    pub history: Vec<IterationRecord>,
}

/// Central-difference step for coordinate `x`.
pub fn gradient_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// Five-point central differences with step [`gradient_step`]. The extra
/// pair of evaluations cancels the `h²` error term, which otherwise dominates
/// for covariates measured on large scales.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = gradient_step(x[i]);
        let mut at = |d: f64| {
            xp[i] = x[i] + d;
            let v = f(&xp);
            xp[i] = x[i];
            v
        };
        let (f1, f_1, f2, f_2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
        g[i] = (8.0 * (f1 - f_1) - (f2 - f_2)) / (12.0 * h);
    }
    g
}

/// Central-difference Hessian with steps `ε^{1/4}·max(|x_i|, 1)`.
pub fn numeric_hessian<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64]) -> Matrix {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| f64::EPSILON.powf(0.25) * v.abs().max(1.0)).collect();
    let f0 = f(x);
    let mut hess = Matrix::zeros(n, n);
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + h[i];
        let fp = f(&xp);
        xp[i] = x[i] - h[i];
        let fm = f(&xp);
        xp[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut s = 0.0;
            for (si, sj, sign) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                s += sign * f(&xp);
            }
            xp[i] = x[i];
            xp[j] = x[j];
            let v = s / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Maximize `f` from `x0` by BFGS with a halving line search.
///
/// The initial inverse curvature comes from a numerical Hessian when that is
/// negative definite. Non-ascent quasi-Newton directions are replaced by the
/// gradient and the iteration is flagged `not_concave`.
pub fn maximize<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &OptimOptions) -> OptimResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut history = vec![IterationRecord { iteration: 0, value: fx, not_concave: false }];
    if n == 0 || !fx.is_finite() {
        return OptimResult { x, value: fx, iterations: 0, converged: n == 0 && fx.is_finite(), grad_max: 0.0, history };
    }
    let mut g = numeric_gradient(&mut f, &x);
    let mut hinv = initial_inverse(&mut f, &x, &g);
    let mut converged = false;
    let mut iter = 0;
    while iter < opts.max_iter {
        iter += 1;
        let mut d = hinv.matvec(&g);
        let mut not_concave = false;
        if !(dot(&d, &g) > 0.0) || d.iter().any(|v| !v.is_finite()) {
            d = g.clone();
            hinv = Matrix::identity(n);
            not_concave = true;
        }
        let mut step = line_search(&mut f, &x, fx, &g, &d);
        if step.is_none() && !not_concave {
            // Retry along the gradient before giving up.
            d = g.clone();
            hinv = Matrix::identity(n);
            not_concave = true;
            step = line_search(&mut f, &x, fx, &g, &d);
        }
        let Some((t, fnew)) = step else {
            // No ascent possible at this resolution.
            converged = max_abs(&g) < opts.grad_tol.max(1e-4);
            iter -= 1;
            break;
        };
        let s: Vec<f64> = d.iter().map(|v| t * v).collect();
        let xnew: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a + b).collect();
        let gnew = numeric_gradient(&mut f, &xnew);
        // BFGS on the minimization problem -f: y = -(gnew - g).
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| b - a).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            bfgs_update(&mut hinv, &s, &y, sy);
        }
        let rel = (fnew - fx).abs() / (fx.abs() + 1e-10);
        x = xnew;
        fx = fnew;
        g = gnew;
        history.push(IterationRecord { iteration: iter, value: fx, not_concave });
        let small_grad = max_abs(&g) < opts.grad_tol || dot(&g, &hinv.matvec(&g)).abs() < opts.scaled_grad_tol;
        if small_grad && rel < opts.rel_tol {
            converged = true;
            break;
        }
    }
    let grad_max = max_abs(&g);
    OptimResult { x, value: fx, iterations: iter, converged, grad_max, history }
}

fn initial_inverse<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], g: &[f64]) -> Matrix {
    let n = x.len();
    let h = numeric_hessian(f, x);
    if let Ok(inv) = linalg::spd_inverse(&h.scale(-1.0)) {
        if inv.as_slice().iter().all(|v| v.is_finite()) {
            return inv;
        }
    }
    let scale = 1.0 / max_abs(g).max(1.0);
    Matrix::identity(n).scale(scale)
}

fn line_search<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], fx: f64, g: &[f64], d: &[f64]) -> Option<(f64, f64)> {
    let slope = dot(g, d);
    let mut t = 1.0;
    let mut trial = x.to_vec();
    for _ in 0..60 {
        for i in 0..x.len() {
            trial[i] = x[i] + t * d[i];
        }
        let ft = f(&trial);
        if ft.is_finite() && ft >= fx + 1e-4 * t * slope {
            return Some((t, ft));
        }
        t *= 0.5;
    }
    None
}

fn bfgs_update(hinv: &mut Matrix, s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let hy = hinv.matvec(y);
    let yhy = dot(y, &hy);
    let rho = 1.0 / sy;
    for i in 0..n {
        for j in 0..n {
            let v = hinv[(i, j)] - rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
            hinv[(i, j)] = v;
        }
    }
    hinv.symmetrize();
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
