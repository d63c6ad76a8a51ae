//! Random-effect covariance structures and densities.
//!
//! Free parameters are unconstrained: log standard deviations, a tanh-mapped
//! correlation for the exchangeable structure and a log-diagonal Cholesky
//! factor for the unstructured one, so every finite parameter vector gives a
//! positive-definite covariance.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::linalg::{self, LinalgError, Matrix};
use crate::math::{ln_gamma, LN_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceKind {
    Diagonal,
    Exchangeable,
    Identity,
    Unstructured,
}

impl CovarianceKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Diagonal => "diagonal",
            Self::Exchangeable => "exchangeable",
            Self::Identity => "identity",
            Self::Unstructured => "unstructured",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "diagonal" | "independent" => Some(Self::Diagonal),
            "exchangeable" => Some(Self::Exchangeable),
            "identity" => Some(Self::Identity),
            "unstructured" => Some(Self::Unstructured),
            _ => None,
        }
    }

    pub fn n_params(self, q: usize) -> usize {
        match self {
            Self::Diagonal => q,
            Self::Exchangeable => 2,
            Self::Identity => 1,
            Self::Unstructured => q * (q + 1) / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReDistribution {
    Gaussian,
    /// Multivariate t whose covariance (not scale matrix) is `Σ`.
    StudentT { dof: f64 },
}

/// Lower bound of the exchangeable correlation for dimension `q`.
fn exchangeable_lower(q: usize) -> f64 {
    -1.0 / (q as f64 - 1.0)
}

/// Correlation for the exchangeable parameter `a`.
pub fn exchangeable_corr(q: usize, a: f64) -> f64 {
    let lo = exchangeable_lower(q);
    lo + (1.0 - lo) * 0.5 * (a.tanh() + 1.0)
}

/// Parameter value giving correlation `rho`.
pub fn exchangeable_param(q: usize, rho: f64) -> f64 {
    let lo = exchangeable_lower(q);
    (2.0 * (rho - lo) / (1.0 - lo) - 1.0).atanh()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceStructure {
    kind: CovarianceKind,
    q: usize,
}

impl CovarianceStructure {
    pub fn new(kind: CovarianceKind, q: usize) -> Result<Self, String> {
        if q == 0 {
            return Err("random-effect dimension must be positive".into());
        }
        if kind == CovarianceKind::Exchangeable && q < 2 {
            return Err("exchangeable covariance needs at least two random effects".into());
        }
        Ok(Self { kind, q })
    }

    pub fn kind(&self) -> CovarianceKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.q
    }

    pub fn n_params(&self) -> usize {
        self.kind.n_params(self.q)
    }

    /// Parameters for unit variances and zero correlations.
    pub fn start(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params()];
        if self.kind == CovarianceKind::Exchangeable {
            p[1] = exchangeable_param(self.q, 0.0);
        }
        p
    }

    /// Parameter names using `M{k}` labels for the random effects.
    pub fn param_names(&self, labels: &[String]) -> Vec<String> {
        match self.kind {
            CovarianceKind::Diagonal => labels.iter().map(|l| format!("log_sd({l})")).collect(),
            CovarianceKind::Identity => vec![format!("log_sd({})", labels.join(" "))],
            CovarianceKind::Exchangeable => {
                vec![format!("log_sd({})", labels.join(" ")), format!("corr_param({})", labels.join(" "))]
            }
            CovarianceKind::Unstructured => {
                let mut v = Vec::new();
                for i in 0..self.q {
                    for j in 0..=i {
                        if i == j {
                            v.push(format!("log_chol({},{})", labels[i], labels[j]));
                        } else {
                            v.push(format!("chol({},{})", labels[i], labels[j]));
                        }
                    }
                }
                v
            }
        }
    }

    /// Cholesky factor `L` of `Σ`.
    pub fn cholesky(&self, params: &[f64]) -> Matrix {
        assert_eq!(params.len(), self.n_params(), "covariance parameter count");
        let q = self.q;
        match self.kind {
            CovarianceKind::Diagonal => Matrix::diagonal(&params.iter().map(|p| p.exp()).collect::<Vec<_>>()),
            CovarianceKind::Identity => Matrix::diagonal(&vec![params[0].exp(); q]),
            CovarianceKind::Unstructured => {
                let mut l = Matrix::zeros(q, q);
                let mut k = 0;
                for i in 0..q {
                    for j in 0..=i {
                        l[(i, j)] = if i == j { params[k].exp() } else { params[k] };
                        k += 1;
                    }
                }
                l
            }
            CovarianceKind::Exchangeable => {
                let sigma = self.assemble(params);
                linalg::cholesky(&sigma).unwrap_or_else(|_| {
                    // Only reachable at the extreme ends of the correlation range.
                    linalg::cholesky_semidefinite(&sigma).expect("exchangeable covariance")
                })
            }
        }
    }

    /// Assembled covariance matrix `Σ`.
    pub fn assemble(&self, params: &[f64]) -> Matrix {
        assert_eq!(params.len(), self.n_params(), "covariance parameter count");
        let q = self.q;
        match self.kind {
            CovarianceKind::Exchangeable => {
                let v = (2.0 * params[0]).exp();
                let rho = exchangeable_corr(q, params[1]);
                let mut s = Matrix::zeros(q, q);
                for i in 0..q {
                    for j in 0..q {
                        s[(i, j)] = if i == j { v } else { v * rho };
                    }
                }
                s
            }
            _ => {
                let l = self.cholesky(params);
                let mut s = l.matmul(&l.transpose()).expect("square");
                s.symmetrize();
                s
            }
        }
    }

    /// Standard deviations and correlations `(i, j, rho)` with `i > j`.
    pub fn sd_corr(&self, params: &[f64]) -> (Vec<f64>, Vec<(usize, usize, f64)>) {
        let s = self.assemble(params);
        let sd: Vec<f64> = (0..self.q).map(|i| s[(i, i)].sqrt()).collect();
        let mut corr = Vec::new();
        if matches!(self.kind, CovarianceKind::Exchangeable | CovarianceKind::Unstructured) {
            for i in 0..self.q {
                for j in 0..i {
                    corr.push((i, j, s[(i, j)] / (sd[i] * sd[j])));
                }
            }
        }
        (sd, corr)
    }
}

/// `log N(b; 0, Σ)`.
pub fn logdensity_gaussian(b: &[f64], sigma: &Matrix) -> Result<f64, LinalgError> {
    let q = b.len();
    if sigma.rows() != q || sigma.cols() != q {
        return Err(LinalgError::Dimension);
    }
    let l = linalg::cholesky(sigma)?;
    let y = linalg::forward_solve(&l, b);
    let quad: f64 = y.iter().map(|v| v * v).sum();
    Ok(-0.5 * q as f64 * LN_2PI - 0.5 * linalg::log_det_from_cholesky(&l) - 0.5 * quad)
}

/// Multivariate t log density with covariance `Σ` (scale `Σ(ν−2)/ν`).
pub fn logdensity_t(b: &[f64], sigma: &Matrix, nu: f64) -> Result<f64, LinalgError> {
    if !(nu > 2.0) {
        return Err(LinalgError::Domain("degrees of freedom must exceed 2"));
    }
    let q = b.len();
    if sigma.rows() != q || sigma.cols() != q {
        return Err(LinalgError::Dimension);
    }
    let scale = sigma.scale((nu - 2.0) / nu);
    let l = linalg::cholesky(&scale)?;
    let y = linalg::forward_solve(&l, b);
    let quad: f64 = y.iter().map(|v| v * v).sum();
    let qf = q as f64;
    Ok(ln_gamma(0.5 * (nu + qf)) - ln_gamma(0.5 * nu) - 0.5 * qf * (nu * core::f64::consts::PI).ln()
        - 0.5 * linalg::log_det_from_cholesky(&l)
        - 0.5 * (nu + qf) * (quad / nu).ln_1p())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parameter_counts() {
        assert_eq!(CovarianceKind::Diagonal.n_params(3), 3);
        assert_eq!(CovarianceKind::Exchangeable.n_params(4), 2);
        assert_eq!(CovarianceKind::Identity.n_params(5), 1);
        assert_eq!(CovarianceKind::Unstructured.n_params(2), 3);
        assert!(CovarianceStructure::new(CovarianceKind::Exchangeable, 1).is_err());
    }

    #[test]
    fn assembled_examples() {
        let s = CovarianceStructure::new(CovarianceKind::Identity, 3).unwrap();
        assert_eq!(s.assemble(&[0.0]), Matrix::identity(3));
        let s = CovarianceStructure::new(CovarianceKind::Diagonal, 2).unwrap();
        let m = s.assemble(&[0.0, 2f64.ln()]);
        assert!((m[(0, 0)] - 1.0).abs() < 1e-15 && (m[(1, 1)] - 4.0).abs() < 1e-14 && m[(0, 1)] == 0.0);
    }

    #[test]
    fn starts_are_unit_uncorrelated() {
        for (kind, q) in [
            (CovarianceKind::Diagonal, 2),
            (CovarianceKind::Exchangeable, 2),
            (CovarianceKind::Exchangeable, 4),
            (CovarianceKind::Identity, 3),
            (CovarianceKind::Unstructured, 3),
        ] {
            let s = CovarianceStructure::new(kind, q).unwrap();
            let m = s.assemble(&s.start());
            for i in 0..q {
                for j in 0..q {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((m[(i, j)] - want).abs() < 1e-14, "{kind:?} {i} {j}");
                }
            }
        }
    }

    #[test]
    fn exchangeable_map_round_trips() {
        for q in [2, 3, 5] {
            for rho in [-0.2, 0.0, 0.3, 0.9] {
                if rho <= -1.0 / (q as f64 - 1.0) {
                    continue;
                }
                assert!((exchangeable_corr(q, exchangeable_param(q, rho)) - rho).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_density_examples() {
        let v = logdensity_gaussian(&[0.0], &Matrix::identity(1)).unwrap();
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12);
        let v = logdensity_gaussian(&[1.0, 1.0], &Matrix::identity(2)).unwrap();
        assert!((v - (-2.0 * 0.918_938_533_204_672_7 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_density_matches_explicit_inverse() {
        let sigma = Matrix::from_row_major(3, 3, vec![2.0, 0.3, -0.4, 0.3, 1.5, 0.2, -0.4, 0.2, 0.9]).unwrap();
        let b = [0.7, -1.1, 0.25];
        let inv = linalg::inverse(&sigma).unwrap();
        // Determinant by cofactor expansion.
        let s = |i, j| sigma[(i, j)];
        let det = s(0, 0) * (s(1, 1) * s(2, 2) - s(1, 2) * s(2, 1)) - s(0, 1) * (s(1, 0) * s(2, 2) - s(1, 2) * s(2, 0))
            + s(0, 2) * (s(1, 0) * s(2, 1) - s(1, 1) * s(2, 0));
        let want = -1.5 * LN_2PI - 0.5 * det.ln() - 0.5 * inv.quad_form(&b);
        assert!((logdensity_gaussian(&b, &sigma).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn t_density_limits_and_normalization() {
        let g = logdensity_gaussian(&[0.8, -0.3], &Matrix::identity(2)).unwrap();
        let t = logdensity_t(&[0.8, -0.3], &Matrix::identity(2), 1e6).unwrap();
        assert!((g - t).abs() < 1e-4);
        assert!(logdensity_t(&[0.0], &Matrix::identity(1), 2.0).is_err());
        // Normalization by a fine trapezoid grid; the tails of t4 decay like |b|^-5.
        let nu = 4.0;
        let h = 0.001;
        let mut total = 0.0;
        let n = 400_000;
        for k in -n..=n {
            let b = k as f64 * h;
            total += logdensity_t(&[b], &Matrix::identity(1), nu).unwrap().exp() * h;
        }
        // Remaining mass beyond |b| = 400 for a t4 with unit variance is below 1e-9.
        assert!((total - 1.0).abs() < 1e-8, "{total}");
        let at0 = logdensity_t(&[0.0], &Matrix::identity(1), nu).unwrap();
        // Scaled t4: scale² = 1/2, f(0) = Γ(5/2)/(Γ(2)√(4π)·√(1/2)).
        let want = (ln_gamma(2.5) - ln_gamma(2.0) - 0.5 * (4.0 * core::f64::consts::PI).ln()) - 0.5 * 0.5f64.ln();
        assert!((at0 - want).abs() < 1e-12);
        let v = logdensity_t(&[0.4, -1.3], &Matrix::identity(2), 5.0).unwrap();
        let w = logdensity_t(&[-0.4, 1.3], &Matrix::identity(2), 5.0).unwrap();
        assert_eq!(v, w);
    }

    #[test]
    fn gaussian_density_normalizes_in_two_dimensions() {
        let s = CovarianceStructure::new(CovarianceKind::Unstructured, 2).unwrap();
        let sigma = s.assemble(&[0.2, 0.5, -0.3]);
        let h = 0.02;
        let mut total = 0.0;
        for i in -400..=400 {
            for j in -400..=400 {
                let b = [i as f64 * h, j as f64 * h];
                total += logdensity_gaussian(&b, &sigma).unwrap().exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    fn structures() -> impl Strategy<Value = (CovarianceStructure, Vec<f64>)> {
        (0usize..4, 1usize..5).prop_flat_map(|(k, q)| {
            let kind = [CovarianceKind::Diagonal, CovarianceKind::Exchangeable, CovarianceKind::Identity, CovarianceKind::Unstructured][k];
            let q = if kind == CovarianceKind::Exchangeable { q.max(2) } else { q };
            let s = CovarianceStructure::new(kind, q).unwrap();
            let n = s.n_params();
            (Just(s), proptest::collection::vec(-3.0..3.0f64, n))
        })
    }

    proptest! {
        #[test]
        fn assembled_covariance_is_spd((s, p) in structures()) {
            let m = s.assemble(&p);
            prop_assert!(m.is_symmetric(1e-12));
            prop_assert!(linalg::cholesky(&m).is_ok());
            let l = s.cholesky(&p);
            let back = l.matmul(&l.transpose()).unwrap();
            for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }
}
