//! Baseline hazard families.
//!
//! Every family is written in terms of a total linear predictor `eta` that
//! already includes the intercept `_cons` (for the built-in families), the
//! covariate effects, any time-dependent effects and the random effects. For
//! the Royston-Parmar family `eta` lives on the log cumulative hazard scale,
//! so its hazard also needs `d eta / d log t`.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};
use core::fmt;
use num_traits::Float;

use crate::spline::SplineBasis;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FamilyError {
    #[error("unknown distribution '{0}' (expected exponential, weibull, gompertz, rp, rcs or user)")]
    Unknown(String),
    #[error("time must be positive, got {0}")]
    Domain(f64),
    #[error("{0} family needs a baseline spline (df or knots)")]
    MissingBaseline(&'static str),
    #[error("user-defined hazard families cannot be written to a model file")]
    NotSerializable,
    #[error("distribution user requires a registered hazard callback")]
    MissingCallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    Exponential,
    Weibull,
    Gompertz,
    /// Royston-Parmar: restricted cubic spline of log time on the log
    /// cumulative hazard scale.
    RoystonParmar,
    /// Restricted cubic spline of log time on the log hazard scale.
    RcsLogHazard,
    User,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Exponential => "exponential",
            Self::Weibull => "weibull",
            Self::Gompertz => "gompertz",
            Self::RoystonParmar => "rp",
            Self::RcsLogHazard => "rcs",
            Self::User => "user",
        }
    }

    pub fn parse(s: &str) -> Result<Self, FamilyError> {
        Ok(match s {
            "exponential" | "exp" => Self::Exponential,
            "weibull" => Self::Weibull,
            "gompertz" => Self::Gompertz,
            "rp" => Self::RoystonParmar,
            "rcs" => Self::RcsLogHazard,
            "user" => Self::User,
            other => return Err(FamilyError::Unknown(other.to_string())),
        })
    }

    pub fn uses_spline(self) -> bool {
        matches!(self, Self::RoystonParmar | Self::RcsLogHazard)
    }

    /// Closed-form cumulative hazard available with a time-constant `eta`.
    pub fn closed_form(self) -> bool {
        !matches!(self, Self::RcsLogHazard | Self::User)
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A hazard supplied by the host program.
///
/// `eta` is the covariate, time-dependent and random-effect part of the linear
/// predictor (there is no built-in intercept for user families; include one
/// among `params` if needed).
pub trait UserHazard: Send + Sync {
    fn parameter_names(&self) -> Vec<String>;

    fn log_hazard(&self, t: f64, eta: f64, params: &[f64]) -> f64;

    /// Closed-form cumulative hazard for a time-constant `eta`. When `None`
    /// the hazard is integrated numerically.
    fn cumulative_hazard(&self, _t: f64, _eta: f64, _params: &[f64]) -> Option<f64> {
        None
    }

    /// True when `log_hazard(t, eta + u) == log_hazard(t, eta) + u` for all
    /// `u`, which lets the likelihood reuse one evaluation per record.
    fn proportional(&self) -> bool {
        false
    }
}

impl fmt::Debug for dyn UserHazard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "UserHazard({:?})", self.parameter_names())
    }
}

/// Names of the baseline parameters, in storage order.
pub fn baseline_names(kind: FamilyKind, spline_df: usize, user: Option<&dyn UserHazard>) -> Vec<String> {
    match kind {
        FamilyKind::Exponential => vec!["_cons".into()],
        FamilyKind::Weibull => vec!["_cons".into(), "log(gamma)".into()],
        FamilyKind::Gompertz => vec!["_cons".into(), "gamma".into()],
        FamilyKind::RoystonParmar | FamilyKind::RcsLogHazard => {
            let mut v = vec![String::from("_cons")];
            v.extend((1..=spline_df).map(|j| format!("_rcs{j}")));
            v
        }
        FamilyKind::User => user.map(|u| u.parameter_names()).unwrap_or_default(),
    }
}

/// A baseline hazard with its parameters bound.
#[derive(Clone, Copy)]
pub struct Baseline<'a> {
    pub kind: FamilyKind,
    /// Baseline parameters in [`baseline_names`] order.
    pub params: &'a [f64],
    pub basis: Option<&'a SplineBasis>,
    pub user: Option<&'a dyn UserHazard>,
}

impl<'a> Baseline<'a> {
    /// Intercept added to the linear predictor (zero for user families).
    pub fn intercept(&self) -> f64 {
        match self.kind {
            FamilyKind::User => 0.0,
            _ => self.params[0],
        }
    }

    fn spline(&self, log_t: f64) -> (f64, f64) {
        let basis = self.basis.expect("spline family without basis");
        basis.dot(log_t, &self.params[1..])
    }

    /// `log h(t)` given the total linear predictor `eta` (including the
    /// intercept) and `deta = d eta / d log t`. Returns `NaN` where the
    /// Royston-Parmar hazard is not positive.
    pub fn log_hazard(&self, t: f64, eta: f64, deta: f64) -> f64 {
        let lt = t.ln();
        match self.kind {
            FamilyKind::Exponential => eta,
            FamilyKind::Weibull => {
                let lg = self.params[1];
                eta + lg + (lg.exp() - 1.0) * lt
            }
            FamilyKind::Gompertz => eta + self.params[1] * t,
            FamilyKind::RcsLogHazard => eta + self.spline(lt).0,
            FamilyKind::RoystonParmar => {
                let (s, ds) = self.spline(lt);
                let slope = ds + deta;
                if slope > 0.0 {
                    s + eta + slope.ln() - lt
                } else {
                    f64::NAN
                }
            }
            FamilyKind::User => self.user.map_or(f64::NAN, |u| u.log_hazard(t, eta, self.params)),
        }
    }

    /// Closed-form cumulative hazard. For the hazard-scale families `eta`
    /// must be constant in time; for Royston-Parmar `eta` is its value at `t`.
    pub fn cum_hazard_closed(&self, t: f64, eta: f64) -> Option<f64> {
        match self.kind {
            FamilyKind::Exponential => Some(eta.exp() * t),
            FamilyKind::Weibull => Some((eta + self.params[1].exp() * t.ln()).exp()),
            FamilyKind::Gompertz => Some(eta.exp() * gompertz_integral(self.params[1], t)),
            FamilyKind::RoystonParmar => Some((eta + self.spline(t.ln()).0).exp()),
            FamilyKind::RcsLogHazard => None,
            FamilyKind::User => self.user.and_then(|u| u.cumulative_hazard(t, eta, self.params)),
        }
    }
}

/// `∫₀ᵗ e^{γu} du`, continuous at `γ = 0`.
pub fn gompertz_integral(gamma: f64, t: f64) -> f64 {
    if gamma == 0.0 {
        t
    } else {
        libm::expm1(gamma * t) / gamma
    }
}

/// `∫₀ᵗ exp(log_h(u)) du` with a Gauss-Legendre rule given on `[-1, 1]`.
///
/// The rule is applied after the substitution `u = t·v³`, which turns the
/// power-law behaviour of spline and Weibull-type hazards near zero into a
/// smooth integrand.
pub fn numeric_cum_hazard<F: FnMut(f64) -> f64>(t: f64, unit_nodes: &[f64], unit_weights: &[f64], mut log_h: F) -> f64 {
    let mut total = 0.0;
    for (x, w) in unit_nodes.iter().zip(unit_weights) {
        let v = 0.5 * (1.0 + x);
        let v2 = v * v;
        total += w * 1.5 * t * v2 * log_h(t * v2 * v).exp();
    }
    total
}

/// Time-dependent part of the linear predictor, `Σ_r x_r · s_r(log t)`, and
/// its derivative in `log t`.
pub fn tvc_terms(log_t: f64, terms: &[(f64, &SplineBasis, &[f64])]) -> (f64, f64) {
    let mut v = 0.0;
    let mut d = 0.0;
    for &(x, basis, coef) in terms {
        if x != 0.0 {
            let (s, ds) = basis.dot(log_t, coef);
            v += x * s;
            d += x * ds;
        }
    }
    (v, d)
}

/// Linear predictor `xᵀβ + zᵀb + Σ_r x_r·s_r(log t)` (no baseline terms).
pub fn eta(
    x: &[f64],
    beta: &[f64],
    z: &[f64],
    b: &[f64],
    t: f64,
    tvc: &[(f64, &SplineBasis, &[f64])],
) -> Result<f64, FamilyError> {
    if !(t > 0.0) {
        return Err(FamilyError::Domain(t));
    }
    assert_eq!(x.len(), beta.len(), "covariate and coefficient lengths differ");
    assert_eq!(z.len(), b.len(), "random-effect design and values differ in length");
    let xb: f64 = x.iter().zip(beta).map(|(a, c)| a * c).sum();
    let zb: f64 = z.iter().zip(b).map(|(a, c)| a * c).sum();
    Ok(xb + zb + tvc_terms(t.ln(), tvc).0)
}
