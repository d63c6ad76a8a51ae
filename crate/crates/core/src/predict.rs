//! Post-estimation predictions with delta-method confidence intervals.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use num_traits::Float;

use crate::covariance::ReDistribution;
use crate::data::Dataset;
use crate::error::Error;
use crate::estimation::FittedModel;
use crate::linalg::Matrix;
use crate::math::z_critical;
use crate::model::Model;
use crate::optim::gradient_step;
use crate::quadrature::{self, gauss_hermite, NodeSet};

/// Gauss-Legendre points for restricted mean and time lost.
pub const RMST_NODES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionKind {
    Eta,
    Hazard,
    Survival,
    CumHazard,
    Cif,
    Rmst,
    TimeLost,
}

impl PredictionKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "eta" => Self::Eta,
            "hazard" => Self::Hazard,
            "survival" => Self::Survival,
            "chazard" => Self::CumHazard,
            "cif" => Self::Cif,
            "rmst" => Self::Rmst,
            "timelost" => Self::TimeLost,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Eta => "eta",
            Self::Hazard => "hazard",
            Self::Survival => "survival",
            Self::CumHazard => "chazard",
            Self::Cif => "cif",
            Self::Rmst => "rmst",
            Self::TimeLost => "timelost",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionMode {
    /// Random effects set to zero.
    FixedOnly,
    /// Population average over the random-effect distribution.
    Marginal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRequest {
    pub kind: PredictionKind,
    /// Covariate overrides applied to every row.
    pub at: Vec<(String, f64)>,
    pub mode: PredictionMode,
    pub ci: bool,
    pub level: f64,
}

impl PredictionRequest {
    pub fn new(kind: PredictionKind) -> Self {
        Self { kind, at: Vec::new(), mode: PredictionMode::FixedOnly, ci: false, level: 95.0 }
    }
}

/// Covariates in model order and the prediction time.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub covariates: Vec<f64>,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub time: f64,
    pub estimate: f64,
    pub ci: Option<(f64, f64)>,
}

/// One row per record, at its exit time.
pub fn rows_from_dataset(model: &Model, data: &Dataset) -> Result<Vec<PredictionRow>, Error> {
    let idx: Vec<usize> = model.covariates().iter().map(|c| data.covariate_index(c)).collect::<Result<_, _>>()?;
    Ok(data
        .records()
        .iter()
        .map(|r| PredictionRow { covariates: idx.iter().map(|&i| r.covariates[i]).collect(), time: r.exit })
        .collect())
}

/// Rows on a time grid with covariates taken from `at` (every model covariate
/// must be listed).
pub fn rows_from_grid(model: &Model, at: &[(String, f64)], times: &[f64]) -> Result<Vec<PredictionRow>, Error> {
    let x = model
        .covariates()
        .iter()
        .map(|c| {
            at.iter()
                .find(|(n, _)| n == c)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Prediction(format!("covariate '{c}' needs a value in at() for a time grid")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(times.iter().map(|&t| PredictionRow { covariates: x.clone(), time: t }).collect())
}

/// Integration nodes for marginal predictions: standardized draws per level.
struct MarginalRule {
    per_level: Vec<NodeSet>,
    gaussian: Option<NodeSet>,
}

fn marginal_rule(model: &Model) -> Result<MarginalRule, Error> {
    let spec = model.spec();
    match spec.distribution {
        ReDistribution::Gaussian => {
            Ok(MarginalRule { per_level: Vec::new(), gaussian: Some(gauss_hermite(spec.integration.points.min(200))?) })
        }
        ReDistribution::StudentT { .. } => {
            let per_level = model
                .levels()
                .iter()
                .enumerate()
                .map(|(l, lvl)| {
                    quadrature::mc_draws(
                        lvl.structure.dim(),
                        spec.integration.points,
                        spec.distribution,
                        spec.integration.seed.wrapping_add(l as u64),
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(MarginalRule { per_level, gaussian: None })
        }
    }
}

/// The point prediction at `theta`.
fn point(
    model: &Model,
    theta: &[f64],
    x: &[f64],
    t: f64,
    kind: PredictionKind,
    mode: PredictionMode,
    rule: Option<&MarginalRule>,
) -> f64 {
    let p = model.decode(theta);
    if kind == PredictionKind::Eta {
        return model.eta(x, t, 0.0, &p);
    }
    // Values of u and their weights.
    let mut us: Vec<(f64, f64)> = Vec::new();
    match (mode, rule) {
        (PredictionMode::Marginal, Some(rule)) if !model.levels().is_empty() => {
            if let Some(gh) = &rule.gaussian {
                let mut var = 0.0;
                for l in 0..model.levels().len() {
                    let z = model.re_design(l, x);
                    var += model.sigma(l, &p).quad_form(&z);
                }
                let sd = var.max(0.0).sqrt();
                us.extend(gh.iter().map(|(xi, lw)| (sd * xi[0], lw.exp())));
            } else {
                let w: Vec<Vec<f64>> = (0..model.levels().len())
                    .map(|l| model.sigma_cholesky(l, &p).tmatvec(&model.re_design(l, x)))
                    .collect();
                let n = rule.per_level[0].len();
                for k in 0..n {
                    let u: f64 = rule.per_level.iter().zip(&w).map(|(ns, wl)| dot(wl, ns.node(k))).sum();
                    us.push((u, rule.per_level[0].log_weight(k).exp()));
                }
            }
        }
        _ => us.push((0.0, 1.0)),
    }
    let surv = |s: f64| -> f64 { us.iter().map(|&(u, w)| w * (-model.cum_hazard(x, s, u, &p)).exp()).sum() };
    match kind {
        PredictionKind::Eta => unreachable!(),
        PredictionKind::Hazard => model.log_hazard(x, t, 0.0, &p).exp(),
        PredictionKind::CumHazard => us.iter().map(|&(u, w)| w * model.cum_hazard(x, t, u, &p)).sum(),
        PredictionKind::Survival => surv(t),
        PredictionKind::Cif => 1.0 - surv(t),
        PredictionKind::Rmst | PredictionKind::TimeLost => {
            let (nodes, weights) = quadrature::legendre_unit(RMST_NODES);
            let half = 0.5 * t;
            let rmst: f64 = nodes.iter().zip(&weights).map(|(xn, wn)| wn * half * surv(half * (1.0 + xn))).sum();
            if kind == PredictionKind::Rmst {
                rmst
            } else {
                nodes.iter().zip(&weights).map(|(xn, wn)| wn * half * (1.0 - surv(half * (1.0 + xn)))).sum()
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale on which the delta method is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CiScale {
    Identity,
    Log,
    /// `log(−log S)`; `complement` marks quantities equal to `1 − S`.
    CLogLog { complement: bool },
}

impl CiScale {
    fn for_kind(kind: PredictionKind) -> Self {
        match kind {
            PredictionKind::Eta => Self::Identity,
            PredictionKind::Hazard | PredictionKind::CumHazard | PredictionKind::Rmst | PredictionKind::TimeLost => {
                Self::Log
            }
            PredictionKind::Survival => Self::CLogLog { complement: false },
            PredictionKind::Cif => Self::CLogLog { complement: true },
        }
    }

    fn forward(self, v: f64) -> f64 {
        match self {
            Self::Identity => v,
            Self::Log => v.ln(),
            Self::CLogLog { complement } => {
                let s = if complement { 1.0 - v } else { v };
                (-s.ln()).ln()
            }
        }
    }

    /// Interval on the natural scale from an interval on the transformed one.
    fn back(self, lo: f64, hi: f64) -> (f64, f64) {
        match self {
            Self::Identity => (lo, hi),
            Self::Log => (lo.exp(), hi.exp()),
            Self::CLogLog { complement } => {
                // S is decreasing in the transformed value.
                let (s_lo, s_hi) = ((-hi.exp()).exp(), (-lo.exp()).exp());
                if complement {
                    (1.0 - s_hi, 1.0 - s_lo)
                } else {
                    (s_lo, s_hi)
                }
            }
        }
    }
}

/// Delta-method interval for `g` at `theta` on `scale`.
pub fn delta_ci<G: FnMut(&[f64]) -> f64>(
    vcov: &Matrix,
    theta: &[f64],
    mut g: G,
    level: f64,
    scale: CiScale,
) -> Option<(f64, f64)> {
    let est = g(theta);
    let c0 = scale.forward(est);
    if !c0.is_finite() {
        return Some((est, est));
    }
    let n = theta.len();
    let mut grad = alloc::vec![0.0; n];
    let mut tp = theta.to_vec();
    for i in 0..n {
        let h = gradient_step(theta[i]);
        tp[i] = theta[i] + h;
        let fp = scale.forward(g(&tp));
        tp[i] = theta[i] - h;
        let fm = scale.forward(g(&tp));
        tp[i] = theta[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    let mut var = 0.0;
    for i in 0..n {
        for j in 0..n {
            var += grad[i] * vcov[(i, j)] * grad[j];
        }
    }
    if !var.is_finite() {
        return None;
    }
    let half = z_critical(level) * var.max(0.0).sqrt();
    Some(scale.back(c0 - half, c0 + half))
}

fn apply_at(model: &Model, at: &[(String, f64)], x: &mut [f64]) -> Result<(), Error> {
    for (name, v) in at {
        let i = model
            .covariates()
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Prediction(format!("unknown covariate '{name}' in at()")))?;
        x[i] = *v;
    }
    Ok(())
}

pub fn predict(fit: &FittedModel, rows: &[PredictionRow], req: &PredictionRequest) -> Result<Vec<Prediction>, Error> {
    predict_with(&fit.model, &fit.theta, fit.vcov.as_ref(), rows, req)
}

/// Predictions from a model, a parameter vector and (for intervals) its covariance.
pub fn predict_with(
    model: &Model,
    theta: &[f64],
    vcov: Option<&Matrix>,
    rows: &[PredictionRow],
    req: &PredictionRequest,
) -> Result<Vec<Prediction>, Error> {
    if req.mode == PredictionMode::Marginal && req.kind == PredictionKind::Hazard {
        return Err(Error::Prediction("marginal hazard is not available; use marginal survival instead".into()));
    }
    if req.ci && vcov.is_none() {
        return Err(Error::Prediction("confidence intervals need a variance matrix".into()));
    }
    if theta.len() != model.n_params() {
        return Err(Error::Prediction("parameter vector does not match the model".into()));
    }
    let rule = if req.mode == PredictionMode::Marginal && !model.levels().is_empty() {
        Some(marginal_rule(model)?)
    } else {
        None
    };
    let scale = CiScale::for_kind(req.kind);
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        if !(row.time > 0.0) {
            return Err(Error::Prediction(format!("prediction time must be positive, got {}", row.time)));
        }
        if row.covariates.len() != model.covariates().len() {
            return Err(Error::Prediction("covariate vector does not match the model".to_string()));
        }
        let mut x = row.covariates.clone();
        apply_at(model, &req.at, &mut x)?;
        let g = |th: &[f64]| point(model, th, &x, row.time, req.kind, req.mode, rule.as_ref());
        let estimate = g(theta);
        let ci = if req.ci { delta_ci(vcov.expect("checked"), theta, g, req.level, scale) } else { None };
        out.push(Prediction { time: row.time, estimate, ci });
    }
    Ok(out)
}
