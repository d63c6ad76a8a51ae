//! Two-stage maximum likelihood and the coefficient table.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};
use num_traits::Float;

use crate::covariance::{exchangeable_corr, CovarianceKind};
use crate::data::{DataSummary, Dataset};
use crate::error::Error;
use crate::family::FamilyKind;
use crate::likelihood::LikelihoodContext;
use crate::linalg::{self, Matrix};
use crate::math::{two_sided_p, z_critical};
use crate::model::{Model, ModelSpec};
use crate::optim::{self, IterationRecord, OptimOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Start every parameter at zero (log standard deviations at zero too)
    /// and skip the fixed-effects stage.
    pub zeros: bool,
    pub max_iter: usize,
    /// Explicit starting vector for the full model.
    pub initial: Option<Vec<f64>>,
    /// Evaluate clusters in parallel (needs the `parallel` feature).
    pub parallel: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { zeros: false, max_iter: 300, initial: None, parallel: true }
    }
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub model: Model,
    pub theta: Vec<f64>,
    /// Inverse observed information; `None` when the Hessian is not
    /// negative definite.
    pub vcov: Option<Matrix>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_max: f64,
    pub summary: DataSummary,
    /// Number of clusters per level, highest first.
    pub n_clusters: Vec<usize>,
    /// Log-likelihood of the fixed-effects stage, when it ran.
    pub fixed_loglik: Option<f64>,
    pub fixed_history: Vec<IterationRecord>,
    pub history: Vec<IterationRecord>,
    pub adapt_failures: usize,
}

/// Fit `spec` to `data` by maximum likelihood.
pub fn fit(spec: ModelSpec, data: &Dataset, opts: &FitOptions) -> Result<FittedModel, Error> {
    let model = Model::build(spec, data)?;
    fit_model(model, data, opts)
}

pub fn fit_model(model: Model, data: &Dataset, opts: &FitOptions) -> Result<FittedModel, Error> {
    let optim_opts = OptimOptions { max_iter: opts.max_iter, ..OptimOptions::default() };
    let has_re = !model.levels().is_empty();
    let mut fixed_loglik = None;
    let mut fixed_history = Vec::new();

    let start: Vec<f64> = if let Some(init) = &opts.initial {
        if init.len() != model.n_params() {
            return Err(Error::spec(format!(
                "initial vector has {} values, model has {} parameters",
                init.len(),
                model.n_params()
            )));
        }
        init.clone()
    } else if opts.zeros {
        zeros_start(&model)
    } else {
        let fixed = model.fixed_only();
        let mut ctx = LikelihoodContext::new(&fixed, data)?;
        ctx.set_parallel(opts.parallel);
        let s0 = fixed_start(&fixed, data, &ctx);
        let res = optim::maximize(|t: &[f64]| ctx.log_likelihood(t), &s0, &optim_opts);
        if !has_re {
            return finish(model, data, opts, res.x, res.converged, res.iterations, res.history, None, Vec::new());
        }
        if !res.converged || !res.value.is_finite() {
            return Err(Error::Estimation(
                "fixed effects model did not converge; try the zeros option for starting values".into(),
            ));
        }
        fixed_loglik = Some(res.value);
        fixed_history = res.history;
        let mut s = res.x;
        s.extend(model.re_start());
        s
    };

    let mut ctx = LikelihoodContext::new(&model, data)?;
    ctx.set_parallel(opts.parallel);
    let mut theta0 = start;
    let log_sd = log_sd_indices(&model);
    let mut tries = 0;
    while !ctx.log_likelihood(&theta0).is_finite() {
        if tries == 5 || log_sd.is_empty() {
            return Err(Error::Estimation("log likelihood is not finite at the starting values".into()));
        }
        for &i in &log_sd {
            theta0[i] += 0.5;
        }
        tries += 1;
    }
    let res = optim::maximize(|t: &[f64]| ctx.log_likelihood(t), &theta0, &optim_opts);
    finish(model, data, opts, res.x, res.converged, res.iterations, res.history, fixed_loglik, fixed_history)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: Model,
    data: &Dataset,
    opts: &FitOptions,
    theta: Vec<f64>,
    converged: bool,
    iterations: usize,
    history: Vec<IterationRecord>,
    fixed_loglik: Option<f64>,
    fixed_history: Vec<IterationRecord>,
) -> Result<FittedModel, Error> {
    let mut ctx = LikelihoodContext::new(&model, data)?;
    ctx.set_parallel(opts.parallel);
    let eval = ctx.evaluate(&theta);
    let mut f = |t: &[f64]| ctx.log_likelihood(t);
    let grad = optim::numeric_gradient(&mut f, &theta);
    let hess = optim::numeric_hessian(&mut f, &theta);
    let vcov = linalg::spd_inverse(&hess.scale(-1.0)).ok().filter(|v| v.as_slice().iter().all(|x| x.is_finite()));
    if vcov.is_none() {
        log::warn!("Hessian is not negative definite; standard errors are not available");
    }
    let n_clusters = cluster_counts(&model, data)?;
    Ok(FittedModel {
        theta,
        vcov,
        loglik: eval.loglik,
        converged,
        iterations,
        grad_max: grad.iter().fold(0.0, |m, g| m.max(g.abs())),
        summary: data.summary(),
        n_clusters,
        fixed_loglik,
        fixed_history,
        history,
        adapt_failures: eval.adapt_failures,
        model,
    })
}

fn cluster_counts(model: &Model, data: &Dataset) -> Result<Vec<usize>, Error> {
    let names: Vec<&str> = model.levels().iter().map(|l| l.name.as_str()).collect();
    let tree = data.build_hierarchy(&names)?;
    let mut counts = vec![0usize; names.len()];
    fn walk(nodes: &[crate::data::ClusterNode], depth: usize, counts: &mut [usize]) {
        for n in nodes {
            counts[depth] += 1;
            walk(&n.children, depth + 1, counts);
        }
    }
    walk(tree.clusters(), 0, &mut counts);
    Ok(counts)
}

/// Indices of log standard deviation parameters (perturbed when the
/// likelihood is not finite at the start).
fn log_sd_indices(model: &Model) -> Vec<usize> {
    let mut out = Vec::new();
    for (lvl, range) in model.levels().iter().zip(model.layout().re()) {
        let q = lvl.structure.dim();
        match lvl.structure.kind() {
            CovarianceKind::Diagonal => out.extend(range.clone()),
            CovarianceKind::Identity | CovarianceKind::Exchangeable => out.push(range.start),
            CovarianceKind::Unstructured => {
                let mut k = range.start;
                for i in 0..q {
                    out.push(k + i);
                    k += i;
                }
            }
        }
    }
    out
}

fn zeros_start(model: &Model) -> Vec<f64> {
    let mut theta = vec![0.0; model.n_params()];
    if model.family() == FamilyKind::RoystonParmar {
        // An all-zero spline has zero hazard; start from log H = log t instead.
        if let Some((coef, _)) = model.log_time_spline_coefs() {
            let b = model.layout().baseline();
            theta[b.start + 1..b.end].copy_from_slice(&coef);
        }
    }
    let re = model.re_start();
    let n = theta.len();
    theta[n - re.len()..].copy_from_slice(&re);
    theta
}

/// Starting values for the fixed-effects stage.
fn fixed_start(model: &Model, data: &Dataset, ctx: &LikelihoodContext<'_>) -> Vec<f64> {
    let s = data.summary();
    let log_rate = ((s.events.max(1)) as f64 / s.time_at_risk).ln();
    let layout = model.layout();
    let b = layout.baseline();
    let mut theta = vec![0.0; model.n_params()];
    match model.family() {
        FamilyKind::User => return theta,
        FamilyKind::RoystonParmar => {
            let (coef, shift) = model.log_time_spline_coefs().expect("rp has a basis");
            theta[b.start] = log_rate + shift;
            theta[b.start + 1..b.end].copy_from_slice(&coef);
            if let Some(ols) = rp_regression_start(model, data) {
                let (a, o) = (ctx.log_likelihood(&theta), ctx.log_likelihood(&ols));
                if o.is_finite() && o > a {
                    return ols;
                }
            }
        }
        _ => theta[b.start] = log_rate,
    }
    theta
}

/// Least squares of the log Nelson-Aalen cumulative hazard at event times on
/// `[1, spline(log t), x]`.
fn rp_regression_start(model: &Model, data: &Dataset) -> Option<Vec<f64>> {
    let recs = data.records();
    let mut times: Vec<f64> = recs.iter().filter(|r| r.event).map(|r| r.exit).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    times.dedup();
    let mut na = Vec::with_capacity(times.len());
    let mut h = 0.0;
    for &t in &times {
        let at_risk = recs.iter().filter(|r| r.entry < t && r.exit >= t).count() as f64;
        let d = recs.iter().filter(|r| r.event && r.exit == t).count() as f64;
        if at_risk > 0.0 {
            h += d / at_risk;
        }
        na.push(h);
    }
    let basis = model.baseline_basis()?;
    let k = basis.df();
    let cov_idx: Vec<usize> = model.covariates().iter().map(|c| data.covariate_index(c).ok()).collect::<Option<_>>()?;
    let layout = model.layout();
    let nf = layout.fixed().len();
    let p = 1 + k + nf;
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for r in recs.iter().filter(|r| r.event) {
        let i = times.iter().position(|&t| t == r.exit)?;
        let lh = na[i].ln();
        if !lh.is_finite() {
            continue;
        }
        let x: Vec<f64> = cov_idx.iter().map(|&j| r.covariates[j]).collect();
        rows.push(1.0);
        rows.extend(basis.eval(r.exit.ln()));
        for name in &model.spec().fixed {
            let j = model.covariates().iter().position(|c| c == name)?;
            rows.push(x[j]);
        }
        y.push(lh);
    }
    if y.len() < p {
        return None;
    }
    let xm = Matrix::from_row_major(y.len(), p, rows).ok()?;
    let coef = linalg::least_squares(&xm, &y).ok()?;
    let mut theta = vec![0.0; model.n_params()];
    let b = layout.baseline();
    theta[b.start] = coef[0];
    theta[b.start + 1..b.end].copy_from_slice(&coef[1..1 + k]);
    theta[layout.fixed()].copy_from_slice(&coef[1 + k..]);
    Some(theta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowKind {
    Coefficient,
    /// A random-effect loading fixed at one.
    Loading,
    /// A standard deviation on the natural scale.
    Sd,
    Corr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// Equation heading (`_t` or the level name).
    pub equation: String,
    pub name: String,
    pub kind: RowKind,
    pub estimate: f64,
    pub se: Option<f64>,
    pub z: Option<f64>,
    pub p: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub level: f64,
    pub n_obs: usize,
    pub loglik: f64,
    pub rows: Vec<ReportRow>,
    /// Spline coefficients were left out of the table.
    pub splines_hidden: bool,
}

impl Report {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

impl FittedModel {
    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn names(&self) -> &[String] {
        self.model.layout().names()
    }

    pub fn se(&self, i: usize) -> Option<f64> {
        self.vcov.as_ref().map(|v| v[(i, i)].max(0.0).sqrt())
    }

    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.model.layout().index_of(name).map(|i| self.theta[i])
    }

    /// Coefficient table at confidence level `level` (percent).
    pub fn report(&self, level: f64) -> Report {
        let zc = z_critical(level);
        let layout = self.model.layout();
        let names = layout.names();
        let mut rows = Vec::new();
        let coef_row = |i: usize| {
            let est = self.theta[i];
            let se = self.se(i);
            let z = se.map(|s| est / s);
            ReportRow {
                equation: "_t".into(),
                name: names[i].clone(),
                kind: RowKind::Coefficient,
                estimate: est,
                se,
                z,
                p: z.map(two_sided_p),
                ci: se.map(|s| (est - zc * s, est + zc * s)),
            }
        };
        for i in layout.fixed() {
            rows.push(coef_row(i));
        }
        for r in layout.tvc() {
            for i in r.clone() {
                rows.push(coef_row(i));
            }
        }
        for lvl in self.model.levels() {
            for (d, label) in lvl.design.iter().zip(&lvl.labels) {
                let name = match d {
                    Some(c) => format!("{}#{}[{}]", self.model.covariates()[*c], label, lvl.name),
                    None => format!("{}[{}]", label, lvl.name),
                };
                rows.push(ReportRow {
                    equation: "_t".into(),
                    name,
                    kind: RowKind::Loading,
                    estimate: 1.0,
                    se: None,
                    z: None,
                    p: None,
                    ci: None,
                });
            }
        }
        let mut splines_hidden = false;
        for i in layout.baseline() {
            if names[i].starts_with("_rcs") {
                splines_hidden = true;
            } else {
                rows.push(coef_row(i));
            }
        }
        for (l, lvl) in self.model.levels().iter().enumerate() {
            rows.extend(self.re_rows(l, &lvl.name, zc));
        }
        Report { level, n_obs: self.summary.records, loglik: self.loglik, rows, splines_hidden }
    }

    fn re_rows(&self, level: usize, name: &str, zc: f64) -> Vec<ReportRow> {
        let lvl = &self.model.levels()[level];
        let range = self.model.layout().re()[level].clone();
        let s = &lvl.structure;
        let q = s.dim();
        let mut out = Vec::new();
        let sd_row = |label: String, est_log: f64, se_log: Option<f64>| ReportRow {
            equation: name.to_string(),
            name: label,
            kind: RowKind::Sd,
            estimate: est_log.exp(),
            se: se_log.map(|v| est_log.exp() * v),
            z: None,
            p: None,
            ci: se_log.map(|v| ((est_log - zc * v).exp(), (est_log + zc * v).exp())),
        };
        let corr_row = |label: String, est_atanh: f64, se_atanh: Option<f64>| {
            let rho = est_atanh.tanh();
            ReportRow {
                equation: name.to_string(),
                name: label,
                kind: RowKind::Corr,
                estimate: rho,
                se: se_atanh.map(|v| (1.0 - rho * rho) * v),
                z: None,
                p: None,
                ci: se_atanh.map(|v| ((est_atanh - zc * v).tanh(), (est_atanh + zc * v).tanh())),
            }
        };
        match s.kind() {
            CovarianceKind::Diagonal => {
                for (k, label) in lvl.labels.iter().enumerate() {
                    let i = range.start + k;
                    out.push(sd_row(format!("sd({label})"), self.theta[i], self.se(i)));
                }
            }
            CovarianceKind::Identity => {
                let i = range.start;
                out.push(sd_row(format!("sd({})", lvl.labels.join(" ")), self.theta[i], self.se(i)));
            }
            CovarianceKind::Exchangeable | CovarianceKind::Unstructured => {
                for k in 0..q {
                    let g = |p: &[f64]| s.assemble(p)[(k, k)].sqrt().ln();
                    let (v, se) = self.delta_block(range.clone(), g);
                    out.push(sd_row(format!("sd({})", lvl.labels[k]), v, se));
                    if s.kind() == CovarianceKind::Exchangeable {
                        break;
                    }
                }
                if s.kind() == CovarianceKind::Exchangeable {
                    let g = |p: &[f64]| exchangeable_corr(q, p[1]).atanh();
                    let (v, se) = self.delta_block(range.clone(), g);
                    out.push(corr_row(format!("corr({})", lvl.labels.join(" ")), v, se));
                } else {
                    for i in 0..q {
                        for j in 0..i {
                            let g = |p: &[f64]| {
                                let m = s.assemble(p);
                                (m[(i, j)] / (m[(i, i)] * m[(j, j)]).sqrt()).atanh()
                            };
                            let (v, se) = self.delta_block(range.clone(), g);
                            out.push(corr_row(format!("corr({},{})", lvl.labels[j], lvl.labels[i]), v, se));
                        }
                    }
                }
            }
        }
        out
    }

    /// Value and delta-method SE of `g` applied to the parameter block `range`.
    fn delta_block<G: Fn(&[f64]) -> f64>(&self, range: core::ops::Range<usize>, g: G) -> (f64, Option<f64>) {
        let p0 = &self.theta[range.clone()];
        let v = g(p0);
        let Some(vc) = &self.vcov else { return (v, None) };
        let mut f = |p: &[f64]| g(p);
        let grad = optim::numeric_gradient(&mut f, p0);
        let mut var = 0.0;
        for (a, ga) in range.clone().zip(&grad) {
            for (b, gb) in range.clone().zip(&grad) {
                var += ga * vc[(a, b)] * gb;
            }
        }
        (v, Some(var.max(0.0).sqrt()))
    }

    /// Iteration log in the `Iteration k: log likelihood = ...` format.
    pub fn iteration_log(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, r: &IterationRecord| {
            let _ = write!(s, "Iteration {}:   log likelihood = {}", r.iteration, sig(r.value, 8));
            if r.not_concave {
                s.push_str("  (not concave)");
            }
            s.push('\n');
        };
        if !self.model.levels().is_empty() {
            s.push_str("Fitting fixed effects model:\n\n");
            for r in &self.fixed_history {
                line(&mut s, r);
            }
            s.push_str("\nFitting full model:\n\n");
        }
        for r in &self.history {
            line(&mut s, r);
        }
        s
    }
}

/// Format with `digits` significant digits, without exponent for moderate values.
pub fn sig(v: f64, digits: usize) -> String {
    if !v.is_finite() {
        return if v.is_nan() { ".".into() } else { format!("{v}") };
    }
    if v == 0.0 {
        return "0".into();
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-5..=9).contains(&mag) {
        return format!("{:.*e}", digits.saturating_sub(1), v);
    }
    let decimals = (digits as i32 - 1 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rule = "-".repeat(78);
        writeln!(f, "Mixed effects survival model                    Number of obs     = {:>10}", self.n_obs)?;
        writeln!(f, "Log likelihood = {}", sig(self.loglik, 8))?;
        writeln!(f, "{rule}")?;
        let lv = format!("[{}% Conf. Interval]", sig(self.level, 3).trim_end_matches('0').trim_end_matches('.'));
        writeln!(f, "{:>13}|{:>11} {:>11} {:>8} {:>7} {:>26}", "", "Coef.", "Std. Err.", "z", "P>|z|", lv)?;
        let mut eq = "";
        for r in &self.rows {
            if r.equation != eq {
                writeln!(f, "{}+{}", "-".repeat(13), "-".repeat(64))?;
                writeln!(f, "{:<13}|", format!("{}:", r.equation))?;
                eq = &r.equation;
            }
            let name = if r.name.chars().count() > 12 {
                let head: String = r.name.chars().take(11).collect();
                format!("{head}~")
            } else {
                r.name.clone()
            };
            let opt = |v: Option<f64>| v.map_or(".".to_string(), |x| sig(x, 7));
            match r.kind {
                RowKind::Loading => writeln!(f, "{name:>12} | {:>10} {:>11} {:>8} {:>7} {:>12} {:>12}", "1", ".", ".", ".", ".", ".")?,
                RowKind::Sd | RowKind::Corr => {
                    let (lo, hi) = r.ci.map_or((".".into(), ".".into()), |(a, b)| (sig(a, 7), sig(b, 7)));
                    writeln!(f, "{name:>12} | {:>10} {:>11} {:>8} {:>7} {lo:>12} {hi:>12}", sig(r.estimate, 7), opt(r.se), "", "")?
                }
                RowKind::Coefficient => {
                    let (lo, hi) = r.ci.map_or((".".into(), ".".into()), |(a, b)| (sig(a, 7), sig(b, 7)));
                    writeln!(
                        f,
                        "{name:>12} | {:>10} {:>11} {:>8} {:>7} {lo:>12} {hi:>12}",
                        sig(r.estimate, 7),
                        opt(r.se),
                        r.z.map_or(".".into(), |z| format!("{z:.2}")),
                        r.p.map_or(".".into(), |p| format!("{p:.3}")),
                    )?
                }
            }
        }
        writeln!(f, "{rule}")?;
        if self.splines_hidden {
            writeln!(f, "    Warning: Baseline spline coefficients not shown")?;
        }
        Ok(())
    }
}
