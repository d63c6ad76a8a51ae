//! Model specification, parameter layout and the data-free hazard evaluator.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use alloc::{format, vec};
use core::ops::Range;
use num_traits::Float;

use crate::covariance::{CovarianceKind, CovarianceStructure, ReDistribution};
use crate::data::Dataset;
use crate::error::Error;
use crate::family::{self, Baseline, FamilyError, FamilyKind, UserHazard};
use crate::linalg::Matrix;
use crate::quadrature::{legendre_unit, IntegrationMethod, IntegrationSettings};
use crate::spline::{self, SplineBasis, SplineError, MAX_DF};

pub const DEFAULT_CUMHAZARD_NODES: usize = 30;

/// A covariate × spline-of-log-time interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct TvcSpec {
    pub covariate: String,
    pub df: usize,
    /// Interior knots on the time scale; overrides `df` when given.
    pub knots: Option<Vec<f64>>,
}

/// Random effects at one level of the hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct ReEquation {
    pub level: String,
    /// Covariates with random coefficients.
    pub covariates: Vec<String>,
    /// Include a random intercept.
    pub constant: bool,
    /// Overrides [`ModelSpec::covariance`] for this level.
    pub covariance: Option<CovarianceKind>,
}

impl ReEquation {
    pub fn intercept(level: &str) -> Self {
        Self { level: level.to_string(), covariates: Vec::new(), constant: true, covariance: None }
    }

    /// Parse `"level: var1 var2 [noconstant]"` (commas also separate vars).
    pub fn parse(s: &str) -> Result<Self, Error> {
        let (level, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::spec(format!("random-effect equation '{s}' must look like 'level: vars'")))?;
        let level = level.trim();
        if level.is_empty() {
            return Err(Error::spec(format!("random-effect equation '{s}' has no level name")));
        }
        let mut eq = Self::intercept(level);
        for tok in rest.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
            match tok {
                "noconstant" | "nocons" | "noconst" => eq.constant = false,
                v => eq.covariates.push(v.to_string()),
            }
        }
        if eq.dim() == 0 {
            return Err(Error::spec(format!("random-effect equation for '{level}' has no terms")));
        }
        Ok(eq)
    }

    pub fn dim(&self) -> usize {
        self.covariates.len() + usize::from(self.constant)
    }
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub family: FamilyKind,
    /// Baseline spline degrees of freedom.
    pub df: Option<usize>,
    /// Baseline interior knots on the time scale; overrides `df`.
    pub knots: Option<Vec<f64>>,
    pub fixed: Vec<String>,
    pub tvc: Vec<TvcSpec>,
    /// Random-effect equations, highest level first.
    pub random: Vec<ReEquation>,
    pub covariance: CovarianceKind,
    pub distribution: ReDistribution,
    pub integration: IntegrationSettings,
    /// Expected rates enter the hazard (relative survival).
    pub relative_survival: bool,
    pub orthogonalize: bool,
    pub orthogonalize_tvc: bool,
    pub cumhazard_nodes: usize,
    pub user: Option<Arc<dyn UserHazard>>,
}

impl ModelSpec {
    pub fn new(family: FamilyKind) -> Self {
        Self {
            family,
            df: None,
            knots: None,
            fixed: Vec::new(),
            tvc: Vec::new(),
            random: Vec::new(),
            covariance: CovarianceKind::Diagonal,
            distribution: ReDistribution::Gaussian,
            integration: IntegrationSettings::default(),
            relative_survival: false,
            orthogonalize: true,
            orthogonalize_tvc: true,
            cumhazard_nodes: DEFAULT_CUMHAZARD_NODES,
            user: None,
        }
    }

    pub fn fixed<I: IntoIterator<Item = S>, S: Into<String>>(mut self, vars: I) -> Self {
        self.fixed = vars.into_iter().map(Into::into).collect();
        self
    }

    pub fn df(mut self, df: usize) -> Self {
        self.df = Some(df);
        self
    }

    pub fn random(mut self, eq: ReEquation) -> Self {
        self.random.push(eq);
        self
    }

    pub fn tvc(mut self, covariate: &str, df: usize) -> Self {
        self.tvc.push(TvcSpec { covariate: covariate.to_string(), df, knots: None });
        self
    }

    pub fn integration(mut self, settings: IntegrationSettings) -> Self {
        self.integration = settings;
        self
    }

    /// The same model without random effects.
    pub fn fixed_only(&self) -> Self {
        let mut s = self.clone();
        s.random.clear();
        s
    }

    /// Covariates the model reads, in first-appearance order.
    pub fn covariates(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut push = |v: &String| {
            if !out.contains(v) {
                out.push(v.clone());
            }
        };
        self.fixed.iter().for_each(&mut push);
        self.tvc.iter().for_each(|t| push(&t.covariate));
        self.random.iter().flat_map(|r| r.covariates.iter()).for_each(&mut push);
        out
    }

    fn validate(&self) -> Result<(), Error> {
        if self.family.uses_spline() {
            match (&self.knots, self.df) {
                (Some(k), _) if k.len() + 1 > MAX_DF => return Err(SplineError::DfOutOfRange.into()),
                (None, Some(df)) if !(1..=MAX_DF).contains(&df) => return Err(SplineError::DfOutOfRange.into()),
                (None, None) => return Err(FamilyError::MissingBaseline(self.family.name()).into()),
                _ => {}
            }
        }
        if self.family == FamilyKind::User && self.user.is_none() {
            return Err(FamilyError::MissingCallback.into());
        }
        for t in &self.tvc {
            if !self.fixed.contains(&t.covariate) {
                return Err(Error::spec(format!("tvc covariate '{}' must also be a fixed covariate", t.covariate)));
            }
            match &t.knots {
                Some(k) if k.len() + 1 > MAX_DF => return Err(SplineError::DfOutOfRange.into()),
                None if !(1..=MAX_DF).contains(&t.df) => return Err(SplineError::DfOutOfRange.into()),
                _ => {}
            }
        }
        let mut seen: Vec<&str> = Vec::new();
        for r in &self.random {
            if seen.contains(&r.level.as_str()) {
                return Err(Error::spec(format!("level '{}' has two random-effect equations", r.level)));
            }
            seen.push(&r.level);
            if r.dim() == 0 {
                return Err(Error::spec(format!("random-effect equation for '{}' has no terms", r.level)));
            }
        }
        if let ReDistribution::StudentT { dof } = self.distribution {
            if !(dof > 2.0) {
                return Err(Error::spec("t-distributed random effects need degrees of freedom above 2"));
            }
            if self.integration.method != IntegrationMethod::MonteCarlo && !self.random.is_empty() {
                return Err(Error::spec("t-distributed random effects require intmethod mcarlo"));
            }
        }
        if self.integration.points == 0 {
            return Err(Error::spec("intpoints must be positive"));
        }
        if self.cumhazard_nodes == 0 {
            return Err(Error::spec("cumulative hazard nodes must be positive"));
        }
        Ok(())
    }
}

/// Named slices of the packed parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    names: Vec<String>,
    fixed: Range<usize>,
    tvc: Vec<Range<usize>>,
    baseline: Range<usize>,
    re: Vec<Range<usize>>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn fixed(&self) -> Range<usize> {
        self.fixed.clone()
    }

    pub fn tvc(&self) -> &[Range<usize>] {
        &self.tvc
    }

    pub fn baseline(&self) -> Range<usize> {
        self.baseline.clone()
    }

    pub fn re(&self) -> &[Range<usize>] {
        &self.re
    }

    /// Index of the first random-effect parameter (the fixed-only prefix length).
    pub fn n_fixed_part(&self) -> usize {
        self.baseline.end
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Parameter vector viewed through a [`ParamLayout`].
#[derive(Debug, Clone)]
pub struct Params<'a> {
    pub beta: &'a [f64],
    pub tvc: Vec<&'a [f64]>,
    pub baseline: &'a [f64],
    pub re: Vec<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvcTerm {
    /// Index into [`Model::covariates`].
    pub covariate: usize,
    pub basis: SplineBasis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelDesign {
    pub name: String,
    /// Per random effect: covariate index, or `None` for the intercept.
    pub design: Vec<Option<usize>>,
    /// Display labels such as `M1`.
    pub labels: Vec<String>,
    pub structure: CovarianceStructure,
}

/// A resolved model: knots, bases, layout and random-effect designs.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    covariates: Vec<String>,
    fixed: Vec<usize>,
    tvc: Vec<TvcTerm>,
    baseline: Option<SplineBasis>,
    levels: Vec<LevelDesign>,
    layout: ParamLayout,
    gl_nodes: Vec<f64>,
    gl_weights: Vec<f64>,
}

impl Model {
    /// Resolve `spec` against `data`: knot placement, orthogonalization and
    /// covariate lookup.
    pub fn build(spec: ModelSpec, data: &Dataset) -> Result<Self, Error> {
        spec.validate()?;
        for c in spec.covariates() {
            data.covariate_index(&c)?;
        }
        for r in &spec.random {
            if !data.level_names().contains(&r.level) {
                return Err(crate::data::DataError::UnknownLevel(r.level.clone()).into());
            }
        }
        if spec.relative_survival && !data.has_expected_rates() {
            return Err(Error::spec("relative survival needs an expected-rate column"));
        }
        let needs_events = spec.family.uses_spline() || !spec.tvc.is_empty();
        let elt = data.event_log_times();
        if needs_events && elt.is_empty() {
            return Err(SplineError::NoEvents.into());
        }
        let sample: Vec<f64> = data.records().iter().map(|r| r.exit.ln()).collect();
        let make = |df: Option<usize>, knots: &Option<Vec<f64>>, orth: bool| -> Result<SplineBasis, Error> {
            let kv = match knots {
                Some(k) => spline::knots_from_times(&elt, k)?,
                None => spline::place_default_knots(&elt, df.unwrap_or(1))?,
            };
            Ok(if orth { SplineBasis::orthogonalized(kv, &sample)? } else { SplineBasis::plain(kv) })
        };
        let baseline = if spec.family.uses_spline() {
            Some(make(spec.df, &spec.knots, spec.orthogonalize)?)
        } else {
            None
        };
        let tvc = spec
            .tvc
            .iter()
            .map(|t| make(Some(t.df), &t.knots, spec.orthogonalize_tvc))
            .collect::<Result<Vec<_>, _>>()?;
        Self::assemble(spec, baseline, tvc)
    }

    /// Rebuild from stored bases (no data needed).
    pub fn from_parts(spec: ModelSpec, baseline: Option<SplineBasis>, tvc: Vec<SplineBasis>) -> Result<Self, Error> {
        spec.validate()?;
        if spec.family.uses_spline() != baseline.is_some() {
            return Err(Error::spec("baseline spline does not match the family"));
        }
        if tvc.len() != spec.tvc.len() {
            return Err(Error::spec("number of tvc bases does not match the model definition"));
        }
        Self::assemble(spec, baseline, tvc)
    }

    fn assemble(spec: ModelSpec, baseline: Option<SplineBasis>, tvc_bases: Vec<SplineBasis>) -> Result<Self, Error> {
        let covariates = spec.covariates();
        let idx = |name: &str| covariates.iter().position(|c| c == name).expect("covariate listed");
        let fixed: Vec<usize> = spec.fixed.iter().map(|f| idx(f)).collect();
        let tvc: Vec<TvcTerm> = spec
            .tvc
            .iter()
            .zip(tvc_bases)
            .map(|(t, basis)| TvcTerm { covariate: idx(&t.covariate), basis })
            .collect();

        let mut names: Vec<String> = spec.fixed.clone();
        let fixed_range = 0..names.len();
        let mut tvc_ranges = Vec::new();
        for (t, term) in spec.tvc.iter().zip(&tvc) {
            let start = names.len();
            let k = term.basis.df();
            for j in 1..=k {
                names.push(if k == 1 { format!("{}#rcs()", t.covariate) } else { format!("{}#rcs():{j}", t.covariate) });
            }
            tvc_ranges.push(start..names.len());
        }
        let start = names.len();
        let spline_df = baseline.as_ref().map_or(0, |b| b.df());
        names.extend(family::baseline_names(spec.family, spline_df, spec.user.as_deref()));
        let baseline_range = start..names.len();

        let mut levels = Vec::new();
        let mut re_ranges = Vec::new();
        let mut m = 0;
        for eq in &spec.random {
            let mut design: Vec<Option<usize>> = eq.covariates.iter().map(|c| Some(idx(c))).collect();
            if eq.constant {
                design.push(None);
            }
            let labels: Vec<String> = design
                .iter()
                .map(|_| {
                    m += 1;
                    format!("M{m}")
                })
                .collect();
            let structure = CovarianceStructure::new(eq.covariance.unwrap_or(spec.covariance), design.len())
                .map_err(Error::Spec)?;
            let start = names.len();
            names.extend(structure.param_names(&labels));
            re_ranges.push(start..names.len());
            levels.push(LevelDesign { name: eq.level.clone(), design, labels, structure });
        }
        let (gl_nodes, gl_weights) = legendre_unit(spec.cumhazard_nodes);
        Ok(Self {
            spec,
            covariates,
            fixed,
            tvc,
            baseline,
            levels,
            layout: ParamLayout { names, fixed: fixed_range, tvc: tvc_ranges, baseline: baseline_range, re: re_ranges },
            gl_nodes,
            gl_weights,
        })
    }

    /// The same structure without random effects (bases are shared).
    pub fn fixed_only(&self) -> Self {
        Self::assemble(self.spec.fixed_only(), self.baseline.clone(), self.tvc.iter().map(|t| t.basis.clone()).collect())
            .expect("fixed-only model of a valid model")
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn family(&self) -> FamilyKind {
        self.spec.family
    }

    /// Covariate names in the order expected by `x` arguments.
    pub fn covariates(&self) -> &[String] {
        &self.covariates
    }

    pub fn baseline_basis(&self) -> Option<&SplineBasis> {
        self.baseline.as_ref()
    }

    pub fn tvc_terms(&self) -> &[TvcTerm] {
        &self.tvc
    }

    pub fn levels(&self) -> &[LevelDesign] {
        &self.levels
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.layout.len()
    }

    pub fn decode<'a>(&self, theta: &'a [f64]) -> Params<'a> {
        assert_eq!(theta.len(), self.layout.len(), "parameter vector length");
        Params {
            beta: &theta[self.layout.fixed.clone()],
            tvc: self.layout.tvc.iter().map(|r| &theta[r.clone()]).collect(),
            baseline: &theta[self.layout.baseline.clone()],
            re: self.layout.re.iter().map(|r| &theta[r.clone()]).collect(),
        }
    }

    pub fn baseline<'a>(&'a self, p: &Params<'a>) -> Baseline<'a> {
        Baseline {
            kind: self.spec.family,
            params: p.baseline,
            basis: self.baseline.as_ref(),
            user: self.spec.user.as_deref(),
        }
    }

    /// `xᵀβ`.
    pub fn xb(&self, x: &[f64], p: &Params<'_>) -> f64 {
        self.fixed.iter().zip(p.beta).map(|(&i, b)| x[i] * b).sum()
    }

    /// Time-dependent effects at `log t` and their derivative in `log t`.
    pub fn tvc_at(&self, x: &[f64], log_t: f64, p: &Params<'_>) -> (f64, f64) {
        let mut v = 0.0;
        let mut d = 0.0;
        for (term, coef) in self.tvc.iter().zip(&p.tvc) {
            let xv = x[term.covariate];
            if xv != 0.0 {
                let (s, ds) = term.basis.dot(log_t, coef);
                v += xv * s;
                d += xv * ds;
            }
        }
        (v, d)
    }

    /// Linear predictor `xᵀβ + u + Σ tvc` at `t` (no intercept or baseline).
    pub fn eta(&self, x: &[f64], t: f64, u: f64, p: &Params<'_>) -> f64 {
        self.xb(x, p) + u + self.tvc_at(x, t.ln(), p).0
    }

    /// `log h(t | u)` where `u` is the random-effect contribution.
    pub fn log_hazard(&self, x: &[f64], t: f64, u: f64, p: &Params<'_>) -> f64 {
        let b = self.baseline(p);
        let (tv, dtv) = self.tvc_at(x, t.ln(), p);
        b.log_hazard(t, b.intercept() + self.xb(x, p) + u + tv, dtv)
    }

    /// `H(t | u)`.
    pub fn cum_hazard(&self, x: &[f64], t: f64, u: f64, p: &Params<'_>) -> f64 {
        let b = self.baseline(p);
        let xb = b.intercept() + self.xb(x, p) + u;
        if self.spec.family == FamilyKind::RoystonParmar {
            let tv = self.tvc_at(x, t.ln(), p).0;
            return b.cum_hazard_closed(t, xb + tv).unwrap_or(f64::NAN);
        }
        if self.tvc.is_empty() {
            if let Some(h) = b.cum_hazard_closed(t, xb) {
                return h;
            }
        }
        family::numeric_cum_hazard(t, &self.gl_nodes, &self.gl_weights, |s| self.log_hazard(x, s, u, p))
    }

    /// Whether `u` acts as a log-hazard shift for this family.
    pub fn proportional_in_u(&self) -> bool {
        match self.spec.family {
            FamilyKind::User => self.spec.user.as_ref().is_some_and(|u| u.proportional()),
            _ => true,
        }
    }

    /// Random-effect design vector `z` of level `level` for covariates `x`.
    pub fn re_design(&self, level: usize, x: &[f64]) -> Vec<f64> {
        self.levels[level].design.iter().map(|d| d.map_or(1.0, |i| x[i])).collect()
    }

    pub fn sigma(&self, level: usize, p: &Params<'_>) -> Matrix {
        self.levels[level].structure.assemble(p.re[level])
    }

    pub fn sigma_cholesky(&self, level: usize, p: &Params<'_>) -> Matrix {
        self.levels[level].structure.cholesky(p.re[level])
    }

    /// Gauss-Legendre rule on `[-1, 1]` used for numeric integrals over time.
    pub fn time_rule(&self) -> (&[f64], &[f64]) {
        (&self.gl_nodes, &self.gl_weights)
    }

    /// Starting values for the random-effect parameters (unit variances,
    /// zero correlations).
    pub fn re_start(&self) -> Vec<f64> {
        self.levels.iter().flat_map(|l| l.structure.start()).collect()
    }

    /// Coefficients making the baseline spline equal to `log t` exactly
    /// (plus the intercept shift they imply).
    pub fn log_time_spline_coefs(&self) -> Option<(Vec<f64>, f64)> {
        let basis = self.baseline.as_ref()?;
        let k = basis.df();
        let mut coef = vec![0.0; k];
        let mut shift = 0.0;
        match basis.transform() {
            None => coef[0] = 1.0,
            Some(t) => {
                // Orthogonalized column j = t[0][j] + Σ_{i≥1} t[i][j]·raw_i; solve the
                // upper-triangular system for raw coefficient e_1.
                for i in (1..=k).rev() {
                    let mut rhs = if i == 1 { 1.0 } else { 0.0 };
                    for j in i + 1..=k {
                        rhs -= t[(i, j)] * coef[j - 1];
                    }
                    coef[i - 1] = rhs / t[(i, i)];
                }
                for j in 1..=k {
                    shift -= t[(0, j)] * coef[j - 1];
                }
            }
        }
        Some((coef, shift))
    }
}
