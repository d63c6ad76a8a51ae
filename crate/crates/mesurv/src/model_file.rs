//! Self-contained model files: specification, spline bases, estimates and
//! their covariance, stored as JSON with every float written as decimal text
//! with 17 significant digits.

use std::io::{Read, Write};

use mesurv_core::data::DataSummary;
use mesurv_core::linalg::Matrix;
use mesurv_core::model::TvcSpec;
use mesurv_core::{
    CovarianceKind, FamilyKind, FittedModel, IntegrationMethod, IntegrationSettings, KnotVector, Model, ModelSpec,
    ReDistribution, ReEquation, SplineBasis,
};
use serde::{Deserialize, Serialize};

pub const FORMAT_NAME: &str = "mesurv-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelFileError {
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (format '{0}')")]
    Format(String),
    #[error("model file version {found} is newer than the supported version {FORMAT_VERSION}")]
    Version { found: u32 },
    #[error("models with user-defined hazard families cannot be saved")]
    UserFamily,
    #[error("model file: invalid number '{0}'")]
    Number(String),
    #[error("model file: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] mesurv_core::Error),
}

/// Text form of an f64 that parses back to the identical value.
fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn parse_num(s: &str) -> Result<f64, ModelFileError> {
    s.trim().parse::<f64>().map_err(|_| ModelFileError::Number(s.to_string()))
}

fn nums(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| num(*x)).collect()
}

fn parse_nums(v: &[String]) -> Result<Vec<f64>, ModelFileError> {
    v.iter().map(|s| parse_num(s)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixText {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub values: Vec<String>,
}

impl MatrixText {
    fn from_matrix(m: &Matrix) -> Self {
        Self { rows: m.rows(), cols: m.cols(), values: nums(m.as_slice()) }
    }

    fn to_matrix(&self) -> Result<Matrix, ModelFileError> {
        Matrix::from_row_major(self.rows, self.cols, parse_nums(&self.values)?)
            .map_err(|e| ModelFileError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisText {
    /// Knots on the log-time scale.
    pub low: String,
    pub interior: Vec<String>,
    pub high: String,
    pub transform: Option<MatrixText>,
}

impl BasisText {
    fn from_basis(b: &SplineBasis) -> Self {
        let k = b.knots();
        Self {
            low: num(k.low()),
            interior: nums(k.interior()),
            high: num(k.high()),
            transform: b.transform().map(MatrixText::from_matrix),
        }
    }

    fn to_basis(&self) -> Result<SplineBasis, ModelFileError> {
        let kv = KnotVector::new(parse_num(&self.low)?, parse_nums(&self.interior)?, parse_num(&self.high)?)
            .map_err(mesurv_core::Error::from)?;
        let t = self.transform.as_ref().map(MatrixText::to_matrix).transpose()?;
        Ok(SplineBasis::from_parts(kv, t).map_err(mesurv_core::Error::from)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvcText {
    pub covariate: String,
    pub df: usize,
    pub knots: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReText {
    pub level: String,
    pub covariates: Vec<String>,
    pub constant: bool,
    pub covariance: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationText {
    pub method: String,
    pub points: usize,
    pub adapt_iterations: usize,
    pub adapt_tolerance: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecText {
    pub family: String,
    pub df: Option<usize>,
    pub knots: Option<Vec<String>>,
    pub fixed: Vec<String>,
    pub tvc: Vec<TvcText>,
    pub random: Vec<ReText>,
    pub covariance: String,
    /// `gaussian` or `t`.
    pub distribution: String,
    pub t_dof: Option<String>,
    pub integration: IntegrationText,
    pub relative_survival: bool,
    pub orthogonalize: bool,
    pub orthogonalize_tvc: bool,
    pub cumhazard_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryText {
    pub records: usize,
    pub events: usize,
    pub time_at_risk: String,
    pub min_entry: String,
    pub max_exit: String,
    pub clusters: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub spec: SpecText,
    pub baseline: Option<BasisText>,
    pub tvc_bases: Vec<BasisText>,
    pub parameters: Vec<String>,
    pub theta: Vec<String>,
    pub vcov: Option<MatrixText>,
    pub loglik: String,
    pub converged: bool,
    pub iterations: usize,
    pub grad_max: String,
    pub data: SummaryText,
}

fn kind_opt<T>(v: Option<T>, what: &str, s: &str) -> Result<T, ModelFileError> {
    v.ok_or_else(|| ModelFileError::Invalid(format!("unknown {what} '{s}'")))
}

impl ModelFile {
    pub fn from_fit(fit: &FittedModel) -> Result<Self, ModelFileError> {
        let model = &fit.model;
        let s = model.spec();
        if s.family == FamilyKind::User || s.user.is_some() {
            return Err(ModelFileError::UserFamily);
        }
        let (distribution, t_dof) = match s.distribution {
            ReDistribution::Gaussian => ("gaussian".to_string(), None),
            ReDistribution::StudentT { dof } => ("t".to_string(), Some(num(dof))),
        };
        let spec = SpecText {
            family: s.family.name().into(),
            df: s.df,
            knots: s.knots.as_deref().map(nums),
            fixed: s.fixed.clone(),
            tvc: s
                .tvc
                .iter()
                .map(|t| TvcText { covariate: t.covariate.clone(), df: t.df, knots: t.knots.as_deref().map(nums) })
                .collect(),
            random: s
                .random
                .iter()
                .map(|r| ReText {
                    level: r.level.clone(),
                    covariates: r.covariates.clone(),
                    constant: r.constant,
                    covariance: r.covariance.map(|c| c.name().to_string()),
                })
                .collect(),
            covariance: s.covariance.name().into(),
            distribution,
            t_dof,
            integration: IntegrationText {
                method: s.integration.method.name().into(),
                points: s.integration.points,
                adapt_iterations: s.integration.adapt_iterations,
                adapt_tolerance: num(s.integration.adapt_tolerance),
                seed: s.integration.seed,
            },
            relative_survival: s.relative_survival,
            orthogonalize: s.orthogonalize,
            orthogonalize_tvc: s.orthogonalize_tvc,
            cumhazard_nodes: s.cumhazard_nodes,
        };
        let sm = &fit.summary;
        Ok(Self {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            spec,
            baseline: model.baseline_basis().map(BasisText::from_basis),
            tvc_bases: model.tvc_terms().iter().map(|t| BasisText::from_basis(&t.basis)).collect(),
            parameters: model.layout().names().to_vec(),
            theta: nums(&fit.theta),
            vcov: fit.vcov.as_ref().map(MatrixText::from_matrix),
            loglik: num(fit.loglik),
            converged: fit.converged,
            iterations: fit.iterations,
            grad_max: num(fit.grad_max),
            data: SummaryText {
                records: sm.records,
                events: sm.events,
                time_at_risk: num(sm.time_at_risk),
                min_entry: num(sm.min_entry),
                max_exit: num(sm.max_exit),
                clusters: fit.n_clusters.clone(),
            },
        })
    }

    fn model_spec(&self) -> Result<ModelSpec, ModelFileError> {
        let s = &self.spec;
        let family = FamilyKind::parse(&s.family).map_err(mesurv_core::Error::from)?;
        if family == FamilyKind::User {
            return Err(ModelFileError::UserFamily);
        }
        let mut spec = ModelSpec::new(family);
        spec.df = s.df;
        spec.knots = s.knots.as_deref().map(parse_nums).transpose()?;
        spec.fixed = s.fixed.clone();
        spec.tvc = s
            .tvc
            .iter()
            .map(|t| {
                Ok(TvcSpec { covariate: t.covariate.clone(), df: t.df, knots: t.knots.as_deref().map(parse_nums).transpose()? })
            })
            .collect::<Result<_, ModelFileError>>()?;
        spec.random = s
            .random
            .iter()
            .map(|r| {
                let covariance = r
                    .covariance
                    .as_deref()
                    .map(|c| kind_opt(CovarianceKind::parse(c), "covariance", c))
                    .transpose()?;
                Ok(ReEquation { level: r.level.clone(), covariates: r.covariates.clone(), constant: r.constant, covariance })
            })
            .collect::<Result<_, ModelFileError>>()?;
        spec.covariance = kind_opt(CovarianceKind::parse(&s.covariance), "covariance", &s.covariance)?;
        spec.distribution = match (s.distribution.as_str(), &s.t_dof) {
            ("gaussian", _) => ReDistribution::Gaussian,
            ("t", Some(d)) => ReDistribution::StudentT { dof: parse_num(d)? },
            (other, _) => return Err(ModelFileError::Invalid(format!("unknown distribution '{other}'"))),
        };
        let i = &s.integration;
        spec.integration = IntegrationSettings {
            method: kind_opt(IntegrationMethod::parse(&i.method), "integration method", &i.method)?,
            points: i.points,
            adapt_iterations: i.adapt_iterations,
            adapt_tolerance: parse_num(&i.adapt_tolerance)?,
            seed: i.seed,
        };
        spec.relative_survival = s.relative_survival;
        spec.orthogonalize = s.orthogonalize;
        spec.orthogonalize_tvc = s.orthogonalize_tvc;
        spec.cumhazard_nodes = s.cumhazard_nodes;
        Ok(spec)
    }

    /// Rebuild the fitted model. No data is needed.
    pub fn to_fit(&self) -> Result<FittedModel, ModelFileError> {
        if self.format != FORMAT_NAME {
            return Err(ModelFileError::Format(self.format.clone()));
        }
        if self.version > FORMAT_VERSION {
            return Err(ModelFileError::Version { found: self.version });
        }
        let spec = self.model_spec()?;
        let baseline = self.baseline.as_ref().map(BasisText::to_basis).transpose()?;
        let tvc = self.tvc_bases.iter().map(BasisText::to_basis).collect::<Result<Vec<_>, _>>()?;
        let model = Model::from_parts(spec, baseline, tvc)?;
        if model.layout().names() != self.parameters.as_slice() {
            return Err(ModelFileError::Invalid("parameter names do not match the model definition".into()));
        }
        let theta = parse_nums(&self.theta)?;
        if theta.len() != model.n_params() {
            return Err(ModelFileError::Invalid("parameter vector has the wrong length".into()));
        }
        let vcov = self.vcov.as_ref().map(MatrixText::to_matrix).transpose()?;
        if let Some(v) = &vcov {
            if v.rows() != theta.len() || v.cols() != theta.len() {
                return Err(ModelFileError::Invalid("covariance matrix has the wrong size".into()));
            }
        }
        let d = &self.data;
        Ok(FittedModel {
            model,
            theta,
            vcov,
            loglik: parse_num(&self.loglik)?,
            converged: self.converged,
            iterations: self.iterations,
            grad_max: parse_num(&self.grad_max)?,
            summary: DataSummary {
                records: d.records,
                events: d.events,
                time_at_risk: parse_num(&d.time_at_risk)?,
                min_entry: parse_num(&d.min_entry)?,
                max_exit: parse_num(&d.max_exit)?,
            },
            n_clusters: d.clusters.clone(),
            fixed_loglik: None,
            fixed_history: Vec::new(),
            history: Vec::new(),
            adapt_failures: 0,
        })
    }

    pub fn write<W: Write>(&self, out: W) -> Result<(), ModelFileError> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn read<R: Read>(source: R) -> Result<Self, ModelFileError> {
        // Check the version before the full schema so newer files get a clear error.
        let value: serde_json::Value = serde_json::from_reader(source)?;
        let format = value.get("format").and_then(|v| v.as_str()).unwrap_or_default().to_string();
        if format != FORMAT_NAME {
            return Err(ModelFileError::Format(format));
        }
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version > u64::from(FORMAT_VERSION) {
            return Err(ModelFileError::Version { found: u32::try_from(version).unwrap_or(u32::MAX) });
        }
        Ok(serde_json::from_value(value)?)
    }
}
