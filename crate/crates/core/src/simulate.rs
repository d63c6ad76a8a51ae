//! Clustered survival-time simulation by inverse-CDF sampling.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{DataError, Dataset, SurvivalRecord};
use crate::error::Error;
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimFamily {
    Exponential,
    Weibull,
    Gompertz,
}

impl SimFamily {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exponential" | "exp" => Some(Self::Exponential),
            "weibull" => Some(Self::Weibull),
            "gompertz" => Some(Self::Gompertz),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSpec {
    pub family: SimFamily,
    pub lambda: f64,
    /// Weibull shape or Gompertz rate; ignored for the exponential.
    pub gamma: f64,
    pub max_time: f64,
    pub seed: u64,
}

impl SimSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::spec("lambda must be positive"));
        }
        if !(self.max_time > 0.0) {
            return Err(Error::spec("maximum follow-up time must be positive"));
        }
        match self.family {
            SimFamily::Weibull if !(self.gamma > 0.0) => Err(Error::spec("Weibull gamma must be positive")),
            SimFamily::Gompertz if !self.gamma.is_finite() => Err(Error::spec("Gompertz gamma must be finite")),
            _ => Ok(()),
        }
    }

    /// Survival function at `t` with linear predictor `offset`.
    pub fn survival(&self, t: f64, offset: f64) -> f64 {
        let scale = self.lambda * offset.exp();
        let h = match self.family {
            SimFamily::Exponential => scale * t,
            SimFamily::Weibull => scale * t.powf(self.gamma),
            SimFamily::Gompertz => scale * crate::family::gompertz_integral(self.gamma, t),
        };
        (-h).exp()
    }

    /// Event time for the uniform draw `u` (survival probability), with
    /// administrative censoring at `max_time`.
    pub fn time_from_uniform(&self, u: f64, offset: f64) -> (f64, bool) {
        let target = -u.ln() / (self.lambda * offset.exp());
        let t = match self.family {
            SimFamily::Exponential => target,
            SimFamily::Weibull => target.powf(1.0 / self.gamma),
            SimFamily::Gompertz => {
                if self.gamma == 0.0 {
                    target
                } else {
                    let arg = self.gamma * target;
                    // A negative shape leaves a cured fraction: no event ever.
                    if arg > -1.0 {
                        arg.ln_1p() / self.gamma
                    } else {
                        f64::INFINITY
                    }
                }
            }
        };
        if t.is_finite() && t <= self.max_time {
            (t, true)
        } else {
            (self.max_time, false)
        }
    }
}

/// Uniform on the open interval (0, 1).
fn open_uniform<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Independent event times for each linear predictor in `offsets`.
pub fn simulate_times(spec: &SimSpec, offsets: &[f64]) -> Result<Vec<(f64, bool)>, Error> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(offsets.iter().map(|&o| spec.time_from_uniform(open_uniform(&mut rng), o)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovariateGen {
    Bernoulli(f64),
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
}

impl CovariateGen {
    fn draw<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            Self::Bernoulli(p) => f64::from(u8::from(rng.random::<f64>() < p)),
            Self::Normal { mean, sd } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + sd * z
            }
            Self::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDesign {
    pub n_clusters: usize,
    pub per_cluster: usize,
    /// Generated covariates, in output column order.
    pub covariates: Vec<(String, CovariateGen)>,
    /// Fixed effects by covariate name.
    pub beta: Vec<(String, f64)>,
    /// Random-effect design: covariate name, or `None` for an intercept.
    pub re_design: Vec<Option<String>>,
    /// Covariance of the cluster effects (positive semidefinite).
    pub re_sigma: Matrix,
}

/// Simulate `n_clusters × per_cluster` records with cluster effects
/// `b ~ N(0, Σ)` entering the linear predictor with unit coefficients.
///
/// Each cluster uses its own stream of the seeded generator, so a cluster's
/// records do not depend on how many clusters are generated.
pub fn simulate_clustered(design: &ClusterDesign, spec: &SimSpec) -> Result<Dataset, Error> {
    spec.validate()?;
    let names: Vec<String> = design.covariates.iter().map(|(n, _)| n.clone()).collect();
    let lookup = |n: &str| -> Result<usize, Error> {
        names.iter().position(|c| c == n).ok_or_else(|| DataError::UnknownCovariate(n.to_string()).into())
    };
    let beta: Vec<(usize, f64)> =
        design.beta.iter().map(|(n, b)| Ok((lookup(n)?, *b))).collect::<Result<_, Error>>()?;
    let re: Vec<Option<usize>> =
        design.re_design.iter().map(|d| d.as_deref().map(lookup).transpose()).collect::<Result<_, _>>()?;
    let q = re.len();
    if design.re_sigma.rows() != q || design.re_sigma.cols() != q {
        return Err(Error::spec(format!("random-effect covariance must be {q}×{q}")));
    }
    let chol = if q > 0 { Some(linalg::cholesky_semidefinite(&design.re_sigma)?) } else { None };
    let width = (design.n_clusters.max(1) as f64).log10().floor() as usize + 1;
    let mut records = Vec::with_capacity(design.n_clusters * design.per_cluster);
    let mut x = vec![0.0; names.len()];
    for c in 0..design.n_clusters {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(c as u64 + 1);
        let b: Vec<f64> = match &chol {
            Some(l) => {
                let z: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
                l.matvec(&z)
            }
            None => Vec::new(),
        };
        let id = format!("{:0width$}", c + 1);
        for _ in 0..design.per_cluster {
            for (v, (_, g)) in x.iter_mut().zip(&design.covariates) {
                *v = g.draw(&mut rng);
            }
            let mut offset: f64 = beta.iter().map(|&(i, bv)| x[i] * bv).sum();
            for (d, bv) in re.iter().zip(&b) {
                offset += d.map_or(1.0, |i| x[i]) * bv;
            }
            let (t, event) = spec.time_from_uniform(open_uniform(&mut rng), offset);
            records.push(SurvivalRecord {
                entry: 0.0,
                exit: t,
                event,
                covariates: x.clone(),
                expected_rate: None,
                cluster_path: vec![id.clone()],
            });
        }
    }
    Ok(Dataset::new(records, names, vec![String::from("clusterid")])?)
}
