//! Multilevel mixed-effects parametric survival models.
//!
//! `mesurv-core` holds the numerical side of the project: restricted cubic
//! spline bases, the hazard families (exponential, Weibull, Gompertz,
//! Royston-Parmar, log-hazard splines and user callbacks), random-effect
//! covariance structures, Gauss-Hermite / Monte-Carlo integration over nested
//! random effects, the marginal likelihood with relative-survival and
//! delayed-entry variants, quasi-Newton maximum likelihood, post-estimation
//! predictions and clustered survival-time simulation.
//!
//! The crate is `no_std` and only needs `alloc`. CSV ingestion, model files
//! and the command line live in the `mesurv` crate. Enabling the `parallel`
//! feature evaluates cluster contributions on a rayon pool; the reduction order
//! is fixed so results are identical to the sequential path.
#![no_std]
// `num_traits::Float` supplies the float methods under no_std; whenever std is
// linked anywhere in the build the inherent methods win and the import idles.
#![allow(unused_imports)]

extern crate alloc;
#[cfg(any(test, feature = "parallel"))]
extern crate std;

pub mod covariance;
pub mod data;
pub mod error;
pub mod estimation;
pub mod family;
pub mod likelihood;
pub mod linalg;
pub mod math;
pub mod model;
pub mod optim;
pub mod predict;
pub mod quadrature;
pub mod simulate;
pub mod spline;

pub use covariance::{CovarianceKind, CovarianceStructure, ReDistribution};
pub use data::{ClusterTree, Dataset, Frame, OutcomeRoles, SurvivalRecord};
pub use error::Error;
pub use estimation::{fit, FitOptions, FittedModel};
pub use family::{FamilyKind, UserHazard};
pub use model::{Model, ModelSpec, ReEquation, TvcSpec};
pub use predict::{predict, PredictionKind, PredictionRequest};
pub use quadrature::{IntegrationMethod, IntegrationSettings};
pub use spline::{KnotVector, SplineBasis};
