//! Marginal log-likelihood over nested random effects.
//!
//! Random effects are integrated in standardized coordinates: at level `ℓ`,
//! `b_ℓ = L_ℓ z_ℓ` with `L_ℓ L_ℓᵀ = Σ_ℓ`, so a record's random-effect
//! contribution is `u = Σ_ℓ (L_ℓᵀ z_rℓ)ᵀ z_ℓ` where `z_rℓ` is its design
//! vector. Every built-in family is proportional in `u`, so each record is
//! reduced once per parameter vector to a small kernel and the quadrature only
//! evaluates `d·(log h₀ + u) − H₀·e^u`.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};
use num_traits::Float;

use crate::data::{ClusterNode, ClusterTree, Dataset};
use crate::error::Error;
use crate::linalg::Matrix;
use crate::math::log_sum_exp;
use crate::model::{Model, Params};
use crate::quadrature::{self, IntegrationMethod, LogTarget, NodeSet};

/// Per-record data in cluster order.
#[derive(Debug, Clone)]
struct RecordData {
    x: Vec<f64>,
    exit: f64,
    entry: f64,
    event: bool,
    rate: f64,
    /// Design vectors per level.
    z: Vec<Vec<f64>>,
}

/// A record reduced at one parameter vector.
#[derive(Debug, Clone, Copy)]
enum Kernel {
    Ph { event: bool, log_haz: f64, haz: f64, rate: f64, cum: f64, cum_entry: f64 },
    General,
}

/// Data bound to a model, ready for likelihood evaluation.
pub struct LikelihoodContext<'m> {
    model: &'m Model,
    records: Vec<RecordData>,
    tree: ClusterTree,
    nodes: Vec<NodeSet>,
    relative: bool,
    parallel: bool,
}

/// Result of one likelihood evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loglik: f64,
    /// Clusters whose adaptation failed and used non-adaptive nodes.
    pub adapt_failures: usize,
}

impl<'m> LikelihoodContext<'m> {
    pub fn new(model: &'m Model, data: &Dataset) -> Result<Self, Error> {
        let levels: Vec<&str> = model.levels().iter().map(|l| l.name.as_str()).collect();
        let tree = data.build_hierarchy(&levels)?;
        let cov_idx: Vec<usize> = model
            .covariates()
            .iter()
            .map(|c| data.covariate_index(c))
            .collect::<Result<_, _>>()?;
        let spec = model.spec();
        if spec.relative_survival && !data.has_expected_rates() {
            return Err(Error::spec("relative survival needs an expected-rate column"));
        }
        let records = tree
            .order()
            .iter()
            .map(|&r| {
                let rec = &data.records()[r];
                let x: Vec<f64> = cov_idx.iter().map(|&i| rec.covariates[i]).collect();
                let z = (0..model.levels().len()).map(|l| model.re_design(l, &x)).collect();
                RecordData {
                    exit: rec.exit,
                    entry: rec.entry,
                    event: rec.event,
                    rate: if spec.relative_survival { rec.expected_rate.unwrap_or(0.0) } else { 0.0 },
                    z,
                    x,
                }
            })
            .collect();
        let nodes = model
            .levels()
            .iter()
            .enumerate()
            .map(|(l, lvl)| quadrature::level_nodes(&spec.integration, lvl.structure.dim(), spec.distribution, l as u64))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { model, records, tree, nodes, relative: spec.relative_survival, parallel: true })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn tree(&self) -> &ClusterTree {
        &self.tree
    }

    /// Evaluate clusters on a rayon pool when the `parallel` feature is on.
    pub fn set_parallel(&mut self, on: bool) {
        self.parallel = on;
    }

    pub fn log_likelihood(&self, theta: &[f64]) -> f64 {
        self.evaluate(theta).loglik
    }

    pub fn evaluate(&self, theta: &[f64]) -> Evaluation {
        match self.prepare(theta) {
            Some(state) => {
                if self.model.levels().is_empty() {
                    let ll = (0..self.records.len()).map(|i| state.record_log_f(i, 0.0) + state.entry_shift(i)).sum();
                    Evaluation { loglik: nan_to_neg_inf(ll), adapt_failures: 0 }
                } else {
                    let parts = self.cluster_parts(&state);
                    let loglik = nan_to_neg_inf(parts.iter().sum());
                    Evaluation { loglik, adapt_failures: state.failures.load(Ordering::Relaxed) }
                }
            }
            None => Evaluation { loglik: f64::NEG_INFINITY, adapt_failures: 0 },
        }
    }

    /// Per-top-cluster log-likelihood contributions, in cluster order.
    pub fn cluster_log_likelihoods(&self, theta: &[f64]) -> Vec<f64> {
        match self.prepare(theta) {
            Some(state) if !self.model.levels().is_empty() => self.cluster_parts(&state),
            Some(state) => (0..self.records.len()).map(|i| state.record_log_f(i, 0.0) + state.entry_shift(i)).collect(),
            None => vec![f64::NEG_INFINITY; self.tree.clusters().len().max(1)],
        }
    }

    fn cluster_parts(&self, state: &State<'_, '_>) -> Vec<f64> {
        let top = self.tree.clusters();
        #[cfg(feature = "parallel")]
        {
            if self.parallel && top.len() > 1 {
                use rayon::prelude::*;
                return top.par_iter().map(|c| state.cluster(c)).collect();
            }
        }
        top.iter().map(|c| state.cluster(c)).collect()
    }

    fn prepare<'s>(&'s self, theta: &'s [f64]) -> Option<State<'s, 'm>> {
        if theta.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let model = self.model;
        let p = model.decode(theta);
        let ph = model.proportional_in_u();
        let mut kernels = Vec::with_capacity(self.records.len());
        for r in &self.records {
            if !ph {
                kernels.push(Kernel::General);
                continue;
            }
            let cum = model.cum_hazard(&r.x, r.exit, 0.0, &p);
            let cum_entry = if r.entry > 0.0 { model.cum_hazard(&r.x, r.entry, 0.0, &p) } else { 0.0 };
            if !(cum.is_finite() && cum >= 0.0 && cum_entry.is_finite()) {
                return None;
            }
            let (log_haz, haz) = if r.event {
                let lh = model.log_hazard(&r.x, r.exit, 0.0, &p);
                if lh.is_nan() {
                    return None;
                }
                (lh, lh.exp())
            } else {
                (0.0, 0.0)
            };
            kernels.push(Kernel::Ph { event: r.event, log_haz, haz, rate: r.rate, cum, cum_entry });
        }
        // w_{rℓ} = L_ℓᵀ z_{rℓ}
        let mut loadings = Vec::with_capacity(model.levels().len());
        for l in 0..model.levels().len() {
            let chol = model.sigma_cholesky(l, &p);
            let w: Vec<Vec<f64>> = self.records.iter().map(|r| chol.tmatvec(&r.z[l])).collect();
            loadings.push(w);
        }
        Some(State { ctx: self, params: p, kernels, loadings, failures: AtomicUsize::new(0) })
    }
}

fn nan_to_neg_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

struct State<'s, 'm> {
    ctx: &'s LikelihoodContext<'m>,
    params: Params<'s>,
    kernels: Vec<Kernel>,
    loadings: Vec<Vec<Vec<f64>>>,
    failures: AtomicUsize,
}

impl State<'_, '_> {
    /// `log f(T, d | u)` for the record at position `i`, survival from time 0.
    fn record_log_f(&self, i: usize, u: f64) -> f64 {
        match self.kernels[i] {
            Kernel::Ph { event, log_haz, haz, rate, cum, .. } => {
                let surv = -cum * u.exp();
                if !event {
                    surv
                } else if self.ctx.relative && rate > 0.0 {
                    (rate + haz * u.exp()).ln() + surv
                } else {
                    log_haz + u + surv
                }
            }
            Kernel::General => {
                let r = &self.ctx.records[i];
                let m = self.ctx.model;
                let cum = m.cum_hazard(&r.x, r.exit, u, &self.params);
                let mut v = -cum;
                if r.event {
                    let lh = m.log_hazard(&r.x, r.exit, u, &self.params);
                    v += if self.ctx.relative && r.rate > 0.0 { (r.rate + lh.exp()).ln() } else { lh };
                }
                nan_to_neg_inf(v)
            }
        }
    }

    /// `log S(t₀ | u)`.
    fn record_log_entry(&self, i: usize, u: f64) -> f64 {
        match self.kernels[i] {
            Kernel::Ph { cum_entry, .. } => -cum_entry * u.exp(),
            Kernel::General => {
                let r = &self.ctx.records[i];
                if r.entry > 0.0 {
                    -self.ctx.model.cum_hazard(&r.x, r.entry, u, &self.params)
                } else {
                    0.0
                }
            }
        }
    }

    /// Conditioning term for delayed entry without random effects.
    fn entry_shift(&self, i: usize) -> f64 {
        if self.ctx.records[i].entry > 0.0 {
            -self.record_log_entry(i, 0.0)
        } else {
            0.0
        }
    }

    /// First and second derivative of the record kernel in `u`.
    fn kernel_derivs(&self, i: usize, u: f64, entry: bool) -> Option<(f64, f64)> {
        match self.kernels[i] {
            Kernel::Ph { event, haz, rate, cum, cum_entry, .. } => {
                let eu = u.exp();
                if entry {
                    let v = -cum_entry * eu;
                    return Some((v, v));
                }
                let c = cum * eu;
                if !event {
                    Some((-c, -c))
                } else if self.ctx.relative && rate > 0.0 {
                    let a = haz * eu;
                    let s = rate + a;
                    Some((a / s - c, rate * a / (s * s) - c))
                } else {
                    Some((1.0 - c, -c))
                }
            }
            Kernel::General => None,
        }
    }

    fn cluster(&self, node: &ClusterNode) -> f64 {
        let ctx = self.ctx;
        let target = Target { state: self, node, entry: false };
        let num = self.top_integral(node, &target);
        let delayed = node.range.clone().any(|i| ctx.records[i].entry > 0.0);
        if !delayed {
            return nan_to_neg_inf(num);
        }
        let den_target = Target { state: self, node, entry: true };
        let den = self.top_integral(node, &den_target);
        nan_to_neg_inf(num - den)
    }

    /// `log ∫ F(z) φ(z) dz` at the top level, on nodes adapted to `target`
    /// when the method is adaptive.
    fn top_integral(&self, node: &ClusterNode, target: &Target<'_, '_, '_>) -> f64 {
        let ctx = self.ctx;
        let base = &ctx.nodes[0];
        let s = &ctx.model.spec().integration;
        if s.method != IntegrationMethod::AdaptiveHermite {
            return log_sum_exp(base.iter().map(|(z, lw)| lw + target.log_f(z)));
        }
        match quadrature::find_mode(target, s.adapt_iterations, s.adapt_tolerance) {
            Ok(a) => {
                let a = quadrature::refine_mean_variance(base, target, a, s.adapt_iterations, s.adapt_tolerance);
                let rule = quadrature::apply_adaptation(base, &a);
                log_sum_exp(rule.iter().map(|(z, lw)| lw + target.log_f(z)))
            }
            Err(_) => {
                self.failures.fetch_add(1, Ordering::Relaxed);
                log::warn!("adaptive quadrature failed for cluster '{}'; using non-adaptive nodes", node.id);
                log_sum_exp(base.iter().map(|(z, lw)| lw + target.log_f(z)))
            }
        }
    }

    /// Non-adaptive integral over level `level` for `node`, with `u` holding
    /// the contributions of the levels above (indexed by record position).
    fn integrate(&self, node: &ClusterNode, level: usize, u: &mut [f64], offset: usize, entry: bool) -> f64 {
        let rule = &self.ctx.nodes[level];
        let range = node.range.clone();
        let saved: Vec<f64> = u[range.start - offset..range.end - offset].to_vec();
        let w = &self.loadings[level];
        let leaf = level + 1 == self.ctx.model.levels().len();
        let mut terms = Vec::with_capacity(rule.len());
        for (z, lw) in rule.iter() {
            for (k, i) in range.clone().enumerate() {
                u[i - offset] = saved[k] + dot(&w[i], z);
            }
            let v = if leaf {
                self.sum_records(range.clone(), u, offset, entry)
            } else {
                node.children.iter().map(|c| self.integrate(c, level + 1, u, offset, entry)).sum()
            };
            terms.push(lw + v);
        }
        u[range.start - offset..range.end - offset].copy_from_slice(&saved);
        log_sum_exp(terms)
    }

    fn sum_records(&self, range: core::ops::Range<usize>, u: &[f64], offset: usize, entry: bool) -> f64 {
        range
            .map(|i| if entry { self.record_log_entry(i, u[i - offset]) } else { self.record_log_f(i, u[i - offset]) })
            .sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The top-level integrand of one cluster as a function of its standardized
/// random effects.
struct Target<'a, 's, 'm> {
    state: &'a State<'s, 'm>,
    node: &'a ClusterNode,
    entry: bool,
}

impl LogTarget for Target<'_, '_, '_> {
    fn dim(&self) -> usize {
        self.state.ctx.nodes[0].dim()
    }

    fn log_f(&self, z: &[f64]) -> f64 {
        let st = self.state;
        let range = self.node.range.clone();
        let offset = range.start;
        let w = &st.loadings[0];
        let mut u: Vec<f64> = range.clone().map(|i| dot(&w[i], z)).collect();
        let v = if st.ctx.model.levels().len() == 1 {
            st.sum_records(range, &u, offset, self.entry)
        } else {
            self.node.children.iter().map(|c| st.integrate(c, 1, &mut u, offset, self.entry)).sum()
        };
        nan_to_neg_inf(v)
    }

    fn derivatives(&self, z: &[f64]) -> Option<(Vec<f64>, Matrix)> {
        let st = self.state;
        if st.ctx.model.levels().len() != 1 {
            return None;
        }
        let q = z.len();
        let mut g = vec![0.0; q];
        let mut h = Matrix::zeros(q, q);
        for i in self.node.range.clone() {
            let w = &st.loadings[0][i];
            let (d1, d2) = st.kernel_derivs(i, dot(w, z), self.entry)?;
            for a in 0..q {
                g[a] += d1 * w[a];
                for b in 0..q {
                    h[(a, b)] += d2 * w[a] * w[b];
                }
            }
        }
        Some((g, h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SurvivalRecord;
    use crate::family::FamilyKind;
    use crate::model::{ModelSpec, ReEquation};
    use crate::quadrature::IntegrationSettings;
    use alloc::format;
    use alloc::string::String;

    fn data(entry: f64, rate: Option<f64>) -> Dataset {
        let times = [0.4, 1.3, 2.2, 0.9, 3.1, 0.2, 1.7, 2.6, 0.6];
        let recs = times
            .iter()
            .enumerate()
            .map(|(i, &t)| SurvivalRecord {
                entry: if i % 2 == 0 { entry.min(t * 0.5) } else { 0.0 },
                exit: t,
                event: i % 4 != 3,
                covariates: vec![(i % 2) as f64],
                expected_rate: rate,
                cluster_path: vec![format!("c{}", i / 3)],
            })
            .collect();
        Dataset::new(recs, vec![String::from("x")], vec![String::from("c")]).unwrap()
    }

    fn exp_spec() -> ModelSpec {
        ModelSpec::new(FamilyKind::Exponential).fixed(["x"]).random(ReEquation::intercept("c"))
    }

    #[test]
    fn exponential_single_record_density() {
        let recs = vec![SurvivalRecord {
            entry: 0.0,
            exit: 2.0,
            event: true,
            covariates: vec![],
            expected_rate: None,
            cluster_path: vec![],
        }];
        let d = Dataset::new(recs, vec![], vec![]).unwrap();
        let m = Model::build(ModelSpec::new(FamilyKind::Exponential), &d).unwrap();
        let ctx = LikelihoodContext::new(&m, &d).unwrap();
        assert_eq!(ctx.log_likelihood(&[0.0]), -2.0);
        let mut recs = d.records().to_vec();
        recs[0].event = false;
        let d = Dataset::new(recs, vec![], vec![]).unwrap();
        let ctx = LikelihoodContext::new(&m, &d).unwrap();
        assert_eq!(ctx.log_likelihood(&[0.0]), -2.0);
    }

    #[test]
    fn zero_expected_rate_is_bit_identical() {
        let d0 = data(0.0, None);
        let d1 = data(0.0, Some(0.0));
        let m0 = Model::build(exp_spec(), &d0).unwrap();
        let mut s1 = exp_spec();
        s1.relative_survival = true;
        let m1 = Model::build(s1, &d1).unwrap();
        let theta = [0.3, -0.8, -0.4];
        let a = LikelihoodContext::new(&m0, &d0).unwrap().log_likelihood(&theta);
        let b = LikelihoodContext::new(&m1, &d1).unwrap().log_likelihood(&theta);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn permuting_records_within_cluster() {
        let d = data(0.0, None);
        let mut recs = d.records().to_vec();
        recs.swap(0, 2);
        recs.swap(3, 4);
        let d2 = Dataset::new(recs, vec![String::from("x")], vec![String::from("c")]).unwrap();
        let m = Model::build(exp_spec().integration(IntegrationSettings::new(IntegrationMethod::Hermite)), &d).unwrap();
        let theta = [0.3, -0.8, -0.4];
        let a = LikelihoodContext::new(&m, &d).unwrap().cluster_log_likelihoods(&theta);
        let b = LikelihoodContext::new(&m, &d2).unwrap().cluster_log_likelihoods(&theta);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn delayed_entry_shrinks_to_fixed_effects_formula() {
        // With a vanishing random effect the marginal denominator is the
        // product of the entry survivals.
        let d = data(0.15, None);
        let m = Model::build(exp_spec(), &d).unwrap();
        let mf = m.fixed_only();
        let theta = [0.3, -0.8, -18.0];
        let a = LikelihoodContext::new(&m, &d).unwrap().log_likelihood(&theta);
        let b = LikelihoodContext::new(&mf, &d).unwrap().log_likelihood(&theta[..2]);
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn invalid_theta_gives_negative_infinity() {
        let d = data(0.0, None);
        let m = Model::build(exp_spec(), &d).unwrap();
        let ctx = LikelihoodContext::new(&m, &d).unwrap();
        assert_eq!(ctx.log_likelihood(&[f64::NAN, 0.0, 0.0]), f64::NEG_INFINITY);
    }
}
