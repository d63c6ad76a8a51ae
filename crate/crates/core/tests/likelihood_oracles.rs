//! Marginal likelihood against brute-force numerical integration.

use mesurv_core::likelihood::LikelihoodContext;
use mesurv_core::{
    Dataset, FamilyKind, IntegrationMethod, IntegrationSettings, Model, ModelSpec, ReEquation, SurvivalRecord,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAPEZOID_POINTS: usize = 20001;

fn rec(entry: f64, exit: f64, event: bool, x: f64, rate: Option<f64>, path: &[&str]) -> SurvivalRecord {
    SurvivalRecord {
        entry,
        exit,
        event,
        covariates: vec![x],
        expected_rate: rate,
        cluster_path: path.iter().map(|s| s.to_string()).collect(),
    }
}

/// Three clusters of exponential survival times with a binary covariate.
fn toy() -> Dataset {
    let rows = [
        (0.4, true, 0.0, "1"),
        (1.3, true, 1.0, "1"),
        (2.2, false, 0.0, "1"),
        (0.9, true, 1.0, "2"),
        (3.1, false, 0.0, "2"),
        (0.2, true, 1.0, "2"),
        (1.7, true, 0.0, "3"),
        (2.6, true, 1.0, "3"),
        (0.6, false, 1.0, "3"),
        (1.1, true, 0.0, "3"),
    ];
    let recs = rows.iter().map(|&(t, d, x, c)| rec(0.0, t, d, x, None, &[c])).collect();
    Dataset::new(recs, vec!["x".into()], vec!["c".into()]).unwrap()
}

fn exp_spec() -> ModelSpec {
    ModelSpec::new(FamilyKind::Exponential).fixed(["x"]).random(ReEquation::intercept("c"))
}

/// Adaptive rule fine enough for the brute-force comparisons.
fn fine() -> IntegrationSettings {
    IntegrationSettings::default().with_points(30)
}

/// `log ∫ exp(g(b)) db` by the trapezoid rule on `[lo, hi]`.
fn trapezoid_log<F: Fn(f64) -> f64>(g: F, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / (n - 1) as f64;
    let vals: Vec<f64> = (0..n).map(|i| g(lo + h * i as f64)).collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = vals
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            w * (v - m).exp()
        })
        .sum();
    m + (s * h).ln()
}

fn log_normal_pdf(b: f64, sd: f64) -> f64 {
    -0.5 * (b / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Brute-force cluster log-likelihood for the exponential frailty model with
/// optional delayed entry and expected rates.
fn oracle_cluster(records: &[&SurvivalRecord], beta: f64, cons: f64, sd: f64) -> f64 {
    let lo = -(12.0 * sd).max(8.0);
    let numerator = |b: f64| {
        let mut s = log_normal_pdf(b, sd);
        for r in records {
            let h = (cons + beta * r.covariates[0] + b).exp();
            s -= h * r.exit;
            if r.event {
                s += (r.expected_rate.unwrap_or(0.0) + h).ln();
            }
        }
        s
    };
    let num = trapezoid_log(numerator, lo, -lo, TRAPEZOID_POINTS);
    if records.iter().all(|r| r.entry == 0.0) {
        return num;
    }
    let denominator = |b: f64| {
        let mut s = log_normal_pdf(b, sd);
        for r in records {
            s -= (cons + beta * r.covariates[0] + b).exp() * r.entry;
        }
        s
    };
    num - trapezoid_log(denominator, lo, -lo, TRAPEZOID_POINTS)
}

fn oracle_clusters(data: &Dataset, theta: &[f64]) -> Vec<f64> {
    let (beta, cons, sd) = (theta[0], theta[1], theta[2].exp());
    let tree = data.build_hierarchy(&["c"]).unwrap();
    tree.clusters()
        .iter()
        .map(|node| {
            let recs: Vec<&SurvivalRecord> = tree.records_of(node).iter().map(|&i| &data.records()[i]).collect();
            oracle_cluster(&recs, beta, cons, sd)
        })
        .collect()
}

fn random_thetas(n: usize) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.5..0.5), rng.random_range(-1.5..0.5)])
        .collect()
}

#[test]
fn toy_cluster_loglik_matches_trapezoid_at_random_theta() {
    let data = toy();
    let model = Model::build(exp_spec().integration(fine()), &data).unwrap();
    let ctx = LikelihoodContext::new(&model, &data).unwrap();
    for theta in random_thetas(5) {
        let got = ctx.cluster_log_likelihoods(&theta);
        let want = oracle_clusters(&data, &theta);
        assert_eq!(got.len(), 3);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "theta {theta:?}: {g} vs {w}");
        }
        let total: f64 = want.iter().sum();
        assert!((ctx.log_likelihood(&theta) - total).abs() < 3e-6);
    }
}

#[test]
fn default_seven_point_rule_is_close_to_trapezoid() {
    let data = toy();
    let model = Model::build(exp_spec(), &data).unwrap();
    let ctx = LikelihoodContext::new(&model, &data).unwrap();
    for theta in random_thetas(5) {
        let got = ctx.cluster_log_likelihoods(&theta);
        let want = oracle_clusters(&data, &theta);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-3, "theta {theta:?}: {g} vs {w}");
        }
    }
}

#[test]
fn two_subject_cluster_with_half_sd() {
    let recs = vec![rec(0.0, 0.7, true, 0.0, None, &["a"]), rec(0.0, 1.9, false, 1.0, None, &["a"])];
    let data = Dataset::new(recs, vec!["x".into()], vec!["c".into()]).unwrap();
    let model = Model::build(exp_spec().integration(fine()), &data).unwrap();
    let ctx = LikelihoodContext::new(&model, &data).unwrap();
    let theta = [0.0, 0.0, 0.5f64.ln()];
    let want = oracle_clusters(&data, &theta);
    let got = ctx.cluster_log_likelihoods(&theta);
    assert!((got[0] - want[0]).abs() < 1e-6, "{} vs {}", got[0], want[0]);
}

#[test]
fn non_adaptive_hermite_converges_to_trapezoid() {
    let data = toy();
    let theta = [0.4, -0.6, 0.2];
    let want: f64 = oracle_clusters(&data, &theta).iter().sum();
    let mut prev = f64::INFINITY;
    for n in [3usize, 6, 12, 24, 48, 96] {
        let spec = exp_spec().integration(IntegrationSettings::new(IntegrationMethod::Hermite).with_points(n));
        let model = Model::build(spec, &data).unwrap();
        let ll = LikelihoodContext::new(&model, &data).unwrap().log_likelihood(&theta);
        let err = (ll - want).abs();
        assert!(err <= prev || err < 1e-9, "n={n}: error {err} after {prev}");
        prev = err;
    }
    assert!(prev < 1e-7, "{prev}");
}

#[test]
fn delayed_entry_matches_trapezoid_ratio() {
    let rows = [(0.1, 0.4, true, 0.0), (0.5, 1.3, true, 1.0), (0.0, 2.2, false, 0.0), (0.3, 0.9, true, 1.0)];
    let recs = rows
        .iter()
        .enumerate()
        .map(|(i, &(e, t, d, x))| rec(e, t, d, x, None, &[if i < 2 { "1" } else { "2" }]))
        .collect();
    let data = Dataset::new(recs, vec!["x".into()], vec!["c".into()]).unwrap();
    let model = Model::build(exp_spec().integration(fine()), &data).unwrap();
    let ctx = LikelihoodContext::new(&model, &data).unwrap();
    for theta in random_thetas(3) {
        let got = ctx.cluster_log_likelihoods(&theta);
        let want = oracle_clusters(&data, &theta);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }
}

#[test]
fn relative_survival_matches_trapezoid() {
    let data = toy();
    let recs: Vec<SurvivalRecord> = data
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| SurvivalRecord { expected_rate: Some(0.05 + 0.02 * i as f64), ..r.clone() })
        .collect();
    let data = Dataset::new(recs, vec!["x".into()], vec!["c".into()]).unwrap();
    let mut spec = exp_spec().integration(fine());
    spec.relative_survival = true;
    let model = Model::build(spec, &data).unwrap();
    let ctx = LikelihoodContext::new(&model, &data).unwrap();
    for theta in random_thetas(3) {
        let got = ctx.cluster_log_likelihoods(&theta);
        let want = oracle_clusters(&data, &theta);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }
}

/// Two nested levels: the oracle integrates the inner effect per
/// sub-cluster for every outer value.
#[test]
fn nested_two_level_matches_iterated_trapezoid() {
    let rows = [
        (0.4, true, "A", "A1"),
        (1.3, true, "A", "A1"),
        (2.2, false, "A", "A2"),
        (0.9, true, "A", "A2"),
        (0.5, true, "B", "B1"),
        (1.8, true, "B", "B1"),
        (0.3, true, "B", "B2"),
    ];
    let recs = rows.iter().map(|&(t, d, a, b)| rec(0.0, t, d, 0.0, None, &[a, b])).collect();
    let data = Dataset::new(recs, vec!["x".into()], vec!["centre".into(), "patient".into()]).unwrap();
    let spec = ModelSpec::new(FamilyKind::Exponential)
        .random(ReEquation::intercept("centre"))
        .random(ReEquation::intercept("patient"))
        .integration(IntegrationSettings::default().with_points(15));
    let model = Model::build(spec, &data).unwrap();
    let ctx = LikelihoodContext::new(&model, &data).unwrap();
    let (cons, sd1, sd2) = (-0.3f64, 0.7f64, 0.4f64);
    let theta = [cons, sd1.ln(), sd2.ln()];
    let n = 2001;
    let inner = |recs: &[(f64, bool)], b1: f64| {
        trapezoid_log(
            |b2| {
                let h = (cons + b1 + b2).exp();
                log_normal_pdf(b2, sd2) + recs.iter().map(|&(t, d)| if d { h.ln() } else { 0.0 } - h * t).sum::<f64>()
            },
            -8.0,
            8.0,
            n,
        )
    };
    let mut want = 0.0;
    for centre in ["A", "B"] {
        let subs: Vec<Vec<(f64, bool)>> = ["1", "2"]
            .iter()
            .map(|p| rows.iter().filter(|r| r.2 == centre && r.3 == format!("{centre}{p}")).map(|r| (r.0, r.1)).collect())
            .collect();
        want += trapezoid_log(|b1| log_normal_pdf(b1, sd1) + subs.iter().map(|s| inner(s, b1)).sum::<f64>(), -8.0, 8.0, n);
    }
    let got = ctx.log_likelihood(&theta);
    assert!((got - want).abs() < 1e-5, "{got} vs {want}");
}

#[test]
fn adaptive_hermite_agrees_with_monte_carlo() {
    let data = toy();
    let theta = [0.4, -0.6, -0.3];
    let ll = |settings: IntegrationSettings| {
        let model = Model::build(exp_spec().integration(settings), &data).unwrap();
        LikelihoodContext::new(&model, &data).unwrap().log_likelihood(&theta)
    };
    let agh = ll(IntegrationSettings::default().with_points(15));
    let mc = ll(IntegrationSettings::new(IntegrationMethod::MonteCarlo).with_points(5000));
    assert!((agh - mc).abs() < 0.05, "{agh} vs {mc}");
}

