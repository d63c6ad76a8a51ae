//! Acceptance criteria 1-8. Each criterion prints one PASS/FAIL line on the
//! real stdout (bypassing the test harness capture), then the test asserts.

use std::io::Write;
use std::time::Instant;

use mesurv::io::load_csv;
use mesurv::ModelFile;
use mesurv_core::data::declare_survival;
use mesurv_core::likelihood::LikelihoodContext;
use mesurv_core::linalg::Matrix;
use mesurv_core::predict::{self, PredictionMode, PredictionRow};
use mesurv_core::quadrature::gauss_hermite;
use mesurv_core::simulate::{simulate_clustered, simulate_times, ClusterDesign, CovariateGen, SimFamily, SimSpec};
use mesurv_core::spline::{rcs_deriv, rcs_eval, rcs_second_deriv};
use mesurv_core::{
    fit, Dataset, FamilyKind, FitOptions, FittedModel, Frame, IntegrationMethod, IntegrationSettings, KnotVector,
    Model, ModelSpec, OutcomeRoles, PredictionKind, PredictionRequest, ReEquation, SurvivalRecord,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Self { name, pass: true, detail: String::new() }
    }

    /// Record `|got - want| <= tol`.
    fn near(&mut self, what: &str, got: f64, want: f64, tol: f64) {
        let ok = (got - want).abs() <= tol;
        self.pass &= ok;
        let flag = if ok { "" } else { "(!)" };
        if got != 0.0 && got.abs() < 1e-3 {
            self.detail += &format!(" {what}={got:.2e}{flag}");
        } else {
            self.detail += &format!(" {what}={got:.7}{flag}");
        }
    }

    fn that(&mut self, what: &str, ok: bool) {
        self.pass &= ok;
        self.detail += &format!(" {what}={ok}");
    }

    fn report(&self) {
        let line = format!("{} criterion {}:{}\n", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail);
        let mut out = std::io::stdout().lock();
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
    }
}

fn catheter() -> Dataset {
    let roles = OutcomeRoles {
        time: "time".into(),
        event: "infect".into(),
        covariates: vec!["age".into(), "female".into()],
        levels: vec!["patient".into()],
        ..Default::default()
    };
    load_csv(std::fs::File::open(concat!(env!("CARGO_MANIFEST_DIR"), "/data/catheter.csv")).unwrap(), &roles).unwrap()
}

fn catheter_spec() -> ModelSpec {
    ModelSpec::new(FamilyKind::RoystonParmar).df(3).fixed(["age", "female"]).random(ReEquation::intercept("patient"))
}

fn serial() -> FitOptions {
    FitOptions { parallel: false, ..FitOptions::default() }
}

#[test]
fn criterion_1_catheter_frailty_model() {
    let data = catheter();
    let start = Instant::now();
    let f = fit(catheter_spec(), &data, &serial()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let r = f.report(95.0);
    let (female, age, sd) = (r.row("female").unwrap(), r.row("age").unwrap(), r.row("sd(M1)").unwrap());
    let (lo, hi) = sd.ci.unwrap();
    let knots = f.model.baseline_basis().unwrap().knots().all();
    let mut c = Check::new("1");
    c.that("converged", f.converged);
    c.near("ll", f.loglik, -326.05663, 0.02);
    c.near("female", female.estimate, -1.4674, 0.01);
    c.near("se(female)", female.se.unwrap(), 0.4928, 0.01);
    c.near("sd", sd.estimate, 0.8012, 0.01);
    c.near("sd.lci", lo, 0.411, 0.02);
    c.near("sd.uci", hi, 1.563, 0.02);
    c.near("age", age.estimate, 0.00716, 0.002);
    c.that("knots", knots.len() == 4 && knots[1] == 27f64.ln());
    c.that(&format!("runtime({secs:.2}s)<30s"), secs < 30.0);
    c.report();
    assert!(c.pass);
}

#[test]
fn criterion_2_catheter_tvc_model() {
    let f = fit(catheter_spec().tvc("female", 1), &catheter(), &FitOptions::default()).unwrap();
    let r = f.report(95.0);
    let mut c = Check::new("2");
    c.that("converged", f.converged);
    c.near("ll", f.loglik, -323.79734, 0.03);
    c.near("female#rcs()", r.row("female#rcs()").unwrap().estimate, 0.6843, 0.02);
    c.near("sd", r.row("sd(M1)").unwrap().estimate, 0.5667, 0.03);
    c.report();
    assert!(c.pass);
}

#[test]
fn criterion_3_weibull_survival_anchor() {
    let spec = SimSpec { family: SimFamily::Weibull, lambda: 0.1, gamma: 1.2, max_time: 5.0, seed: 31 };
    // Closed form, written out independently of the library.
    let exact = (-0.1 * 5f64.powf(1.2)).exp();
    let lib = spec.survival(5.0, 0.0);
    let draws = simulate_times(&spec, &vec![0.0; 100_000]).unwrap();
    let empirical = draws.iter().filter(|(_, d)| !d).count() as f64 / draws.len() as f64;
    // The exact value is 0.501644, which is 50.2% to one decimal but 0.5016
    // (not 0.5017) to four places, so nothing exact lands within 1e-6 of the
    // stated anchor. The literal check is kept and reported; the attainable
    // parts are asserted.
    let mut c = Check::new("3");
    c.near("S(5)-vs-0.5017", lib, 0.5017, 1e-6);
    c.report();
    let mut a = Check::new("3 (attainable part)");
    a.near("S(5)-vs-closed-form", lib, exact, 1e-6);
    a.near("S(5)-vs-50.2%", lib, 0.502, 5e-4);
    a.near("empirical", empirical, exact, 0.005);
    a.report();
    assert!(!c.pass, "the literal anchor is unattainable for the exact value {exact}");
    assert!(a.pass);
}

#[test]
fn criterion_4_closed_loop_ipd_recovery() {
    let design = ClusterDesign {
        n_clusters: 30,
        per_cluster: 100,
        covariates: vec![("trt".into(), CovariateGen::Bernoulli(0.5))],
        beta: vec![("trt".into(), -0.5)],
        re_design: vec![Some("trt".into())],
        re_sigma: Matrix::diagonal(&[0.25]),
    };
    let spec = ModelSpec::new(FamilyKind::Weibull)
        .fixed(["trt"])
        .random(ReEquation::parse("clusterid: trt noconstant").unwrap());
    // Truth on the estimation scale: trt, log(lambda), log(gamma), log(sd).
    let truth = [("trt", -0.5), ("_cons", 0.1f64.ln()), ("log(gamma)", 1.2f64.ln()), ("log_sd(M1)", 0.5f64.ln())];
    let mut covered = [0usize; 4];
    for k in 0..20u64 {
        let sim = SimSpec { family: SimFamily::Weibull, lambda: 0.1, gamma: 1.2, max_time: 5.0, seed: 278945 + k };
        let data = simulate_clustered(&design, &sim).unwrap();
        let f = fit(spec.clone(), &data, &FitOptions::default()).unwrap();
        assert!(f.converged, "seed {}", 278945 + k);
        for (j, (name, value)) in truth.iter().enumerate() {
            let i = f.model.layout().index_of(name).unwrap();
            if (f.theta[i] - value).abs() <= 2.0 * f.se(i).unwrap() {
                covered[j] += 1;
            }
        }
    }
    let mut c = Check::new("4");
    for ((name, _), n) in truth.iter().zip(covered) {
        c.that(&format!("{name}:{n}/20>=18"), n >= 18);
    }
    c.report();
    assert!(c.pass);
}

#[test]
fn criterion_5_integration_agreement() {
    let data = catheter();
    let ll = |method, points| {
        let spec = catheter_spec().integration(IntegrationSettings::new(method).with_points(points));
        let f = fit(spec, &data, &FitOptions::default()).unwrap();
        assert!(f.converged);
        f.loglik
    };
    let a7 = ll(IntegrationMethod::AdaptiveHermite, 7);
    let g101 = ll(IntegrationMethod::Hermite, 101);
    let a15 = ll(IntegrationMethod::AdaptiveHermite, 15);
    let mut c = Check::new("5");
    c.near("|mva7-gh101|", (a7 - g101).abs(), 0.0, 0.01);
    c.near("|mva7-mva15|", (a7 - a15).abs(), 0.0, 1e-3);
    c.report();
    assert!(c.pass);
}

/// `log ∫ exp(g(b)) db` by the trapezoid rule with `n` points on `[lo, hi]`.
fn trapezoid_log(g: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / (n - 1) as f64;
    let vals: Vec<f64> = (0..n).map(|i| g(lo + h * i as f64)).collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = vals.iter().enumerate().map(|(i, v)| if i == 0 || i == n - 1 { 0.5 } else { 1.0 } * (v - m).exp()).sum();
    m + (s * h).ln()
}

#[test]
fn criterion_6_toy_oracle() {
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
    let recs = rows
        .iter()
        .map(|&(t, d, x, id)| SurvivalRecord {
            entry: 0.0,
            exit: t,
            event: d,
            covariates: vec![x],
            expected_rate: None,
            cluster_path: vec![id.into()],
        })
        .collect();
    let data = Dataset::new(recs, vec!["x".into()], vec!["c".into()]).unwrap();
    let spec = ModelSpec::new(FamilyKind::Exponential)
        .fixed(["x"])
        .random(ReEquation::intercept("c"))
        .integration(IntegrationSettings::default().with_points(30));
    let model = Model::build(spec, &data).unwrap();
    let ctx = LikelihoodContext::new(&model, &data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let theta = [rng.random_range(-1.0..1.0), rng.random_range(-1.5..0.5), rng.random_range(-1.5..0.5)];
        let (beta, cons, sd) = (theta[0], theta[1], f64::exp(theta[2]));
        let got = ctx.cluster_log_likelihoods(&theta);
        for (k, id) in ["1", "2", "3"].iter().enumerate() {
            let mine: Vec<_> = rows.iter().filter(|r| r.3 == *id).collect();
            let g = |b: f64| {
                let mut s = -0.5 * (b / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
                for &&(t, d, x, _) in &mine {
                    let h = (cons + beta * x + b).exp();
                    s += if d { h.ln() } else { 0.0 } - h * t;
                }
                s
            };
            let lim = (12.0 * sd).max(8.0);
            worst = worst.max((got[k] - trapezoid_log(g, -lim, lim, 20001)).abs());
        }
    }
    let mut c = Check::new("6");
    c.near("max|quad-trapezoid|", worst, 0.0, 1e-6);
    c.report();
    assert!(c.pass);
}

#[test]
fn criterion_7_reduction_identities() {
    let times = [
        0.42, 1.31, 2.24, 0.93, 3.05, 0.21, 1.74, 2.61, 0.63, 1.12, 0.35, 2.87, 1.55, 0.77, 2.02, 0.51, 1.93, 0.28,
        2.49, 1.06, 0.86, 1.67, 3.3, 0.45,
    ];
    let header: Vec<String> = ["id", "t", "d", "t0", "rate", "trt", "z"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = times
        .iter()
        .enumerate()
        .map(|(i, t)| {
            vec![
                format!("k{}", i / 4),
                t.to_string(),
                u8::from(i % 5 != 2).to_string(),
                "0".into(),
                "0".into(),
                (i % 2).to_string(),
                (((i * 7) % 11) as f64 / 5.0 - 1.0).to_string(),
            ]
        })
        .collect();
    let frame = Frame::new(header, rows).unwrap();
    let roles = OutcomeRoles {
        time: "t".into(),
        event: "d".into(),
        covariates: vec!["trt".into(), "z".into()],
        levels: vec!["id".into()],
        ..Default::default()
    };
    let plain = declare_survival(&frame, &roles).unwrap();
    let entry = declare_survival(&frame, &OutcomeRoles { entry: Some("t0".into()), ..roles.clone() }).unwrap();
    let rated = declare_survival(&frame, &OutcomeRoles { expected_rate: Some("rate".into()), ..roles }).unwrap();
    let ll = |spec: ModelSpec, data: &Dataset, theta: &[f64]| {
        let model = Model::build(spec, data).unwrap();
        LikelihoodContext::new(&model, data).unwrap().log_likelihood(theta)
    };
    let re = || ReEquation::intercept("id");
    let cases = [
        (ModelSpec::new(FamilyKind::Exponential).fixed(["trt", "z"]).random(re()), vec![-0.4, 0.2, -0.3, -0.5]),
        (ModelSpec::new(FamilyKind::Weibull).fixed(["trt", "z"]).random(re()), vec![-0.4, 0.2, -0.3, 0.15, -0.5]),
        (ModelSpec::new(FamilyKind::Gompertz).fixed(["trt", "z"]).random(re()), vec![-0.4, 0.2, -0.8, 0.1, -0.5]),
        (ModelSpec::new(FamilyKind::RoystonParmar).df(2).fixed(["trt", "z"]).random(re()), vec![-0.4, 0.2, -0.3, 0.9, 0.05, -0.5]),
        (ModelSpec::new(FamilyKind::RcsLogHazard).df(2).fixed(["trt", "z"]).random(re()), vec![-0.4, 0.2, -0.3, 0.1, 0.05, -0.5]),
    ];
    let (mut rate_same, mut entry_same, mut sd_gap) = (true, true, 0.0f64);
    for (spec, theta) in cases {
        let base = ll(spec.clone(), &plain, &theta);
        let mut rs = spec.clone();
        rs.relative_survival = true;
        rate_same &= base.to_bits() == ll(rs, &rated, &theta).to_bits();
        entry_same &= base.to_bits() == ll(spec.clone(), &entry, &theta).to_bits();
        let fixed = ll(spec.fixed_only(), &plain, &theta[..theta.len() - 1]);
        let mut tiny = theta.clone();
        *tiny.last_mut().unwrap() = 1e-8f64.ln();
        sd_gap = sd_gap.max((ll(spec, &plain, &tiny) - fixed).abs());
    }
    let mut rp = ModelSpec::new(FamilyKind::RoystonParmar).df(1).fixed(["trt", "z"]).random(re());
    rp.orthogonalize = false;
    let wb = ModelSpec::new(FamilyKind::Weibull).fixed(["trt", "z"]).random(re());
    let mut rp_gap = 0.0f64;
    for (cons, gamma, lsd) in [(-0.3, 1.2, -0.5), (0.4, 0.7, 0.1), (-1.2, 2.0, -1.0)] {
        let a = ll(rp.clone(), &plain, &[-0.4, 0.2, cons, gamma, lsd]);
        let b = ll(wb.clone(), &plain, &[-0.4, 0.2, cons, gamma.ln(), lsd]);
        rp_gap = rp_gap.max((a - b).abs());
    }
    let mut c = Check::new("7");
    c.that("zero-rate-bit-exact", rate_same);
    c.that("zero-entry-bit-exact", entry_same);
    c.near("|sd=1e-8-fixed|", sd_gap, 0.0, 1e-4);
    c.near("|rp1-weibull|", rp_gap, 0.0, 1e-6);
    c.report();
    assert!(c.pass);
}

fn rows_at(age: f64, female: f64, times: &[f64]) -> Vec<PredictionRow> {
    times.iter().map(|&t| PredictionRow { covariates: vec![age, female], time: t }).collect()
}

fn estimates(f: &FittedModel, rows: &[PredictionRow], kind: PredictionKind, mode: PredictionMode) -> Vec<f64> {
    let req = PredictionRequest { mode, ..PredictionRequest::new(kind) };
    predict::predict(f, rows, &req).unwrap().iter().map(|p| p.estimate).collect()
}

/// Delta-method interval for S(1 | x = 1) against the 2000-replicate
/// parametric bootstrap percentile interval on a 200-subject exponential model.
fn delta_vs_bootstrap() -> bool {
    let x: Vec<f64> = (0..200).map(|i| (i % 2) as f64).collect();
    let sample = |lambda: f64, beta: f64, seed: u64| {
        let spec = SimSpec { family: SimFamily::Exponential, lambda, gamma: 1.0, max_time: 5.0, seed };
        let offsets: Vec<f64> = x.iter().map(|v| beta * v).collect();
        let recs = simulate_times(&spec, &offsets)
            .unwrap()
            .into_iter()
            .zip(&x)
            .map(|((t, d), &v)| SurvivalRecord {
                entry: 0.0,
                exit: t,
                event: d,
                covariates: vec![v],
                expected_rate: None,
                cluster_path: vec![],
            })
            .collect();
        Dataset::new(recs, vec!["x".into()], vec![]).unwrap()
    };
    let spec = || ModelSpec::new(FamilyKind::Exponential).fixed(["x"]);
    let row = [PredictionRow { covariates: vec![1.0], time: 1.0 }];
    let f = fit(spec(), &sample(0.2, -0.5, 9), &FitOptions::default()).unwrap();
    let req = PredictionRequest { ci: true, ..PredictionRequest::new(PredictionKind::Survival) };
    let (lo, hi) = predict::predict(&f, &row, &req).unwrap()[0].ci.unwrap();
    let mut boot: Vec<f64> = (0..2000u64)
        .map(|b| {
            let g = fit(spec(), &sample(f.theta[1].exp(), f.theta[0], 1000 + b), &FitOptions::default()).unwrap();
            predict::predict(&g, &row, &PredictionRequest::new(PredictionKind::Survival)).unwrap()[0].estimate
        })
        .collect();
    boot.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (boot.len() - 1) as f64 * p;
        let i = h.floor() as usize;
        boot[i] + (h - h.floor()) * (boot[i + 1] - boot[i])
    };
    let (blo, bhi) = (q(0.025), q(0.975));
    let w = hi - lo;
    ((bhi - blo) / w - 1.0).abs() < 0.10 && (blo - lo).abs() < 0.10 * w && (bhi - hi).abs() < 0.10 * w
}

#[test]
fn criterion_8_property_summaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut c = Check::new("8");

    let mut c2 = true;
    let mut linear = true;
    for _ in 0..200 {
        let low = rng.random_range(-1.0..1.0);
        let width = rng.random_range(0.5..4.0);
        let mut fr: Vec<f64> = (0..rng.random_range(0..5)).map(|_| rng.random_range(0.05..0.95)).collect();
        fr.sort_by(f64::total_cmp);
        fr.dedup_by(|a, b| (*a - *b).abs() < 0.02);
        let knots = KnotVector::new(low, fr.iter().map(|f| low + f * width).collect(), low + width).unwrap();
        for k in knots.all() {
            let (l, r) = (k - 1e-7, k + 1e-7);
            for (a, b) in [(rcs_eval(l, &knots), rcs_eval(r, &knots)), (rcs_deriv(l, &knots), rcs_deriv(r, &knots))]
                .into_iter()
                .chain([(rcs_second_deriv(l, &knots), rcs_second_deriv(r, &knots))])
            {
                c2 &= a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-5);
            }
        }
        let gap = rng.random_range(0.01..5.0);
        for x in [knots.low() - gap, knots.high() + gap] {
            let scale = 1.0 + f64::abs(x).powi(3);
            linear &= rcs_second_deriv(x, &knots).iter().all(|v| v.abs() <= 1e-9 * scale);
        }
    }
    c.that("spline-C2", c2);
    c.that("spline-linear-tails", linear);

    let mut hermite = true;
    for n in 1..=40usize {
        let rule = gauss_hermite(n).unwrap();
        for deg in 0..2 * n as i32 {
            let m: f64 = rule.iter().map(|(x, lw)| lw.exp() * x[0].powi(deg)).sum();
            let abs: f64 = rule.iter().map(|(x, lw)| lw.exp() * x[0].abs().powi(deg)).sum();
            let exact = if deg % 2 == 1 { 0.0 } else { (1..deg).step_by(2).map(|k| k as f64).product() };
            hermite &= (m - exact).abs() <= 1e-10 * abs.max(1.0);
        }
    }
    c.that("hermite-moments", hermite);

    let data = catheter();
    let f = fit(catheter_spec().tvc("female", 1), &data, &FitOptions::default()).unwrap();
    let times: Vec<f64> = (1..=120).map(|i| 5.0 * i as f64).collect();
    let (mut monotone, mut cif, mut lost) = (true, true, true);
    for (age, female) in [(20.0, 0.0), (45.0, 1.0), (70.0, 0.0)] {
        for mode in [PredictionMode::FixedOnly, PredictionMode::Marginal] {
            let rows = rows_at(age, female, &times);
            let s = estimates(&f, &rows, PredictionKind::Survival, mode);
            monotone &= s.windows(2).all(|w| w[1] <= w[0] + 1e-15);
            let ci = estimates(&f, &rows, PredictionKind::Cif, mode);
            cif &= s.iter().zip(&ci).all(|(a, b)| (a + b - 1.0).abs() <= f64::EPSILON);
            let rows = rows_at(age, female, &times[..24]);
            let r = estimates(&f, &rows, PredictionKind::Rmst, mode);
            let l = estimates(&f, &rows, PredictionKind::TimeLost, mode);
            lost &= times.iter().zip(r.iter().zip(&l)).all(|(t, (r, l))| (l - (t - r)).abs() < 1e-9 * t.max(1.0));
        }
    }
    c.that("survival-monotone", monotone);
    c.that("cif+survival=1", cif);
    c.that("timelost=t-rmst", lost);
    c.that("delta-vs-bootstrap", delta_vs_bootstrap());

    let mut buf = Vec::new();
    ModelFile::from_fit(&f).unwrap().write(&mut buf).unwrap();
    let g = ModelFile::read(buf.as_slice()).unwrap().to_fit().unwrap();
    let rows = predict::rows_from_dataset(&f.model, &data).unwrap();
    let mut stable = true;
    for kind in [PredictionKind::Eta, PredictionKind::Hazard, PredictionKind::Survival, PredictionKind::Rmst] {
        let req = PredictionRequest { ci: true, ..PredictionRequest::new(kind) };
        let (a, b) = (predict::predict(&f, &rows, &req).unwrap(), predict::predict(&g, &rows, &req).unwrap());
        stable &= a.iter().zip(&b).all(|(x, y)| {
            let (xl, xu) = x.ci.unwrap();
            let (yl, yu) = y.ci.unwrap();
            x.estimate.to_bits() == y.estimate.to_bits() && xl.to_bits() == yl.to_bits() && xu.to_bits() == yu.to_bits()
        });
    }
    c.that("serialize-bit-stable", stable);
    c.report();
    assert!(c.pass);
}
