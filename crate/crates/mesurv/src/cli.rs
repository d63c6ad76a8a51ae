//! `mesurv fit | predict | simulate`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mesurv_core::covariance::ReDistribution;
use mesurv_core::linalg::Matrix;
use mesurv_core::model::TvcSpec;
use mesurv_core::predict::{self, PredictionMode, PredictionRow};
use mesurv_core::simulate::{simulate_clustered, ClusterDesign, CovariateGen, SimFamily, SimSpec};
use mesurv_core::{
    fit, CovarianceKind, FamilyKind, FitOptions, IntegrationMethod, IntegrationSettings, ModelSpec, OutcomeRoles,
    PredictionKind, PredictionRequest, ReEquation,
};

use crate::io::{self, fmt17};
use crate::model_file::ModelFile;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mesurv", version, about = "Multilevel mixed-effects parametric survival models")]
pub struct Cli {
    /// Worker threads for likelihood evaluation (default: available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write a model file.
    Fit(FitArgs),
    /// Predict from a model file.
    Predict(PredictArgs),
    /// Simulate clustered survival data.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true, args_override_self = true)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub time: String,
    #[arg(long)]
    pub event: String,
    /// Entry-time column (delayed entry).
    #[arg(long)]
    pub entry: Option<String>,
    /// Expected-rate column; turns on relative survival.
    #[arg(long)]
    pub bhazard: Option<String>,
    /// Fixed-effect covariates, comma separated.
    #[arg(long, default_value = "")]
    pub fixed: String,
    /// Random-effect equation "level: vars [noconstant]", highest level first.
    #[arg(long = "re")]
    pub re: Vec<String>,
    /// exponential, weibull, gompertz, rp or rcs.
    #[arg(long)]
    pub distribution: String,
    #[arg(long)]
    pub df: Option<usize>,
    /// Interior baseline knots on the time scale, comma separated.
    #[arg(long)]
    pub knots: Option<String>,
    /// Covariates with time-dependent effects, comma separated.
    #[arg(long, default_value = "")]
    pub tvc: String,
    #[arg(long, default_value_t = 1)]
    pub dftvc: usize,
    /// Interior tvc knots on the time scale, comma separated.
    #[arg(long)]
    pub knotstvc: Option<String>,
    /// diagonal, exchangeable, identity or unstructured.
    #[arg(long, default_value = "diagonal")]
    pub covariance: String,
    /// mvaghermite, ghermite or mcarlo.
    #[arg(long, default_value = "mvaghermite")]
    pub intmethod: String,
    #[arg(long)]
    pub intpoints: Option<usize>,
    /// gaussian or t.
    #[arg(long, default_value = "gaussian")]
    pub redist: String,
    #[arg(long, default_value_t = 3.0)]
    pub tdf: f64,
    #[arg(long, default_value_t = 95.0)]
    pub level: f64,
    /// Start from zeros instead of a fixed-effects fit.
    #[arg(long)]
    pub zeros: bool,
    /// Seed for Monte-Carlo draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 300)]
    pub iterate: usize,
    /// Keep the raw spline basis.
    #[arg(long)]
    pub noorthog: bool,
    /// Model file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true, args_override_self = true)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// eta, hazard, survival, chazard, cif, rmst or timelost.
    #[arg(long)]
    pub kind: String,
    /// Covariate overrides "var=value,...".
    #[arg(long)]
    pub at: Option<String>,
    #[arg(long, conflicts_with = "marginal")]
    pub fixedonly: bool,
    #[arg(long)]
    pub marginal: bool,
    #[arg(long)]
    pub ci: bool,
    #[arg(long, default_value_t = 95.0)]
    pub level: f64,
    /// Data whose rows are predicted (covariates missing from it must be in --at).
    #[arg(long, conflicts_with = "times")]
    pub data: Option<PathBuf>,
    /// Column of prediction times in --data.
    #[arg(long, default_value = "time", requires = "data")]
    pub timevar: String,
    /// Time grid "start:stop:step"; covariates come from --at.
    #[arg(long)]
    pub times: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true, args_override_self = true)]
pub struct SimulateArgs {
    #[arg(long)]
    pub clusters: usize,
    #[arg(long)]
    pub per_cluster: usize,
    /// exponential, weibull or gompertz.
    #[arg(long)]
    pub dist: String,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Fixed effects "var=value,...".
    #[arg(long, default_value = "")]
    pub beta: String,
    /// Covariate generator "var=bernoulli:p", "var=normal:mean:sd" or
    /// "var=uniform:low:high"; unlisted --beta covariates are bernoulli:0.5.
    #[arg(long)]
    pub covariate: Vec<String>,
    /// Standard deviation of the cluster effect.
    #[arg(long, default_value_t = 0.0)]
    pub re_sd: f64,
    /// Covariate carrying the cluster effect, or `_cons` for an intercept
    /// (default: the first --beta covariate, else `_cons`).
    #[arg(long)]
    pub re_on: Option<String>,
    #[arg(long)]
    pub maxt: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mesurv_core::Error),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    ModelFile(#[from] crate::model_file::ModelFileError),
    #[error("{0}: {1}")]
    File(PathBuf, std::io::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(io::IoError::Io(e))
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn list(s: &str) -> Vec<String> {
    s.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

fn number(s: &str, what: &str) -> Result<f64, CliError> {
    s.trim().parse::<f64>().map_err(|_| usage(format!("{what}: cannot parse '{s}' as a number")))
}

fn numbers(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    list(s).iter().map(|v| number(v, what)).collect()
}

/// Parse "a=1,b=2".
pub fn parse_assignments(s: &str, what: &str) -> Result<Vec<(String, f64)>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let (k, v) = t.split_once('=').ok_or_else(|| usage(format!("{what}: expected var=value, found '{t}'")))?;
            Ok((k.trim().to_string(), number(v, what)?))
        })
        .collect()
}

/// Parse "start:stop:step" into grid times.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, h] = parts.as_slice() else {
        return Err(usage(format!("--times: expected start:stop:step, found '{s}'")));
    };
    let (a, b, h) = (number(a, "--times")?, number(b, "--times")?, number(h, "--times")?);
    if !(h > 0.0) || !(b >= a) || !a.is_finite() || !b.is_finite() {
        return Err(usage("--times: need start <= stop and a positive step"));
    }
    let n = ((b - a) / h + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| a + k as f64 * h).collect())
}

fn create(path: &PathBuf) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::File(path.clone(), e))
}

fn open(path: &PathBuf) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::File(path.clone(), e))
}

/// Run the command line with `args` (including the program name). Returns the
/// process exit code; diagnostics go to `err` as single lines.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return EXIT_OK;
            }
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let _ = writeln!(err, "{}", line.trim());
            return EXIT_USAGE;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            let _ = writeln!(err, "error: --threads must be positive");
            return EXIT_USAGE;
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a, cli.threads, out, err),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
    }
}

fn build_spec(a: &FitArgs) -> Result<ModelSpec, CliError> {
    let family = FamilyKind::parse(&a.distribution).map_err(mesurv_core::Error::from)?;
    if family == FamilyKind::User {
        return Err(usage("user-defined families are only available through the library"));
    }
    let mut spec = ModelSpec::new(family).fixed(list(&a.fixed));
    spec.df = a.df;
    spec.knots = a.knots.as_deref().map(|k| numbers(k, "--knots")).transpose()?;
    if family.uses_spline() && spec.df.is_none() && spec.knots.is_none() {
        return Err(usage(format!("--distribution {} needs --df or --knots", family.name())));
    }
    let tvc_knots = a.knotstvc.as_deref().map(|k| numbers(k, "--knotstvc")).transpose()?;
    for v in list(&a.tvc) {
        spec.tvc.push(TvcSpec { covariate: v, df: a.dftvc, knots: tvc_knots.clone() });
    }
    for r in &a.re {
        spec = spec.random(ReEquation::parse(r)?);
    }
    spec.covariance =
        CovarianceKind::parse(&a.covariance).ok_or_else(|| usage(format!("unknown covariance '{}'", a.covariance)))?;
    spec.distribution = match a.redist.as_str() {
        "gaussian" => ReDistribution::Gaussian,
        "t" => ReDistribution::StudentT { dof: a.tdf },
        other => return Err(usage(format!("unknown random-effect distribution '{other}'"))),
    };
    let method =
        IntegrationMethod::parse(&a.intmethod).ok_or_else(|| usage(format!("unknown intmethod '{}'", a.intmethod)))?;
    let mut integ = IntegrationSettings::new(method);
    if let Some(p) = a.intpoints {
        integ.points = p;
    }
    integ.seed = a.seed;
    spec.integration = integ;
    spec.relative_survival = a.bhazard.is_some();
    spec.orthogonalize = !a.noorthog;
    spec.orthogonalize_tvc = !a.noorthog;
    if !(a.level > 10.0 && a.level < 99.99) {
        return Err(usage("--level must be between 10 and 99.99"));
    }
    Ok(spec)
}

fn cmd_fit(a: &FitArgs, threads: Option<usize>, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    let spec = build_spec(a)?;
    let roles = OutcomeRoles {
        time: a.time.clone(),
        event: a.event.clone(),
        entry: a.entry.clone(),
        expected_rate: a.bhazard.clone(),
        covariates: spec.covariates(),
        levels: spec.random.iter().map(|r| r.level.clone()).collect(),
    };
    let data = io::load_csv(open(&a.data)?, &roles)?;
    let opts = FitOptions { zeros: a.zeros, max_iter: a.iterate, initial: None, parallel: threads != Some(1) };
    let fitted = fit(spec, &data, &opts)?;
    write!(out, "{}", fitted.iteration_log())?;
    writeln!(out)?;
    write!(out, "{}", fitted.report(a.level))?;
    if let Some(path) = &a.out {
        let mut w = create(path)?;
        ModelFile::from_fit(&fitted)?.write(&mut w)?;
        w.flush()?;
    }
    if fitted.converged {
        Ok(EXIT_OK)
    } else {
        writeln!(err, "warning: convergence not achieved (max |gradient| {})", fmt17(fitted.grad_max))?;
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let kind = PredictionKind::parse(&a.kind).ok_or_else(|| usage(format!("unknown prediction kind '{}'", a.kind)))?;
    let fitted = ModelFile::read(open(&a.model)?)?.to_fit()?;
    let at = a.at.as_deref().map(|s| parse_assignments(s, "--at")).transpose()?.unwrap_or_default();
    let model_covs = fitted.model.covariates().to_vec();
    if let Some((name, _)) = at.iter().find(|(n, _)| !model_covs.contains(n)) {
        return Err(usage(format!("unknown covariate '{name}' in --at")));
    }
    let rows: Vec<PredictionRow> = match (&a.data, &a.times) {
        (_, Some(grid)) => predict::rows_from_grid(&fitted.model, &at, &parse_grid(grid)?)?,
        (Some(path), None) => {
            let frame = io::read_frame(open(path)?)?;
            let tcol = frame.column_index(&a.timevar).map_err(mesurv_core::Error::from)?;
            let cols: Vec<Option<usize>> = model_covs
                .iter()
                .map(|c| match frame.column_index(c) {
                    Ok(i) => Ok(Some(i)),
                    Err(_) if at.iter().any(|(n, _)| n == c) => Ok(None),
                    Err(e) => Err(mesurv_core::Error::from(e)),
                })
                .collect::<Result<_, _>>()?;
            (0..frame.n_rows())
                .map(|r| {
                    let covariates = cols
                        .iter()
                        .map(|c| c.map_or(Ok(0.0), |i| frame.number(r, i)))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(mesurv_core::Error::from)?;
                    let time = frame.number(r, tcol).map_err(mesurv_core::Error::from)?;
                    Ok(PredictionRow { covariates, time })
                })
                .collect::<Result<_, CliError>>()?
        }
        (None, None) => return Err(usage("predict needs --data or --times")),
    };
    let req = PredictionRequest {
        kind,
        at,
        mode: if a.marginal { PredictionMode::Marginal } else { PredictionMode::FixedOnly },
        ci: a.ci,
        level: a.level,
    };
    let preds = predict::predict(&fitted, &rows, &req)?;
    let mut sink: Box<dyn Write + '_> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(&mut *out),
    };
    write_predictions(&mut sink, &preds, a.ci)?;
    sink.flush()?;
    Ok(EXIT_OK)
}

/// CSV with columns rowid, time, estimate and, with intervals, lci, uci.
pub fn write_predictions<W: Write>(out: W, preds: &[predict::Prediction], ci: bool) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["rowid", "time", "estimate"];
    if ci {
        header.extend(["lci", "uci"]);
    }
    w.write_record(&header).map_err(io::IoError::from)?;
    for (i, p) in preds.iter().enumerate() {
        let mut row = vec![(i + 1).to_string(), fmt17(p.time), fmt17(p.estimate)];
        if ci {
            let (lo, hi) = p.ci.unwrap_or((f64::NAN, f64::NAN));
            row.push(fmt17(lo));
            row.push(fmt17(hi));
        }
        w.write_record(&row).map_err(io::IoError::from)?;
    }
    w.flush()?;
    Ok(())
}

fn covariate_gen(s: &str) -> Result<(String, CovariateGen), CliError> {
    let (name, g) = s.split_once('=').ok_or_else(|| usage(format!("--covariate: expected var=kind:..., found '{s}'")))?;
    let parts: Vec<&str> = g.split(':').collect();
    let gen = match parts.as_slice() {
        ["bernoulli", p] => {
            let p = number(p, "--covariate")?;
            if !(0.0..=1.0).contains(&p) {
                return Err(usage("--covariate: bernoulli probability must lie in [0, 1]"));
            }
            CovariateGen::Bernoulli(p)
        }
        ["normal", m, sd] => CovariateGen::Normal { mean: number(m, "--covariate")?, sd: number(sd, "--covariate")? },
        ["uniform", lo, hi] => CovariateGen::Uniform { low: number(lo, "--covariate")?, high: number(hi, "--covariate")? },
        _ => return Err(usage(format!("--covariate: unknown generator '{g}'"))),
    };
    Ok((name.trim().to_string(), gen))
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let family = SimFamily::parse(&a.dist).ok_or_else(|| usage(format!("unknown distribution '{}'", a.dist)))?;
    let beta = parse_assignments(&a.beta, "--beta")?;
    let mut covariates: Vec<(String, CovariateGen)> = a.covariate.iter().map(|c| covariate_gen(c)).collect::<Result<_, _>>()?;
    for (b, _) in &beta {
        if !covariates.iter().any(|(n, _)| n == b) {
            covariates.push((b.clone(), CovariateGen::Bernoulli(0.5)));
        }
    }
    if !(a.re_sd >= 0.0) || !a.re_sd.is_finite() {
        return Err(usage("--re-sd must be nonnegative"));
    }
    let re_on = a.re_on.clone().or_else(|| beta.first().map(|(n, _)| n.clone())).unwrap_or_else(|| "_cons".into());
    let re_design = if re_on == "_cons" { vec![None] } else { vec![Some(re_on)] };
    let design = ClusterDesign {
        n_clusters: a.clusters,
        per_cluster: a.per_cluster,
        covariates,
        beta,
        re_design,
        re_sigma: Matrix::diagonal(&[a.re_sd * a.re_sd]),
    };
    let spec = SimSpec { family, lambda: a.lambda, gamma: a.gamma, max_time: a.maxt, seed: a.seed };
    let data = simulate_clustered(&design, &spec)?;
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            io::write_dataset(&mut w, &data)?;
            w.flush()?;
        }
        None => io::write_dataset(&mut *out, &data)?,
    }
    Ok(EXIT_OK)
}
