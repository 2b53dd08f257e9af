//! The `saddlebvp` command line: `solve`, `check`, `sweep` and `constants`.
//!
//! Every result file starts with a manifest describing the run. Results are
//! byte-identical for identical inputs and seed; wall time goes to stderr
//! and enters the manifest only with `--wall-time`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::dependence::{run_sequence, upper_limit_check, DependenceConfig, ParameterSequence};
use crate::grid::{self, embedding_constant, GridFunction, DEFAULT_SAFETY_FACTOR};
use crate::hypotheses::{ball_radii, certify, fit_certificate, CheckOptions, GrowthCertificate, HypothesisError};
use crate::problem::{Method, ParameterInput, ProblemError, ProblemFile, ProblemSpec};
use crate::solvers::{saddle_set, verify_saddle, ProbeConfig, SolverConfig, SolverError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FAILED: i32 = 2;

/// Half-width of the sampling box used when a certificate is fitted.
pub const FIT_BOX_RADIUS: f64 = 4.0;
pub const FIT_DENSITY: usize = 41;
pub const FIT_ALPHA_FRACTION: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Hypothesis(#[from] HypothesisError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Parser)]
#[command(name = "saddlebvp", version, about = "Saddle points of discrete Dirichlet boundary value systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute and verify the saddle set of a problem.
    Solve(SolveArgs),
    /// Verify the structural hypotheses with a growth certificate.
    Check(CheckArgs),
    /// Follow the saddle set along a parameter sequence.
    Sweep(SweepArgs),
    /// Print embedding constants.
    Constants(ConstantsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Extragradient,
    Newton,
    Nested,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Extragradient => Method::Extragradient,
            MethodArg::Newton => Method::Newton,
            MethodArg::Nested => Method::Nested,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SolverArgs {
    #[arg(long, value_enum, default_value = "newton")]
    pub method: MethodArg,
    /// Tolerance on the gradient norm and the residual.
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 100_000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 8)]
    pub multistart: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Extragradient step; estimated from the Lipschitz constant if omitted.
    #[arg(long)]
    pub step: Option<f64>,
    /// Growth certificate (JSON) giving the ball radii; fitted if omitted.
    #[arg(long)]
    pub certificate: Option<PathBuf>,
    /// Record wall time in the manifest.
    #[arg(long)]
    #[serde(skip)]
    pub wall_time: bool,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            method: self.method.into(),
            step: self.step,
            tol_grad: self.tol,
            tol_res: self.tol,
            max_iter: self.max_iter,
            multistart: self.multistart,
            seed: self.seed,
            ..SolverConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SolveArgs {
    pub problem: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    /// Random probes per family in the saddle verification.
    #[arg(long, default_value_t = 64)]
    pub probes: usize,
    /// Output directory for saddle_set.json and trace.csv.
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CheckArgs {
    pub problem: PathBuf,
    /// Growth certificate (JSON); fitted on the sampling box if omitted.
    #[arg(long)]
    pub certificate: Option<PathBuf>,
    /// Grid points per axis in the growth check.
    #[arg(long, default_value_t = 101)]
    pub density: usize,
    /// Random pairs in the convexity and concavity checks.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub wall_time: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    pub problem: PathBuf,
    /// Sequence file: {"u0": ..., "direction": ..., "N": ...}.
    #[arg(long)]
    pub sequence: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    /// Tolerance of the set and value convergence checks.
    #[arg(long, default_value_t = 1e-4)]
    pub tol_dep: f64,
    /// Output directory for sweep.csv and sweep_summary.json.
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ConstantsArgs {
    /// Problem file supplying T when --t is absent.
    pub problem: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub m: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    pub t: Vec<usize>,
}

/// Provenance header embedded in every result file.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    pub problem: Option<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl RunManifest {
    fn new<C: Serialize>(subcommand: &'static str, problem: Option<&Path>, config: &C, seed: Option<u64>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            problem: problem.map(|p| p.display().to_string()),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            wall_time_s: None,
        }
    }

    fn finish(&mut self, start: Instant, record: bool) {
        let secs = start.elapsed().as_secs_f64();
        eprintln!("wall time: {secs:.3} s");
        if record {
            self.wall_time_s = Some(secs);
        }
    }
}

/// Sequence file for `sweep`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceFile {
    pub u0: ParameterInput,
    pub direction: ParameterInput,
    #[serde(rename = "N")]
    pub n: usize,
}

impl SequenceFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.display().to_string(), source })
    }
}

fn load_certificate(path: &Path) -> Result<GrowthCertificate, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.display().to_string(), source })
}

fn fitted_certificate(spec: &ProblemSpec) -> Result<GrowthCertificate, CliError> {
    let zero = GridFunction::zeros(spec.t()).map_err(ProblemError::from)?;
    Ok(fit_certificate(spec, zero.clone(), zero, FIT_BOX_RADIUS, FIT_DENSITY, FIT_ALPHA_FRACTION)?)
}

#[derive(Debug, Clone, Copy, Serialize)]
struct Radii {
    r1: f64,
    r2: f64,
    source: &'static str,
}

/// Ball radii from the given certificate, or from a fitted one.
fn resolve_radii(spec: &ProblemSpec, certificate: Option<&Path>) -> Result<Radii, CliError> {
    let c2 = grid::c2(spec.t()).map_err(ProblemError::from)?;
    let (cert, source) = match certificate {
        Some(p) => (load_certificate(p)?, "certificate"),
        None => (fitted_certificate(spec)?, "fitted"),
    };
    let r = ball_radii(&cert, c2, spec.t())?;
    Ok(Radii { r1: r.r1, r2: r.r2, source })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

/// Fixed-width scientific notation with 17 significant digits.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_writer(manifest: &RunManifest) -> Result<csv::Writer<Vec<u8>>, CliError> {
    let mut buf = Vec::new();
    writeln!(buf, "# {}", serde_json::to_string(manifest).expect("serializable")).expect("in-memory write");
    Ok(csv::Writer::from_writer(buf))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("in-memory writer")
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn cmd_solve(args: &SolveArgs) -> Result<i32, CliError> {
    let start = Instant::now();
    let (spec, u) = ProblemFile::load(&args.problem)?.build()?;
    let cfg = args.solver.config();
    cfg.validate()?;
    let radii = resolve_radii(&spec, args.solver.certificate.as_deref())?;
    let set = saddle_set(&spec, &u, &cfg, (radii.r1, radii.r2))?;
    let probes = ProbeConfig { probes: args.probes, ..ProbeConfig::from_solver(&cfg, Some((radii.r1, radii.r2))) };
    let reports: Vec<_> = set.points.iter().map(|p| verify_saddle(&spec, &u, p, &probes)).collect();
    let verified = !set.is_empty() && reports.iter().all(|r| r.passed);

    let mut manifest = RunManifest::new("solve", Some(&args.problem), args, Some(cfg.seed));
    manifest.finish(start, args.solver.wall_time);
    create_dir(&args.out)?;
    let mut w = csv_writer(&manifest)?;
    w.write_record(["start", "iter", "grad_norm", "residual", "value"])?;
    for (i, trace) in set.traces.iter().enumerate() {
        for row in trace {
            w.write_record([i.to_string(), row.iter.to_string(), num(row.grad_norm), num(row.residual), num(row.value)])?;
        }
    }
    write_file(&args.out.join("trace.csv"), &finish_csv(w))?;
    let out = json!({
        "manifest": manifest,
        "radii": radii,
        "verified": verified,
        "empty": set.is_empty(),
        "saddle_set": set,
        "verification": reports,
    });
    write_file(&args.out.join("saddle_set.json"), &json_bytes(&out))?;
    for (p, r) in set.points.iter().zip(&reports) {
        eprintln!(
            "saddle value {} residual {:e} {}",
            p.value,
            p.residual_norm,
            if r.passed { "verified" } else { "UNVERIFIED" }
        );
        for f in &r.failures {
            eprintln!("  {f}");
        }
    }
    if set.is_empty() {
        eprintln!("no start converged");
    }
    Ok(if verified { EXIT_OK } else { EXIT_FAILED })
}

pub fn cmd_check(args: &CheckArgs) -> Result<i32, CliError> {
    let start = Instant::now();
    let (spec, u) = ProblemFile::load(&args.problem)?.build()?;
    let (cert, fitted) = match &args.certificate {
        Some(p) => (load_certificate(p)?, false),
        None => (fitted_certificate(&spec)?, true),
    };
    let opts = CheckOptions { density: args.density, samples: args.samples, seed: args.seed };
    let report = certify(&spec, &u, &cert, opts)?;
    let mut manifest = RunManifest::new("check", Some(&args.problem), args, Some(args.seed));
    manifest.finish(start, args.wall_time);
    let out = json!({
        "manifest": manifest,
        "fitted_certificate": fitted,
        "certificate": cert,
        "report": report,
    });
    match &args.out {
        Some(path) => write_file(path, &json_bytes(&out))?,
        None => std::io::stdout().write_all(&json_bytes(&out)).map_err(io_err(Path::new("<stdout>")))?,
    }
    if let Some(m) = &report.growth.margin_violated {
        eprintln!("{m}");
    }
    if let Some(c) = &report.growth.counterexample {
        eprintln!("growth bound counterexample: {c:?}");
    }
    for (name, r) in [("convexity in x", &report.convexity_x), ("concavity in y", &report.concavity_y)] {
        if let Some(c) = &r.counterexample {
            eprintln!("{name} counterexample: {c:?}");
        }
    }
    eprintln!("hypotheses {}", if report.passed { "verified" } else { "NOT verified" });
    Ok(if report.passed { EXIT_OK } else { EXIT_FAILED })
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<i32, CliError> {
    let start = Instant::now();
    let (spec, _) = ProblemFile::load(&args.problem)?.build()?;
    let seq_file = SequenceFile::load(&args.sequence)?;
    let t = spec.t();
    let u0 = seq_file.u0.resolve(t, spec.bound())?;
    let direction = seq_file.direction.tabulate(t)?;
    if seq_file.n == 0 {
        return Err(CliError::Usage("sequence length N must be at least 1".into()));
    }
    let seq = ParameterSequence::with_direction(u0, direction, seq_file.n)?;
    let cfg = args.solver.config();
    cfg.validate()?;
    let radii = resolve_radii(&spec, args.solver.certificate.as_deref())?;
    let dep = DependenceConfig { tol_dep: args.tol_dep, ..DependenceConfig::new(cfg, (radii.r1, radii.r2)) };
    let report = run_sequence(&spec, &seq, &dep)?;
    let check = upper_limit_check(&spec, &seq, &report, &report.v0, &dep, args.tol_dep);

    let mut manifest = RunManifest::new("sweep", Some(&args.problem), args, Some(args.solver.seed));
    manifest.finish(start, args.solver.wall_time);
    create_dir(&args.out)?;
    let mut w = csv_writer(&manifest)?;
    w.write_record(["n", "a_n", "dist_n", "gap_n"])?;
    for row in &report.rows {
        w.write_record([row.n.to_string(), num(row.a_n), num(row.dist_n), num(row.gap_n)])?;
    }
    write_file(&args.out.join("sweep.csv"), &finish_csv(w))?;
    let out = json!({
        "manifest": manifest,
        "radii": radii,
        "upper_limit_check": check,
        "report": report,
    });
    write_file(&args.out.join("sweep_summary.json"), &json_bytes(&out))?;
    eprintln!(
        "final dist {:e}, value gap {:e}, upper limit check {}",
        report.final_dist,
        report.final_value_gap,
        if check.passed { "passed" } else { "FAILED" }
    );
    Ok(if check.passed { EXIT_OK } else { EXIT_FAILED })
}

pub fn cmd_constants(args: &ConstantsArgs) -> Result<i32, CliError> {
    let ts = if !args.t.is_empty() {
        args.t.clone()
    } else if let Some(p) = &args.problem {
        vec![ProblemFile::load(p)?.t]
    } else {
        return Err(CliError::Usage("give --t or a problem file".into()));
    };
    let manifest = RunManifest::new("constants", args.problem.as_deref(), args, None);
    let mut w = csv_writer(&manifest)?;
    w.write_record(["m", "T", "c_m", "exact", "upper_bound"])?;
    for &t in &ts {
        for &m in &args.m {
            let c = embedding_constant(m, t).map_err(ProblemError::from)?;
            w.write_record([
                m.to_string(),
                t.to_string(),
                num(c.value),
                c.exact.to_string(),
                num(c.upper_bound(DEFAULT_SAFETY_FACTOR)),
            ])?;
        }
    }
    std::io::stdout().write_all(&finish_csv(w)).map_err(io_err(Path::new("<stdout>")))?;
    Ok(EXIT_OK)
}

/// Runs a parsed command line and returns the exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Check(a) => cmd_check(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Constants(a) => cmd_constants(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        EXIT_ERROR
    })
}

/// Caps the global thread pool at `SADDLEBVP_THREADS` when it is set.
pub fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("SADDLEBVP_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("SADDLEBVP_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}
