//! Command-line front end: `fbsde <subcommand> --config <file> [flags]`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ModelFile;
use crate::error::{Error, Result};
use crate::fbm::{sample_paths, TimeGrid};
use crate::model::{validate, ModelSpec};
use crate::solver::{apriori_report, picard_solve_with, SolverParams, SpaceResolution};
use crate::verify::{
    bsde_refinement, compare, csv_field, covariance_check, default_ito_corpus, default_moment_corpus, default_product_corpus,
    integral_moment_suite, ito_residual, product_rule_residual, space_convergence, write_verdicts, Applicability,
    ProductVariant, Verdict,
};

/// Shipped fixture files with a one-line description.
pub const FIXTURES: &[(&str, &str)] = &[
    ("linear.toml", "f = 0, g(x) = x: u(t, x) = x"),
    ("quadratic.toml", "f = 0, g(x) = x^2: u = x^2 + T^2H - t^2H"),
    ("constant_driver.toml", "f = 1, g = 0: u = T - t"),
    ("anticipative.toml", "f = E[Y_{t+1/4}], g(x) = x: u(1/2, x) = 1.53125 x"),
    ("anticipative_nonlinear.toml", "saturating driver with short Y and Z delays"),
    ("reduce_linear.toml", "no delays, linear driver in y, z and the anticipated value"),
    ("reduce_saturating.toml", "no delays, saturating driver"),
    ("reduce_drifted.toml", "no delays, drift and time-varying volatility"),
    ("sine.toml", "f = 0, g = sin: second-order space convergence"),
    ("bad_delay.toml", "delta = K + 1 violates the delay range condition"),
    ("compare_shift.toml", "comparison: f = 0, g1 = x <= g2 = x + 1"),
    ("compare_identical.toml", "comparison: identical models"),
    ("compare_anticipative.toml", "comparison: f1 = E[Y_{t+d}] - 1 <= f2 = E[Y_{t+d}]"),
    ("compare_saturating.toml", "comparison: saturating drivers, decreasing middle sequence"),
];

#[derive(Debug, Parser)]
#[command(name = "fbsde", version, about = "Anticipative BSDEs driven by fractional Brownian motion")]
pub struct Cli {
    /// List the shipped fixture files and exit.
    #[arg(long)]
    pub list_fixtures: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Simulate,
    Validate,
    Solve,
    Verify,
    Compare,
    Converge,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample fBm paths and check their covariance.
    Simulate(CommonArgs),
    /// Check the model's delay, volatility, Lipschitz and integrability conditions.
    Validate(CommonArgs),
    /// Solve the model; writes the solution field, contraction trace and a priori report.
    Solve(CommonArgs),
    /// Run the moment, Itô, product-rule and BSDE residual suites.
    Verify(CommonArgs),
    /// Check the ordering of two solutions (needs a [compare] section).
    Compare(CommonArgs),
    /// Space refinement study at three resolutions.
    Converge(CommonArgs),
}

impl Command {
    pub fn split(&self) -> (Task, &CommonArgs) {
        match self {
            Command::Simulate(a) => (Task::Simulate, a),
            Command::Validate(a) => (Task::Validate, a),
            Command::Solve(a) => (Task::Solve, a),
            Command::Verify(a) => (Task::Verify, a),
            Command::Compare(a) => (Task::Compare, a),
            Command::Converge(a) => (Task::Converge, a),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "fbsde-out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    /// Time steps on [0, T+K].
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
}

const DEFAULT_PATHS: usize = 10_000;

/// Everything a subcommand needs, after flags override file values.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: Task,
    pub file: ModelFile,
    pub n_steps: usize,
    pub solver: SolverParams,
    pub n_paths: usize,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn new(task: Task, args: &CommonArgs) -> Result<Self> {
        let file = ModelFile::load(&args.config)?;
        let mut solver = file.solver_params()?;
        if let Some(tol) = args.tol {
            if !(tol > 0.0) {
                return Err(Error::Config(format!("--tol must be positive, got {tol}")));
            }
            solver.tol = tol;
        }
        let run = file.run.clone().unwrap_or(crate::config::RunSection {
            seed: None,
            n_paths: None,
            tol: None,
            max_iter: None,
            beta: None,
        });
        let n_steps = args.steps.unwrap_or(file.grid.n_steps);
        let n_paths = args.paths.or(run.n_paths).unwrap_or(DEFAULT_PATHS);
        if n_steps == 0 || n_paths < 2 {
            return Err(Error::Config("--steps must be positive and --paths at least 2".into()));
        }
        Ok(RunConfig { task, file, n_steps, solver, n_paths, seed: args.seed.or(run.seed), out: args.out.clone() })
    }

    fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("a seed is required: set [run] seed or pass --seed".into()))
    }
}

/// Result of a subcommand: whether every executed check passed, plus a summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub summary: Vec<String>,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn finish(dir: &Path, verdicts: Vec<Verdict>, mut summary: Vec<String>) -> Result<Outcome> {
    let mut w = create(dir, "verdicts.csv")?;
    write_verdicts(&mut w, &verdicts)?;
    w.flush()?;
    let passed = verdicts.iter().all(|v| v.pass);
    for v in verdicts.iter().filter(|v| !v.pass) {
        summary.push(format!("FAILED {} {}: value {} target {} tolerance {}", v.name, v.metric, v.value, v.target, v.tolerance));
    }
    Ok(Outcome { passed, summary })
}

/// Validation failures abort with a model error naming the failed checks.
fn validated(model: &ModelSpec, grid: &TimeGrid) -> Result<()> {
    let report = validate(model, grid);
    if report.passed() {
        return Ok(());
    }
    let failed: Vec<String> = report.failures().map(|c| format!("{}: {}", c.name, c.detail)).collect();
    Err(Error::Validation(failed.join("; ")))
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    fs::create_dir_all(&cfg.out)?;
    match cfg.task {
        Task::Simulate => simulate(cfg),
        Task::Validate => run_validate(cfg),
        Task::Solve => solve(cfg),
        Task::Verify => run_verify(cfg),
        Task::Compare => run_compare(cfg),
        Task::Converge => converge(cfg),
    }
}

fn simulate(cfg: &RunConfig) -> Result<Outcome> {
    let model = cfg.file.model()?;
    let grid = TimeGrid::new(model.t_end(), cfg.n_steps)?;
    let batch = sample_paths(&grid, model.hurst(), cfg.n_paths, cfg.seed()?)?;
    let mut w = create(&cfg.out, "paths.csv")?;
    batch.write_csv(&mut w)?;
    w.flush()?;
    let cov = covariance_check(&batch)?;
    let verdict = Verdict::new("covariance", "fraction_within_3se", 0.99, 0.0, cov.fraction, cov.passed);
    let summary = vec![format!("{} of {} covariance entries within 3 SE", cov.within, cov.checked)];
    finish(&cfg.out, vec![verdict], summary)
}

/// The labelled models of a file: its single model, or both sides and the
/// middle model of a comparison.
fn file_models(file: &ModelFile) -> Result<Vec<(&'static str, ModelSpec)>> {
    if file.driver.is_some() {
        return Ok(vec![("model", file.model()?)]);
    }
    let (m1, m2, section) = file.compare_models()?;
    let mut middle = m2.clone();
    middle.driver = section.driver_bar.clone();
    middle.terminal = section.terminal_bar.clone();
    Ok(vec![("model1", m1), ("model2", m2), ("middle", middle)])
}

fn run_validate(cfg: &RunConfig) -> Result<Outcome> {
    let models = file_models(&cfg.file)?;
    let mut w = create(&cfg.out, "validation.csv")?;
    writeln!(w, "model,check,passed,detail")?;
    let mut failed = Vec::new();
    let mut checks = 0;
    for (label, model) in &models {
        let grid = model.grid(cfg.n_steps)?;
        let report = validate(model, &grid);
        for c in &report.checks {
            writeln!(w, "{label},{},{},{}", csv_field(c.name), c.passed, csv_field(&c.detail))?;
        }
        let rounding = format!("max rounding error {}", report.max_rounding_error);
        writeln!(w, "{label},delay rounding,true,{}", csv_field(&rounding))?;
        checks += report.checks.len();
        failed.extend(report.failures().map(|c| format!("{label} {}: {}", c.name, c.detail)));
    }
    w.flush()?;
    if !failed.is_empty() {
        return Err(Error::Validation(failed.join("; ")));
    }
    Ok(Outcome { passed: true, summary: vec![format!("{checks} checks passed")] })
}

fn solve(cfg: &RunConfig) -> Result<Outcome> {
    let model = cfg.file.model()?;
    let grid = model.grid(cfg.n_steps)?;
    validated(&model, &grid)?;
    let table = model.kernel_table(&grid)?;
    let (field, trace) = picard_solve_with(&model, &table, &cfg.solver)?;
    let report = apriori_report(&field, &model, cfg.solver.beta);

    let mut w = create(&cfg.out, "solution.csv")?;
    field.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&cfg.out, "trace.csv")?;
    trace.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&cfg.out, "kernel.csv")?;
    table.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&cfg.out, "apriori.csv")?;
    writeln!(w, "t,lhs,theta")?;
    for ((t, l), th) in report.times.iter().zip(&report.lhs).zip(&report.theta) {
        writeln!(w, "{t},{l},{th}")?;
    }
    w.flush()?;

    let ratio = report.ratio.unwrap_or(0.0);
    let verdicts = vec![
        Verdict::new("solve", "converged", 1.0, 0.0, if trace.converged { 1.0 } else { 0.0 }, trace.converged),
        Verdict::new("apriori", "sup_ratio", 0.0, 0.0, ratio, ratio.is_finite()),
    ];
    let summary = vec![
        format!(
            "{} windows, {} iterations, converged = {}, kernel ratio bound M = {}",
            trace.window_boundaries.len() - 1,
            trace.iterations,
            trace.converged,
            table.ratio_bound()
        ),
        match report.ratio {
            Some(r) => format!("a priori ratio sup LHS/Theta = {r}"),
            None => "a priori ratio: 0/0 (zero solution and data)".into(),
        },
    ];
    finish(&cfg.out, verdicts, summary)
}

fn run_verify(cfg: &RunConfig) -> Result<Outcome> {
    let model = cfg.file.model()?;
    let grid = model.grid(cfg.n_steps)?;
    validated(&model, &grid)?;
    let seed = cfg.seed()?;
    let mut verdicts = Vec::new();
    let mut summary = Vec::new();

    let unit = TimeGrid::new(1.0, 400)?;
    let batch = sample_paths(&unit, model.hurst(), cfg.n_paths, seed)?;

    let moments = integral_moment_suite(&batch, &default_moment_corpus())?;
    let mut w = create(&cfg.out, "moments.csv")?;
    writeln!(w, "integrand,mean,standard_error,variance,target,passed")?;
    for e in &moments.entries {
        writeln!(w, "{},{},{},{},{},{}", csv_field(&e.name), e.mean, e.standard_error, e.variance, e.target, e.passed)?;
        verdicts.push(Verdict::new(&format!("moment[{}]", e.name), "variance", e.target, 0.05, e.variance, e.passed));
    }
    w.flush()?;

    let mut w = create(&cfg.out, "ito.csv")?;
    writeln!(w, "function,process,n_steps,residual")?;
    for (func, name, spec) in default_ito_corpus() {
        let r = ito_residual(func, &spec, &batch)?;
        for (n, v) in r.steps.iter().zip(&r.norms) {
            writeln!(w, "{},{name},{n},{v}", csv_field(func.name()))?;
        }
        let mut v = r.verdict();
        v.name = format!("ito[{},{name}]", func.name());
        verdicts.push(v);
    }
    w.flush()?;

    let mut w = create(&cfg.out, "product.csv")?;
    writeln!(w, "first,second,n_steps,residual")?;
    for (a, b, p1, p2) in default_product_corpus() {
        let r = product_rule_residual(&p1, &p2, &batch, ProductVariant::Corrected)?;
        for (n, v) in r.steps.iter().zip(&r.norms) {
            writeln!(w, "{a},{b},{n},{v}")?;
        }
        let mut v = r.verdict();
        v.name = format!("product[{a},{b}]");
        verdicts.push(v);
    }
    w.flush()?;

    let model_batch = sample_paths(&grid, model.hurst(), cfg.n_paths, seed)?;
    let r = bsde_refinement(&model, &cfg.solver, &model_batch)?;
    let mut w = create(&cfg.out, "bsde.csv")?;
    r.write_csv(&mut w)?;
    w.flush()?;
    summary.push(format!("bsde residuals {:?}, order {:?}", r.norms, r.order));
    verdicts.push(r.verdict());
    finish(&cfg.out, verdicts, summary)
}

fn run_compare(cfg: &RunConfig) -> Result<Outcome> {
    let (m1, m2, section) = cfg.file.compare_models()?;
    let grid = m1.grid(cfg.n_steps)?;
    validated(&m1, &grid)?;
    validated(&m2, &grid)?;
    let report = compare(&m1, &m2, &section.driver_bar, &section.terminal_bar, &grid, &cfg.solver)?;
    let mut w = create(&cfg.out, "ordering.csv")?;
    report.write_csv(&mut w)?;
    w.flush()?;
    if report.applicability == Applicability::Inapplicable {
        let reason = report.reason.unwrap_or_default();
        return finish(&cfg.out, Vec::new(), vec![format!("comparison hypotheses not met, no verdict: {reason}")]);
    }
    let summary = vec![format!(
        "min(u2 - u1) = {}, limit within [{}, {}] margins, {} sequence terms, observed rate {:?}, proof beta {}",
        report.min_gap,
        report.min_lower,
        report.min_upper,
        report.sequence_norms.len(),
        report.observed_rate,
        report.proof_beta
    )];
    finish(&cfg.out, report.verdicts("compare"), summary)
}

fn converge(cfg: &RunConfig) -> Result<Outcome> {
    let model = cfg.file.model()?;
    let grid = model.grid(cfg.n_steps)?;
    validated(&model, &grid)?;
    let base = match cfg.solver.space.resolution {
        SpaceResolution::Nodes(n) => n,
        SpaceResolution::Step(_) => 61,
    };
    let table = space_convergence(&model, &grid, &cfg.solver, base)?;
    let mut w = create(&cfg.out, "convergence.csv")?;
    table.write_csv(&mut w)?;
    w.flush()?;
    let summary = vec![if table.exact {
        format!("scheme exact on this model: differences {:?}", table.differences)
    } else {
        format!("space order {:?} from differences {:?}", table.order, table.differences)
    }];
    finish(&cfg.out, vec![table.verdict()], summary)
}

/// Exit status for an error: failed numerics are check failures (1), the rest
/// are configuration or model errors (2).
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence(_) | Error::BoundaryOverflow(_) => 1,
        _ => 2,
    }
}

/// Entry point shared by the binary and the tests.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if cli.list_fixtures {
        for (name, about) in FIXTURES {
            println!("{name:30} {about}");
        }
        return 0;
    }
    let Some(command) = cli.command else {
        eprintln!("no subcommand given; see --help");
        return 2;
    };
    let (task, args) = command.split();
    let result = RunConfig::new(task, args).and_then(|cfg| run(&cfg));
    match result {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            if outcome.passed {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
