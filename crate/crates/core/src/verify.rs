//! Checks of the fractional calculus identities along simulated paths, of the
//! solver output against the BSDE dynamics, and of the comparison theorem.
//!
//! Path loops run in parallel; every reduction is a sequential sum over the
//! per-path results in path order, so reports are reproducible bit for bit.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fbm::{covariance, PathBatch, TimeGrid};
use crate::frac_calc::{divergence_integral_deterministic, heat_smooth_shifted, inner_product, KernelWeights};
use crate::model::{cumulative_trapezoid, eta_paths, forward_paths, DriverArgs, DriverSpec, FuncSpec, ModelSpec, TerminalData};
use crate::quadrature::log_log_slope;
use crate::solver::{
    picard_solve_with, solve_window, weighted_norms, Anticipation, SolutionField, SolverParams, SpaceParams,
    SpaceResolution,
};

/// Strides applied to the finest batch in refinement studies (coarsest first).
pub const REFINEMENT_STRIDES: [usize; 3] = [4, 2, 1];

/// Residuals below this are treated as round-off.
const EXACT_TOL: f64 = 1e-12;

/// Smooth test functions `F(t, x)` for the Itô formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestFunction {
    Identity,
    Square,
    TimeTimesX,
    Exp,
    Sin,
    Cube,
}

impl TestFunction {
    pub const ALL: [TestFunction; 6] = [
        TestFunction::Identity,
        TestFunction::Square,
        TestFunction::TimeTimesX,
        TestFunction::Exp,
        TestFunction::Sin,
        TestFunction::Cube,
    ];

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == name)
            .ok_or_else(|| Error::UnknownFunction(name.to_string()))
    }

    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::Identity => "x",
            TestFunction::Square => "x^2",
            TestFunction::TimeTimesX => "t*x",
            TestFunction::Exp => "exp",
            TestFunction::Sin => "sin",
            TestFunction::Cube => "x^3",
        }
    }

    /// `(F, ∂_t F, ∂_x F, ∂²_x F)` at `(t, x)`.
    pub fn eval(&self, t: f64, x: f64) -> (f64, f64, f64, f64) {
        match self {
            TestFunction::Identity => (x, 0.0, 1.0, 0.0),
            TestFunction::Square => (x * x, 0.0, 2.0 * x, 2.0),
            TestFunction::TimeTimesX => (t * x, x, t, 0.0),
            TestFunction::Exp => {
                let e = x.exp();
                (e, 0.0, e, e)
            }
            TestFunction::Sin => (x.sin(), 0.0, x.cos(), -x.sin()),
            TestFunction::Cube => (x * x * x, 0.0, 3.0 * x * x, 6.0 * x),
        }
    }
}

/// `X_t = x0 + ∫_0^t g ds + ∫_0^t f dB^H` with deterministic `g`, `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessSpec {
    pub x0: f64,
    pub drift: FuncSpec,
    pub vol: FuncSpec,
}

impl ProcessSpec {
    pub fn new(x0: f64, drift: FuncSpec, vol: FuncSpec) -> Self {
        ProcessSpec { x0, drift, vol }
    }

    /// `B^H` itself.
    pub fn fbm() -> Self {
        ProcessSpec::new(0.0, FuncSpec::constant(0.0), FuncSpec::constant(1.0))
    }

    pub fn paths(&self, batch: &PathBatch) -> Array2<f64> {
        let grid = batch.grid();
        let drift = cumulative_trapezoid(&self.drift.sample(grid), grid.dt());
        forward_paths(self.x0, &drift, &self.vol.sample(grid), batch)
    }
}

/// Residual norms over a refinement sequence and the fitted order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub label: String,
    pub steps: Vec<usize>,
    pub norms: Vec<f64>,
    /// Slope of `log norm` against `log Δt`.
    pub order: Option<f64>,
    /// All norms at round-off level.
    pub exact: bool,
    pub threshold: f64,
    pub passed: bool,
}

impl ResidualReport {
    fn new(label: String, t_end: f64, steps: Vec<usize>, norms: Vec<f64>, threshold: f64) -> Self {
        let dts: Vec<f64> = steps.iter().map(|n| t_end / *n as f64).collect();
        let exact = norms.iter().all(|r| *r <= EXACT_TOL);
        let order = if exact { None } else { log_log_slope(&dts, &norms) };
        let passed = exact || order.is_some_and(|o| o >= threshold);
        ResidualReport { label, steps, norms, order, exact, threshold, passed }
    }

    /// CSV with columns `n_steps, residual`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "n_steps,residual")?;
        for (n, r) in self.steps.iter().zip(&self.norms) {
            writeln!(w, "{n},{r}")?;
        }
        Ok(())
    }

    pub fn verdict(&self) -> Verdict {
        if self.exact {
            Verdict::new(&self.label, "max_residual", 0.0, EXACT_TOL, self.norms.iter().cloned().fold(0.0, f64::max), self.passed)
        } else {
            Verdict::new(&self.label, "order", self.threshold, 0.0, self.order.unwrap_or(f64::NAN), self.passed)
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean_abs(values: &[f64]) -> f64 {
    values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64
}

/// Sample mean and its standard error.
fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// Kernel quantities of a deterministic integrand on the batch grid:
/// `ΔV_k = ‖f‖²_{t_{k+1}} − ‖f‖²_{t_k}` and the pairings
/// `c_k = ⟨f·1_{[0,t_k]}, 1_{[t_k,t_{k+1}]}⟩`.
struct IntegrandKernel {
    values: Vec<f64>,
    norm_increments: Vec<f64>,
    past: Vec<f64>,
    hat: Vec<f64>,
}

impl IntegrandKernel {
    fn new(f: &FuncSpec, grid: &TimeGrid, hurst: f64) -> Result<Self> {
        let n = grid.n_steps();
        let values = f.sample(grid);
        let weights = KernelWeights::new(hurst, grid.dt(), n)?;
        let norm = weights.norm_sq_profile(&values);
        Ok(IntegrandKernel {
            norm_increments: norm.windows(2).map(|w| w[1] - w[0]).collect(),
            past: (0..n).map(|k| weights.past_pairing(&values, k)).collect(),
            hat: (0..=n).map(|m| weights.hat_at(&values, m)).collect(),
            values,
        })
    }
}

/// Per-path residual of the Itô formula at the final time.
///
/// The divergence integral of `∂_x F(s, X_s) f_s` is discretized by the
/// left-point sum with its Wick correction `∂²_x F(t_k, X_k) f_k c_k`; time
/// integrals use the trapezoid rule and the correction term `½∂²_x F dV`.
fn ito_path_residuals(func: TestFunction, spec: &ProcessSpec, batch: &PathBatch) -> Result<Vec<f64>> {
    let grid = *batch.grid();
    let dt = grid.dt();
    let n = grid.n_steps();
    let kern = IntegrandKernel::new(&spec.vol, &grid, batch.hurst())?;
    let g = spec.drift.sample(&grid);
    let x = spec.paths(batch);
    let times = grid.times();
    let values = batch.values();
    Ok((0..batch.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut rhs = 0.0;
            let mut prev = func.eval(times[0], x[(p, 0)]);
            let first = prev.0;
            for k in 0..n {
                let next = func.eval(times[k + 1], x[(p, k + 1)]);
                let (_, ft, fx, fxx) = prev;
                let f = kern.values[k];
                let db = values[(p, k + 1)] - values[(p, k)];
                rhs += 0.5 * dt * (ft + next.1) + 0.5 * dt * (fx * g[k] + next.2 * g[k + 1]);
                rhs += fx * f * db - fxx * f * kern.past[k];
                rhs += 0.5 * fxx * kern.norm_increments[k];
                prev = next;
            }
            prev.0 - first - rhs
        })
        .collect())
}

/// Itô formula residual over the refinement strides of `batch`.
///
/// The norm at each level is the mean absolute residual at the final time.
pub fn ito_residual(func: TestFunction, spec: &ProcessSpec, batch: &PathBatch) -> Result<ResidualReport> {
    let mut steps = Vec::new();
    let mut norms = Vec::new();
    for stride in REFINEMENT_STRIDES {
        let coarse = batch.coarsen(stride)?;
        steps.push(coarse.grid().n_steps());
        norms.push(mean_abs(&ito_path_residuals(func, spec, &coarse)?));
    }
    Ok(ResidualReport::new(format!("ito[{}]", func.name()), batch.grid().t_end(), steps, norms, 0.8))
}

/// `F(T, X_T)` per path, for moment checks alongside the residual.
pub fn terminal_values(func: TestFunction, spec: &ProcessSpec, batch: &PathBatch) -> Vec<f64> {
    let x = spec.paths(batch);
    let n = batch.grid().n_steps();
    let t = batch.grid().t_end();
    (0..batch.n_paths()).map(|p| func.eval(t, x[(p, n)]).0).collect()
}

/// Which coefficients multiply the `𝔻^H` terms of the product rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProductVariant {
    /// `∫ 𝔻_s X_1(s) f_2(s) ds + ∫ 𝔻_s X_2(s) f_1(s) ds`, the form consistent with `E[(B^H_t)²] = t^{2H}`.
    Corrected,
    /// The same terms with the drift coefficients `g_2`, `g_1` in place of `f_2`, `f_1`.
    AsStated,
}

fn product_path_residuals(
    p1: &ProcessSpec,
    p2: &ProcessSpec,
    batch: &PathBatch,
    variant: ProductVariant,
) -> Result<Vec<f64>> {
    let grid = *batch.grid();
    let dt = grid.dt();
    let n = grid.n_steps();
    let h = batch.hurst();
    let k1 = IntegrandKernel::new(&p1.vol, &grid, h)?;
    let k2 = IntegrandKernel::new(&p2.vol, &grid, h)?;
    let g1 = p1.drift.sample(&grid);
    let g2 = p2.drift.sample(&grid);
    let (m1, m2) = match variant {
        ProductVariant::Corrected => (&k1.values, &k2.values),
        ProductVariant::AsStated => (&g1, &g2),
    };
    // ∫ (𝔻X_1·m_2 + 𝔻X_2·m_1) ds by the trapezoid rule; deterministic.
    let mut malliavin = 0.0;
    for k in 0..n {
        let at = |j: usize| k1.hat[j] * m2[j] + k2.hat[j] * m1[j];
        malliavin += 0.5 * dt * (at(k) + at(k + 1));
    }
    let x1 = p1.paths(batch);
    let x2 = p2.paths(batch);
    let values = batch.values();
    Ok((0..batch.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut rhs = x1[(p, 0)] * x2[(p, 0)] + malliavin;
            for k in 0..n {
                let db = values[(p, k + 1)] - values[(p, k)];
                rhs += 0.5 * dt * (x1[(p, k)] * g2[k] + x1[(p, k + 1)] * g2[k + 1]);
                rhs += 0.5 * dt * (x2[(p, k)] * g1[k] + x2[(p, k + 1)] * g1[k + 1]);
                rhs += (x1[(p, k)] * k2.values[k] + x2[(p, k)] * k1.values[k]) * db;
                rhs -= k2.values[k] * k1.past[k] + k1.values[k] * k2.past[k];
            }
            x1[(p, n)] * x2[(p, n)] - rhs
        })
        .collect())
}

/// Product-rule residual over the refinement strides of `batch`. The required
/// order is 1.8 when both processes are deterministic, 0.8 otherwise.
pub fn product_rule_residual(
    p1: &ProcessSpec,
    p2: &ProcessSpec,
    batch: &PathBatch,
    variant: ProductVariant,
) -> Result<ResidualReport> {
    let deterministic = p1.vol.is_zero() && p2.vol.is_zero();
    let mut steps = Vec::new();
    let mut norms = Vec::new();
    for stride in REFINEMENT_STRIDES {
        let coarse = batch.coarsen(stride)?;
        steps.push(coarse.grid().n_steps());
        norms.push(mean_abs(&product_path_residuals(p1, p2, &coarse, variant)?));
    }
    let threshold = if deterministic { 1.8 } else { 0.8 };
    Ok(ResidualReport::new("product".into(), batch.grid().t_end(), steps, norms, threshold))
}

/// Smoothed anticipated slices per time node, as the solver sees them.
fn anticipated_slices(model: &ModelSpec, field: &SolutionField, z_side: bool) -> Result<Option<Array2<f64>>> {
    let uses = if z_side { model.driver.uses_anticipated_z() } else { model.driver.uses_anticipated_y() };
    if !uses {
        return Ok(None);
    }
    let grid = &field.grid;
    let k_t = field.horizon_index;
    let mut out = Array2::zeros((k_t + 1, field.space.n));
    for k in 0..=k_t {
        let t = grid.time(k);
        let delay = if z_side { model.delays.zeta.eval(t) } else { model.delays.delta.eval(t) };
        let j = grid.nearest(t + delay.max(0.0)).max(k);
        let source = if z_side { field.z.row(j) } else { field.u.row(j) };
        let var = (field.eta_var[j] - field.eta_var[k]).max(0.0);
        let shift = field.eta_mean[j] - field.eta_mean[k];
        let smoothed = heat_smooth_shifted(&source.to_vec(), field.space.dx, var, shift)?;
        out.row_mut(k).assign(&ndarray::ArrayView1::from(&smoothed));
    }
    Ok(Some(out))
}

/// Mean absolute one-step residual of the BSDE dynamics along the paths,
///
/// `r_k = u(t_{k+1}, η_{k+1}) − u(t_k, η_k) + f_k Δt − z(t_k, η_k) ΔB^H_k + a(t_k) ∂²_x u(t_k, η_k) Δt`,
///
/// over `[0, T]`. The last term converts the forward sum into the divergence integral.
pub fn bsde_residual(model: &ModelSpec, solution: &SolutionField, batch: &PathBatch) -> Result<f64> {
    let grid = &solution.grid;
    if batch.grid() != grid {
        return Err(Error::GridMismatch(format!(
            "batch has {} steps on [0, {}], solution has {} on [0, {}]",
            batch.grid().n_steps(),
            batch.grid().t_end(),
            grid.n_steps(),
            grid.t_end()
        )));
    }
    let table = model.kernel_table(grid)?;
    let eta = eta_paths(model, batch)?;
    let k_t = solution.horizon_index;
    let dt = grid.dt();
    let space = solution.space;
    let d2: Vec<Vec<f64>> = (0..k_t).map(|k| solution.d2u_dx2(k)).collect();
    let ay = anticipated_slices(model, solution, false)?;
    let az = anticipated_slices(model, solution, true)?;
    let values = batch.values();
    let per_path: Vec<f64> = (0..batch.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut total = 0.0;
            for k in 0..k_t {
                let x = eta[(p, k)];
                let u_k = space.interpolate_cubic(solution.u.row(k), x);
                let u_next = space.interpolate_cubic(solution.u.row(k + 1), eta[(p, k + 1)]);
                let z_k = space.interpolate_cubic(solution.z.row(k), x);
                let d2_k = space.interpolate_cubic(ndarray::ArrayView1::from(&d2[k]), x);
                let args = DriverArgs {
                    t: grid.time(k),
                    x,
                    y: u_k,
                    z: z_k,
                    ant_y: ay.as_ref().map_or(0.0, |a| space.interpolate_cubic(a.row(k), x)),
                    ant_z: az.as_ref().map_or(0.0, |a| space.interpolate_cubic(a.row(k), x)),
                };
                let db = values[(p, k + 1)] - values[(p, k)];
                let r = u_next - u_k + model.driver.eval(&args) * dt - z_k * db + table.diffusion[k] * d2_k * dt;
                total += r.abs();
            }
            total / k_t as f64
        })
        .collect();
    Ok(mean(&per_path))
}

/// Solves `model` on each refinement of `batch` and fits the order of the
/// BSDE residual. `batch` must live on `[0, T+K]`.
pub fn bsde_refinement(model: &ModelSpec, params: &SolverParams, batch: &PathBatch) -> Result<ResidualReport> {
    let mut steps = Vec::new();
    let mut norms = Vec::new();
    for stride in REFINEMENT_STRIDES {
        let coarse = batch.coarsen(stride)?;
        let grid = *coarse.grid();
        model.horizon_index(&grid)?;
        let table = model.kernel_table(&grid)?;
        let (field, _) = picard_solve_with(model, &table, params)?;
        steps.push(grid.n_steps());
        norms.push(bsde_residual(model, &field, &coarse)?);
    }
    Ok(ResidualReport::new("bsde".into(), batch.grid().t_end(), steps, norms, 0.8))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Applicability {
    Applicable,
    /// A sampled hypothesis of the comparison theorem failed; no verdict is drawn.
    Inapplicable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderingReport {
    pub applicability: Applicability,
    pub reason: Option<String>,
    /// `min (u² − u¹)` over all nodes.
    pub min_gap: f64,
    /// `min (Ȳ − u¹)` and `min (u² − Ȳ)` for the limit `Ȳ` of the monotone sequence.
    pub min_lower: f64,
    pub min_upper: f64,
    pub violations: usize,
    /// `‖Ỹ_n − Ỹ_{n−1}‖` for `n = 1, 2, …`.
    pub sequence_norms: Vec<f64>,
    pub sequence_decreasing: bool,
    /// Geometric mean of successive norm ratios; diagnostic only.
    pub observed_rate: Option<f64>,
    /// The weight exponent `8CM(L+1) + 4/M` of the comparison argument; diagnostic only.
    pub proof_beta: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OrderingReport {
    fn inapplicable(reason: String) -> Self {
        OrderingReport {
            applicability: Applicability::Inapplicable,
            reason: Some(reason),
            min_gap: f64::NAN,
            min_lower: f64::NAN,
            min_upper: f64::NAN,
            violations: 0,
            sequence_norms: Vec::new(),
            sequence_decreasing: false,
            observed_rate: None,
            proof_beta: f64::NAN,
            tolerance: ORDER_TOL,
            passed: false,
        }
    }

    /// CSV with columns `n, norm`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "n,norm")?;
        for (i, v) in self.sequence_norms.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, v)?;
        }
        Ok(())
    }

    pub fn verdicts(&self, name: &str) -> Vec<Verdict> {
        vec![
            Verdict::new(name, "min_gap", 0.0, self.tolerance, self.min_gap, self.min_gap >= -self.tolerance),
            Verdict::new(
                name,
                "sequence_decreasing",
                1.0,
                0.0,
                if self.sequence_decreasing { 1.0 } else { 0.0 },
                self.sequence_decreasing,
            ),
        ]
    }
}

const ORDER_TOL: f64 = 1e-8;
const SEQUENCE_FLOOR: f64 = 1e-11;
const SEQUENCE_MAX: usize = 60;
const HYPOTHESIS_SAMPLES: usize = 1000;

/// Samples the sandwich and monotonicity hypotheses; `Err` carries the first violation.
fn check_hypotheses(
    f1: &DriverSpec,
    f2: &DriverSpec,
    fbar: &DriverSpec,
    g1: &TerminalData,
    g2: &TerminalData,
    gbar: &TerminalData,
    horizon: f64,
) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de_4a11);
    let tol = 1e-12;
    for _ in 0..HYPOTHESIS_SAMPLES {
        let args = DriverArgs {
            t: rng.random_range(0.0..=horizon),
            x: rng.random_range(-6.0..6.0),
            y: rng.random_range(-6.0..6.0),
            z: rng.random_range(-6.0..6.0),
            ant_y: rng.random_range(-6.0..6.0),
            ant_z: 0.0,
        };
        let (a, b, c) = (f1.eval(&args), fbar.eval(&args), f2.eval(&args));
        if a > b + tol || b > c + tol {
            return Err(format!("driver sandwich fails at {args:?}: {a} <= {b} <= {c}"));
        }
        let bump = DriverArgs { ant_y: args.ant_y + rng.random_range(0.0..2.0), ..args };
        if fbar.eval(&bump) < b - tol {
            return Err(format!("middle driver decreases in the anticipated argument at {args:?}"));
        }
        let x = args.x;
        let (a, b, c) = (g1.g.eval(x), gbar.g.eval(x), g2.g.eval(x));
        if a > b + tol || b > c + tol {
            return Err(format!("terminal sandwich fails at x = {x}: {a} <= {b} <= {c}"));
        }
    }
    Ok(())
}

fn min_difference(upper: &Array2<f64>, lower: &Array2<f64>) -> f64 {
    upper.iter().zip(lower.iter()).map(|(a, b)| a - b).fold(f64::INFINITY, f64::min)
}

/// Solves both models, builds the decreasing sequence `Ỹ_n` started from
/// `Ỹ_0 = Y²` with the middle data `f̄`, `ḡ`, and checks `Y¹ ≤ Y²`.
pub fn compare(
    model1: &ModelSpec,
    model2: &ModelSpec,
    fbar: &DriverSpec,
    gbar: &TerminalData,
    grid: &TimeGrid,
    params: &SolverParams,
) -> Result<OrderingReport> {
    if model1.coefficients != model2.coefficients
        || model1.delays != model2.delays
        || model1.horizon != model2.horizon
    {
        return Err(Error::Validation("compared models must share coefficients, delays and horizon".into()));
    }
    for d in [&model1.driver, &model2.driver, fbar] {
        if d.uses_anticipated_z() {
            return Err(Error::Validation("comparison drivers may not anticipate Z".into()));
        }
    }
    if let Err(reason) = check_hypotheses(
        &model1.driver,
        &model2.driver,
        fbar,
        &model1.terminal,
        &model2.terminal,
        gbar,
        model1.horizon,
    ) {
        return Ok(OrderingReport::inapplicable(reason));
    }

    let table = model1.kernel_table(grid)?;
    let (y1, _) = picard_solve_with(model1, &table, params)?;
    let (y2, _) = picard_solve_with(model2, &table, params)?;

    let mut middle = model2.clone();
    middle.driver = fbar.clone();
    middle.terminal = gbar.clone();
    let terminal = SolutionField::terminal_extension(&middle, &table, y2.space)?;
    let k_t = y2.horizon_index;
    let mut current = y2.clone();
    for k in k_t..grid.n_nodes() {
        current.u.row_mut(k).assign(&terminal.u.row(k));
        current.z.row_mut(k).assign(&terminal.z.row(k));
    }
    let mut norms = Vec::new();
    for _ in 0..SEQUENCE_MAX {
        let next = solve_window(&middle, &table, &current, 0, k_t, Anticipation::Frozen)?;
        let (norm, _) = weighted_norms(&next, &current, &middle, params.beta)?;
        norms.push(norm);
        current = next;
        if norm < SEQUENCE_FLOOR {
            break;
        }
    }

    let min_gap = min_difference(&y2.u, &y1.u);
    let min_lower = min_difference(&current.u, &y1.u);
    let min_upper = min_difference(&y2.u, &current.u);
    let violations = y2.u.iter().zip(y1.u.iter()).filter(|(a, b)| *a - *b < -ORDER_TOL).count();
    let sequence_decreasing = norms
        .windows(2)
        .all(|w| w[1] < w[0] || (w[0] < SEQUENCE_FLOOR && w[1] < SEQUENCE_FLOOR));
    let ratios: Vec<f64> = norms
        .windows(2)
        .filter(|w| w[0] >= SEQUENCE_FLOOR && w[1] > 0.0)
        .map(|w| w[1] / w[0])
        .collect();
    let observed_rate = (!ratios.is_empty())
        .then(|| (ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp());
    let m = table.ratio_bound();
    let c = model1.driver.lipschitz.max(model2.driver.lipschitz).max(fbar.lipschitz);
    let proof_beta = 8.0 * c * m * (model1.delays.l + 1.0) + 4.0 / m;
    let passed = min_gap >= -ORDER_TOL
        && min_lower >= -ORDER_TOL
        && min_upper >= -ORDER_TOL
        && sequence_decreasing;
    Ok(OrderingReport {
        applicability: Applicability::Applicable,
        reason: None,
        min_gap,
        min_lower,
        min_upper,
        violations,
        sequence_norms: norms,
        sequence_decreasing,
        observed_rate,
        proof_beta,
        tolerance: ORDER_TOL,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEntry {
    pub name: String,
    pub mean: f64,
    pub standard_error: f64,
    pub variance: f64,
    /// `‖F‖²_T`.
    pub target: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub entries: Vec<MomentEntry>,
    pub passed: bool,
}

/// Zero mean (within 3 standard errors) and isometry (variance within 5% of
/// `‖F‖²_T`) of `∫_0^T F dB^H` for deterministic integrands.
pub fn integral_moment_suite(batch: &PathBatch, corpus: &[(String, FuncSpec)]) -> Result<MomentReport> {
    let grid = batch.grid();
    let t = grid.t_end();
    let mut entries = Vec::new();
    for (name, func) in corpus {
        let f = func.sample(grid);
        let integrals = (0..batch.n_paths())
            .into_par_iter()
            .map(|p| divergence_integral_deterministic(&f, &batch.path(p).to_vec()))
            .collect::<Result<Vec<f64>>>()?;
        let (mean, se) = mean_se(&integrals);
        let variance = integrals.iter().map(|v| v * v).sum::<f64>() / integrals.len() as f64;
        let target = inner_product(&f, &f, grid, t, batch.hurst())?;
        let variance_ok = if target == 0.0 { variance == 0.0 } else { ((variance - target) / target).abs() <= 0.05 };
        entries.push(MomentEntry {
            name: name.clone(),
            mean,
            standard_error: se,
            variance,
            target,
            passed: mean.abs() <= 3.0 * se && variance_ok,
        });
    }
    let passed = entries.iter().all(|e| e.passed);
    Ok(MomentReport { entries, passed })
}

/// Five deterministic integrands used by the moment suite.
pub fn default_moment_corpus() -> Vec<(String, FuncSpec)> {
    vec![
        ("1".into(), FuncSpec::constant(1.0)),
        ("0".into(), FuncSpec::constant(0.0)),
        ("s".into(), FuncSpec::linear(0.0, 1.0)),
        ("1-2s+s^2".into(), FuncSpec::polynomial(&[1.0, -2.0, 1.0])),
        ("sin(3s)".into(), FuncSpec::Sine { amplitude: 1.0, frequency: 3.0, phase: 0.0 }),
        ("exp(-s)".into(), FuncSpec::Exponential { scale: 1.0, rate: -1.0 }),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    pub checked: usize,
    pub within: usize,
    pub fraction: f64,
    pub passed: bool,
}

/// Entrywise comparison of the empirical second moments `E[B_s B_t]` with the
/// fBm covariance, each within 3 estimated standard errors; passes when at
/// least 99% of the entries `s ≤ t` (both nonzero) agree.
pub fn covariance_check(batch: &PathBatch) -> Result<CovarianceReport> {
    let grid = batch.grid();
    let n = grid.n_steps();
    let values = batch.values();
    let np = batch.n_paths() as f64;
    let pairs: Vec<(usize, usize)> = (1..=n).flat_map(|i| (i..=n).map(move |j| (i, j))).collect();
    let hits = pairs
        .par_iter()
        .map(|&(i, j)| -> Result<bool> {
            let products: Vec<f64> = values.rows().into_iter().map(|r| r[i] * r[j]).collect();
            let m = products.iter().sum::<f64>() / np;
            let var = products.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (np - 1.0);
            let exact = covariance(grid.time(i), grid.time(j), batch.hurst())?;
            Ok((m - exact).abs() <= 3.0 * (var / np).sqrt())
        })
        .collect::<Result<Vec<bool>>>()?;
    let within = hits.iter().filter(|h| **h).count();
    let fraction = within as f64 / pairs.len() as f64;
    Ok(CovarianceReport { checked: pairs.len(), within, fraction, passed: fraction >= 0.99 })
}

/// Space-refinement study at `t = 0`: differences between successive nested
/// grids (`n`, `2n−1`, `4n−3` nodes) and the fitted order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub nodes: Vec<usize>,
    pub dx: Vec<f64>,
    /// `max |u_{dx} − u_{dx/2}|` on the coarse nodes at least three standard
    /// deviations inside the domain.
    pub differences: Vec<f64>,
    pub order: Option<f64>,
    pub exact: bool,
    pub threshold: f64,
    pub passed: bool,
}

impl ConvergenceTable {
    /// CSV with columns `n_space, dx, difference` (the finest row has no difference).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "n_space,dx,difference")?;
        for (i, (n, dx)) in self.nodes.iter().zip(&self.dx).enumerate() {
            match self.differences.get(i) {
                Some(d) => writeln!(w, "{n},{dx},{d}")?,
                None => writeln!(w, "{n},{dx},")?,
            }
        }
        Ok(())
    }

    pub fn verdict(&self) -> Verdict {
        if self.exact {
            let v = self.differences.iter().cloned().fold(0.0, f64::max);
            Verdict::new("converge", "max_difference", 0.0, CONVERGE_EXACT_TOL, v, self.passed)
        } else {
            Verdict::new("converge", "space_order", self.threshold, 0.0, self.order.unwrap_or(f64::NAN), self.passed)
        }
    }
}

const CONVERGE_EXACT_TOL: f64 = 1e-9;
const BOUNDARY_BAND: f64 = 3.0;

pub fn space_convergence(
    model: &ModelSpec,
    grid: &TimeGrid,
    params: &SolverParams,
    base_nodes: usize,
) -> Result<ConvergenceTable> {
    let table = model.kernel_table(grid)?;
    let nodes = [base_nodes, 2 * base_nodes - 1, 4 * base_nodes - 3];
    let mut fields = Vec::new();
    for n in nodes {
        let p = SolverParams {
            space: SpaceParams { span: params.space.span, resolution: SpaceResolution::Nodes(n) },
            ..*params
        };
        fields.push(picard_solve_with(model, &table, &p)?.0);
    }
    let mean0 = fields[0].eta_mean[0];
    let sd = fields[0].eta_var.iter().cloned().fold(0.0, f64::max).sqrt();
    // The boundary rows are only first-order accurate; keep a band of
    // BOUNDARY_BAND standard deviations between them and the measured nodes.
    let reach = (params.space.span - BOUNDARY_BAND).max(1.0) * sd;
    let mut differences = Vec::new();
    let mut scale: f64 = 1.0;
    for level in 0..2 {
        let (coarse, fine) = (&fields[level], &fields[level + 1]);
        let mut worst: f64 = 0.0;
        for i in 0..coarse.space.n {
            if (coarse.space.x(i) - mean0).abs() > reach {
                continue;
            }
            let a = coarse.u[(0, i)];
            let b = fine.u[(0, 2 * i)];
            scale = scale.max(a.abs());
            worst = worst.max((a - b).abs());
        }
        differences.push(worst);
    }
    let dx: Vec<f64> = fields.iter().map(|f| f.space.dx).collect();
    let exact = differences.iter().all(|d| *d <= CONVERGE_EXACT_TOL * scale);
    let order = if exact { None } else { log_log_slope(&dx[..2], &differences) };
    let threshold = 1.8;
    let passed = exact || order.is_some_and(|o| o >= threshold);
    Ok(ConvergenceTable { nodes: nodes.to_vec(), dx, differences, order, exact, threshold, passed })
}

/// One machine-readable check outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub name: String,
    pub metric: String,
    pub target: f64,
    pub tolerance: f64,
    pub value: f64,
    pub pass: bool,
}

impl Verdict {
    pub fn new(name: &str, metric: &str, target: f64, tolerance: f64, value: f64, pass: bool) -> Self {
        Verdict { name: name.into(), metric: metric.into(), target, tolerance, value, pass }
    }
}

/// Lines `name,metric,target,tolerance,value,pass`.
/// Quotes a CSV field when it contains a separator, quote or newline.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One headerless line per verdict: `name,metric,target,tolerance,value,pass`.
pub fn write_verdicts<W: Write>(mut w: W, verdicts: &[Verdict]) -> Result<()> {
    for v in verdicts {
        writeln!(w, "{},{},{},{},{},{}", csv_field(&v.name), csv_field(&v.metric), v.target, v.tolerance, v.value, v.pass)?;
    }
    Ok(())
}

/// Named processes used by the default residual corpora.
pub fn process_catalogue() -> Vec<(&'static str, ProcessSpec)> {
    vec![
        ("fbm", ProcessSpec::fbm()),
        ("drifted", ProcessSpec::new(0.5, FuncSpec::linear(0.3, 1.0), FuncSpec::constant(1.0))),
        ("time_vol", ProcessSpec::new(0.0, FuncSpec::constant(-0.2), FuncSpec::linear(1.0, 1.0))),
        ("ramp", ProcessSpec::new(0.0, FuncSpec::constant(1.0), FuncSpec::constant(0.0))),
        ("drift_a", ProcessSpec::new(1.0, FuncSpec::linear(0.0, 1.0), FuncSpec::constant(0.0))),
        (
            "drift_b",
            ProcessSpec::new(0.5, FuncSpec::Sine { amplitude: 1.0, frequency: 2.0, phase: 0.0 }, FuncSpec::constant(0.0)),
        ),
    ]
}

fn catalogue(name: &str) -> ProcessSpec {
    process_catalogue().into_iter().find(|(n, _)| *n == name).map(|(_, p)| p).expect("catalogued process")
}

/// Test function / process pairs for the Itô formula check.
pub fn default_ito_corpus() -> Vec<(TestFunction, &'static str, ProcessSpec)> {
    [
        (TestFunction::Identity, "fbm"),
        (TestFunction::Identity, "time_vol"),
        (TestFunction::Square, "fbm"),
        (TestFunction::TimeTimesX, "drifted"),
        (TestFunction::Exp, "fbm"),
        (TestFunction::Sin, "time_vol"),
        (TestFunction::Cube, "drifted"),
    ]
    .into_iter()
    .map(|(f, p)| (f, p, catalogue(p)))
    .collect()
}

/// Process pairs for the product-rule check.
pub fn default_product_corpus() -> Vec<(&'static str, &'static str, ProcessSpec, ProcessSpec)> {
    [
        ("drift_a", "drift_b"),
        ("fbm", "fbm"),
        ("fbm", "ramp"),
        ("drifted", "time_vol"),
        ("time_vol", "drift_b"),
    ]
    .into_iter()
    .map(|(a, b)| (a, b, catalogue(a), catalogue(b)))
    .collect()
}
