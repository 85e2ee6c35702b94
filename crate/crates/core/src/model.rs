//! Problem description for the anticipative BSDE
//!
//! ```text
//! −dY_t = f(t, η_t, Y_t, Z_t, Y_{t+δ(t)}, Z_{t+ζ(t)}) dt − Z_t dB^H_t,  t ∈ [0, T]
//!   Y_t = g(η_t), Z_t = h(η_t),                                  t ∈ [T, T+K]
//! ```
//!
//! with forward process `η_t = η_0 + ∫_0^t b ds + ∫_0^t σ dB^H`. Coefficients,
//! delays and terminal data are deterministic functions picked from a small
//! named registry so that models can be written to and read from config files.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbm::{PathBatch, TimeGrid};
use crate::frac_calc::{build_kernel_table, KernelTable};
use crate::quadrature::{integrate, normal_expectation};

/// A deterministic scalar function selected by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FuncSpec {
    Constant { value: f64 },
    Linear { intercept: f64, slope: f64 },
    /// `Σ coeffs[i]·x^i`.
    Polynomial { coeffs: Vec<f64> },
    /// `scale·exp(rate·x)`.
    Exponential { scale: f64, rate: f64 },
    /// `amplitude·sin(frequency·x + phase)`.
    Sine { amplitude: f64, frequency: f64, phase: f64 },
}

impl FuncSpec {
    pub fn constant(value: f64) -> Self {
        FuncSpec::Constant { value }
    }

    pub fn linear(intercept: f64, slope: f64) -> Self {
        FuncSpec::Linear { intercept, slope }
    }

    pub fn polynomial(coeffs: &[f64]) -> Self {
        FuncSpec::Polynomial { coeffs: coeffs.to_vec() }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            FuncSpec::Constant { value } => *value,
            FuncSpec::Linear { intercept, slope } => intercept + slope * x,
            FuncSpec::Polynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c),
            FuncSpec::Exponential { scale, rate } => scale * (rate * x).exp(),
            FuncSpec::Sine { amplitude, frequency, phase } => amplitude * (frequency * x + phase).sin(),
        }
    }

    pub fn sample(&self, grid: &TimeGrid) -> Vec<f64> {
        grid.times().iter().map(|t| self.eval(*t)).collect()
    }

    pub fn is_zero(&self) -> bool {
        match self {
            FuncSpec::Constant { value } => *value == 0.0,
            FuncSpec::Linear { intercept, slope } => *intercept == 0.0 && *slope == 0.0,
            FuncSpec::Polynomial { coeffs } => coeffs.iter().all(|c| *c == 0.0),
            FuncSpec::Exponential { scale, .. } => *scale == 0.0,
            FuncSpec::Sine { amplitude, .. } => *amplitude == 0.0,
        }
    }

    /// `∫_a^b` by composite Gauss-Legendre.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if let FuncSpec::Constant { value } = self {
            return value * (b - a);
        }
        integrate(|s| self.eval(s), a, b, 16)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSet {
    pub hurst: f64,
    pub eta0: f64,
    pub b: FuncSpec,
    pub sigma: FuncSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySpec {
    pub delta: FuncSpec,
    pub zeta: FuncSpec,
    /// Length of the terminal window `[T, T+K]`.
    pub k: f64,
    /// Declared constant of the integral delay condition.
    pub l: f64,
}

impl DelaySpec {
    pub fn none() -> Self {
        DelaySpec { delta: FuncSpec::constant(0.0), zeta: FuncSpec::constant(0.0), k: 0.0, l: 1.0 }
    }
}

/// Arguments of a driver evaluation. `ant_y`, `ant_z` are the conditional
/// expectations `E^{F_t}[Y_{t+δ(t)}]`, `E^{F_t}[Z_{t+ζ(t)}]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriverArgs {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub ant_y: f64,
    pub ant_z: f64,
}

/// Shape of the driver `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverForm {
    /// `c + c_t t + c_x x + c_y y + c_z z + a_y·ant_y + a_z·ant_z`.
    Linear {
        #[serde(default)]
        constant: f64,
        #[serde(default)]
        time: f64,
        #[serde(default)]
        x: f64,
        #[serde(default)]
        y: f64,
        #[serde(default)]
        z: f64,
        #[serde(default)]
        anticipated_y: f64,
        #[serde(default)]
        anticipated_z: f64,
    },
    /// `c + s_x sin(x) + c_y tanh(y) + c_z tanh(z) + a_y tanh(ant_y) + a_z tanh(ant_z)`.
    Saturating {
        #[serde(default)]
        constant: f64,
        #[serde(default)]
        x_sine: f64,
        #[serde(default)]
        y: f64,
        #[serde(default)]
        z: f64,
        #[serde(default)]
        anticipated_y: f64,
        #[serde(default)]
        anticipated_z: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSpec {
    pub form: DriverForm,
    /// Declared Lipschitz constant `C`.
    pub lipschitz: f64,
}

impl DriverSpec {
    pub fn zero() -> Self {
        DriverSpec::linear(0.0, 0.0, 0.0, 0.0, 0.0)
    }

    /// Linear driver without time or space dependence. The Lipschitz constant
    /// is the largest coefficient magnitude.
    pub fn linear(constant: f64, y: f64, z: f64, anticipated_y: f64, anticipated_z: f64) -> Self {
        let lipschitz = [y, z, anticipated_y, anticipated_z]
            .iter()
            .fold(0.0_f64, |m, c| m.max(c.abs()));
        DriverSpec {
            form: DriverForm::Linear { constant, time: 0.0, x: 0.0, y, z, anticipated_y, anticipated_z },
            lipschitz,
        }
    }

    pub fn eval(&self, a: &DriverArgs) -> f64 {
        match &self.form {
            DriverForm::Linear { constant, time, x, y, z, anticipated_y, anticipated_z } => {
                constant + time * a.t + x * a.x + y * a.y + z * a.z + anticipated_y * a.ant_y
                    + anticipated_z * a.ant_z
            }
            DriverForm::Saturating { constant, x_sine, y, z, anticipated_y, anticipated_z } => {
                constant + x_sine * a.x.sin() + y * a.y.tanh() + z * a.z.tanh()
                    + anticipated_y * a.ant_y.tanh()
                    + anticipated_z * a.ant_z.tanh()
            }
        }
    }

    /// `f(t, x, 0, 0, 0, 0)`.
    pub fn f0(&self, t: f64, x: f64) -> f64 {
        self.eval(&DriverArgs { t, x, y: 0.0, z: 0.0, ant_y: 0.0, ant_z: 0.0 })
    }

    pub fn uses_anticipated_y(&self) -> bool {
        match &self.form {
            DriverForm::Linear { anticipated_y, .. } | DriverForm::Saturating { anticipated_y, .. } => {
                *anticipated_y != 0.0
            }
        }
    }

    pub fn uses_anticipated_z(&self) -> bool {
        match &self.form {
            DriverForm::Linear { anticipated_z, .. } | DriverForm::Saturating { anticipated_z, .. } => {
                *anticipated_z != 0.0
            }
        }
    }

    pub fn depends_on_solution(&self) -> bool {
        match &self.form {
            DriverForm::Linear { y, z, .. } | DriverForm::Saturating { y, z, .. } => *y != 0.0 || *z != 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalData {
    pub g: FuncSpec,
    pub h: FuncSpec,
    /// Declared polynomial growth degree of `g` and `h`.
    pub degree: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub coefficients: CoefficientSet,
    pub delays: DelaySpec,
    pub driver: DriverSpec,
    pub terminal: TerminalData,
    /// Horizon `T`.
    pub horizon: f64,
}

impl ModelSpec {
    pub fn hurst(&self) -> f64 {
        self.coefficients.hurst
    }

    /// End of the extended window, `T + K`.
    pub fn t_end(&self) -> f64 {
        self.horizon + self.delays.k
    }

    /// Uniform grid on `[0, T+K]` with `steps_per_unit·(T+K)` steps; `T` must land on a node.
    pub fn grid(&self, n_steps: usize) -> Result<TimeGrid> {
        let grid = TimeGrid::new(self.t_end(), n_steps)?;
        if grid.node_index(self.horizon).is_none() {
            return Err(Error::GridMismatch(format!(
                "T = {} is not a node of a {n_steps}-step grid on [0, {}]",
                self.horizon,
                self.t_end()
            )));
        }
        Ok(grid)
    }

    pub fn horizon_index(&self, grid: &TimeGrid) -> Result<usize> {
        grid.node_index(self.horizon)
            .ok_or_else(|| Error::GridMismatch(format!("T = {} is not a grid node", self.horizon)))
    }

    pub fn kernel_table(&self, grid: &TimeGrid) -> Result<KernelTable> {
        build_kernel_table(grid, &self.coefficients.sigma.sample(grid), self.hurst())
    }

    /// Mean of `η_t`: `η_0 + ∫_0^t b`.
    pub fn eta_mean(&self, t: f64) -> f64 {
        self.coefficients.eta0 + self.coefficients.b.integral(0.0, t)
    }
}

/// Gaussian marginal `(mean, variance)` of `η_t`.
pub fn eta_marginal(model: &ModelSpec, table: &KernelTable, t: f64) -> Result<(f64, f64)> {
    if !(0.0..=table.grid.t_end() * (1.0 + 1e-12)).contains(&t) {
        return Err(Error::OutOfRange { t, t_end: table.grid.t_end() });
    }
    Ok((model.eta_mean(t), table.norm_sq_at(t)))
}

/// `η` along each path: trapezoid quadrature of `b` plus the left-point sum of `σ` against the path.
pub fn eta_paths(model: &ModelSpec, batch: &PathBatch) -> Result<Array2<f64>> {
    if (batch.hurst() - model.hurst()).abs() > 1e-15 {
        return Err(Error::HurstMismatch { batch: batch.hurst(), model: model.hurst() });
    }
    let grid = batch.grid();
    let drift = cumulative_trapezoid(&model.coefficients.b.sample(grid), grid.dt());
    let sigma = model.coefficients.sigma.sample(grid);
    Ok(forward_paths(model.coefficients.eta0, &drift, &sigma, batch))
}

/// `x0 + drift_k + Σ_{j<k} σ_j ΔB_j` for every path.
pub(crate) fn forward_paths(x0: f64, drift: &[f64], sigma: &[f64], batch: &PathBatch) -> Array2<f64> {
    let values = batch.values();
    let n = drift.len();
    let mut out = Array2::zeros((batch.n_paths(), n));
    for (i, path) in values.rows().into_iter().enumerate() {
        let mut stoch = 0.0;
        out[(i, 0)] = x0 + drift[0];
        for k in 1..n {
            stoch += sigma[k - 1] * (path[k] - path[k - 1]);
            out[(i, k)] = x0 + drift[k] + stoch;
        }
    }
    out
}

pub(crate) fn cumulative_trapezoid(values: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in values.windows(2) {
        acc += 0.5 * dt * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

/// Outcome of one validation check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    /// Largest distance between a delay image and the node it is rounded to.
    pub max_rounding_error: f64,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

const LIPSCHITZ_SAMPLES: usize = 1000;

/// Test integrands for the integral delay condition.
fn delay_corpus(t_end: f64) -> Vec<(&'static str, Box<dyn Fn(f64) -> f64>)> {
    let step = |c: f64| -> Box<dyn Fn(f64) -> f64> { Box::new(move |s: f64| 1.0 / (1.0 + (-60.0 * (s - c) / t_end).exp())) };
    let bump = |c: f64| -> Box<dyn Fn(f64) -> f64> { Box::new(move |s: f64| (-(200.0 * (s - c) / t_end).powi(2)).exp()) };
    vec![
        ("1", Box::new(|_| 1.0)),
        ("s", Box::new(|s| s)),
        ("s^2", Box::new(|s| s * s)),
        ("e^s", Box::new(f64::exp)),
        ("step(0.25)", step(0.25 * t_end)),
        ("step(0.75)", step(0.75 * t_end)),
        ("1-step(0.5)", Box::new(move |s| 1.0 - 1.0 / (1.0 + (-60.0 * (s - 0.5 * t_end) / t_end).exp()))),
        ("bump(0.6)", bump(0.6 * t_end)),
        ("bump(0.95)", bump(0.95 * t_end)),
    ]
}

/// Checks delay conditions, volatility sign, driver Lipschitz bound and
/// terminal integrability on `grid`. Failures are reported, never raised.
pub fn validate(model: &ModelSpec, grid: &TimeGrid) -> ValidationReport {
    let mut checks = Vec::new();
    let t = model.horizon;
    let t_end = model.t_end();
    let tol = 1e-9;

    let covers = (grid.t_end() - t_end).abs() <= 1e-12 * t_end && grid.node_index(t).is_some();
    checks.push(Check {
        name: "grid",
        passed: covers,
        detail: format!("grid [0, {}] with T = {t} as node: {covers}", grid.t_end()),
    });

    checks.push(Check {
        name: "horizon",
        passed: t > 0.0 && model.delays.k >= 0.0 && model.delays.l >= 0.0,
        detail: format!("T = {t}, K = {}, L = {}", model.delays.k, model.delays.l),
    });

    // Condition (i): delay images stay inside [0, T+K].
    let mut worst: Option<(f64, f64, &str)> = None;
    let mut max_rounding: f64 = 0.0;
    for k in 0..grid.n_nodes() {
        let s = grid.time(k);
        if s > t + 1e-12 {
            break;
        }
        for (label, func) in [("delta", &model.delays.delta), ("zeta", &model.delays.zeta)] {
            let d = func.eval(s);
            let image = s + d;
            if d < 0.0 || image > t_end + tol {
                if worst.is_none() {
                    worst = Some((s, d, label));
                }
            } else {
                let node = grid.time(grid.nearest(image));
                max_rounding = max_rounding.max((node - image).abs());
            }
        }
    }
    checks.push(Check {
        name: "condition (i)",
        passed: worst.is_none(),
        detail: match worst {
            None => "t + delay(t) <= T + K at every node".into(),
            Some((s, d, label)) => format!("{label}({s}) = {d}: image {} outside [t, T+K = {t_end}]", s + d),
        },
    });

    // Condition (ii) on the integrand corpus.
    let mut failed: Option<String> = None;
    'outer: for (name, m) in delay_corpus(t_end) {
        for (label, func) in [("delta", &model.delays.delta), ("zeta", &model.delays.zeta)] {
            for k in (0..grid.n_nodes()).step_by((grid.n_nodes() / 32).max(1)) {
                let s0 = grid.time(k);
                if s0 > t {
                    break;
                }
                let lhs = integrate(|s| m(s + func.eval(s)), s0, t, 64);
                let rhs = model.delays.l * integrate(&m, s0, t_end, 64);
                if lhs > rhs + tol * (1.0 + rhs.abs()) {
                    failed = Some(format!("m = {name}, {label}, t = {s0}: {lhs} > L·{}", rhs / model.delays.l.max(1e-300)));
                    break 'outer;
                }
            }
        }
    }
    checks.push(Check {
        name: "condition (ii)",
        passed: failed.is_none(),
        detail: failed.unwrap_or_else(|| format!("holds with L = {} on corpus", model.delays.l)),
    });

    // σ nonvanishing and single-signed on (0, T+K].
    let sigma = model.coefficients.sigma.sample(grid);
    let sign = sigma[grid.n_steps()].signum();
    let bad = sigma.iter().enumerate().skip(1).find(|(_, s)| **s == 0.0 || s.signum() != sign || !s.is_finite());
    checks.push(Check {
        name: "sigma sign",
        passed: bad.is_none(),
        detail: match bad {
            None => "sigma nonzero with constant sign".into(),
            Some((k, s)) => format!("sigma({}) = {s}", grid.time(k)),
        },
    });

    let hurst = model.hurst();
    checks.push(Check {
        name: "hurst",
        passed: hurst > 0.5 && hurst < 1.0,
        detail: format!("H = {hurst}"),
    });

    checks.push(lipschitz_check(&model.driver, t));
    checks.push(growth_check(&model.terminal));

    // Finiteness of E∫_T^{T+K} e^{βt}|g(η_t)|² dt and its h counterpart. The
    // bound is sometimes printed as `< 0`, impossible for a square; `< ∞` is meant.
    // Only meaningful once the kernel table can be built.
    let h1 = match (bad.is_none() && hurst > 0.5 && hurst < 1.0).then(|| model.kernel_table(grid)) {
        Some(Ok(table)) => {
            let beta = 2.0;
            let k_t = grid.nearest(t);
            let mut g_int = 0.0;
            let mut h_int = 0.0;
            for k in k_t..grid.n_steps() {
                for (j, w) in [(k, 0.5), (k + 1, 0.5)] {
                    let s = grid.time(j);
                    let (mean, var) = (model.eta_mean(s), table.sigma_norm_sq[j]);
                    let weight = w * grid.dt() * (beta * s).exp();
                    g_int += weight * normal_expectation(mean, var, |x| model.terminal.g.eval(x).powi(2));
                    h_int += weight
                        * s.powf(2.0 * hurst - 1.0)
                        * normal_expectation(mean, var, |x| model.terminal.h.eval(x).powi(2));
                }
            }
            Check {
                name: "terminal integrability",
                passed: g_int.is_finite() && h_int.is_finite(),
                detail: format!("weighted terminal integrals g: {g_int}, h: {h_int}"),
            }
        }
        Some(Err(e)) => Check { name: "terminal integrability", passed: false, detail: e.to_string() },
        None => Check {
            name: "terminal integrability",
            passed: false,
            detail: "skipped: kernel table unavailable".into(),
        },
    };
    checks.push(h1);

    ValidationReport { checks, max_rounding_error: max_rounding }
}

fn lipschitz_check(driver: &DriverSpec, horizon: f64) -> Check {
    let c = driver.lipschitz;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_11f5);
    let mut worst = 0.0_f64;
    for _ in 0..LIPSCHITZ_SAMPLES {
        let t = rng.random_range(0.0..=horizon);
        let x = rng.random_range(-10.0..10.0);
        let mut draw = || DriverArgs {
            t,
            x,
            y: rng.random_range(-10.0..10.0),
            z: rng.random_range(-10.0..10.0),
            ant_y: rng.random_range(-10.0..10.0),
            ant_z: rng.random_range(-10.0..10.0),
        };
        let a = draw();
        let b = draw();
        let dist = (a.y - b.y).abs() + (a.z - b.z).abs() + (a.ant_y - b.ant_y).abs() + (a.ant_z - b.ant_z).abs();
        let gap = (driver.eval(&a) - driver.eval(&b)).abs();
        worst = worst.max(gap - c * dist);
    }
    let passed = c >= 0.0 && worst <= 1e-9;
    Check {
        name: "lipschitz",
        passed,
        detail: if passed {
            format!("bound C = {c} holds on {LIPSCHITZ_SAMPLES} samples")
        } else {
            format!("bound C = {c} exceeded by {worst}")
        },
    }
}

fn growth_check(terminal: &TerminalData) -> Check {
    let deg = terminal.degree as i32;
    let ratio = |f: &FuncSpec, x: f64| f.eval(x).abs() / (1.0 + x.abs().powi(deg));
    let mut near = 0.0_f64;
    let mut far = 0.0_f64;
    for f in [&terminal.g, &terminal.h] {
        for i in 0..=200 {
            near = near.max(ratio(f, -10.0 + 0.1 * i as f64));
        }
        for x in [-1e3, -1e2, 1e2, 1e3] {
            far = far.max(ratio(f, x));
        }
    }
    let passed = near.is_finite() && far.is_finite() && far <= 10.0 * near.max(1.0);
    Check {
        name: "terminal growth",
        passed,
        detail: format!("|g|,|h| / (1+|x|^{deg}): {near} near origin, {far} far out"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::sample_paths;

    fn base_model(delta: f64, k: f64) -> ModelSpec {
        ModelSpec {
            coefficients: CoefficientSet {
                hurst: 0.75,
                eta0: 0.0,
                b: FuncSpec::constant(0.0),
                sigma: FuncSpec::constant(1.0),
            },
            delays: DelaySpec { delta: FuncSpec::constant(delta), zeta: FuncSpec::constant(0.0), k, l: 1.0 },
            driver: DriverSpec::linear(0.0, 0.0, 0.0, 1.0, 0.0),
            terminal: TerminalData { g: FuncSpec::linear(0.0, 1.0), h: FuncSpec::constant(1.0), degree: 1 },
            horizon: 1.0,
        }
    }

    #[test]
    fn func_registry() {
        assert_eq!(FuncSpec::polynomial(&[1.0, 2.0, 3.0]).eval(2.0), 17.0);
        assert!((FuncSpec::Exponential { scale: 2.0, rate: 0.5 }.eval(2.0) - 2.0 * 1f64.exp()).abs() < 1e-15);
        assert!((FuncSpec::linear(1.0, 2.0).integral(0.0, 1.0) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn constant_delay_passes_both_conditions() {
        let model = base_model(0.25, 0.25);
        let grid = model.grid(500).unwrap();
        let report = validate(&model, &grid);
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
        assert!(report.max_rounding_error <= grid.dt() / 2.0);
    }

    #[test]
    fn overlong_delay_fails_condition_one() {
        let model = base_model(1.25 + 1.0, 0.25);
        let grid = model.grid(500).unwrap();
        let report = validate(&model, &grid);
        let failed: Vec<_> = report.failures().map(|c| c.name).collect();
        assert!(failed.contains(&"condition (i)"));
    }

    #[test]
    fn condition_two_detects_concentrating_delay() {
        // δ(s) = T + K − s maps every time onto T + K; L = 1 cannot bound it.
        let mut model = base_model(0.0, 0.5);
        model.delays.delta = FuncSpec::linear(1.5, -1.0);
        let grid = model.grid(300).unwrap();
        let report = validate(&model, &grid);
        let failed: Vec<_> = report.failures().map(|c| c.name).collect();
        assert!(failed.contains(&"condition (ii)"), "{failed:?}");
    }

    #[test]
    fn lipschitz_spot_check() {
        let mut model = base_model(0.25, 0.25);
        model.driver = DriverSpec::linear(0.3, 0.5, -0.5, 0.5, 0.5);
        let grid = model.grid(100).unwrap();
        assert!(validate(&model, &grid).passed());
        model.driver.lipschitz = 0.1;
        let report = validate(&model, &grid);
        assert!(report.failures().any(|c| c.name == "lipschitz"));
    }

    #[test]
    fn growth_check_flags_exponential_terminal() {
        let mut model = base_model(0.0, 0.0);
        model.terminal.g = FuncSpec::Exponential { scale: 1.0, rate: 1.0 };
        let grid = model.grid(50).unwrap();
        assert!(validate(&model, &grid).failures().any(|c| c.name == "terminal growth"));
    }

    #[test]
    fn marginal_examples() {
        let model = base_model(0.0, 0.0);
        let grid = model.grid(100).unwrap();
        let table = model.kernel_table(&grid).unwrap();
        assert_eq!(eta_marginal(&model, &table, 0.0).unwrap(), (0.0, 0.0));
        let (m, v) = eta_marginal(&model, &table, 0.5).unwrap();
        assert_eq!(m, 0.0);
        assert!((v - 0.35355339).abs() < 1e-6);
        assert!(eta_marginal(&model, &table, 1.5).is_err());
        let mut drifted = model.clone();
        drifted.coefficients.b = FuncSpec::constant(1.0);
        drifted.coefficients.eta0 = 0.3;
        assert!((eta_marginal(&drifted, &table, 1.0).unwrap().0 - 1.3).abs() < 1e-14);
    }

    #[test]
    fn eta_is_shifted_path_without_drift() {
        let mut model = base_model(0.0, 0.0);
        model.coefficients.eta0 = 0.4;
        let grid = model.grid(32).unwrap();
        let batch = sample_paths(&grid, 0.75, 5, 3).unwrap();
        let eta = eta_paths(&model, &batch).unwrap();
        for i in 0..5 {
            for k in 0..=32 {
                assert!((eta[(i, k)] - 0.4 - batch.values()[(i, k)]).abs() < 1e-12);
            }
        }
        let wrong = sample_paths(&grid, 0.7, 5, 3).unwrap();
        assert!(matches!(eta_paths(&model, &wrong), Err(Error::HurstMismatch { .. })));
    }
}
