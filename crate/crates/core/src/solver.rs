//! Markovian solver for the anticipative BSDE.
//!
//! The solution is sought as `Y_t = u(t, η_t)`, `Z_t = z(t, η_t)` with
//! `z = σ_t ∂_x u`. With the anticipated arguments frozen, `u` solves the
//! backward parabolic equation
//!
//! ```text
//! ∂_t u + a(t) ∂²_x u + b_t ∂_x u + f(t, x, u, σ_t ∂_x u, A_y, A_z) = 0,   a = σ̂σ,
//! ```
//!
//! where `A_y(t, ·)` is the frozen `u(t+δ(t), ·)` smoothed by the conditional
//! law of `η_{t+δ(t)}` given `η_t` (and likewise `A_z`). The equation is swept
//! backward with Crank–Nicolson; a Picard iteration on short backward windows
//! then resolves the anticipation.

use std::io::Write;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::fbm::TimeGrid;
use crate::frac_calc::{heat_smooth_shifted, KernelTable};
use crate::model::{DriverArgs, ModelSpec};
use crate::quadrature::hermite32;

const STEP_ITER_MAX: usize = 50;
const STEP_ITER_TOL: f64 = 1e-13;

/// How the space grid spacing is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpaceResolution {
    Nodes(usize),
    Step(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceParams {
    /// Half-width of the domain in units of the largest standard deviation of η.
    pub span: f64,
    pub resolution: SpaceResolution,
}

impl Default for SpaceParams {
    fn default() -> Self {
        SpaceParams { span: 6.0, resolution: SpaceResolution::Nodes(401) }
    }
}

/// Uniform nodes `x_min + i·dx`, `i < n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceGrid {
    pub x_min: f64,
    pub dx: f64,
    pub n: usize,
}

impl SpaceGrid {
    pub fn new(x_min: f64, x_max: f64, n: usize) -> Result<Self> {
        if n < 4 || !(x_max > x_min) {
            return Err(Error::GridMismatch(format!("space grid [{x_min}, {x_max}] with {n} nodes")));
        }
        Ok(SpaceGrid { x_min, dx: (x_max - x_min) / (n - 1) as f64, n })
    }

    /// Domain `[min mean − span·sd, max mean + span·sd]` over the whole time grid.
    pub fn for_model(means: &[f64], table: &KernelTable, params: &SpaceParams) -> Result<Self> {
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sd = table.sigma_norm_sq.iter().cloned().fold(0.0, f64::max).sqrt();
        let (a, b) = (lo - params.span * sd, hi + params.span * sd);
        match params.resolution {
            SpaceResolution::Nodes(n) => SpaceGrid::new(a, b, n),
            SpaceResolution::Step(dx) => {
                if !(dx > 0.0) {
                    return Err(Error::GridMismatch(format!("space step {dx}")));
                }
                let n = ((b - a) / dx - 1e-9).ceil() as usize + 1;
                let centre = 0.5 * (a + b);
                let half = 0.5 * (n - 1) as f64 * dx;
                Ok(SpaceGrid { x_min: centre - half, dx, n: n.max(4) })
            }
        }
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx
    }

    pub fn x_max(&self) -> f64 {
        self.x(self.n - 1)
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }

    /// Piecewise-linear interpolation, extended linearly past both ends.
    pub fn interpolate(&self, slice: ArrayView1<'_, f64>, x: f64) -> f64 {
        let s = (x - self.x_min) / self.dx;
        let i = (s.floor() as i64).clamp(0, self.n as i64 - 2) as usize;
        let w = s - i as f64;
        slice[i] * (1.0 - w) + slice[i + 1] * w
    }

    /// Four-point Lagrange interpolation (exact for cubics) inside the domain,
    /// linear extension outside.
    pub fn interpolate_cubic(&self, slice: ArrayView1<'_, f64>, x: f64) -> f64 {
        let s = (x - self.x_min) / self.dx;
        if s < 0.0 || s > (self.n - 1) as f64 {
            return self.interpolate(slice, x);
        }
        let i = (s.floor() as usize).clamp(1, self.n - 3);
        let w = s - i as f64;
        let (a, b, c, d) = (slice[i - 1], slice[i], slice[i + 1], slice[i + 2]);
        -a * w * (w - 1.0) * (w - 2.0) / 6.0 + b * (w + 1.0) * (w - 1.0) * (w - 2.0) / 2.0
            - c * (w + 1.0) * w * (w - 2.0) / 2.0
            + d * (w + 1.0) * w * (w - 1.0) / 6.0
    }
}

/// Fields `u` (for Y) and `z` (for Z) on time × space nodes, together with the
/// Gaussian marginal of η at every time node.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionField {
    pub grid: TimeGrid,
    pub space: SpaceGrid,
    pub u: Array2<f64>,
    pub z: Array2<f64>,
    pub eta_mean: Vec<f64>,
    pub eta_var: Vec<f64>,
    pub hurst: f64,
    /// Index of `T`.
    pub horizon_index: usize,
}

impl SolutionField {
    /// Terminal data `g`, `h` at every node, i.e. the terminal block extended
    /// backward as constants in time.
    pub fn terminal_extension(model: &ModelSpec, table: &KernelTable, space: SpaceGrid) -> Result<Self> {
        let grid = table.grid;
        let horizon_index = model.horizon_index(&grid)?;
        let xs = space.nodes();
        let g: Vec<f64> = xs.iter().map(|x| model.terminal.g.eval(*x)).collect();
        let h: Vec<f64> = xs.iter().map(|x| model.terminal.h.eval(*x)).collect();
        let rows = grid.n_nodes();
        let u = Array2::from_shape_fn((rows, space.n), |(_, i)| g[i]);
        let z = Array2::from_shape_fn((rows, space.n), |(_, i)| h[i]);
        let eta_mean = grid.times().iter().map(|t| model.eta_mean(*t)).collect();
        Ok(SolutionField {
            grid,
            space,
            u,
            z,
            eta_mean,
            eta_var: table.sigma_norm_sq.clone(),
            hurst: table.hurst,
            horizon_index,
        })
    }

    /// `u` at `(t_k, x)` by linear interpolation in space.
    pub fn u_at(&self, k: usize, x: f64) -> f64 {
        self.space.interpolate(self.u.row(k), x)
    }

    pub fn z_at(&self, k: usize, x: f64) -> f64 {
        self.space.interpolate(self.z.row(k), x)
    }

    /// Second-order difference `∂_x u` at time node `k`.
    pub fn du_dx(&self, k: usize) -> Vec<f64> {
        first_difference(self.u.row(k), self.space.dx)
    }

    /// Second difference `∂²_x u` at time node `k`, one-sided rows copying the neighbour.
    pub fn d2u_dx2(&self, k: usize) -> Vec<f64> {
        let u = self.u.row(k);
        let n = self.space.n;
        let h2 = self.space.dx * self.space.dx;
        (0..n)
            .map(|i| {
                let c = i.clamp(1, n - 2);
                (u[c - 1] - 2.0 * u[c] + u[c + 1]) / h2
            })
            .collect()
    }

    /// The 𝔻^H field `σ̂_t ∂_x u`.
    pub fn malliavin_field(&self, table: &KernelTable, k: usize) -> Vec<f64> {
        self.du_dx(k).into_iter().map(|d| table.sigma_hat[k] * d).collect()
    }

    fn check_compatible(&self, other: &SolutionField) -> Result<()> {
        if self.grid != other.grid || self.space != other.space {
            return Err(Error::GridMismatch("solution fields live on different grids".into()));
        }
        Ok(())
    }

    /// CSV with columns `t, x, u, z`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,x,u,z")?;
        for k in 0..self.grid.n_nodes() {
            let t = self.grid.time(k);
            for i in 0..self.space.n {
                writeln!(w, "{},{},{},{}", t, self.space.x(i), self.u[(k, i)], self.z[(k, i)])?;
            }
        }
        Ok(())
    }
}

fn first_difference(u: ArrayView1<'_, f64>, dx: f64) -> Vec<f64> {
    let n = u.len();
    (0..n)
        .map(|i| {
            if i == 0 {
                (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * dx)
            } else if i == n - 1 {
                (3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]) / (2.0 * dx)
            } else {
                (u[i + 1] - u[i - 1]) / (2.0 * dx)
            }
        })
        .collect()
}

/// Where the anticipated arguments are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anticipation {
    /// Always from the supplied (frozen) field.
    Frozen,
    /// From the field being computed; images at the current node use the
    /// current unknown. With zero delays this is the plain fractional-BSDE sweep.
    SelfConsistent,
}

/// `p·(second difference) + q·(first difference)` with the boundary stencils
/// of node 1 (second difference) and one-sided second order (first difference).
fn apply_operator(u: &[f64], p: f64, q: f64) -> Vec<f64> {
    let n = u.len();
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        out[i] = p * (u[i - 1] - 2.0 * u[i] + u[i + 1]) + q * (u[i + 1] - u[i - 1]);
    }
    out[0] = p * (u[0] - 2.0 * u[1] + u[2]) + q * (-3.0 * u[0] + 4.0 * u[1] - u[2]);
    out[n - 1] = p * (u[n - 3] - 2.0 * u[n - 2] + u[n - 1]) + q * (3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]);
    out
}

/// Factored `I − apply_operator(·, p, q)` reduced to tridiagonal form.
///
/// The boundary rows copy the curvature of their neighbour, which keeps the
/// scheme stable; the one-sided second-order stencil `2u₀ − 5u₁ + 4u₂ − u₃`
/// is not, under Crank–Nicolson. The price is an `O(dx)` boundary error that
/// decays into the interior.
struct ImplicitSystem {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    /// Row combinations used to remove the two out-of-band boundary entries.
    first_factor: f64,
    last_factor: f64,
}

impl ImplicitSystem {
    fn new(n: usize, p: f64, q: f64) -> Self {
        let mut lower = vec![-p + q; n];
        let mut diag = vec![1.0 + 2.0 * p; n];
        let mut upper = vec![-p - q; n];
        // Row 0: columns 0, 1, 2.
        diag[0] = 1.0 - p + 3.0 * q;
        upper[0] = 2.0 * p - 4.0 * q;
        let extra0 = -p + q;
        let first_factor = if upper[1] != 0.0 { extra0 / upper[1] } else { 0.0 };
        diag[0] -= first_factor * lower[1];
        upper[0] -= first_factor * diag[1];
        // Row n−1: columns n−3, n−2, n−1.
        diag[n - 1] = 1.0 - p - 3.0 * q;
        lower[n - 1] = 2.0 * p + 4.0 * q;
        let extra = -p - q;
        let last_factor = if lower[n - 2] != 0.0 { extra / lower[n - 2] } else { 0.0 };
        diag[n - 1] -= last_factor * upper[n - 2];
        lower[n - 1] -= last_factor * diag[n - 2];
        lower[0] = 0.0;
        upper[n - 1] = 0.0;
        ImplicitSystem { lower, diag, upper, first_factor, last_factor }
    }

    fn solve(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        rhs[0] -= self.first_factor * rhs[1];
        rhs[n - 1] -= self.last_factor * rhs[n - 2];
        let mut c = vec![0.0; n];
        let mut denom = self.diag[0];
        c[0] = self.upper[0] / denom;
        rhs[0] /= denom;
        for i in 1..n {
            denom = self.diag[i] - self.lower[i] * c[i - 1];
            c[i] = self.upper[i] / denom;
            rhs[i] = (rhs[i] - self.lower[i] * rhs[i - 1]) / denom;
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= c[i] * rhs[i + 1];
        }
    }
}

/// Node reached from `k` by a delay, rounded to the grid, clipped to the end.
fn image_node(grid: &TimeGrid, k: usize, delay: f64) -> usize {
    grid.nearest(grid.time(k) + delay.max(0.0)).max(k)
}

struct Sweep<'a> {
    model: &'a ModelSpec,
    table: &'a KernelTable,
    space: SpaceGrid,
    xs: Vec<f64>,
}

impl Sweep<'_> {
    fn z_of(&self, u: &[f64], k: usize) -> Vec<f64> {
        let sigma = self.table.sigma[k];
        first_difference(ArrayView1::from(u), self.space.dx).into_iter().map(|d| sigma * d).collect()
    }

    /// Smoothed slice of `source` at node `j`, seen from node `k`.
    fn smoothed(&self, field: &SolutionField, source: &Array2<f64>, k: usize, j: usize) -> Result<Vec<f64>> {
        let slice: Vec<f64> = source.row(j).to_vec();
        let var = (field.eta_var[j] - field.eta_var[k]).max(0.0);
        let shift = field.eta_mean[j] - field.eta_mean[k];
        heat_smooth_shifted(&slice, self.space.dx, var, shift)
    }

    fn driver(&self, k: usize, u: &[f64], z: &[f64], ay: &[f64], az: &[f64]) -> Vec<f64> {
        let t = self.table.grid.time(k);
        (0..u.len())
            .map(|i| {
                self.model.driver.eval(&DriverArgs { t, x: self.xs[i], y: u[i], z: z[i], ant_y: ay[i], ant_z: az[i] })
            })
            .collect()
    }
}

/// One backward sweep over node indices `[k_lo, k_hi]`, keeping nodes `≥ k_hi`
/// of `start` and reading anticipated arguments according to `mode`.
pub fn solve_window(
    model: &ModelSpec,
    table: &KernelTable,
    start: &SolutionField,
    k_lo: usize,
    k_hi: usize,
    mode: Anticipation,
) -> Result<SolutionField> {
    let grid = &table.grid;
    if start.grid != *grid {
        return Err(Error::GridMismatch("field and kernel table use different time grids".into()));
    }
    if k_lo > k_hi || k_hi > start.horizon_index {
        return Err(Error::GridMismatch(format!("window [{k_lo}, {k_hi}] outside [0, T]")));
    }
    let sweep = Sweep { model, table, space: start.space, xs: start.space.nodes() };
    let mut out = start.clone();
    let dt = grid.dt();
    let dx = start.space.dx;
    let n = start.space.n;
    let driver = &model.driver;
    let uses_y = driver.uses_anticipated_y();
    let uses_z = driver.uses_anticipated_z();
    let zeros = vec![0.0; n];

    // Anticipated arguments at node k; `None` marks "the unknown itself".
    let args_at = |out: &SolutionField, k: usize| -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
        let t = grid.time(k);
        let source = match mode {
            Anticipation::Frozen => start,
            Anticipation::SelfConsistent => out,
        };
        let jy = image_node(grid, k, model.delays.delta.eval(t));
        let jz = image_node(grid, k, model.delays.zeta.eval(t));
        let ay = if !uses_y {
            Some(zeros.clone())
        } else if jy == k && mode == Anticipation::SelfConsistent {
            None
        } else {
            Some(sweep.smoothed(out, &source.u, k, jy)?)
        };
        let az = if !uses_z {
            Some(zeros.clone())
        } else if jz == k && mode == Anticipation::SelfConsistent {
            None
        } else {
            Some(sweep.smoothed(out, &source.z, k, jz)?)
        };
        Ok((ay, az))
    };

    let mut u_next: Vec<f64> = out.u.row(k_hi).to_vec();
    let z_next: Vec<f64> = out.z.row(k_hi).to_vec();
    let (ay, az) = args_at(&out, k_hi)?;
    let mut f_next = sweep.driver(
        k_hi,
        &u_next,
        &z_next,
        ay.as_deref().unwrap_or(&u_next),
        az.as_deref().unwrap_or(&z_next),
    );

    for k in (k_lo..k_hi).rev() {
        let big_a = 0.5 * (table.sigma_norm_sq[k + 1] - table.sigma_norm_sq[k]);
        let big_b = model.coefficients.b.integral(grid.time(k), grid.time(k + 1));
        let p = 0.5 * big_a / (dx * dx);
        let q = 0.5 * big_b / (2.0 * dx);
        let system = ImplicitSystem::new(n, p, q);
        let explicit = apply_operator(&u_next, p, q);
        let base: Vec<f64> = (0..n).map(|i| u_next[i] + explicit[i] + 0.5 * dt * f_next[i]).collect();

        let (ay, az) = args_at(&out, k)?;
        let iterate = driver.depends_on_solution() || ay.is_none() || az.is_none();
        let mut cur = u_next.clone();
        let mut f_cur;
        let mut steps = 0;
        loop {
            let z_cur = sweep.z_of(&cur, k);
            f_cur = sweep.driver(k, &cur, &z_cur, ay.as_deref().unwrap_or(&cur), az.as_deref().unwrap_or(&z_cur));
            let mut rhs: Vec<f64> = (0..n).map(|i| base[i] + 0.5 * dt * f_cur[i]).collect();
            system.solve(&mut rhs);
            if rhs.iter().any(|v| !v.is_finite()) {
                return Err(Error::BoundaryOverflow(grid.time(k)));
            }
            let change = rhs.iter().zip(&cur).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            let scale = rhs.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            cur = rhs;
            steps += 1;
            if !iterate || change <= STEP_ITER_TOL * scale {
                break;
            }
            if steps >= STEP_ITER_MAX {
                return Err(Error::Divergence(format!(
                    "implicit step at t = {} did not settle (last change {change})",
                    grid.time(k)
                )));
            }
        }
        let z_cur = sweep.z_of(&cur, k);
        if iterate {
            f_cur = sweep.driver(k, &cur, &z_cur, ay.as_deref().unwrap_or(&cur), az.as_deref().unwrap_or(&z_cur));
        }
        out.u.row_mut(k).assign(&ArrayView1::from(&cur));
        out.z.row_mut(k).assign(&ArrayView1::from(&z_cur));
        u_next = cur;
        f_next = f_cur;
    }
    Ok(out)
}

/// Backward sweep on `[t_lo, t_hi]` with the anticipated arguments read from
/// the frozen `anticipated` field. Nodes from `t_hi` on are copied unchanged.
pub fn solve_frozen(
    model: &ModelSpec,
    table: &KernelTable,
    anticipated: &SolutionField,
    window: (f64, f64),
) -> Result<SolutionField> {
    let (k_lo, k_hi) = window_nodes(&table.grid, window)?;
    solve_window(model, table, anticipated, k_lo, k_hi, Anticipation::Frozen)
}

fn window_nodes(grid: &TimeGrid, (lo, hi): (f64, f64)) -> Result<(usize, usize)> {
    let k_lo = grid.node_index(lo).ok_or_else(|| Error::GridMismatch(format!("t = {lo} is not a node")))?;
    let k_hi = grid.node_index(hi).ok_or_else(|| Error::GridMismatch(format!("t = {hi} is not a node")))?;
    Ok((k_lo, k_hi))
}

/// The non-anticipative sweep: one self-consistent pass over `[0, T]`.
pub fn solve_plain(model: &ModelSpec, table: &KernelTable, space: &SpaceParams) -> Result<SolutionField> {
    let start = initial_field(model, table, space)?;
    let k_t = start.horizon_index;
    solve_window(model, table, &start, 0, k_t, Anticipation::SelfConsistent)
}

fn initial_field(model: &ModelSpec, table: &KernelTable, space: &SpaceParams) -> Result<SolutionField> {
    let means: Vec<f64> = table.grid.times().iter().map(|t| model.eta_mean(*t)).collect();
    let space = SpaceGrid::for_model(&means, table, space)?;
    SolutionField::terminal_extension(model, table, space)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    pub space: SpaceParams,
    pub tol: f64,
    pub max_iter: usize,
    /// Weight exponent of the norms; must exceed 1.
    pub beta: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams { space: SpaceParams::default(), tol: 1e-8, max_iter: 50, beta: 2.0 }
    }
}

/// One Picard iterate's distance to its predecessor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub window: usize,
    pub iteration: usize,
    pub norm_y: f64,
    pub norm_z: f64,
}

impl TraceEntry {
    pub fn combined_sq(&self) -> f64 {
        self.norm_y * self.norm_y + self.norm_z * self.norm_z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionTrace {
    pub beta: f64,
    /// Window boundaries in increasing time, `0 = t_0 < … < t_n = T`.
    pub window_boundaries: Vec<f64>,
    pub entries: Vec<TraceEntry>,
    pub converged: bool,
    pub iterations: usize,
    /// Number of times the window count was doubled after observed divergence.
    pub restarts: usize,
}

impl ContractionTrace {
    /// Largest ratio of successive squared combined norms within a window,
    /// skipping pairs whose predecessor is already below `floor`.
    pub fn max_ratio(&self, floor: f64) -> Option<f64> {
        self.entries
            .windows(2)
            .filter(|w| w[0].window == w[1].window && w[0].combined_sq().sqrt() > floor)
            .map(|w| w[1].combined_sq() / w[0].combined_sq())
            .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))))
    }

    /// Largest iteration count over windows.
    pub fn max_window_iterations(&self) -> usize {
        self.entries.iter().map(|e| e.iteration).max().unwrap_or(0)
    }

    /// CSV with columns `window, iteration, norm_Y, norm_Z`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "window,iteration,norm_Y,norm_Z")?;
        for e in &self.entries {
            writeln!(w, "{},{},{},{}", e.window, e.iteration, e.norm_y, e.norm_z)?;
        }
        Ok(())
    }
}

/// Initial number of backward windows: `ceil(8·C·(L+1)·max(T, T^{2−2H}/(1−H)))`.
pub fn window_count(model: &ModelSpec) -> usize {
    let h = model.hurst();
    let t = model.horizon;
    let reach = t.max(t.powf(2.0 - 2.0 * h) / (1.0 - h));
    let n = (8.0 * model.driver.lipschitz * (model.delays.l + 1.0) * reach).ceil();
    if n.is_finite() && n >= 1.0 {
        n as usize
    } else {
        1
    }
}

fn window_edges(k_t: usize, n: usize) -> Vec<usize> {
    let n = n.clamp(1, k_t.max(1));
    let mut edges: Vec<usize> = (0..=n).map(|i| ((i as f64 * k_t as f64) / n as f64).round() as usize).collect();
    edges.dedup();
    edges
}

enum WindowOutcome {
    Done { converged: bool },
    Diverged,
}

/// Picard iteration of the freeze-and-resolve map on backward windows.
///
/// Windows are processed from `T` backward; inside each window the previous
/// iterate supplies the anticipated arguments until the weighted distance
/// between successive iterates drops below `tol`.
pub fn picard_solve(
    model: &ModelSpec,
    grid: &TimeGrid,
    params: &SolverParams,
) -> Result<(SolutionField, ContractionTrace)> {
    if !(params.tol > 0.0) || params.max_iter == 0 {
        return Err(Error::Config(format!("tol = {} and max_iter = {} must be positive", params.tol, params.max_iter)));
    }
    let table = model.kernel_table(grid)?;
    picard_solve_with(model, &table, params)
}

pub fn picard_solve_with(
    model: &ModelSpec,
    table: &KernelTable,
    params: &SolverParams,
) -> Result<(SolutionField, ContractionTrace)> {
    let initial = initial_field(model, table, &params.space)?;
    let k_t = initial.horizon_index;
    let mut n_windows = window_count(model);
    let mut restarts = 0;
    loop {
        let edges = window_edges(k_t, n_windows);
        let mut field = initial.clone();
        let mut trace = ContractionTrace {
            beta: params.beta,
            window_boundaries: edges.iter().map(|k| table.grid.time(*k)).collect(),
            entries: Vec::new(),
            converged: true,
            iterations: 0,
            restarts,
        };
        let mut diverged = false;
        for w in (0..edges.len() - 1).rev() {
            let window_id = edges.len() - 2 - w;
            match iterate_window(model, table, params, &mut field, &mut trace, window_id, edges[w], edges[w + 1])? {
                WindowOutcome::Done { converged } => trace.converged &= converged,
                WindowOutcome::Diverged => {
                    diverged = true;
                    break;
                }
            }
        }
        if !diverged {
            return Ok((field, trace));
        }
        if n_windows >= k_t {
            trace.converged = false;
            return Ok((field, trace));
        }
        n_windows = (2 * n_windows).min(k_t);
        restarts += 1;
    }
}

#[allow(clippy::too_many_arguments)]
fn iterate_window(
    model: &ModelSpec,
    table: &KernelTable,
    params: &SolverParams,
    field: &mut SolutionField,
    trace: &mut ContractionTrace,
    window_id: usize,
    k_lo: usize,
    k_hi: usize,
) -> Result<WindowOutcome> {
    let mut growing = 0;
    let mut previous: Option<f64> = None;
    for iteration in 1..=params.max_iter {
        let next = match solve_window(model, table, field, k_lo, k_hi, Anticipation::Frozen) {
            Ok(f) => f,
            Err(Error::Divergence(_)) | Err(Error::BoundaryOverflow(_)) => return Ok(WindowOutcome::Diverged),
            Err(e) => return Err(e),
        };
        let (ny, nz) = norms_over(&next, field, params.beta, 0, k_hi);
        *field = next;
        trace.iterations += 1;
        let entry = TraceEntry { window: window_id, iteration, norm_y: ny, norm_z: nz };
        trace.entries.push(entry);
        let combined = entry.combined_sq().sqrt();
        if !combined.is_finite() {
            return Ok(WindowOutcome::Diverged);
        }
        if combined < params.tol {
            return Ok(WindowOutcome::Done { converged: true });
        }
        if let Some(prev) = previous {
            growing = if combined > prev { growing + 1 } else { 0 };
            if growing >= 3 {
                return Ok(WindowOutcome::Diverged);
            }
        }
        previous = Some(combined);
    }
    Ok(WindowOutcome::Done { converged: false })
}

/// Weighted distances
/// `(∫ e^{βt} E|u_a − u_b|²(t, η_t) dt)^{1/2}` and
/// `(∫ t^{2H−1} e^{βt} E|z_a − z_b|²(t, η_t) dt)^{1/2}` over `[0, T+K]`.
pub fn weighted_norms(a: &SolutionField, b: &SolutionField, model: &ModelSpec, beta: f64) -> Result<(f64, f64)> {
    a.check_compatible(b)?;
    let _ = model;
    Ok(norms_over(a, b, beta, 0, a.grid.n_steps()))
}

/// `E[ψ(η_{t_k})]` under the stored Gaussian marginal.
fn marginal_expectation<F: Fn(f64) -> f64>(field: &SolutionField, k: usize, psi: F) -> f64 {
    let var = field.eta_var[k];
    let mean = field.eta_mean[k];
    if var <= 0.0 {
        return psi(mean);
    }
    let sd = var.sqrt();
    let rule = hermite32();
    rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * psi(mean + sd * x)).sum()
}

fn norms_over(a: &SolutionField, b: &SolutionField, beta: f64, k_lo: usize, k_hi: usize) -> (f64, f64) {
    let grid = &a.grid;
    let dt = grid.dt();
    let exponent = 2.0 * a.hurst - 1.0;
    let mut ny = 0.0;
    let mut nz = 0.0;
    for k in k_lo..=k_hi {
        let weight = if k == k_lo || k == k_hi { 0.5 * dt } else { dt };
        if k_lo == k_hi {
            break;
        }
        let t = grid.time(k);
        let ey = marginal_expectation(a, k, |x| (a.u_at(k, x) - b.u_at(k, x)).powi(2));
        let ez = marginal_expectation(a, k, |x| (a.z_at(k, x) - b.z_at(k, x)).powi(2));
        let e = (beta * t).exp();
        ny += weight * e * ey;
        nz += weight * e * t.powf(exponent) * ez;
    }
    (ny.sqrt(), nz.sqrt())
}

/// Pointwise terms of the a priori estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct AprioriReport {
    pub times: Vec<f64>,
    /// `e^{βt}E|Y_t|² + ∫_t^T e^{βs}s^{2H−1}E|Z_s|² ds`.
    pub lhs: Vec<f64>,
    /// `Θ(t, T, K)`.
    pub theta: Vec<f64>,
    /// `sup_t lhs/Θ`; `None` when both sides vanish identically.
    pub ratio: Option<f64>,
}

/// Compares the left side of the a priori estimate with `Θ(t, T, K)` at every node of `[0, T]`.
pub fn apriori_report(solution: &SolutionField, model: &ModelSpec, beta: f64) -> AprioriReport {
    let grid = &solution.grid;
    let dt = grid.dt();
    let k_t = solution.horizon_index;
    let exponent = 2.0 * solution.hurst - 1.0;
    let g = &model.terminal.g;
    let h = &model.terminal.h;
    let e = |t: f64| (beta * t).exp();

    let z_term: Vec<f64> = (0..=k_t)
        .map(|k| {
            let t = grid.time(k);
            e(t) * t.powf(exponent) * marginal_expectation(solution, k, |x| solution.z_at(k, x).powi(2))
        })
        .collect();
    let f0_term: Vec<f64> = (0..=k_t)
        .map(|k| {
            let t = grid.time(k);
            e(t) * marginal_expectation(solution, k, |x| model.driver.f0(t, x).powi(2))
        })
        .collect();
    let mut tail = 0.0;
    for k in k_t..grid.n_steps() {
        let term = |j: usize| {
            let s = grid.time(j);
            e(s) * marginal_expectation(solution, j, |x| g.eval(x).powi(2) + s.powf(exponent) * h.eval(x).powi(2))
        };
        tail += 0.5 * dt * (term(k) + term(k + 1));
    }
    let terminal = e(grid.time(k_t)) * marginal_expectation(solution, k_t, |x| g.eval(x).powi(2));

    let mut lhs = vec![0.0; k_t + 1];
    let mut theta = vec![0.0; k_t + 1];
    let mut z_int = 0.0;
    let mut f_int = 0.0;
    for k in (0..=k_t).rev() {
        if k < k_t {
            z_int += 0.5 * dt * (z_term[k] + z_term[k + 1]);
            f_int += 0.5 * dt * (f0_term[k] + f0_term[k + 1]);
        }
        let t = grid.time(k);
        lhs[k] = e(t) * marginal_expectation(solution, k, |x| solution.u_at(k, x).powi(2)) + z_int;
        theta[k] = terminal + f_int + tail;
    }
    let mut ratio: Option<f64> = None;
    for (l, th) in lhs.iter().zip(&theta) {
        let r = if *th > 0.0 {
            l / th
        } else if *l > 0.0 {
            f64::INFINITY
        } else {
            continue;
        };
        ratio = Some(ratio.map_or(r, |m: f64| m.max(r)));
    }
    AprioriReport { times: (0..=k_t).map(|k| grid.time(k)).collect(), lhs, theta, ratio }
}
