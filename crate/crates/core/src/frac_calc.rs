//! Fractional-calculus primitives on a uniform grid.
//!
//! The kernel `φ(x) = H(2H−1)|x|^{2H−2}` is weakly singular on the diagonal, so
//! every integral against it is done by product integration: integrands are
//! taken piecewise linear between nodes and the kernel is integrated exactly
//! against each pair of linear shape functions. Near-diagonal cell pairs use
//! closed-form antiderivatives; far pairs, where the kernel is smooth, use a
//! 16-point Gauss-Legendre rule (the closed forms cancel badly there).

use std::io::Write;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::fbm::TimeGrid;
use crate::quadrature::{legendre16, normal_cdf, normal_pdf};

/// Cell offsets up to this distance use the closed-form weights.
const CLOSED_FORM_REACH: usize = 3;
/// Gaussian kernels are truncated at this many standard deviations.
const SMOOTHING_REACH: f64 = 8.0;

pub fn phi(x: f64, hurst: f64) -> Result<f64> {
    if x == 0.0 {
        return Err(Error::Singularity(x));
    }
    Ok(hurst * (2.0 * hurst - 1.0) * x.abs().powf(2.0 * hurst - 2.0))
}

/// Repeated antiderivatives of `|x|^κ`, continuous through zero.
struct Antiderivatives {
    kappa: f64,
    c: [f64; 4],
}

impl Antiderivatives {
    fn new(kappa: f64) -> Self {
        let c1 = kappa + 1.0;
        let c2 = c1 * (kappa + 2.0);
        let c3 = c2 * (kappa + 3.0);
        let c4 = c3 * (kappa + 4.0);
        Self { kappa, c: [c1, c2, c3, c4] }
    }

    fn a(&self, order: usize, x: f64) -> f64 {
        let mag = x.abs().powf(self.kappa + order as f64) / self.c[order - 1];
        if order % 2 == 1 {
            mag * x.signum()
        } else {
            mag
        }
    }
}

/// `∫∫_{[0,1]²} |d + p − q|^κ w_α(p) w_β(q) dp dq` with `w_0 = 1 − p`, `w_1 = p`,
/// indexed `[α][β]`.
fn cell_pair_moments(anti: &Antiderivatives, d: usize) -> [[f64; 2]; 2] {
    let (j00, j10, j01, j11) = if d <= CLOSED_FORM_REACH {
        let d = d as f64;
        let a = |k: usize, x: f64| anti.a(k, x);
        let j00 = a(2, d + 1.0) - 2.0 * a(2, d) + a(2, d - 1.0);
        let j10 = a(2, d + 1.0) - a(2, d) - a(3, d + 1.0) + 2.0 * a(3, d) - a(3, d - 1.0);
        let j01 = -a(2, d) + a(2, d - 1.0) + a(3, d + 1.0) - 2.0 * a(3, d) + a(3, d - 1.0);
        let j11 = -a(2, d) + a(3, d + 1.0) - a(3, d - 1.0) - a(4, d + 1.0) + 2.0 * a(4, d)
            - a(4, d - 1.0);
        (j00, j10, j01, j11)
    } else {
        let rule = legendre16();
        let d = d as f64;
        let (mut j00, mut j10, mut j01, mut j11) = (0.0, 0.0, 0.0, 0.0);
        for (p, wp) in rule.nodes.iter().zip(&rule.weights) {
            for (q, wq) in rule.nodes.iter().zip(&rule.weights) {
                let f = wp * wq * (d + p - q).powf(anti.kappa);
                j00 += f;
                j10 += f * p;
                j01 += f * q;
                j11 += f * p * q;
            }
        }
        (j00, j10, j01, j11)
    };
    [[j00 - j10 - j01 + j11, j01 - j11], [j10 - j11, j11]]
}

/// `∫_0^1 (e − q)^κ w_β(q) dq` for `e ≥ 1`, indexed by β.
fn cell_line_moments(anti: &Antiderivatives, e: usize) -> [f64; 2] {
    let (m0, m1) = if e <= CLOSED_FORM_REACH {
        let e = e as f64;
        let m0 = anti.a(1, e) - anti.a(1, e - 1.0);
        let m1 = -anti.a(1, e - 1.0) + anti.a(2, e) - anti.a(2, e - 1.0);
        (m0, m1)
    } else {
        let rule = legendre16();
        let e = e as f64;
        rule.nodes.iter().zip(&rule.weights).fold((0.0, 0.0), |(a, b), (q, w)| {
            let f = w * (e - q).powf(anti.kappa);
            (a + f, b + f * q)
        })
    };
    [m0 - m1, m1]
}

/// Product-integration weights of the φ kernel on a uniform grid with step `h`.
#[derive(Debug, Clone)]
pub struct KernelWeights {
    hurst: f64,
    step: f64,
    /// `pair[d][α][β]` already scaled by `H(2H−1)h^{2H}`.
    pair: Vec<[[f64; 2]; 2]>,
    /// `line[e][β]` already scaled by `H(2H−1)h^{2H−1}`.
    line: Vec<[f64; 2]>,
}

impl KernelWeights {
    pub fn new(hurst: f64, step: f64, n_cells: usize) -> Result<Self> {
        if !(hurst > 0.5 && hurst < 1.0) {
            return Err(Error::Domain(format!("hurst must lie in (1/2, 1), got {hurst}")));
        }
        let anti = Antiderivatives::new(2.0 * hurst - 2.0);
        let c = hurst * (2.0 * hurst - 1.0);
        let pair_scale = c * step.powf(2.0 * hurst);
        let line_scale = c * step.powf(2.0 * hurst - 1.0);
        let pair = (0..n_cells.max(1))
            .map(|d| {
                let m = cell_pair_moments(&anti, d);
                [
                    [m[0][0] * pair_scale, m[0][1] * pair_scale],
                    [m[1][0] * pair_scale, m[1][1] * pair_scale],
                ]
            })
            .collect();
        let line = (0..=n_cells.max(1))
            .map(|e| {
                if e == 0 {
                    [0.0, 0.0]
                } else {
                    let m = cell_line_moments(&anti, e);
                    [m[0] * line_scale, m[1] * line_scale]
                }
            })
            .collect();
        Ok(Self { hurst, step, pair, line })
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// `∫_{cell i}∫_{cell j} φ(u−v) ξ(u) η(v) du dv` for piecewise-linear ξ, η.
    pub fn cell_pair(&self, xi: &[f64], i: usize, eta: &[f64], j: usize) -> f64 {
        let w = if i >= j {
            self.pair[i - j]
        } else {
            let m = self.pair[j - i];
            [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
        };
        xi[i] * (w[0][0] * eta[j] + w[0][1] * eta[j + 1])
            + xi[i + 1] * (w[1][0] * eta[j] + w[1][1] * eta[j + 1])
    }

    /// `∫_{cell j} φ(t_m − v) ξ(v) dv` for `j < m`.
    pub fn cell_line(&self, xi: &[f64], m: usize, j: usize) -> f64 {
        let w = self.line[m - j];
        w[0] * xi[j] + w[1] * xi[j + 1]
    }

    /// `⟨ξ, η⟩_{t_m}` from node values on `0..=m`.
    pub fn inner_product_to(&self, xi: &[f64], eta: &[f64], m: usize) -> f64 {
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                total += self.cell_pair(xi, i, eta, j);
            }
        }
        total
    }

    /// `‖ξ‖²_{t_k}` at every node, built incrementally in `O(n²)`.
    pub fn norm_sq_profile(&self, xi: &[f64]) -> Vec<f64> {
        let n = xi.len() - 1;
        let mut out = vec![0.0; n + 1];
        for k in 0..n {
            let own = self.cell_pair(xi, k, xi, k);
            let cross: f64 = (0..k).map(|j| self.cell_pair(xi, k, xi, j)).sum();
            out[k + 1] = out[k] + own + 2.0 * cross;
        }
        out
    }

    /// `∫_0^{t_m} φ(t_m − v) ξ(v) dv`.
    pub fn hat_at(&self, xi: &[f64], m: usize) -> f64 {
        (0..m).map(|j| self.cell_line(xi, m, j)).sum()
    }

    /// `∫_{t_k}^{t_{k+1}} du ∫_0^{t_k} φ(u−v) ξ(v) dv`, the ℋ-pairing of
    /// `ξ·1_{[0,t_k]}` with the indicator of the next cell.
    pub fn past_pairing(&self, xi: &[f64], k: usize) -> f64 {
        (0..k)
            .map(|j| {
                let w = self.pair[k - j];
                (w[0][0] + w[1][0]) * xi[j] + (w[0][1] + w[1][1]) * xi[j + 1]
            })
            .sum()
    }
}

/// `⟨ξ, η⟩_t = ∫_0^t∫_0^t φ(u−v) ξ_u η_v du dv` with `t` a grid node.
pub fn inner_product(xi: &[f64], eta: &[f64], grid: &TimeGrid, t: f64, hurst: f64) -> Result<f64> {
    let m = grid
        .node_index(t)
        .ok_or_else(|| Error::GridMismatch(format!("t = {t} is not a grid node")))?;
    if xi.len() <= m || eta.len() <= m {
        return Err(Error::GridMismatch(format!(
            "need {} samples, got {} and {}",
            m + 1,
            xi.len(),
            eta.len()
        )));
    }
    let weights = KernelWeights::new(hurst, grid.dt(), m)?;
    Ok(weights.inner_product_to(xi, eta, m))
}

/// Per-node tables of `‖σ‖²_t`, `σ̂_t` and the effective diffusion `σ̂_t σ_t`.
#[derive(Debug, Clone)]
pub struct KernelTable {
    pub grid: TimeGrid,
    pub hurst: f64,
    pub sigma: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub sigma_norm_sq: Vec<f64>,
    pub diffusion: Vec<f64>,
}

impl KernelTable {
    /// Measured constant `M` with `t^{2H−1}/M ≤ σ̂_t/σ_t ≤ M t^{2H−1}` on the grid.
    pub fn ratio_bound(&self) -> f64 {
        let e = 2.0 * self.hurst - 1.0;
        let mut m = 1.0_f64;
        for k in 1..self.sigma.len() {
            let r = self.sigma_hat[k] / self.sigma[k] / self.grid.time(k).powf(e);
            m = m.max(r).max(1.0 / r);
        }
        m
    }

    /// `‖σ‖²` at an arbitrary time, linearly interpolated between nodes.
    pub fn norm_sq_at(&self, t: f64) -> f64 {
        let dt = self.grid.dt();
        let x = (t / dt).clamp(0.0, self.grid.n_steps() as f64);
        let k = (x.floor() as usize).min(self.grid.n_steps() - 1);
        let w = x - k as f64;
        (1.0 - w) * self.sigma_norm_sq[k] + w * self.sigma_norm_sq[k + 1]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,sigma,sigma_hat,sigma_norm_sq,diffusion")?;
        for k in 0..self.sigma.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.grid.time(k),
                self.sigma[k],
                self.sigma_hat[k],
                self.sigma_norm_sq[k],
                self.diffusion[k]
            )?;
        }
        Ok(())
    }
}

pub fn build_kernel_table(grid: &TimeGrid, sigma: &[f64], hurst: f64) -> Result<KernelTable> {
    let n = grid.n_steps();
    if sigma.len() != n + 1 {
        return Err(Error::GridMismatch(format!(
            "sigma has {} samples for {} nodes",
            sigma.len(),
            n + 1
        )));
    }
    let sign = sigma[n].signum();
    for (k, s) in sigma.iter().enumerate().skip(1) {
        if *s == 0.0 || s.signum() != sign || !s.is_finite() {
            return Err(Error::SigmaSign(format!("sigma({}) = {s}", grid.time(k))));
        }
    }
    let weights = KernelWeights::new(hurst, grid.dt(), n)?;
    let norm_sq = weights.norm_sq_profile(sigma);
    let sigma_hat: Vec<f64> = (0..=n).map(|m| weights.hat_at(sigma, m)).collect();
    let diffusion = sigma_hat.iter().zip(sigma).map(|(a, b)| a * b).collect();
    Ok(KernelTable {
        grid: *grid,
        hurst,
        sigma: sigma.to_vec(),
        sigma_hat,
        sigma_norm_sq: norm_sq,
        diffusion,
    })
}

/// `∫ (α + βy) N(y; c, s²) dy` over `[a, b]`.
fn gaussian_segment(a: f64, b: f64, alpha: f64, beta: f64, c: f64, s: f64) -> f64 {
    let za = (a - c) / s;
    let zb = (b - c) / s;
    let mass = if za > 0.0 {
        normal_cdf(-za) - normal_cdf(-zb)
    } else {
        normal_cdf(zb) - normal_cdf(za)
    };
    let first = c * mass - s * (normal_pdf(zb) - normal_pdf(za));
    alpha * mass + beta * first
}

/// `E[hat(c + sξ)]` for the unit-height hat of half-width `dx`.
fn hat_weight(c: f64, s: f64, dx: f64) -> f64 {
    if s == 0.0 {
        return (1.0 - c.abs() / dx).max(0.0);
    }
    gaussian_segment(-dx, 0.0, 1.0, 1.0 / dx, c, s) + gaussian_segment(0.0, dx, 1.0, -1.0 / dx, c, s)
}

/// Gaussian smoothing `x ↦ E[slice(x + ξ)]`, `ξ ~ N(0, variance)`.
pub fn heat_smooth(slice: &[f64], dx: f64, variance: f64) -> Result<Vec<f64>> {
    heat_smooth_shifted(slice, dx, variance, 0.0)
}

/// Gaussian smoothing with a mean shift: `x ↦ E[slice(x + shift + ξ)]`.
///
/// The slice is read as its piecewise-linear interpolant, extended linearly
/// past both ends, and integrated exactly against the Gaussian.
pub fn heat_smooth_shifted(slice: &[f64], dx: f64, variance: f64, shift: f64) -> Result<Vec<f64>> {
    if variance < 0.0 || variance.is_nan() {
        return Err(Error::NegativeVariance(variance));
    }
    if slice.len() < 2 {
        return Err(Error::GridMismatch("slice needs at least two nodes".into()));
    }
    if variance == 0.0 && shift == 0.0 {
        return Ok(slice.to_vec());
    }
    let s = variance.sqrt();
    let reach = SMOOTHING_REACH * s + dx;
    let d_min = ((-reach - shift) / dx).floor() as i64;
    let d_max = ((reach - shift) / dx).ceil() as i64;
    let kernel: Vec<f64> = (d_min..=d_max).map(|d| hat_weight(d as f64 * dx + shift, s, dx)).collect();

    let n = slice.len() as i64;
    let pad = d_max.max(-d_min).max(0);
    let lo_slope = slice[1] - slice[0];
    let hi_slope = slice[slice.len() - 1] - slice[slice.len() - 2];
    let extended = |idx: i64| -> f64 {
        if idx < 0 {
            slice[0] + idx as f64 * lo_slope
        } else if idx >= n {
            slice[(n - 1) as usize] + (idx - n + 1) as f64 * hi_slope
        } else {
            slice[idx as usize]
        }
    };

    if kernel.len() <= 64 {
        let out = (0..n)
            .map(|i| {
                kernel
                    .iter()
                    .enumerate()
                    .map(|(e, w)| w * extended(i - (d_min + e as i64)))
                    .sum()
            })
            .collect();
        return Ok(out);
    }

    // Linear convolution of the padded slice with the kernel via FFT.
    let padded: Vec<f64> = (-pad..n + pad).map(extended).collect();
    let size = (padded.len() + kernel.len() - 1).next_power_of_two();
    let mut a: Vec<Complex<f64>> = padded.iter().map(|v| Complex::new(*v, 0.0)).collect();
    a.resize(size, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = kernel.iter().map(|v| Complex::new(*v, 0.0)).collect();
    b.resize(size, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(size);
    let inverse = planner.plan_fft_inverse(size);
    forward.process(&mut a);
    forward.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inverse.process(&mut a);
    let scale = 1.0 / size as f64;
    Ok((0..n)
        .map(|i| a[(i - d_min + pad) as usize].re * scale)
        .collect())
}

/// Left-point sum `Σ f(t_k)(B_{t_{k+1}} − B_{t_k})`.
pub fn divergence_integral_deterministic(f: &[f64], path: &[f64]) -> Result<f64> {
    if f.len() != path.len() {
        return Err(Error::GridMismatch(format!(
            "integrand has {} samples, path has {}",
            f.len(),
            path.len()
        )));
    }
    Ok(path.windows(2).zip(f).map(|(w, fk)| fk * (w[1] - w[0])).sum())
}
