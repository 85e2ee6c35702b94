//! Exact simulation of fractional Brownian motion with Hurst index in (1/2, 1).
//!
//! Small grids are sampled through a Cholesky factor of the Gram matrix of
//! the covariance `½(t^{2H} + s^{2H} − |t−s|^{2H})`; large grids use circulant
//! embedding of the stationary increment sequence. Each path draws from its
//! own ChaCha stream keyed by `(seed, path index)`, so the output does not
//! depend on how paths are scheduled across threads.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Largest step count sampled by Cholesky; above it circulant embedding is used.
pub const CHOLESKY_MAX_STEPS: usize = 2048;

/// Uniform grid `t_k = k·Δt` on `[0, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::Domain(format!("grid end must be positive, got {t_end}")));
        }
        if n_steps == 0 {
            return Err(Error::Domain("grid needs at least one step".into()));
        }
        Ok(Self { t_end, n_steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_end
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|k| self.time(k)).collect()
    }

    /// Index of the node nearest to `t` (clamped to the grid).
    pub fn nearest(&self, t: f64) -> usize {
        let k = (t / self.dt()).round();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.n_steps)
        }
    }

    /// Index of `t` if it is a node up to round-off.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let k = self.nearest(t);
        ((self.time(k) - t).abs() <= 1e-9 * self.dt()).then_some(k)
    }

    /// Grid keeping every `stride`-th node.
    pub fn coarsen(&self, stride: usize) -> Result<Self> {
        if stride == 0 || !self.n_steps.is_multiple_of(stride) {
            return Err(Error::GridMismatch(format!(
                "stride {stride} does not divide {} steps",
                self.n_steps
            )));
        }
        Self::new(self.t_end, self.n_steps / stride)
    }
}

fn check_hurst(hurst: f64) -> Result<()> {
    if hurst > 0.5 && hurst < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("hurst must lie in (1/2, 1), got {hurst}")))
    }
}

/// `E[B_t B_s] = ½(t^{2H} + s^{2H} − |t−s|^{2H})`.
pub fn covariance(t: f64, s: f64, hurst: f64) -> Result<f64> {
    check_hurst(hurst)?;
    if t < 0.0 || s < 0.0 {
        return Err(Error::Domain(format!("negative time in covariance ({t}, {s})")));
    }
    Ok(cov_unchecked(t, s, hurst))
}

fn cov_unchecked(t: f64, s: f64, hurst: f64) -> f64 {
    let e = 2.0 * hurst;
    0.5 * (t.powf(e) + s.powf(e) - (t - s).abs().powf(e))
}

/// Gram matrix of the covariance at all grid nodes, `t = 0` included.
pub fn covariance_matrix(grid: &TimeGrid, hurst: f64) -> Result<DMatrix<f64>> {
    check_hurst(hurst)?;
    let t = grid.times();
    let n = t.len();
    Ok(DMatrix::from_fn(n, n, |i, j| cov_unchecked(t[i], t[j], hurst)))
}

/// Lower Cholesky factor of the covariance at nodes `t_1..t_n`.
///
/// The `t = 0` row and column are dropped. On failure the diagonal is
/// shifted once by `1e-12·max diag`; a second failure is an error.
pub fn cholesky_factor(grid: &TimeGrid, hurst: f64) -> Result<DMatrix<f64>> {
    let full = covariance_matrix(grid, hurst)?;
    let n = grid.n_steps();
    let reduced = full.view((1, 1), (n, n)).into_owned();
    if let Some(ch) = reduced.clone().cholesky() {
        return Ok(ch.l());
    }
    let jitter = 1e-12 * reduced.diagonal().max();
    let mut shifted = reduced;
    for i in 0..n {
        shifted[(i, i)] += jitter;
    }
    shifted
        .cholesky()
        .map(|ch| ch.l())
        .ok_or_else(|| Error::Factorization(format!("covariance of {n} nodes with H = {hurst}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMethod {
    /// Cholesky up to [`CHOLESKY_MAX_STEPS`], circulant embedding above.
    Auto,
    Cholesky,
    Circulant,
}

/// A seeded ensemble of fBm paths on a uniform grid.
#[derive(Debug, Clone)]
pub struct PathBatch {
    grid: TimeGrid,
    hurst: f64,
    seed: u64,
    values: Array2<f64>,
}

impl PathBatch {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_paths(&self) -> usize {
        self.values.nrows()
    }

    /// `n_paths × n_nodes` array of path values.
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn path(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    /// The same paths observed on every `stride`-th node.
    pub fn coarsen(&self, stride: usize) -> Result<PathBatch> {
        let grid = self.grid.coarsen(stride)?;
        let cols = grid.n_nodes();
        let values = Array2::from_shape_fn((self.n_paths(), cols), |(i, k)| {
            self.values[(i, k * stride)]
        });
        Ok(PathBatch { grid, hurst: self.hurst, seed: self.seed, values })
    }

    /// One row per path; the header line carries hurst, seed and step.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# hurst={} seed={} dt={}", self.hurst, self.seed, self.grid.dt())?;
        let header: Vec<String> = self.grid.times().iter().map(|t| t.to_string()).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in self.values.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

pub fn sample_paths(grid: &TimeGrid, hurst: f64, n_paths: usize, seed: u64) -> Result<PathBatch> {
    sample_paths_with(grid, hurst, n_paths, seed, SamplingMethod::Auto)
}

pub fn sample_paths_with(
    grid: &TimeGrid,
    hurst: f64,
    n_paths: usize,
    seed: u64,
    method: SamplingMethod,
) -> Result<PathBatch> {
    check_hurst(hurst)?;
    if n_paths == 0 {
        return Err(Error::Domain("n_paths must be at least 1".into()));
    }
    let n = grid.n_steps();
    let use_cholesky = match method {
        SamplingMethod::Auto => n <= CHOLESKY_MAX_STEPS,
        SamplingMethod::Cholesky => true,
        SamplingMethod::Circulant => false,
    };
    let rows: Vec<Vec<f64>> = if use_cholesky {
        let l = cholesky_factor(grid, hurst)?;
        (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let mut rng = path_rng(seed, p);
                let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let mut out = vec![0.0; n + 1];
                for i in 0..n {
                    let row = l.row(i);
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += row[j] * z[j];
                    }
                    out[i + 1] = acc;
                }
                out
            })
            .collect()
    } else {
        let embedding = CirculantEmbedding::new(grid, hurst)?;
        (0..n_paths)
            .into_par_iter()
            .map(|p| embedding.sample(&mut path_rng(seed, p)))
            .collect()
    };
    let mut values = Array2::zeros((n_paths, n + 1));
    for (i, row) in rows.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            values[(i, k)] = *v;
        }
    }
    Ok(PathBatch { grid: *grid, hurst, seed, values })
}

/// Davies-Harte embedding of fractional Gaussian noise with step `Δt`.
struct CirculantEmbedding {
    n: usize,
    sqrt_eig: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl CirculantEmbedding {
    fn new(grid: &TimeGrid, hurst: f64) -> Result<Self> {
        let n = grid.n_steps();
        let m = 2 * n;
        let e = 2.0 * hurst;
        let scale = grid.dt().powf(e);
        let gamma = |k: usize| {
            let k = k as f64;
            0.5 * scale * ((k + 1.0).powf(e) - 2.0 * k.powf(e) + (k - 1.0).abs().powf(e))
        };
        let mut row: Vec<Complex<f64>> = Vec::with_capacity(m);
        for k in 0..=n {
            row.push(Complex::new(gamma(k), 0.0));
        }
        for k in (1..n).rev() {
            row.push(Complex::new(gamma(k), 0.0));
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(m);
        fft.process(&mut row);
        let max = row.iter().map(|c| c.re).fold(0.0_f64, f64::max);
        let mut sqrt_eig = Vec::with_capacity(m);
        for (index, c) in row.iter().enumerate() {
            let value = c.re;
            if value < -1e-10 * max {
                return Err(Error::EmbeddingNegative { index, value });
            }
            sqrt_eig.push(value.max(0.0).sqrt());
        }
        Ok(Self { n, sqrt_eig, fft })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.n;
        let m = 2 * n;
        let norm = 1.0 / (m as f64).sqrt();
        let mut w = vec![Complex::new(0.0, 0.0); m];
        let z0: f64 = StandardNormal.sample(rng);
        let zn: f64 = StandardNormal.sample(rng);
        w[0] = Complex::new(self.sqrt_eig[0] * z0 * norm, 0.0);
        w[n] = Complex::new(self.sqrt_eig[n] * zn * norm, 0.0);
        for k in 1..n {
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            let s = self.sqrt_eig[k] * norm * std::f64::consts::FRAC_1_SQRT_2;
            w[k] = Complex::new(s * a, s * b);
            w[m - k] = w[k].conj();
        }
        self.fft.process(&mut w);
        let mut out = vec![0.0; n + 1];
        for k in 0..n {
            out[k + 1] = out[k] + w[k].re;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_examples() {
        assert_eq!(covariance(1.0, 1.0, 0.75).unwrap(), 1.0);
        assert_eq!(covariance(0.7, 0.0, 0.6).unwrap(), 0.0);
        assert!((covariance(1.0, 0.5, 0.75).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn covariance_rejects_bad_inputs() {
        assert!(covariance(1.0, 1.0, 0.5).is_err());
        assert!(covariance(1.0, 1.0, 1.0).is_err());
        assert!(covariance(-0.1, 1.0, 0.7).is_err());
    }

    #[test]
    fn gram_matrix_entries() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let c = covariance_matrix(&grid, 0.75).unwrap();
        assert!((c[(1, 2)] - 0.5).abs() < 1e-15);
        for k in 0..3 {
            let t = grid.time(k);
            assert!((c[(k, k)] - t.powf(1.5)).abs() < 1e-15);
        }
        let one = TimeGrid::new(1.0, 1).unwrap();
        let l = cholesky_factor(&one, 0.75).unwrap();
        assert_eq!(l.nrows(), 1);
        assert!((l[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn paths_start_at_zero_and_are_deterministic() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let a = sample_paths(&grid, 0.7, 50, 7).unwrap();
        let b = sample_paths(&grid, 0.7, 50, 7).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(a.values().column(0).iter().all(|v| *v == 0.0));
        let c = sample_paths(&grid, 0.7, 50, 8).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn coarsening_keeps_node_values() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let a = sample_paths(&grid, 0.8, 3, 1).unwrap();
        let c = a.coarsen(4).unwrap();
        assert_eq!(c.grid().n_steps(), 2);
        assert_eq!(c.values()[(2, 1)], a.values()[(2, 4)]);
        assert!(a.coarsen(3).is_err());
    }

    #[test]
    fn csv_header() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let a = sample_paths(&grid, 0.75, 2, 3).unwrap();
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# hurst=0.75 seed=3 dt=0.5");
        assert_eq!(lines.next().unwrap(), "0,0.5,1");
        assert_eq!(text.lines().count(), 4);
    }
}
