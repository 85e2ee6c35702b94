use fbsde::fbm::{sample_paths, sample_paths_with, SamplingMethod, TimeGrid};
use fbsde::model::{eta_marginal, eta_paths, CoefficientSet, DelaySpec, DriverSpec, FuncSpec, ModelSpec, TerminalData};

fn model(b: FuncSpec, sigma: FuncSpec, eta0: f64) -> ModelSpec {
    ModelSpec {
        coefficients: CoefficientSet { hurst: 0.7, eta0, b, sigma },
        delays: DelaySpec::none(),
        driver: DriverSpec::zero(),
        terminal: TerminalData { g: FuncSpec::linear(0.0, 1.0), h: FuncSpec::constant(1.0), degree: 1 },
        horizon: 1.0,
    }
}

#[test]
fn eta_marginal_matches_paths() {
    let m = model(FuncSpec::linear(0.3, -0.5), FuncSpec::linear(1.0, 0.8), 0.4);
    let grid = m.grid(256).unwrap();
    let table = m.kernel_table(&grid).unwrap();
    let batch = sample_paths(&grid, 0.7, 20_000, 9).unwrap();
    let eta = eta_paths(&m, &batch).unwrap();
    let n = batch.n_paths() as f64;
    for k in [64, 128, 256] {
        let col = eta.column(k);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let (m_exact, v_exact) = eta_marginal(&m, &table, grid.time(k)).unwrap();
        assert!((mean - m_exact).abs() < 4.0 * (v_exact / n).sqrt(), "k={k}: {mean} vs {m_exact}");
        // left-point sums carry an O(dt) variance bias on top of sampling noise
        assert!((var / v_exact - 1.0).abs() < 0.04, "k={k}: {var} vs {v_exact}");
    }
}

#[test]
fn eta_rejects_hurst_mismatch() {
    let m = model(FuncSpec::constant(0.0), FuncSpec::constant(1.0), 0.0);
    let grid = m.grid(16).unwrap();
    let batch = sample_paths(&grid, 0.8, 4, 1).unwrap();
    assert!(eta_paths(&m, &batch).is_err());
}

#[test]
fn cholesky_and_circulant_agree_in_law() {
    let grid = TimeGrid::new(1.0, 256).unwrap();
    let n = 4000;
    let a = sample_paths_with(&grid, 0.8, n, 3, SamplingMethod::Cholesky).unwrap();
    let b = sample_paths_with(&grid, 0.8, n, 4, SamplingMethod::Circulant).unwrap();
    let var = |batch: &fbsde::fbm::PathBatch, k: usize| batch.values().column(k).iter().map(|v| v * v).sum::<f64>() / n as f64;
    for k in [32, 128, 256] {
        let exact = grid.time(k).powf(1.6);
        for v in [var(&a, k), var(&b, k)] {
            // relative SE of a Gaussian second moment is sqrt(2/n) ≈ 0.022
            assert!((v / exact - 1.0).abs() < 0.09, "k={k}: {v} vs {exact}");
        }
    }
}
