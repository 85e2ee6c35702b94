use fbsde::config::ModelFile;
use fbsde::fbm::{covariance, covariance_matrix, sample_paths, TimeGrid};
use fbsde::frac_calc::{build_kernel_table, heat_smooth, heat_smooth_shifted, inner_product};
use fbsde::model::{CoefficientSet, DelaySpec, DriverSpec, FuncSpec, ModelSpec, TerminalData};
use fbsde::solver::{weighted_norms, SolutionField, SpaceGrid};
use proptest::prelude::*;

fn hurst() -> impl Strategy<Value = f64> {
    0.51f64..0.99
}

fn func() -> impl Strategy<Value = FuncSpec> {
    prop_oneof![
        (-3.0f64..3.0).prop_map(FuncSpec::constant),
        (-3.0f64..3.0, -3.0f64..3.0).prop_map(|(a, b)| FuncSpec::linear(a, b)),
        prop::collection::vec(-2.0f64..2.0, 1..5).prop_map(|c| FuncSpec::polynomial(&c)),
        (-2.0f64..2.0, -2.0f64..2.0).prop_map(|(scale, rate)| FuncSpec::Exponential { scale, rate }),
        (-2.0f64..2.0, 0.1f64..4.0, -3.0f64..3.0)
            .prop_map(|(amplitude, frequency, phase)| FuncSpec::Sine { amplitude, frequency, phase }),
    ]
}

fn unit_model(hurst: f64, g: FuncSpec) -> ModelSpec {
    ModelSpec {
        coefficients: CoefficientSet { hurst, eta0: 0.0, b: FuncSpec::constant(0.0), sigma: FuncSpec::constant(1.0) },
        delays: DelaySpec::none(),
        driver: DriverSpec::zero(),
        terminal: TerminalData { g, h: FuncSpec::constant(0.0), degree: 0 },
        horizon: 1.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_is_symmetric_and_bounded(h in hurst(), t in 0.0f64..2.0, s in 0.0f64..2.0) {
        let ts = covariance(t, s, h).unwrap();
        prop_assert_eq!(ts, covariance(s, t, h).unwrap());
        let bound = (covariance(t, t, h).unwrap() * covariance(s, s, h).unwrap()).sqrt();
        prop_assert!(ts.abs() <= bound * (1.0 + 1e-12) + 1e-15);
        prop_assert!((covariance(t, t, h).unwrap() - t.powf(2.0 * h)).abs() <= 1e-12);
    }

    #[test]
    fn covariance_matrix_is_symmetric(h in hurst(), n in 2usize..30) {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let c = covariance_matrix(&grid, h).unwrap();
        prop_assert_eq!(c.clone(), c.transpose());
    }

    #[test]
    fn inner_product_symmetric_and_positive(
        h in hurst(),
        xi in prop::collection::vec(-3.0f64..3.0, 17),
        eta in prop::collection::vec(-3.0f64..3.0, 17),
        m in 1usize..=16,
    ) {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let t = grid.time(m);
        let a = inner_product(&xi, &eta, &grid, t, h).unwrap();
        let b = inner_product(&eta, &xi, &grid, t, h).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        prop_assert!(inner_product(&xi, &xi, &grid, t, h).unwrap() >= -1e-12);
        // bilinearity in the first slot
        let sum: Vec<f64> = xi.iter().zip(&eta).map(|(x, e)| 2.0 * x - e).collect();
        let lhs = inner_product(&sum, &xi, &grid, t, h).unwrap();
        let rhs = 2.0 * inner_product(&xi, &xi, &grid, t, h).unwrap() - b;
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn kernel_table_invariants(h in hurst(), sigma in func(), n in 4usize..64) {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let values = sigma.sample(&grid);
        prop_assume!(values.iter().all(|v| *v > 0.05));
        let table = build_kernel_table(&grid, &values, h).unwrap();
        prop_assert_eq!(table.sigma_norm_sq[0], 0.0);
        prop_assert!(table.sigma_norm_sq.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(table.diffusion[1..].iter().all(|a| *a > 0.0));
        let m = table.ratio_bound();
        prop_assert!(m.is_finite() && m >= 1.0);
    }

    #[test]
    fn smoothing_preserves_affine_slices(
        a in -5.0f64..5.0,
        b in -5.0f64..5.0,
        var in 0.0f64..4.0,
        shift in -2.0f64..2.0,
    ) {
        let dx = 0.1;
        let slice: Vec<f64> = (0..41).map(|i| a + b * (i as f64 * dx)).collect();
        let out = heat_smooth_shifted(&slice, dx, var, shift).unwrap();
        for (i, v) in out.iter().enumerate() {
            let want = a + b * (i as f64 * dx + shift);
            prop_assert!((v - want).abs() <= 1e-9 * (1.0 + want.abs()), "{} vs {}", v, want);
        }
    }

    #[test]
    fn smoothing_preserves_monotonicity(
        steps in prop::collection::vec(0.0f64..1.0, 80),
        var in 0.0f64..2.0,
    ) {
        let mut slice = vec![0.0];
        for s in &steps {
            slice.push(slice.last().unwrap() + s);
        }
        let out = heat_smooth(&slice, 0.05, var).unwrap();
        prop_assert!(out.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn smoothing_rejects_negative_variance(var in -10.0f64..-1e-9) {
        prop_assert!(heat_smooth(&[0.0, 1.0, 2.0], 0.1, var).is_err());
    }

    #[test]
    fn config_round_trip(
        h in hurst(),
        eta0 in -1e3f64..1e3,
        sigma in func(),
        g in func(),
        delta in 0.0f64..0.5,
        horizon in 0.1f64..3.0,
        n_steps in 1usize..10_000,
    ) {
        let model = ModelSpec {
            coefficients: CoefficientSet { hurst: h, eta0, b: FuncSpec::constant(0.0), sigma },
            delays: DelaySpec { delta: FuncSpec::constant(delta), zeta: FuncSpec::constant(0.0), k: delta, l: 1.0 },
            driver: DriverSpec::linear(0.1, 0.2, 0.3, 0.4, 0.5),
            terminal: TerminalData { g, h: FuncSpec::constant(1.0), degree: 1 },
            horizon,
        };
        let text = format!(
            "{}\n[grid]\nhorizon = {horizon:?}\nn_steps = {n_steps}\n",
            toml::to_string(&Wrapper::from(&model)).unwrap()
        );
        let file = ModelFile::parse(&text).unwrap();
        prop_assert_eq!(file.model().unwrap(), model);
        let again = ModelFile::parse(&file.to_toml().unwrap()).unwrap();
        prop_assert_eq!(again, file);
    }

    #[test]
    fn weighted_norms_nonnegative_and_symmetric(
        h in hurst(),
        shift in -2.0f64..2.0,
        scale in 0.0f64..3.0,
        beta in 1.01f64..5.0,
    ) {
        let m = unit_model(h, FuncSpec::linear(0.0, 1.0));
        let grid = m.grid(40).unwrap();
        let table = m.kernel_table(&grid).unwrap();
        let space = SpaceGrid::new(-6.0, 6.0, 61).unwrap();
        let a = SolutionField::terminal_extension(&m, &table, space).unwrap();
        let mut b = a.clone();
        b.u.mapv_inplace(|v| scale * v + shift);
        b.z.mapv_inplace(|v| v - shift);
        let (y1, z1) = weighted_norms(&a, &b, &m, beta).unwrap();
        let (y2, z2) = weighted_norms(&b, &a, &m, beta).unwrap();
        prop_assert!(y1 >= 0.0 && z1 >= 0.0);
        prop_assert!((y1 - y2).abs() <= 1e-12 * (1.0 + y1) && (z1 - z2).abs() <= 1e-12 * (1.0 + z1));
        prop_assert_eq!(weighted_norms(&a, &a, &m, beta).unwrap(), (0.0, 0.0));
    }
}

/// The model-file sections that come from a `ModelSpec`.
#[derive(serde::Serialize)]
struct Wrapper {
    coefficients: CoefficientSet,
    delays: DelaySpec,
    driver: DriverSpec,
    terminal: TerminalData,
}

impl From<&ModelSpec> for Wrapper {
    fn from(m: &ModelSpec) -> Self {
        Wrapper {
            coefficients: m.coefficients.clone(),
            delays: m.delays.clone(),
            driver: m.driver.clone(),
            terminal: m.terminal.clone(),
        }
    }
}

#[test]
fn same_seed_same_paths() {
    let grid = TimeGrid::new(1.0, 3000).unwrap();
    let a = sample_paths(&grid, 0.7, 8, 42).unwrap();
    let b = sample_paths(&grid, 0.7, 8, 42).unwrap();
    let c = sample_paths(&grid, 0.7, 8, 43).unwrap();
    assert_eq!(a.values(), b.values());
    assert_ne!(a.values(), c.values());
    assert!(a.values().column(0).iter().all(|v| *v == 0.0));
}
