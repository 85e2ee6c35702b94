//! Acceptance suite. Runs without the libtest harness so that the one-line
//! verdict of every criterion is printed whether it passes or not.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fbsde::config::ModelFile;
use fbsde::fbm::{sample_paths, TimeGrid};
use fbsde::frac_calc::{build_kernel_table, inner_product};
use fbsde::model::ModelSpec;
use fbsde::solver::{
    apriori_report, picard_solve, picard_solve_with, solve_plain, SolutionField, SolverParams, SpaceParams,
    SpaceResolution,
};
use fbsde::verify::{
    compare, covariance_check, default_ito_corpus, default_moment_corpus, default_product_corpus,
    integral_moment_suite, ito_residual, product_rule_residual, Applicability, ProductVariant,
};

type Outcome = Result<String, String>;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn load(name: &str) -> ModelFile {
    ModelFile::load(&fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Steps on `[0, T+K]` for a time step `dt`.
fn steps_for(model: &ModelSpec, dt: f64) -> usize {
    (model.t_end() / dt).round() as usize
}

fn fbm_exactness() -> Outcome {
    let grid = TimeGrid::new(1.0, 63).map_err(|e| e.to_string())?;
    let mut details = Vec::new();
    let mut ok = true;
    for (i, h) in [0.6, 0.75, 0.9].into_iter().enumerate() {
        let batch = sample_paths(&grid, h, 10_000, 101 + i as u64).map_err(|e| e.to_string())?;
        let r = covariance_check(&batch).map_err(|e| e.to_string())?;
        ok &= r.passed;
        details.push(format!("H={h}: {:.4}", r.fraction));
    }
    check(ok, format!("fraction within 3 SE (need >= 0.99): {}", details.join(", ")))
}

fn divergence_moments() -> Outcome {
    let grid = TimeGrid::new(1.0, 256).map_err(|e| e.to_string())?;
    let batch = sample_paths(&grid, 0.75, 10_000, 202).map_err(|e| e.to_string())?;
    let r = integral_moment_suite(&batch, &default_moment_corpus()).map_err(|e| e.to_string())?;
    let worst = r
        .entries
        .iter()
        .filter(|e| e.target > 0.0)
        .map(|e| (e.variance / e.target - 1.0).abs())
        .fold(0.0, f64::max);
    let worst_mean = r.entries.iter().map(|e| e.mean.abs() / e.standard_error.max(1e-300)).fold(0.0, f64::max);
    let failed: Vec<&str> = r.entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
    check(
        r.passed,
        format!(
            "{} integrands, worst |mean|/SE {worst_mean:.2}, worst variance rel. error {worst:.4}, failed {failed:?}",
            r.entries.len()
        ),
    )
}

fn quadrature_oracle() -> Outcome {
    let mut worst_ip: f64 = 0.0;
    let mut worst_hat: f64 = 0.0;
    for h in [0.55, 0.6, 0.75, 0.9, 0.95] {
        for n in [64, 128] {
            let grid = TimeGrid::new(1.0, n).map_err(|e| e.to_string())?;
            let ones = vec![1.0; n + 1];
            for k in 1..=n {
                let t = grid.time(k);
                let ip = inner_product(&ones, &ones, &grid, t, h).map_err(|e| e.to_string())?;
                worst_ip = worst_ip.max((ip / t.powf(2.0 * h) - 1.0).abs());
            }
            let table = build_kernel_table(&grid, &ones, h).map_err(|e| e.to_string())?;
            for k in 1..=n {
                let exact = h * grid.time(k).powf(2.0 * h - 1.0);
                worst_hat = worst_hat.max((table.sigma_hat[k] / exact - 1.0).abs());
            }
        }
    }
    check(
        worst_ip < 1e-6 && worst_hat < 1e-6,
        format!("max rel. error <1,1>_t {worst_ip:.2e}, sigma_hat {worst_hat:.2e} (limit 1e-6)"),
    )
}

fn ito_product() -> Outcome {
    let grid = TimeGrid::new(1.0, 400).map_err(|e| e.to_string())?;
    let batch = sample_paths(&grid, 0.75, 2000, 303).map_err(|e| e.to_string())?;
    let mut failed = Vec::new();
    let mut min_order = f64::INFINITY;
    let mut exact = 0;
    let mut reports = Vec::new();
    for (func, name, spec) in default_ito_corpus() {
        let r = ito_residual(func, &spec, &batch).map_err(|e| e.to_string())?;
        reports.push((format!("ito[{},{name}]", func.name()), r));
    }
    for (a, b, p1, p2) in default_product_corpus() {
        let r = product_rule_residual(&p1, &p2, &batch, ProductVariant::Corrected).map_err(|e| e.to_string())?;
        reports.push((format!("product[{a},{b}]"), r));
    }
    for (label, r) in &reports {
        if r.exact {
            exact += 1;
        } else if let Some(o) = r.order {
            min_order = min_order.min(o);
        }
        if !r.passed {
            failed.push(label.clone());
        }
    }
    check(
        failed.is_empty(),
        format!("{} fixtures, {exact} exact, min fitted order {min_order:.3} (need >= 0.8), failed {failed:?}", reports.len()),
    )
}

fn max_error(field: &SolutionField, k: usize, exact: impl Fn(f64) -> f64) -> f64 {
    (0..field.space.n)
        .filter(|i| field.space.x(*i).abs() <= 6.0)
        .map(|i| (field.u[(k, i)] - exact(field.space.x(i))).abs())
        .fold(0.0, f64::max)
}

fn solver_oracles() -> Outcome {
    let fine = |file: &ModelFile| -> Result<(ModelSpec, SolverParams), String> {
        let mut p = file.solver_params().map_err(|e| e.to_string())?;
        p.space = SpaceParams { span: p.space.span, resolution: SpaceResolution::Step(1.0 / 200.0) };
        Ok((file.model().map_err(|e| e.to_string())?, p))
    };
    let mut errors = Vec::new();

    for name in ["linear.toml", "quadratic.toml"] {
        let (model, p) = fine(&load(name))?;
        let grid = model.grid(steps_for(&model, 1.0 / 400.0)).map_err(|e| e.to_string())?;
        let (field, _) = picard_solve(&model, &grid, &p).map_err(|e| e.to_string())?;
        let h2 = 2.0 * model.hurst();
        let t_end = model.horizon;
        let quadratic = name == "quadratic.toml";
        let mut worst: f64 = 0.0;
        for k in 0..=field.horizon_index {
            let t = grid.time(k);
            worst = worst.max(max_error(&field, k, |x| {
                if quadratic {
                    x * x + t_end.powf(h2) - t.powf(h2)
                } else {
                    x
                }
            }));
        }
        errors.push((name, worst));
    }

    let (model, p) = fine(&load("anticipative.toml"))?;
    let grid = model.grid(steps_for(&model, 1.0 / 400.0)).map_err(|e| e.to_string())?;
    let (field, _) = picard_solve(&model, &grid, &p).map_err(|e| e.to_string())?;
    let k = grid.node_index(0.5).ok_or("0.5 is not a node")?;
    errors.push(("anticipative@0.5", max_error(&field, k, |x| 1.53125 * x)));

    let ok = errors.iter().all(|(_, e)| *e <= 1e-3);
    let list: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect();
    check(ok, format!("max |error| on |x| <= 6 (limit 1e-3): {}", list.join(", ")))
}

fn contraction() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for name in ["anticipative.toml", "anticipative_nonlinear.toml"] {
        let file = load(name);
        let model = file.model().map_err(|e| e.to_string())?;
        let p = file.solver_params().map_err(|e| e.to_string())?;
        let grid = model.grid(file.grid.n_steps).map_err(|e| e.to_string())?;
        let (_, trace) = picard_solve(&model, &grid, &p).map_err(|e| e.to_string())?;
        let ratio = trace.max_ratio(p.tol).unwrap_or(0.0);
        let iters = trace.max_window_iterations();
        ok &= trace.converged && ratio <= 0.75 && iters <= 20;
        details.push(format!(
            "{name}: squared-norm ratio {ratio:.2e}, {iters} iterations/window, {} windows, converged {}",
            trace.window_boundaries.len() - 1,
            trace.converged
        ));
    }
    check(ok, details.join("; "))
}

fn apriori_stability() -> Outcome {
    let fixtures = [
        "linear.toml",
        "quadratic.toml",
        "constant_driver.toml",
        "anticipative.toml",
        "anticipative_nonlinear.toml",
        "reduce_linear.toml",
        "reduce_saturating.toml",
        "reduce_drifted.toml",
    ];
    let mut ok = true;
    let mut details = Vec::new();
    for name in fixtures {
        let file = load(name);
        let model = file.model().map_err(|e| e.to_string())?;
        let p = file.solver_params().map_err(|e| e.to_string())?;
        let mut ratios = Vec::new();
        for n in [100.0, 200.0, 400.0] {
            let grid = model.grid(steps_for(&model, 1.0 / n)).map_err(|e| e.to_string())?;
            let (field, _) = picard_solve(&model, &grid, &p).map_err(|e| e.to_string())?;
            let r = apriori_report(&field, &model, p.beta);
            ratios.push(r.ratio.ok_or(format!("{name}: no ratio"))?);
        }
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(0.0, f64::max);
        let variation = (hi - lo) / lo;
        ok &= variation < 0.1;
        details.push(format!("{} {variation:.1e}", name.trim_end_matches(".toml")));
    }
    check(ok, format!("relative variation of sup LHS/Theta (limit 0.1): {}", details.join(", ")))
}

fn comparison() -> Outcome {
    let mut ok = true;
    let mut details = Vec::new();
    for name in ["compare_shift.toml", "compare_anticipative.toml", "compare_saturating.toml"] {
        let file = load(name);
        let (m1, m2, c) = file.compare_models().map_err(|e| e.to_string())?;
        let p = file.solver_params().map_err(|e| e.to_string())?;
        let grid = m1.grid(file.grid.n_steps).map_err(|e| e.to_string())?;
        let r = compare(&m1, &m2, &c.driver_bar, &c.terminal_bar, &grid, &p).map_err(|e| e.to_string())?;
        let applicable = r.applicability == Applicability::Applicable;
        let pass = applicable && r.min_gap >= -1e-8 && r.sequence_decreasing;
        ok &= pass;
        details.push(format!(
            "{}: min gap {:.2e}, {} sequence terms, decreasing {}",
            name.trim_end_matches(".toml"),
            r.min_gap,
            r.sequence_norms.len(),
            r.sequence_decreasing
        ));
    }
    check(ok, details.join("; "))
}

fn reduction() -> Outcome {
    let mut ok = true;
    let mut details = Vec::new();
    for name in ["reduce_linear.toml", "reduce_saturating.toml", "reduce_drifted.toml"] {
        let file = load(name);
        let model = file.model().map_err(|e| e.to_string())?;
        let p = file.solver_params().map_err(|e| e.to_string())?;
        let grid = model.grid(file.grid.n_steps).map_err(|e| e.to_string())?;
        let table = model.kernel_table(&grid).map_err(|e| e.to_string())?;
        let (field, trace) = picard_solve_with(&model, &table, &p).map_err(|e| e.to_string())?;
        let plain = solve_plain(&model, &table, &p.space).map_err(|e| e.to_string())?;
        let diff = (&field.u - &plain.u).iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        ok &= trace.converged && diff <= p.tol;
        details.push(format!("{} {diff:.1e}", name.trim_end_matches(".toml")));
    }
    check(ok, format!("max node-wise |u - u_plain| (tol 1e-8): {}", details.join(", ")))
}

fn run_cli(args: &[&str]) -> i32 {
    let mut full = vec!["fbsde"];
    full.extend_from_slice(args);
    fbsde::cli::main_with_args(full)
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs = [
        ("simulate", "anticipative_nonlinear.toml", vec!["--paths", "200"]),
        ("solve", "anticipative_nonlinear.toml", vec![]),
        ("verify", "linear.toml", vec!["--paths", "300", "--steps", "100"]),
        ("compare", "compare_saturating.toml", vec![]),
    ];
    let mut compared = 0;
    for (i, (cmd, name, extra)) in runs.iter().enumerate() {
        let config = fixture(name);
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{i}-{rep}"));
            let mut args = vec![*cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
            args.extend(extra.iter().copied());
            let code = run_cli(&args);
            if code != 0 {
                return Err(format!("{cmd} {name} exited with {code}"));
            }
            outputs.push(csv_files(&out));
        }
        if outputs[0].is_empty() || outputs[0] != outputs[1] {
            return Err(format!("{cmd} {name}: CSV outputs differ between runs"));
        }
        compared += outputs[0].len();
    }
    Ok(format!("{compared} CSV files byte-identical across reruns"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("fbm exactness", fbm_exactness),
        ("divergence integral moments", divergence_moments),
        ("quadrature oracle", quadrature_oracle),
        ("ito and product residuals", ito_product),
        ("solver oracles", solver_oracles),
        ("contraction", contraction),
        ("a priori stability", apriori_stability),
        ("comparison", comparison),
        ("reduction", reduction),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({secs:.1} s) {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {:>2} {name}: FAIL ({secs:.1} s) {detail}", i + 1);
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
