//! Acceptance checks. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use exitctl_core::dynamics::{ControlSet, ModelSpec};
use exitctl_core::hjb::{bellman_residual, scan_weights, solve_hjb, GridSpec, Scheme};
use exitctl_core::markov_chain::GeneratorMatrix;
use exitctl_core::models;
use exitctl_core::penalty::{auxiliary_cost, coupling_bound_excess, PenaltySpec};
use exitctl_core::regularity::{check_prop36_ii, check_superharmonic, linspace, TestFunction};
use exitctl_core::simulate::{
    exit_time_lowerbound_probe, monte_carlo_value, path_rng, simulate_coupled, simulate_path,
    ConstantControl, InitialState, McConfig, StopRule,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn run(name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let passed = out.passed && in_time;
    println!(
        "[{}] {name}: {} | {:.2} s (budget {} s)",
        if passed { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    passed
}

fn two_state_q() -> GeneratorMatrix {
    GeneratorMatrix::new(vec![vec![-3.0, 3.0], vec![4.0, -4.0]]).unwrap()
}

/// `exp(Qt)` for `Q = [[-3, 3], [4, -4]]`: eigenvalues 0 and -7, stationary
/// law (4/7, 3/7).
fn two_state_oracle(t: f64) -> [[f64; 2]; 2] {
    let e = (-7.0 * t).exp();
    [
        [4.0 / 7.0 + 3.0 / 7.0 * e, 3.0 / 7.0 * (1.0 - e)],
        [4.0 / 7.0 * (1.0 - e), 3.0 / 7.0 + 4.0 / 7.0 * e],
    ]
}

fn ctmc_fidelity() -> Outcome {
    let q = two_state_q();
    let t = 0.2;
    let n = 100_000;
    let oracle = two_state_oracle(t);
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        let mut counts = [0usize; 2];
        for k in 0..n {
            let mut rng = path_rng(11 + i as u64, k as u64);
            let path = q.sample_path(i, 0.0, t, &mut rng).unwrap();
            counts[path.state_at(t)] += 1;
        }
        for j in 0..2 {
            worst = worst.max((counts[j] as f64 / n as f64 - oracle[i][j]).abs());
        }
    }
    let p = q.transition_matrix(t).unwrap();
    let mut matrix_err: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            matrix_err = matrix_err.max((p[i][j] - oracle[i][j]).abs());
        }
    }
    outcome(
        worst <= 0.01 && matrix_err <= 1e-10,
        format!(
            "max |freq - exp(Qt)| = {worst:.4} (tol 0.01), |P(t) - exp(Qt)| = {matrix_err:.1e}"
        ),
    )
}

/// First zero of `x + (t-1)^2 - (s-1)^2`, or the horizon 2 when there is
/// none before it.
fn tangency_oracle(s: f64, x: f64) -> f64 {
    let d = (s - 1.0).powi(2) - x;
    if s <= 1.0 && d >= 0.0 {
        1.0 - d.sqrt()
    } else {
        2.0
    }
}

fn tangency_simulator() -> Outcome {
    let model = models::tangency();
    let dt = 1e-4;
    let mut worst: f64 = 0.0;
    let mut exact_horizon = true;
    for &s in &[0.0, 0.5] {
        for &x in &[0.25, 0.5, 0.75, 0.95, 1.05, 1.5] {
            let p = simulate_path(
                &model,
                &ConstantControl(0.0),
                InitialState::new(s, x, 0),
                dt,
                StopRule::AtExit,
                &mut path_rng(1, 0),
            )
            .unwrap();
            let expected = tangency_oracle(s, x);
            if x > 1.0 {
                exact_horizon &= p.tau == 2.0 && !p.exited;
            } else {
                worst = worst.max((p.tau - expected).abs());
            }
        }
    }
    outcome(
        worst <= 2.0 * dt && exact_horizon,
        format!("max |tau - oracle| = {worst:.2e} (tol {:.0e}), tau = 2 exactly above 1: {exact_horizon}", 2.0 * dt),
    )
}

/// Euclidean distance from `(s, x)` to the arc `{(r, (r-1)^2) : 0 <= r <= 1}`
/// across which the value jumps.
fn distance_to_parabola(s: f64, x: f64) -> f64 {
    (0..=4000)
        .map(|k| {
            let r = k as f64 / 4000.0;
            ((s - r).powi(2) + (x - (r - 1.0).powi(2)).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn tangency_solver() -> Outcome {
    let model = models::tangency();
    let grid = GridSpec::cfl_compliant(&model, 4.0, 400, 1, Scheme::Explicit).unwrap();
    let vg = solve_hjb(&model, &grid).unwrap().value;
    let mut worst: f64 = 0.0;
    let mut worst_at = (0.0, 0.0);
    for n in 0..=grid.n_t {
        let s = vg.t(n);
        for i in 1..=grid.n_x {
            let x = vg.x(i);
            // Cheap pre-filter: points within 0.1 of the arc are within 0.4 vertically.
            if s <= 1.1 && (x - (s - 1.0).powi(2)).abs() < 0.4 && distance_to_parabola(s, x) < 0.1 {
                continue;
            }
            let err = (vg.value(n, i, 0) - (tangency_oracle(s, x) - s)).abs();
            if err > worst {
                worst = err;
                worst_at = (s, x);
            }
        }
    }
    let jump = vg.value_at(0.0, 1.05, 0) - vg.value_at(0.0, 0.95, 0);
    outcome(
        worst <= 0.05 && jump >= 0.9,
        format!(
            "n_x = 400, dt = {:.4}: max error {worst:.4} at (s, x) = ({:.3}, {:.3}) (tol 0.05), jump at s = 0 {jump:.4} (need >= 0.9)",
            grid.dt_for(&model),
            worst_at.0,
            worst_at.1
        ),
    )
}

fn brownian_cross_check() -> Outcome {
    let model = models::brownian_exit();
    let oracle = 0.25;
    let grid = GridSpec::new(1.0, 200, 10_000, 1).with_scheme(Scheme::ImplicitDiffusion);
    let solver = solve_hjb(&model, &grid)
        .unwrap()
        .value
        .value_at(0.0, 0.5, 0);
    let mc = monte_carlo_value(
        &model,
        &ConstantControl(0.0),
        InitialState::new(0.0, 0.5, 0),
        &McConfig::new(100_000, 1e-4, 2024),
    )
    .unwrap();
    let ok = (solver - oracle).abs() <= 0.05 * oracle
        && (mc.mean - oracle).abs() <= 0.05 * oracle
        && (solver - mc.mean).abs() <= 0.02;
    outcome(
        ok,
        format!(
            "solver {solver:.5}, Monte Carlo {:.5} +/- {:.5}, oracle {oracle} (tol 5%, |solver - mc| <= 0.02)",
            mc.mean, mc.std_error
        ),
    )
}

fn penalty_structure() -> Outcome {
    let q = two_state_q();
    let model = ModelSpec::new("toy", q, 2.0)
        .with_drift(|_, _, a, _| if a == 0 { -0.5 } else { 0.3 })
        .with_diffusion(|_, x, a, _| {
            if a == 0 {
                0.6
            } else {
                0.3 + 0.1 * x.abs().min(1.0)
            }
        })
        .with_running_cost(|_, _, _, _| 1.0);
    let pen_small = PenaltySpec::signed_distance(0.01).unwrap();
    let pen_large = PenaltySpec::signed_distance(0.1).unwrap();
    let policy = ConstantControl(0.0);
    let n = 10_000;
    let dt = 1e-2;
    let mut monotone_violations = 0usize;
    let mut coupling_violations = 0usize;
    let mut worst_excess = f64::NEG_INFINITY;
    for k in 0..n {
        let mut rng = path_rng(5, k as u64);
        let paths = simulate_coupled(
            &model,
            &policy,
            0.0,
            &[0.3, 0.5],
            0,
            dt,
            StopRule::Unstopped,
            &mut rng,
        )
        .unwrap();
        for p in &paths {
            let j1 = auxiliary_cost(p, &model, &policy, &pen_small).unwrap();
            let j2 = auxiliary_cost(p, &model, &policy, &pen_large).unwrap();
            if j1 > j2 {
                monotone_violations += 1;
            }
        }
        for pen in [&pen_small, &pen_large] {
            let excess = coupling_bound_excess(&paths[0], &paths[1], pen).unwrap();
            worst_excess = worst_excess.max(excess);
            if excess > 1e-12 {
                coupling_violations += 1;
            }
        }
    }
    outcome(
        monotone_violations == 0 && coupling_violations == 0,
        format!(
            "{n} coupled path pairs: J ordering violations {monotone_violations}, coupling-bound violations {coupling_violations} (largest excess {worst_excess:.2e})"
        ),
    )
}

fn regularity_certificates() -> Outcome {
    let noisy = models::noisy_tangency();
    let t_grid = linspace(0.0, 2.0, 2000);
    let phi = TestFunction::new(|x, _| -x * x + x, (0.0, 0.05))
        .with_derivatives(|x, _| 1.0 - 2.0 * x, |_, _| -2.0);
    let rep = check_superharmonic(&noisy, &phi, 0.0, &t_grid, &[0.0]);
    let mut err_noisy: f64 = 0.0;
    for s in &rep.at_boundary {
        err_noisy = err_noisy.max((s.value - (-(s.t - 1.0).powi(2) - 1.0)).abs());
    }
    let max_ok = (rep.max_at_boundary + 1.0).abs() <= 1e-9;

    let reins = models::reinsurance(0.05);
    let phi2 = TestFunction::new(
        |x, a| -x * x + if a == 0 { 0.5 * x } else { 2.0 * x },
        (0.0, 0.01),
    )
    .with_derivatives(
        |x, a| -2.0 * x + if a == 0 { 0.5 } else { 2.0 },
        |_, _| -2.0,
    );
    let rep2 = check_superharmonic(&reins, &phi2, 0.5, &linspace(0.0, 100.0, 10_000), &[0.0]);
    let mut err_reins: f64 = 0.0;
    for s in &rep2.at_boundary {
        let expected = if s.regime == 0 {
            -s.t.sin().powi(2) - 0.0625
        } else {
            -1.0 - s.t.cos().powi(2)
        };
        err_reins = err_reins.max((s.value - expected).abs());
    }

    let psi = TestFunction::signed_distance((0.0, 1.0));
    let step = 2.0 / 2000.0;
    let p36 = check_prop36_ii(&noisy, &psi, 0.0, &t_grid, 0.0).unwrap();
    let fails_after_one = t_grid
        .iter()
        .filter(|&&t| t > 1.0 + step)
        .all(|t| p36.failing_times.contains(t));
    let passes_before_one = p36.failing_times.iter().all(|&t| t >= 1.0 - step);
    let ok = err_noisy <= 1e-9
        && max_ok
        && err_reins <= 1e-9
        && fails_after_one
        && passes_before_one
        && !p36.passed;
    outcome(
        ok,
        format!(
            "noisy tangency err {err_noisy:.1e}, max {:.12}; reinsurance err {err_reins:.1e}; signed-distance check fails on [{:.4}, 2]",
            rep.max_at_boundary,
            p36.failing_times.first().copied().unwrap_or(f64::NAN)
        ),
    )
}

fn exit_time_lower_bound() -> Outcome {
    let hs = [0.05, 0.1, 0.2];
    let mut lines = Vec::new();
    let mut ok = true;
    let cases: [(ModelSpec, f64, usize, Vec<f64>); 2] = [
        (models::brownian_exit(), 0.5, 0, vec![0.0]),
        (models::reinsurance(0.05), 1.0, 0, vec![0.0, 0.5, 1.0]),
    ];
    for (model, x0, regime, controls) in &cases {
        let mut kappas = Vec::new();
        for &h in &hs {
            let cfg = McConfig::new(4000, h * h / 400.0, 99);
            let probe = exit_time_lowerbound_probe(
                model,
                InitialState::new(0.0, *x0, *regime),
                h,
                controls,
                &cfg,
            )
            .unwrap();
            kappas.push(probe.kappa_hat);
        }
        let lo = kappas.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = kappas.iter().copied().fold(0.0, f64::max);
        ok &= lo >= 0.05 && hi <= 2.0 * lo;
        lines.push(format!(
            "{} kappa {:?}",
            model.name,
            kappas.iter().map(|k| format!("{k:.3}")).collect::<Vec<_>>()
        ));
    }
    outcome(
        ok,
        format!("{} (need >= 0.05, spread <= x2)", lines.join("; ")),
    )
}

fn scheme_properties() -> Outcome {
    let mut min_weight = f64::INFINITY;
    let mut checked = 0usize;
    let grids = [
        (
            models::tangency(),
            GridSpec::cfl_compliant(&models::tangency(), 4.0, 400, 1, Scheme::Explicit).unwrap(),
        ),
        (
            models::noisy_tangency(),
            GridSpec::cfl_compliant(&models::noisy_tangency(), 4.0, 80, 1, Scheme::Explicit)
                .unwrap(),
        ),
        (
            models::reinsurance(0.05),
            GridSpec::new(2.0, 20, 1, 5)
                .with_horizon(5.0)
                .fit_time_steps(&models::reinsurance(0.05))
                .unwrap(),
        ),
        (
            models::brownian_exit(),
            GridSpec::cfl_compliant(&models::brownian_exit(), 1.0, 40, 1, Scheme::Explicit)
                .unwrap(),
        ),
    ];
    let mut residual: f64 = 0.0;
    for (model, grid) in &grids {
        let scan = scan_weights(model, grid).unwrap();
        min_weight = min_weight.min(scan.min_weight);
        checked += scan.weights_checked;
        if model.name != "reinsurance" {
            let vg = solve_hjb(model, grid).unwrap().value;
            residual = residual.max(bellman_residual(&vg, model).unwrap().max);
        }
    }

    // Comparison: identical dynamics, ordered costs.
    let base = ModelSpec::new("ordered", two_state_q(), 1.0)
        .with_drift(|t, x, a, u| {
            if a == 0 {
                t.sin() + 0.3 * x - u
            } else {
                0.5 - x + u
            }
        })
        .with_diffusion(|_, x, a, u| {
            if a == 0 {
                0.4 + 0.2 * x + 0.3 * u
            } else {
                0.8 + 0.1 * x
            }
        })
        .with_controls(ControlSet::Interval { lo: 0.0, hi: 1.0 });
    let low = base
        .clone()
        .with_running_cost(|_, x, a, u| x + 0.5 * a as f64 + u * u)
        .with_terminal_cost(|_, x, _| 0.2 * x);
    let high = base
        .with_running_cost(|t, x, a, u| x + 0.5 * a as f64 + u * u + 0.3 * (x * t).sin().abs())
        .with_terminal_cost(|t, x, _| 0.2 * x + 0.1 * (1.0 + t));
    let cgrid = GridSpec::cfl_compliant(&low, 3.0, 60, 6, Scheme::Explicit).unwrap();
    let v_low = solve_hjb(&low, &cgrid).unwrap().value;
    let v_high = solve_hjb(&high, &cgrid).unwrap().value;
    let violations = v_low
        .values
        .iter()
        .zip(&v_high.values)
        .filter(|(a, b)| a > b)
        .count();
    residual = residual.max(bellman_residual(&v_low, &low).unwrap().max);
    residual = residual.max(bellman_residual(&v_high, &high).unwrap().max);

    outcome(
        min_weight >= -1e-12 && violations == 0 && residual <= 1e-9,
        format!(
            "{checked} weights, smallest {min_weight:.2e}; comparison violations {violations}; max Bellman residual {residual:.2e} (tol 1e-9)"
        ),
    )
}

fn main() -> ExitCode {
    let checks: [(&str, u64, fn() -> Outcome); 8] = [
        ("ctmc-fidelity", 10, ctmc_fidelity),
        ("tangency-simulator", 5, tangency_simulator),
        ("tangency-solver", 60, tangency_solver),
        ("brownian-exit-cross-check", 300, brownian_cross_check),
        ("penalty-structure", 120, penalty_structure),
        ("regularity-certificates", 60, regularity_certificates),
        ("exit-time-lower-bound", 300, exit_time_lower_bound),
        ("scheme-properties", 300, scheme_properties),
    ];
    let mut failed = 0;
    for (name, budget, f) in checks {
        if !run(name, Duration::from_secs(budget), f) {
            failed += 1;
        }
    }
    println!(
        "{} of {} acceptance criteria passed",
        checks.len() - failed,
        checks.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
