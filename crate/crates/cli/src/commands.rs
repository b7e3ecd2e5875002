use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path as FsPath, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use exitctl_core::dynamics::{check_assumption_a1, A1Probe, ControlSet, ModelSpec};
use exitctl_core::hjb::{
    bellman_residual, solve_hjb, upper_boundary_treatment, verify_candidate, GridSpec, Scheme,
    ValueGrid,
};
use exitctl_core::io;
use exitctl_core::models;
use exitctl_core::penalty::{a3_diagnostic, penalized_value_mc, PenalizedRow, PenaltySpec};
use exitctl_core::regularity::{
    check_prop36_ii, check_superharmonic, linspace, mc_regularity_probe, GeneratorSample,
    TestFunction,
};
use exitctl_core::simulate::{
    simulate_batch, ConstantControl, FeedbackPolicy, InitialState, McConfig,
};

use crate::config::{
    GridArgs, McArgs, ModelRef, PenaltyArgs, RegularityArgs, RunConfig, SchemeArg, StartArgs,
};
use crate::{Failure, GlobalArgs};

const DEFAULT_SEED: u64 = 0;

pub struct Context {
    pub model: ModelSpec,
    pub seed: u64,
    pub out: PathBuf,
}

impl Context {
    pub fn new(global: &GlobalArgs, file: &RunConfig) -> Result<Self, Failure> {
        let (file_name, file_rate) = match &file.model {
            Some(ModelRef::Name(n)) => (Some(n.clone()), None),
            Some(ModelRef::Block(b)) => (Some(b.name.clone()), b.discount_rate),
            None => (None, None),
        };
        let name = global.model.clone().or(file_name).ok_or_else(|| {
            Failure::Config(format!(
                "no model given; use --model with one of {}",
                models::BUILTIN_NAMES.join(", ")
            ))
        })?;
        let model = models::builtin(&name, global.discount_rate.or(file_rate))?;
        Ok(Self::with_model(global, file, model))
    }

    fn with_model(global: &GlobalArgs, file: &RunConfig, model: ModelSpec) -> Self {
        Self {
            model,
            seed: global.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            out: global
                .out
                .clone()
                .or_else(|| file.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out")),
        }
    }

    fn metadata(&self, command: &str, parameters: Value) -> Metadata {
        Metadata {
            tool: "exitctl",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            model: self.model.name.clone(),
            model_parameters: self.model.parameters.iter().cloned().collect(),
            sense: format!("{:?}", self.model.sense).to_lowercase(),
            horizon: self.model.horizon,
            seed: self.seed,
            regime_indexing: "0-based",
            parameters,
            upper_boundary: None,
            truncated_horizon: false,
        }
    }

    /// Writes `name` under the output directory and its metadata sidecar.
    fn emit(
        &self,
        name: &str,
        meta: &Metadata,
        write: impl FnOnce(&mut dyn Write) -> exitctl_core::Result<()>,
    ) -> Result<PathBuf, Failure> {
        let path = self.out.join(name);
        let mut f = io::create(&path)?;
        write(&mut f)?;
        f.flush().map_err(exitctl_core::Error::from)?;
        io::write_sidecar(&path, meta)?;
        Ok(path)
    }
}

#[derive(Debug, Clone, Serialize)]
struct Metadata {
    tool: &'static str,
    version: &'static str,
    command: String,
    model: String,
    model_parameters: BTreeMap<String, f64>,
    sense: String,
    horizon: f64,
    seed: u64,
    regime_indexing: &'static str,
    parameters: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    upper_boundary: Option<&'static str>,
    truncated_horizon: bool,
}

fn default_control(model: &ModelSpec) -> f64 {
    match &model.control_set {
        ControlSet::Interval { lo, .. } => *lo,
        ControlSet::Finite { values } => values[0],
    }
}

fn check_control(model: &ModelSpec, u: f64) -> Result<f64, Failure> {
    if model.control_set.contains(u) {
        Ok(u)
    } else {
        Err(Failure::Config(format!(
            "control {u} is outside the admissible set {:?}",
            model.control_set
        )))
    }
}

fn positive(name: &str, v: f64) -> Result<f64, Failure> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Failure::Config(format!("{name} must be positive, got {v}")))
    }
}

fn nonzero(name: &str, v: usize) -> Result<usize, Failure> {
    if v > 0 {
        Ok(v)
    } else {
        Err(Failure::Config(format!("{name} must be positive")))
    }
}

fn report(path: &FsPath) {
    println!("wrote {}", path.display());
}

pub fn simulate(ctx: &Context, start: StartArgs, mc: McArgs, keep: usize) -> Result<(), Failure> {
    let model = &ctx.model;
    let init = InitialState::new(
        start.s.unwrap_or(0.0),
        start.x0.unwrap_or(0.5),
        start.regime.unwrap_or(0),
    );
    let u = check_control(
        model,
        start.control.unwrap_or_else(|| default_control(model)),
    )?;
    let cfg = McConfig::new(
        nonzero("n_paths", mc.n_paths.unwrap_or(1000))?,
        positive("dt", mc.dt.unwrap_or(1e-3))?,
        ctx.seed,
    );
    let (summaries, kept) = simulate_batch(model, &ConstantControl(u), init, &cfg, keep)?;
    let meta = ctx.metadata(
        "simulate",
        json!({"s": init.s, "x0": init.x0, "regime": init.regime, "control": u, "n_paths": cfg.n_paths, "dt": cfg.dt}),
    );
    let summary = ctx.emit("summary.csv", &meta, |w| {
        io::write_batch_summary(ctx.seed, &summaries, w)
    })?;
    report(&summary);
    for (k, p) in kept.iter().enumerate() {
        let mut m = meta.clone();
        m.parameters["path"] = json!(k);
        ctx.emit(&format!("paths/path_{k:05}.csv"), &m, |w| {
            io::write_path(p, w)
        })?;
    }
    let costs: Vec<f64> = summaries.iter().map(|s| model.objective(s.cost)).collect();
    let est = exitctl_core::McEstimate::from_samples(&costs);
    println!(
        "objective {:.6} +/- {:.6} over {} paths",
        est.mean, est.std_error, est.n
    );
    Ok(())
}

fn grid_from_args(model: &ModelSpec, args: &GridArgs) -> Result<GridSpec, Failure> {
    let x_max = args.x_max.or(model.upper_barrier).unwrap_or(4.0);
    let mut grid = GridSpec::new(
        positive("x_max", x_max)?,
        nonzero("n_x", args.n_x.unwrap_or(200))?,
        1,
        nonzero("n_u", args.n_u.unwrap_or(11))?,
    );
    if args.scheme == Some(SchemeArg::Implicit) {
        grid = grid.with_scheme(Scheme::ImplicitDiffusion);
    }
    if let Some(h) = args.horizon {
        grid = grid.with_horizon(positive("horizon", h)?);
    }
    Ok(match args.n_t {
        Some(n_t) => GridSpec {
            n_t: nonzero("n_t", n_t)?,
            ..grid
        },
        None => grid.fit_time_steps(model)?,
    })
}

pub fn solve(
    ctx: &Context,
    args: GridArgs,
    start: StartArgs,
    mc: McArgs,
    verify_paths: usize,
) -> Result<(), Failure> {
    let model = &ctx.model;
    let grid = grid_from_args(model, &args)?;
    let mut probe = A1Probe::new(0.0, grid.x_max);
    probe.seed = ctx.seed;
    let a1 = check_assumption_a1(model, &probe)?;
    if !a1.passed {
        return Err(Failure::Config(format!(
            "model fails the growth and Lipschitz probe: {} ratio {:.3e} at x = {}, y = {} (cap {})",
            a1.worst_violation.quantity, a1.worst_violation.ratio, a1.worst_violation.x, a1.worst_violation.y, a1.cap
        )));
    }
    let sol = solve_hjb(model, &grid)?;
    let residual = bellman_residual(&sol.value, model)?;
    let horizon = grid.horizon_for(model);
    let mut meta = ctx.metadata(
        "solve",
        serde_json::to_value(grid).map_err(exitctl_core::Error::from)?,
    );
    meta.upper_boundary = Some(upper_boundary_treatment(model));
    meta.truncated_horizon = horizon < model.horizon;
    let sign = model.sense.sign();
    let values = ctx.emit("value.csv", &meta, |w| {
        io::write_value_grid(&sol.value, Some(&sol.policy), sign, w)
    })?;
    report(&values);

    let verification = if verify_paths > 0 {
        let init = InitialState::new(
            start.s.unwrap_or(0.0),
            start.x0.unwrap_or(0.5),
            start.regime.unwrap_or(0),
        );
        let cfg = McConfig::new(
            verify_paths,
            positive("dt", mc.dt.unwrap_or(sol.value.dt()))?,
            ctx.seed,
        );
        let allowance = 2.0 * (grid.dx() + sol.value.dt());
        Some(verify_candidate(&sol.value, model, init, &cfg, allowance)?)
    } else {
        None
    };
    let summary = json!({
        "metadata": meta,
        "grid": grid,
        "cfl": sol.cfl,
        "bellman_residual": residual,
        "assumption_probe": a1,
        "verification": verification,
    });
    let path = ctx.out.join("solve.json");
    let mut f = io::create(&path)?;
    io::write_json(&summary, &mut f)?;
    report(&path);
    println!(
        "grid {} x {} x {} regimes, residual {:.3e}",
        grid.n_t + 1,
        grid.n_x + 1,
        model.n_regimes(),
        residual.max
    );
    Ok(())
}

pub fn diagnose_continuity(
    ctx: &Context,
    start: StartArgs,
    mc: McArgs,
    pen_args: PenaltyArgs,
    n_u: Option<usize>,
) -> Result<(), Failure> {
    let model = &ctx.model;
    let s = start.s.unwrap_or(0.0);
    let regime = start.regime.unwrap_or(0);
    let u = check_control(
        model,
        start.control.unwrap_or_else(|| default_control(model)),
    )?;
    let cfg = McConfig::new(
        nonzero("n_paths", mc.n_paths.unwrap_or(2000))?,
        positive("dt", mc.dt.unwrap_or(1e-3))?,
        ctx.seed,
    );
    let epsilons = pen_args
        .epsilons
        .unwrap_or_else(|| vec![0.1, 0.05, 0.02, 0.01]);
    let x0s = pen_args.x0s.unwrap_or_else(|| vec![0.25, 0.5, 1.0]);
    let span = model.horizon - s;
    let checkpoints = pen_args
        .checkpoints
        .unwrap_or_else(|| [0.01, 0.1, 0.5, 1.0].iter().map(|f| s + f * span).collect());
    let family_controls = model
        .control_set
        .discretize(nonzero("n_u", n_u.unwrap_or(5))?);
    let family: Vec<ConstantControl> = family_controls
        .iter()
        .map(|&u| ConstantControl(u))
        .collect();
    let family_refs: Vec<&dyn FeedbackPolicy> =
        family.iter().map(|p| p as &dyn FeedbackPolicy).collect();

    let mut a3_rows = Vec::new();
    let mut value_rows = Vec::new();
    for &eps in &epsilons {
        let pen = PenaltySpec::signed_distance(positive("epsilon", eps)?)?;
        a3_rows.extend(a3_diagnostic(model, &pen, u, s, regime, &checkpoints, &cfg)?.rows());
        for &x0 in &x0s {
            let est = penalized_value_mc(
                model,
                &family_refs,
                &pen,
                InitialState::new(s, x0, regime),
                &cfg,
            )?;
            value_rows.push(PenalizedRow {
                epsilon: eps,
                x0,
                v_eps_hat: model.objective(est.best.mean),
                std_error: est.best.std_error,
            });
        }
    }
    let meta = ctx.metadata(
        "diagnose-continuity",
        json!({
            "s": s, "regime": regime, "control": u, "n_paths": cfg.n_paths, "dt": cfg.dt,
            "epsilons": epsilons, "x0s": x0s, "checkpoints": checkpoints,
            "penalty": "psi(x) = -x", "policy_family": family_controls,
        }),
    );
    report(&ctx.emit("penalty_onset.csv", &meta, |w| io::write_rows(&a3_rows, w))?);
    report(&ctx.emit("penalized_value.csv", &meta, |w| {
        io::write_rows(&value_rows, w)
    })?);
    Ok(())
}

pub fn check_regularity(
    ctx: &Context,
    start: StartArgs,
    mc: McArgs,
    args: RegularityArgs,
) -> Result<(), Failure> {
    let model = &ctx.model;
    let m = model.n_regimes();
    let s = start.s.unwrap_or(0.0);
    let regime = start.regime.unwrap_or(0);
    let u = check_control(
        model,
        start.control.unwrap_or_else(|| default_control(model)),
    )?;
    let slopes = args.slopes.unwrap_or_else(|| vec![1.0; m]);
    if slopes.len() != m {
        return Err(Failure::Config(format!(
            "need {m} slopes, got {}",
            slopes.len()
        )));
    }
    let nb = positive("neighborhood", args.neighborhood.unwrap_or(0.05))?;
    let t_grid = linspace(
        s,
        model.horizon,
        nonzero("t_points", args.t_points.unwrap_or(2000))?,
    );
    let deltas = args.deltas.unwrap_or_else(|| vec![5e-4, 1e-3, 2e-3]);
    let smallest = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let cfg = McConfig::new(
        nonzero("n_paths", mc.n_paths.unwrap_or(1000))?,
        // Discrete monitoring misses early exits with probability about
        // 1 / sqrt(pi * delta / dt) for diffusive boundaries.
        positive("dt", mc.dt.unwrap_or(smallest / 1e4))?,
        ctx.seed,
    );

    let phi = TestFunction::concave_quadratic(slopes.clone(), (0.0, nb));
    let superharmonic = check_superharmonic(model, &phi, u, &t_grid, &linspace(0.0, nb, 50));
    let psi = TestFunction::signed_distance((0.0, nb));
    let positive_generator = check_prop36_ii(model, &psi, u, &t_grid, args.margin.unwrap_or(0.0))?;
    let probe = mc_regularity_probe(model, u, s, regime, &deltas, &cfg)?;
    let meta = ctx.metadata(
        "check-regularity",
        json!({
            "s": s, "regime": regime, "control": u, "slopes": slopes, "neighborhood": nb,
            "t_points": t_grid.len() - 1, "deltas": deltas, "n_paths": cfg.n_paths, "dt": cfg.dt,
        }),
    );
    let doc = json!({
        "metadata": meta,
        "superharmonic": superharmonic,
        "positive_generator": positive_generator,
        "monte_carlo_probe": probe,
        "note": "generator signs are checked on grid points for a smooth test function; this is a sufficient certificate, not a proof",
    });
    let path = ctx.out.join("regularity.json");
    let mut f = io::create(&path)?;
    io::write_json(&doc, &mut f)?;
    report(&path);
    println!(
        "superharmonic {}, positive generator {}, probe estimate {:.4} at delta {}",
        superharmonic.passed,
        positive_generator.passed,
        probe.smallest_window_estimate(),
        smallest
    );
    Ok(())
}

pub fn reproduce(
    global: &GlobalArgs,
    file: &RunConfig,
    target: &str,
    n_x: usize,
    stride: usize,
) -> Result<(), Failure> {
    match target.replace('_', "-").as_str() {
        "tangency" => {
            let ctx = Context::with_model(global, file, models::tangency());
            reproduce_tangency(&ctx, n_x, stride)
        }
        "noisy-tangency" => {
            let ctx = Context::with_model(global, file, models::noisy_tangency());
            let phi = TestFunction::concave_quadratic(vec![1.0], (0.0, 0.05));
            reproduce_certificate(&ctx, phi, 0.0, linspace(0.0, 2.0, 2000), |t, _| {
                -(t - 1.0).powi(2) - 1.0
            })
        }
        "reinsurance" => {
            let rate = global
                .discount_rate
                .or(match &file.model {
                    Some(ModelRef::Block(b)) => b.discount_rate,
                    _ => None,
                })
                .unwrap_or(models::DEFAULT_DISCOUNT_RATE);
            let ctx = Context::with_model(global, file, models::reinsurance(rate));
            let phi = TestFunction::concave_quadratic(vec![0.5, 2.0], (0.0, 0.01));
            reproduce_certificate(&ctx, phi, 0.5, linspace(0.0, 100.0, 10_000), |t, a| {
                if a == 0 {
                    -t.sin().powi(2) - 0.0625
                } else {
                    -1.0 - t.cos().powi(2)
                }
            })
        }
        other => Err(Failure::Config(format!(
            "unknown target '{other}', expected tangency, noisy-tangency or reinsurance"
        ))),
    }
}

/// Exit time minus start time of the tangency model.
fn tangency_value(s: f64, x: f64) -> f64 {
    models::tangency_exit_time(s, x) - s
}

fn tangency_statistics(vg: &ValueGrid) -> Value {
    let jump = vg.value_at(0.0, 1.05, 0) - vg.value_at(0.0, 0.95, 0);
    let exact_jump = tangency_value(0.0, 1.05) - tangency_value(0.0, 0.95);
    let mut worst: f64 = 0.0;
    for n in 0..=vg.grid.n_t {
        let s = vg.t(n);
        for i in 1..=vg.grid.n_x {
            let x = vg.x(i);
            if s <= 1.0 && (x - (s - 1.0).powi(2)).abs() < 0.1 {
                continue;
            }
            worst = worst.max((vg.value(n, i, 0) - tangency_value(s, x)).abs());
        }
    }
    json!({
        "jump_at_s0": jump,
        "closed_form_jump_at_s0": exact_jump,
        "max_error_off_parabola": worst,
        "parabola_band": "nodes with |x - (s - 1)^2| < 0.1 and s <= 1 are excluded",
    })
}

fn reproduce_tangency(ctx: &Context, n_x: usize, stride: usize) -> Result<(), Failure> {
    let model = &ctx.model;
    let grid = GridSpec::cfl_compliant(model, 4.0, nonzero("n_x", n_x)?, 1, Scheme::Explicit)?;
    let sol = solve_hjb(model, &grid)?;
    let mut meta = ctx.metadata(
        "reproduce tangency",
        json!({"grid": grid, "stride": stride}),
    );
    meta.upper_boundary = Some(upper_boundary_treatment(model));
    report(&ctx.emit("surface.csv", &meta, |w| {
        io::write_surface(&sol.value, 1.0, stride, w)
    })?);

    #[derive(Serialize)]
    struct ArcPoint {
        s: f64,
        x: f64,
    }
    let arc: Vec<ArcPoint> = linspace(0.0, 1.0, 200)
        .into_iter()
        .map(|s| ArcPoint {
            s,
            x: (s - 1.0).powi(2),
        })
        .collect();
    report(&ctx.emit("parabola.csv", &meta, |w| io::write_rows(&arc, w))?);

    let stats = tangency_statistics(&sol.value);
    let path = ctx.out.join("reproduce.json");
    let mut f = io::create(&path)?;
    io::write_json(&json!({"metadata": meta, "statistics": stats}), &mut f)?;
    report(&path);
    println!(
        "jump across the parabola at s = 0: {:.4} (closed form {:.4})",
        stats["jump_at_s0"].as_f64().unwrap_or(f64::NAN),
        stats["closed_form_jump_at_s0"].as_f64().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Serialize)]
struct GeneratorRow {
    t: f64,
    regime: usize,
    generator: f64,
    closed_form: f64,
}

fn reproduce_certificate(
    ctx: &Context,
    phi: TestFunction,
    u: f64,
    t_grid: Vec<f64>,
    closed_form: impl Fn(f64, usize) -> f64,
) -> Result<(), Failure> {
    let model = &ctx.model;
    let rep = check_superharmonic(
        model,
        &phi,
        u,
        &t_grid,
        &linspace(0.0, phi.neighborhood.1, 50),
    );
    let rows: Vec<GeneratorRow> = rep
        .at_boundary
        .iter()
        .map(|&GeneratorSample { t, regime, value }| GeneratorRow {
            t,
            regime,
            generator: value,
            closed_form: closed_form(t, regime),
        })
        .collect();
    let max_deviation = rows
        .iter()
        .map(|r| (r.generator - r.closed_form).abs())
        .fold(0.0, f64::max);
    let psi = TestFunction::signed_distance((0.0, 1.0));
    let positive_generator = check_prop36_ii(model, &psi, u, &t_grid, 0.0)?;
    let meta = ctx.metadata(
        &format!("reproduce {}", model.name),
        json!({"control": u, "t_points": t_grid.len() - 1, "neighborhood": phi.neighborhood.1}),
    );
    report(&ctx.emit("generator.csv", &meta, |w| io::write_rows(&rows, w))?);
    let doc = json!({
        "metadata": meta,
        "superharmonic": rep,
        "max_deviation_from_closed_form": max_deviation,
        "positive_generator": positive_generator,
    });
    let path = ctx.out.join("reproduce.json");
    let mut f = io::create(&path)?;
    io::write_json(&doc, &mut f)?;
    report(&path);
    println!(
        "superharmonic {}, max generator at x = 0 {:.6}, deviation from closed form {:.1e}",
        rep.passed, rep.max_at_boundary, max_deviation
    );
    Ok(())
}
