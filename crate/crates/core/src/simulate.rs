//! Path simulation, exit-time costs and Monte Carlo estimates.
//!
//! The regime path is sampled exactly first; the diffusion is then
//! integrated with Euler–Maruyama steps of at most `dt`, with extra grid
//! points inserted at every regime jump. Drift and diffusion are evaluated
//! at the left state and the step's midpoint time. Exit is detected when the
//! state reaches a barrier, and the exit time is the zero of the linear
//! interpolant between the last interior value and the first value at or
//! beyond the barrier.
//!
//! Intra-step excursions across a barrier are not corrected for, so for
//! diffusive models exit is detected late by `O(sqrt(dt))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::ModelSpec;
use crate::markov_chain::RegimePath;
use crate::{Error, Result};

/// States within this distance of a barrier count as having reached it.
pub const EXIT_TOLERANCE: f64 = 1e-12;

/// Markov feedback control `u(t, x, regime)`.
pub trait FeedbackPolicy: Sync {
    fn control(&self, t: f64, x: f64, regime: usize) -> f64;
}

impl<F> FeedbackPolicy for F
where
    F: Fn(f64, f64, usize) -> f64 + Sync,
{
    fn control(&self, t: f64, x: f64, regime: usize) -> f64 {
        self(t, x, regime)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantControl(pub f64);

impl FeedbackPolicy for ConstantControl {
    fn control(&self, _: f64, _: f64, _: usize) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub s: f64,
    pub x0: f64,
    pub regime: usize,
}

impl InitialState {
    pub fn new(s: f64, x0: f64, regime: usize) -> Self {
        Self { s, x0, regime }
    }
}

/// Whether integration halts at the first barrier hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    AtExit,
    /// Integrate to the horizon regardless of exit; the first crossing is
    /// still recorded in `tau`/`exited`.
    Unstopped,
}

/// One simulated trajectory.
///
/// `regimes[k]` is the regime at `times[k]` and on the step that follows it.
/// On a stopped, exited path the last point is `(tau, barrier)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub times: Vec<f64>,
    pub x_values: Vec<f64>,
    pub regimes: Vec<usize>,
    /// First exit time, or the end of the window when there was none.
    pub tau: f64,
    pub exited: bool,
    /// Barrier value reached at `tau` when `exited`.
    pub exit_level: Option<f64>,
    pub initial: InitialState,
    pub stop: StopRule,
}

impl Path {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> (f64, f64, usize) {
        let k = self.len() - 1;
        (self.times[k], self.x_values[k], self.regimes[k])
    }

    /// The path cut at `tau`, with the state clamped to the barrier there.
    pub fn truncated_at_exit(&self) -> Path {
        if self.stop == StopRule::AtExit || !self.exited {
            let mut p = self.clone();
            if !self.exited {
                // An unstopped path that never exited already ends at the horizon.
                p.stop = StopRule::AtExit;
            }
            return p;
        }
        let level = self.exit_level.expect("exited path has a level");
        let cut = self.times.partition_point(|&t| t < self.tau);
        let mut times = self.times[..cut].to_vec();
        let mut xs = self.x_values[..cut].to_vec();
        let mut regs = self.regimes[..cut].to_vec();
        let reg = *regs.last().unwrap_or(&self.initial.regime);
        times.push(self.tau);
        xs.push(level);
        regs.push(reg);
        Path {
            times,
            x_values: xs,
            regimes: regs,
            tau: self.tau,
            exited: true,
            exit_level: Some(level),
            initial: self.initial,
            stop: StopRule::AtExit,
        }
    }

    /// Largest `|x_k - other.x_k|` over common grid points up to time `t`.
    pub fn sup_distance_until(&self, other: &Path, t: f64) -> f64 {
        self.times
            .iter()
            .zip(&self.x_values)
            .zip(&other.x_values)
            .take_while(|((s, _), _)| **s <= t)
            .map(|((_, a), b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub lower: f64,
    pub upper: Option<f64>,
    pub end: f64,
}

/// Euler–Maruyama integration along a fixed regime path.
#[allow(clippy::too_many_arguments)]
pub(crate) fn integrate<R: Rng + ?Sized>(
    model: &ModelSpec,
    policy: &dyn FeedbackPolicy,
    init: InitialState,
    dt: f64,
    window: Window,
    stop: StopRule,
    regime_path: &RegimePath,
    rng: &mut R,
) -> Result<Path> {
    let s = init.s;
    let capacity = ((window.end - s) / dt).ceil() as usize + regime_path.n_jumps() + 2;
    let mut times = Vec::with_capacity(capacity);
    let mut xs = Vec::with_capacity(capacity);
    let mut regs = Vec::with_capacity(capacity);

    let mut t = s;
    let mut x = init.x0;
    let mut regime = init.regime;
    let mut k: u64 = 0;
    let mut jump_idx = 0usize;
    times.push(t);
    xs.push(x);
    regs.push(regime);

    let mut first_exit: Option<(f64, f64)> = None;

    while t < window.end {
        let next_uniform = s + (k + 1) as f64 * dt;
        let next_jump = regime_path
            .jump_times
            .get(jump_idx)
            .copied()
            .unwrap_or(f64::INFINITY);
        let t_next = next_uniform.min(next_jump).min(window.end);
        let h = t_next - t;
        if next_uniform <= t_next {
            k += 1;
        }
        let mut next_regime = regime;
        if next_jump <= t_next {
            jump_idx += 1;
            next_regime = regime_path.states[jump_idx];
        }
        if h <= 0.0 {
            regime = next_regime;
            continue;
        }

        let u = policy.control(t, x, regime);
        let tm = t + 0.5 * h;
        let b = model.drift(tm, x, regime, u);
        let sig = model.diffusion(tm, x, regime, u);
        let z: f64 = StandardNormal.sample(rng);
        let x_new = x + b * h + sig * h.sqrt() * z;
        if !x_new.is_finite() {
            return Err(Error::NonFiniteState { t: t_next });
        }

        if first_exit.is_none() {
            let hit = if x_new <= window.lower + EXIT_TOLERANCE {
                Some(window.lower)
            } else {
                window.upper.filter(|up| x_new >= up - EXIT_TOLERANCE)
            };
            if let Some(level) = hit {
                let on_barrier = (x - level).abs() <= EXIT_TOLERANCE;
                let tau = if on_barrier {
                    t_next
                } else {
                    (t + h * (x - level) / (x - x_new)).clamp(t, t_next)
                };
                if stop == StopRule::AtExit {
                    times.push(tau);
                    xs.push(level);
                    regs.push(if tau >= t_next { next_regime } else { regime });
                    return Ok(Path {
                        times,
                        x_values: xs,
                        regimes: regs,
                        tau,
                        exited: true,
                        exit_level: Some(level),
                        initial: init,
                        stop,
                    });
                }
                first_exit = Some((tau, level));
            }
        }

        times.push(t_next);
        xs.push(x_new);
        regs.push(next_regime);
        t = t_next;
        x = x_new;
        regime = next_regime;
    }

    let (tau, exited, exit_level) = match first_exit {
        Some((tau, level)) => (tau, true, Some(level)),
        None => (window.end, false, None),
    };
    Ok(Path {
        times,
        x_values: xs,
        regimes: regs,
        tau,
        exited,
        exit_level,
        initial: init,
        stop,
    })
}

fn check_common(model: &ModelSpec, init: InitialState, dt: f64) -> Result<()> {
    model.generator.check_regime(init.regime)?;
    if !(init.s >= 0.0 && init.s < model.horizon) {
        return Err(Error::InvalidInterval {
            start: init.s,
            end: model.horizon,
        });
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "dt must be positive, got {dt}"
        )));
    }
    let span = model.horizon - init.s;
    if dt > span {
        return Err(Error::StepsizeTooLarge { dt, span });
    }
    if !init.x0.is_finite() {
        return Err(Error::InvalidParameter("x0 must be finite".into()));
    }
    Ok(())
}

fn domain_window(model: &ModelSpec) -> Window {
    Window {
        lower: 0.0,
        upper: model.upper_barrier,
        end: model.horizon,
    }
}

fn check_interior(model: &ModelSpec, x0: f64) -> Result<()> {
    let inside = x0 > 0.0 && model.upper_barrier.is_none_or(|up| x0 < up);
    if inside {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "initial state {x0} is not inside the domain"
        )))
    }
}

/// Simulates one controlled path from `init`.
///
/// With [`StopRule::AtExit`] the start must lie strictly inside the domain;
/// an unstopped path may start anywhere.
pub fn simulate_path<R: Rng + ?Sized>(
    model: &ModelSpec,
    policy: &dyn FeedbackPolicy,
    init: InitialState,
    dt: f64,
    stop: StopRule,
    rng: &mut R,
) -> Result<Path> {
    check_common(model, init, dt)?;
    if stop == StopRule::AtExit {
        check_interior(model, init.x0)?;
    }
    let regimes = model
        .generator
        .sample_path(init.regime, init.s, model.horizon, rng)?;
    integrate(
        model,
        policy,
        init,
        dt,
        domain_window(model),
        stop,
        &regimes,
        rng,
    )
}

/// Simulates paths from several starting points with common random numbers:
/// one regime path and one stream of Brownian increments shared by all.
pub fn simulate_coupled<R: Rng + Clone>(
    model: &ModelSpec,
    policy: &dyn FeedbackPolicy,
    s: f64,
    starts: &[f64],
    regime: usize,
    dt: f64,
    stop: StopRule,
    rng: &mut R,
) -> Result<Vec<Path>> {
    let first = InitialState::new(s, starts.first().copied().unwrap_or(1.0), regime);
    check_common(model, first, dt)?;
    for &x0 in starts {
        if stop == StopRule::AtExit {
            check_interior(model, x0)?;
        }
    }
    let regimes = model.generator.sample_path(regime, s, model.horizon, rng)?;
    let noise = rng.clone();
    let out = starts
        .iter()
        .map(|&x0| {
            let mut r = noise.clone();
            integrate(
                model,
                policy,
                InitialState::new(s, x0, regime),
                dt,
                domain_window(model),
                stop,
                &regimes,
                &mut r,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    // Leave the caller's stream past everything the paths consumed.
    *rng = noise;
    let _: f64 = rng.random();
    Ok(out)
}

/// Simulation from the lower barrier itself; exit is the first grid point
/// at or below zero after `s`. Used by the boundary-regularity probe.
pub(crate) fn simulate_from_boundary<R: Rng + ?Sized>(
    model: &ModelSpec,
    policy: &dyn FeedbackPolicy,
    s: f64,
    regime: usize,
    dt: f64,
    end: f64,
    rng: &mut R,
) -> Result<Path> {
    let init = InitialState::new(s, 0.0, regime);
    check_common(model, init, dt)?;
    let end = end.min(model.horizon);
    let regimes = model.generator.sample_path(regime, s, model.horizon, rng)?;
    let window = Window {
        lower: 0.0,
        upper: model.upper_barrier,
        end,
    };
    integrate(
        model,
        policy,
        init,
        dt,
        window,
        StopRule::AtExit,
        &regimes,
        rng,
    )
}

/// Exit-time cost of a path: trapezoidal quadrature of the running cost up
/// to `tau` plus the boundary cost at `(tau, X(tau), regime)`, in
/// minimisation form. On exit `X(tau)` is the barrier value.
pub fn evaluate_cost(path: &Path, model: &ModelSpec, policy: &dyn FeedbackPolicy) -> f64 {
    let truncated;
    let p = if path.stop == StopRule::Unstopped {
        truncated = path.truncated_at_exit();
        &truncated
    } else {
        path
    };
    let rate = |k: usize, regime: usize| {
        let (t, x) = (p.times[k], p.x_values[k]);
        model.cost_rate(t, x, regime, policy.control(t, x, regime))
    };
    let mut integral = 0.0;
    let mut left = rate(0, p.regimes[0]);
    for k in 0..p.len() - 1 {
        let regime = p.regimes[k];
        let h = p.times[k + 1] - p.times[k];
        let right = rate(k + 1, regime);
        integral += 0.5 * h * (left + right);
        left = if p.regimes[k + 1] == regime {
            right
        } else {
            rate(k + 1, p.regimes[k + 1])
        };
    }
    let (t_end, x_end, reg_end) = p.final_state();
    integral + model.boundary_cost(t_end, x_end, reg_end)
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
    pub ci95: (f64, f64),
}

impl McEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std_error,
            n,
            ci95: (mean - 1.96 * std_error, mean + 1.96 * std_error),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

impl McConfig {
    pub fn new(n_paths: usize, dt: f64, seed: u64) -> Self {
        Self { n_paths, dt, seed }
    }
}

/// Independent stream for path `index` of a batch seeded with `seed`.
///
/// Streams depend only on `(seed, index)`, so batch results do not depend
/// on how paths are scheduled across threads.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs `f` for every path index on its own stream and collects results in
/// index order.
pub(crate) fn fan_out<T, F>(n: usize, seed: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng) -> Result<T> + Sync,
{
    (0..n)
        .into_par_iter()
        .with_min_len(64)
        .map(|i| f(&mut path_rng(seed, i as u64)))
        .collect()
}

/// Monte Carlo estimate of the expected exit-time cost under `policy`.
pub fn monte_carlo_value(
    model: &ModelSpec,
    policy: &dyn FeedbackPolicy,
    init: InitialState,
    cfg: &McConfig,
) -> Result<McEstimate> {
    if cfg.n_paths < 2 {
        return Err(Error::InvalidParameter("need at least two paths".into()));
    }
    let costs = fan_out(cfg.n_paths, cfg.seed, |rng| {
        let p = simulate_path(model, policy, init, cfg.dt, StopRule::AtExit, rng)?;
        Ok(evaluate_cost(&p, model, policy))
    })?;
    Ok(McEstimate::from_samples(&costs))
}

/// Per-path outcome of a batch run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub index: usize,
    pub tau: f64,
    pub exited: bool,
    pub cost: f64,
}

/// Simulates a batch and returns per-path summaries; the first `keep`
/// paths are returned in full as well.
pub fn simulate_batch(
    model: &ModelSpec,
    policy: &dyn FeedbackPolicy,
    init: InitialState,
    cfg: &McConfig,
    keep: usize,
) -> Result<(Vec<PathSummary>, Vec<Path>)> {
    let results = fan_out(cfg.n_paths, cfg.seed, |rng| {
        let p = simulate_path(model, policy, init, cfg.dt, StopRule::AtExit, rng)?;
        let cost = evaluate_cost(&p, model, policy);
        Ok((p, cost))
    })?;
    let mut kept = Vec::new();
    let summaries = results
        .into_iter()
        .enumerate()
        .map(|(index, (p, cost))| {
            let summary = PathSummary {
                index,
                tau: p.tau,
                exited: p.exited,
                cost,
            };
            if index < keep {
                kept.push(p);
            }
            summary
        })
        .collect();
    Ok((summaries, kept))
}

/// Result of [`exit_time_lowerbound_probe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundProbe {
    pub h: f64,
    /// `(u, estimate of E[theta - s] / h^2)` per constant control.
    pub per_control: Vec<(f64, McEstimate)>,
    /// Minimum estimate over the controls.
    pub kappa_hat: f64,
}

/// Estimates `E[theta - s] / h^2` where `theta` is the first exit from
/// `(x0 - h, x0 + h)` capped at `s + h^2`, for each constant control.
pub fn exit_time_lowerbound_probe(
    model: &ModelSpec,
    init: InitialState,
    h: f64,
    controls: &[f64],
    cfg: &McConfig,
) -> Result<LowerBoundProbe> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "radius must lie in (0, 1), got {h}"
        )));
    }
    check_common(model, init, cfg.dt)?;
    check_interior(model, init.x0 - h)?;
    check_interior(model, init.x0 + h)?;
    if controls.is_empty() {
        return Err(Error::InvalidParameter("no controls to probe".into()));
    }
    let window = Window {
        lower: init.x0 - h,
        upper: Some(init.x0 + h),
        end: (init.s + h * h).min(model.horizon),
    };
    let h2 = h * h;
    let per_control = controls
        .iter()
        .map(|&u| {
            let policy = ConstantControl(u);
            let ratios = fan_out(cfg.n_paths, cfg.seed, |rng| {
                let regimes =
                    model
                        .generator
                        .sample_path(init.regime, init.s, model.horizon, rng)?;
                let p = integrate(
                    model,
                    &policy,
                    init,
                    cfg.dt,
                    window,
                    StopRule::AtExit,
                    &regimes,
                    rng,
                )?;
                Ok((p.tau - init.s) / h2)
            })?;
            Ok((u, McEstimate::from_samples(&ratios)))
        })
        .collect::<Result<Vec<_>>>()?;
    let kappa_hat = per_control
        .iter()
        .map(|(_, e)| e.mean)
        .fold(f64::INFINITY, f64::min);
    Ok(LowerBoundProbe {
        h,
        per_control,
        kappa_hat,
    })
}
