//! Penalised auxiliary problem.
//!
//! Along a path the penalty factor is
//! `Gamma(t) = exp(-(1/eps) * int_s^t psi^+(X(r), alpha(r)) dr)` and the
//! auxiliary cost integrates `Gamma * l` over the whole horizon, without
//! stopping at exit, plus `Gamma(T) * g` at the horizon. Minimising over a
//! finite policy family only ever gives an upper estimate of the penalised
//! value.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::ModelSpec;
use crate::simulate::{
    fan_out, simulate_path, ConstantControl, FeedbackPolicy, InitialState, McConfig, McEstimate,
    Path, StopRule,
};
use crate::{Error, Result};

pub type PenaltyFn = Arc<dyn Fn(f64, usize) -> f64 + Send + Sync>;

/// Penalty function `psi(x, regime)`, a Lipschitz constant for its positive
/// part and the penalty level `eps`.
#[derive(Clone)]
pub struct PenaltySpec {
    psi: PenaltyFn,
    pub lipschitz: f64,
    pub epsilon: f64,
}

impl fmt::Debug for PenaltySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PenaltySpec")
            .field("lipschitz", &self.lipschitz)
            .field("epsilon", &self.epsilon)
            .finish_non_exhaustive()
    }
}

impl PenaltySpec {
    pub fn new(
        psi: impl Fn(f64, usize) -> f64 + Send + Sync + 'static,
        lipschitz: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Lipschitz constant must be positive, got {lipschitz}"
            )));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "penalty level must be positive, got {epsilon}"
            )));
        }
        Ok(Self {
            psi: Arc::new(psi),
            lipschitz,
            epsilon,
        })
    }

    /// `psi(x, regime) = -x`, the signed distance to the boundary point.
    pub fn signed_distance(epsilon: f64) -> Result<Self> {
        Self::new(|x, _| -x, 1.0, epsilon)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        let mut p = self.clone();
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "penalty level must be positive, got {epsilon}"
            )));
        }
        p.epsilon = epsilon;
        Ok(p)
    }

    pub fn psi(&self, x: f64, regime: usize) -> f64 {
        (self.psi)(x, regime)
    }

    pub fn psi_plus(&self, x: f64, regime: usize) -> f64 {
        self.psi(x, regime).max(0.0)
    }

    /// Largest difference quotient of `psi^+` over adjacent points of a
    /// uniform grid on `[lo, hi]`, for every regime. Fails if it exceeds
    /// the declared constant.
    pub fn check_lipschitz(&self, lo: f64, hi: f64, n: usize, m: usize) -> Result<f64> {
        let dx = (hi - lo) / n as f64;
        let mut worst: f64 = 0.0;
        for a in 0..m {
            let mut prev = self.psi_plus(lo, a);
            for i in 1..=n {
                let cur = self.psi_plus(lo + i as f64 * dx, a);
                worst = worst.max((cur - prev).abs() / dx);
                prev = cur;
            }
        }
        if worst > self.lipschitz * (1.0 + 1e-9) {
            return Err(Error::HypothesisViolated(format!(
                "psi^+ has difference quotient {worst} above L = {}",
                self.lipschitz
            )));
        }
        Ok(worst)
    }

    /// Checks `psi(y, regime) <= 0` on a grid of `[0, hi]`.
    pub fn check_nonpositive_on_domain(&self, hi: f64, n: usize, m: usize) -> Result<()> {
        for a in 0..m {
            for i in 0..=n {
                let y = hi * i as f64 / n as f64;
                let v = self.psi(y, a);
                if v > 0.0 {
                    return Err(Error::HypothesisViolated(format!(
                        "psi({y}, {a}) = {v} > 0 inside the domain"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Penalty factor along a path grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaTrajectory {
    pub times: Vec<f64>,
    /// Cumulative trapezoidal integral of `psi^+` from the start.
    pub integral: Vec<f64>,
    /// `-integral / eps`; kept in log form so long excursions do not
    /// underflow to zero.
    pub log_gamma: Vec<f64>,
    pub epsilon: f64,
}

impl GammaTrajectory {
    pub fn gamma(&self, k: usize) -> f64 {
        self.log_gamma[k].exp()
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.log_gamma.iter().map(|l| l.exp()).collect()
    }

    /// Cumulative integral at time `t`, linear between grid points.
    pub fn integral_until(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&r| r <= t);
        if k == 0 {
            return 0.0;
        }
        if k == self.times.len() {
            return *self.integral.last().unwrap();
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let (i0, i1) = (self.integral[k - 1], self.integral[k]);
        i0 + (i1 - i0) * (t - t0) / (t1 - t0)
    }
}

/// Penalty factor on the grid of `path`. The regime of each step is used at
/// both of its endpoints.
pub fn gamma_trajectory(path: &Path, pen: &PenaltySpec) -> GammaTrajectory {
    let n = path.len();
    let mut integral = Vec::with_capacity(n);
    let mut acc = 0.0;
    integral.push(0.0);
    for k in 0..n - 1 {
        let a = path.regimes[k];
        let h = path.times[k + 1] - path.times[k];
        acc +=
            0.5 * h * (pen.psi_plus(path.x_values[k], a) + pen.psi_plus(path.x_values[k + 1], a));
        integral.push(acc);
    }
    let log_gamma = integral.iter().map(|i| -i / pen.epsilon).collect();
    GammaTrajectory {
        times: path.times.clone(),
        integral,
        log_gamma,
        epsilon: pen.epsilon,
    }
}

/// Auxiliary cost over the full horizon, in minimisation form.
pub fn auxiliary_cost(
    path: &Path,
    model: &ModelSpec,
    policy: &dyn FeedbackPolicy,
    pen: &PenaltySpec,
) -> Result<f64> {
    if path.stop != StopRule::Unstopped {
        return Err(Error::RequiresUnstoppedPath);
    }
    let gamma = gamma_trajectory(path, pen);
    let rate = |k: usize, a: usize| {
        let (t, x) = (path.times[k], path.x_values[k]);
        gamma.gamma(k) * model.cost_rate(t, x, a, policy.control(t, x, a))
    };
    let mut total = 0.0;
    for k in 0..path.len() - 1 {
        let a = path.regimes[k];
        total += 0.5 * (path.times[k + 1] - path.times[k]) * (rate(k, a) + rate(k + 1, a));
    }
    let last = path.len() - 1;
    let (t, x, a) = path.final_state();
    Ok(total + gamma.gamma(last) * model.boundary_cost(t, x, a))
}

/// Per-policy estimates of the auxiliary cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenalizedEstimate {
    pub epsilon: f64,
    pub per_policy: Vec<McEstimate>,
    pub best_index: usize,
    /// Smallest estimate over the family: an upper estimate of the value.
    pub best: McEstimate,
}

/// Monte Carlo auxiliary cost for each policy in `family`, all driven by
/// the same per-path random streams.
pub fn penalized_value_mc(
    model: &ModelSpec,
    family: &[&dyn FeedbackPolicy],
    pen: &PenaltySpec,
    init: InitialState,
    cfg: &McConfig,
) -> Result<PenalizedEstimate> {
    if family.is_empty() {
        return Err(Error::InvalidParameter("empty policy family".into()));
    }
    if cfg.n_paths < 2 {
        return Err(Error::InvalidParameter("need at least two paths".into()));
    }
    let per_policy = family
        .iter()
        .map(|&policy| {
            let costs = fan_out(cfg.n_paths, cfg.seed, |rng| {
                let p = simulate_path(model, policy, init, cfg.dt, StopRule::Unstopped, rng)?;
                auxiliary_cost(&p, model, policy, pen)
            })?;
            Ok(McEstimate::from_samples(&costs))
        })
        .collect::<Result<Vec<_>>>()?;
    let best_index = per_policy.iter().enumerate().fold(0, |best, (i, e)| {
        if e.mean < per_policy[best].mean {
            i
        } else {
            best
        }
    });
    Ok(PenalizedEstimate {
        epsilon: pen.epsilon,
        best: per_policy[best_index],
        per_policy,
        best_index,
    })
}

/// Fractions of paths started at the boundary whose accumulated `psi^+`
/// is positive at each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A3Report {
    pub epsilon: f64,
    pub s: f64,
    pub control: f64,
    pub checkpoints: Vec<f64>,
    pub fractions: Vec<f64>,
    pub n_paths: usize,
}

impl A3Report {
    /// Every fraction equals one.
    pub fn plausible(&self) -> bool {
        self.fractions.iter().all(|&f| f == 1.0)
    }

    pub fn rows(&self) -> Vec<A3Row> {
        self.checkpoints
            .iter()
            .zip(&self.fractions)
            .map(|(&checkpoint_t, &fraction)| A3Row {
                epsilon: self.epsilon,
                checkpoint_t,
                fraction,
                n_paths: self.n_paths,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct A3Row {
    pub epsilon: f64,
    pub checkpoint_t: f64,
    pub fraction: f64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenalizedRow {
    pub epsilon: f64,
    pub x0: f64,
    #[serde(rename = "V_eps_hat")]
    pub v_eps_hat: f64,
    pub std_error: f64,
}

/// Unstopped paths from `x0 = 0` under a constant control; reports the
/// fraction with `int_s^t psi^+ > 0` at each checkpoint `t > s`.
pub fn a3_diagnostic(
    model: &ModelSpec,
    pen: &PenaltySpec,
    u_const: f64,
    s: f64,
    regime: usize,
    checkpoints: &[f64],
    cfg: &McConfig,
) -> Result<A3Report> {
    pen.check_nonpositive_on_domain(model.upper_barrier.unwrap_or(10.0), 1000, model.n_regimes())?;
    if checkpoints.iter().any(|&t| !(t > s && t <= model.horizon)) {
        return Err(Error::InvalidParameter(format!(
            "checkpoints must lie in ({s}, {}]",
            model.horizon
        )));
    }
    let policy = ConstantControl(u_const);
    let init = InitialState::new(s, 0.0, regime);
    let hits = fan_out(cfg.n_paths, cfg.seed, |rng| {
        let p = simulate_path(model, &policy, init, cfg.dt, StopRule::Unstopped, rng)?;
        let g = gamma_trajectory(&p, pen);
        Ok(checkpoints
            .iter()
            .map(|&t| g.integral_until(t) > 0.0)
            .collect::<Vec<_>>())
    })?;
    let fractions = (0..checkpoints.len())
        .map(|j| hits.iter().filter(|h| h[j]).count() as f64 / cfg.n_paths as f64)
        .collect();
    Ok(A3Report {
        epsilon: pen.epsilon,
        s,
        control: u_const,
        checkpoints: checkpoints.to_vec(),
        fractions,
        n_paths: cfg.n_paths,
    })
}

/// Largest `|Gamma_1 - Gamma_2| - (L/eps)(t - s) sup_{r <= t} |X_1 - X_2|`
/// over the common grid of two coupled paths. Non-positive when the
/// coupling bound holds.
pub fn coupling_bound_excess(p1: &Path, p2: &Path, pen: &PenaltySpec) -> Result<f64> {
    if p1.times != p2.times {
        return Err(Error::InvalidParameter(
            "paths do not share a time grid".into(),
        ));
    }
    let g1 = gamma_trajectory(p1, pen);
    let g2 = gamma_trajectory(p2, pen);
    let s = p1.times[0];
    let mut sup: f64 = 0.0;
    let mut worst = f64::NEG_INFINITY;
    for k in 0..p1.len() {
        sup = sup.max((p1.x_values[k] - p2.x_values[k]).abs());
        let bound = pen.lipschitz / pen.epsilon * (p1.times[k] - s) * sup;
        worst = worst.max((g1.gamma(k) - g2.gamma(k)).abs() - bound);
    }
    Ok(worst)
}
