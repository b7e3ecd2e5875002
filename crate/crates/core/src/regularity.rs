//! Regularity of the boundary point `x = 0`.
//!
//! Two deterministic certificates evaluate generator signs of candidate
//! functions on grids; a Monte Carlo probe estimates the probability of
//! leaving the domain immediately from the boundary itself. Grid checks are
//! sufficient evidence only at the sampled points, and the certificates
//! assume smooth test functions.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::ModelSpec;
use crate::simulate::{fan_out, simulate_from_boundary, ConstantControl, McConfig};
use crate::{Error, Result};

/// Step for the central first difference.
pub const FIRST_DIFF_STEP: f64 = 1e-5;
/// Step for the central second difference; smaller steps lose accuracy to
/// round-off.
pub const SECOND_DIFF_STEP: f64 = 1e-4;

/// Tolerance for treating a generator value or `psi(0)` as zero.
const ZERO_TOL: f64 = 1e-12;

pub type ScalarFn = Arc<dyn Fn(f64, usize) -> f64 + Send + Sync>;

/// A function of `(x, regime)` with optional analytic derivatives in `x`.
#[derive(Clone)]
pub struct TestFunction {
    phi: ScalarFn,
    dphi: Option<ScalarFn>,
    d2phi: Option<ScalarFn>,
    /// Interval around the boundary point on which the function is used.
    pub neighborhood: (f64, f64),
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("analytic_first", &self.dphi.is_some())
            .field("analytic_second", &self.d2phi.is_some())
            .field("neighborhood", &self.neighborhood)
            .finish_non_exhaustive()
    }
}

impl TestFunction {
    pub fn new(
        phi: impl Fn(f64, usize) -> f64 + Send + Sync + 'static,
        neighborhood: (f64, f64),
    ) -> Self {
        Self {
            phi: Arc::new(phi),
            dphi: None,
            d2phi: None,
            neighborhood,
        }
    }

    pub fn with_derivatives(
        mut self,
        dphi: impl Fn(f64, usize) -> f64 + Send + Sync + 'static,
        d2phi: impl Fn(f64, usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.dphi = Some(Arc::new(dphi));
        self.d2phi = Some(Arc::new(d2phi));
        self
    }

    /// `-x` in every regime, with exact derivatives.
    pub fn signed_distance(neighborhood: (f64, f64)) -> Self {
        Self::new(|x, _| -x, neighborhood).with_derivatives(|_, _| -1.0, |_, _| 0.0)
    }

    /// `-x^2 + c_a x` in regime `a`, with exact derivatives.
    pub fn concave_quadratic(slopes: Vec<f64>, neighborhood: (f64, f64)) -> Self {
        let s1 = slopes.clone();
        Self::new(move |x, a| -x * x + slopes[a] * x, neighborhood)
            .with_derivatives(move |x, a| -2.0 * x + s1[a], |_, _| -2.0)
    }

    pub fn value(&self, x: f64, regime: usize) -> f64 {
        (self.phi)(x, regime)
    }

    pub fn first(&self, x: f64, regime: usize) -> f64 {
        match &self.dphi {
            Some(d) => d(x, regime),
            None => {
                let h = FIRST_DIFF_STEP;
                (self.value(x + h, regime) - self.value(x - h, regime)) / (2.0 * h)
            }
        }
    }

    pub fn second(&self, x: f64, regime: usize) -> f64 {
        match &self.d2phi {
            Some(d) => d(x, regime),
            None => {
                let h = SECOND_DIFF_STEP;
                (self.value(x + h, regime) - 2.0 * self.value(x, regime)
                    + self.value(x - h, regime))
                    / (h * h)
            }
        }
    }

    /// Largest gap between the supplied first derivative and a central
    /// difference at the probe points; zero when no derivative is supplied.
    pub fn derivative_consistency(&self, probes: &[f64], m: usize) -> f64 {
        let Some(d) = &self.dphi else { return 0.0 };
        let h = FIRST_DIFF_STEP;
        let mut worst: f64 = 0.0;
        for &x in probes {
            for a in 0..m {
                let fd = (self.value(x + h, a) - self.value(x - h, a)) / (2.0 * h);
                worst = worst.max((fd - d(x, a)).abs());
            }
        }
        worst
    }
}

/// Generator `phi' b + phi'' sigma^2 / 2 + sum_j q_ij phi(x, j)` at a
/// constant control.
pub fn generator_value(
    model: &ModelSpec,
    tf: &TestFunction,
    u: f64,
    t: f64,
    x: f64,
    regime: usize,
) -> f64 {
    let b = model.drift(t, x, regime, u);
    let s = model.diffusion(t, x, regime, u);
    tf.first(x, regime) * b
        + 0.5 * s * s * tf.second(x, regime)
        + model.generator.couple(regime, |j| tf.value(x, j))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSample {
    pub t: f64,
    pub regime: usize,
    pub value: f64,
}

/// Result of [`check_prop36_ii`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop36Report {
    pub control: f64,
    /// `b psi'(0) + sigma^2 psi''(0) / 2` per time and regime.
    pub values: Vec<GeneratorSample>,
    pub min_value: f64,
    pub min_at: (f64, usize),
    /// Largest `|sum_j q_aj psi(0, j)|`; zero under the hypothesis.
    pub coupling_max_abs: f64,
    /// Times at which some regime has a value not above the margin.
    pub failing_times: Vec<f64>,
    pub margin: f64,
    pub passed: bool,
}

fn probe_top(model: &ModelSpec, tf: &TestFunction) -> f64 {
    model.upper_barrier.unwrap_or(tf.neighborhood.1.max(10.0))
}

/// Evaluates `b(t,0,a,u) psi'(0,a) + sigma^2(t,0,a,u) psi''(0,a) / 2` on
/// `t_grid` for every regime and passes when every value exceeds `margin`.
///
/// Requires `psi(0, a) = 0` and `psi <= 0` on a probe of the domain. The
/// coupling term is computed separately and reported; it vanishes under
/// the first hypothesis.
pub fn check_prop36_ii(
    model: &ModelSpec,
    psi: &TestFunction,
    u_const: f64,
    t_grid: &[f64],
    margin: f64,
) -> Result<Prop36Report> {
    let m = model.n_regimes();
    for a in 0..m {
        let v = psi.value(0.0, a);
        if v.abs() > ZERO_TOL {
            return Err(Error::HypothesisViolated(format!(
                "psi(0, {a}) = {v}, expected 0"
            )));
        }
    }
    let top = probe_top(model, psi);
    for a in 0..m {
        for k in 0..=1000 {
            let y = top * k as f64 / 1000.0;
            let v = psi.value(y, a);
            if v > ZERO_TOL {
                return Err(Error::HypothesisViolated(format!(
                    "psi({y}, {a}) = {v} > 0 inside the domain"
                )));
            }
        }
    }
    if t_grid.is_empty() {
        return Err(Error::InvalidParameter("empty time grid".into()));
    }
    let mut values = Vec::with_capacity(t_grid.len() * m);
    let mut failing_times = Vec::new();
    let mut coupling_max_abs: f64 = 0.0;
    let mut min_value = f64::INFINITY;
    let mut min_at = (t_grid[0], 0);
    for &t in t_grid {
        let mut fails = false;
        for a in 0..m {
            let b = model.drift(t, 0.0, a, u_const);
            let s = model.diffusion(t, 0.0, a, u_const);
            let value = b * psi.first(0.0, a) + 0.5 * s * s * psi.second(0.0, a);
            coupling_max_abs =
                coupling_max_abs.max(model.generator.couple(a, |j| psi.value(0.0, j)).abs());
            if !(value > margin) {
                fails = true;
            }
            if !(value >= min_value) {
                min_value = value;
                min_at = (t, a);
            }
            values.push(GeneratorSample {
                t,
                regime: a,
                value,
            });
        }
        if fails {
            failing_times.push(t);
        }
    }
    Ok(Prop36Report {
        control: u_const,
        values,
        min_value,
        min_at,
        coupling_max_abs,
        passed: failing_times.is_empty(),
        failing_times,
        margin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    /// Holds only with equality somewhere.
    Marginal,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub t: f64,
    pub x: f64,
    pub regime: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub verdict: Verdict,
    /// The point closest to violating the condition.
    pub witness: Option<Witness>,
}

/// Result of [`check_superharmonic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperharmonicReport {
    pub control: f64,
    /// `phi > 0` on the grid points in `(0, neighborhood.1]`.
    pub positivity: Condition,
    /// `phi(x_k) -> 0` along `x_k = neighborhood.1 / 2^k`.
    pub vanishing: Condition,
    /// Generator `<= 0` on every grid point.
    pub generator: Condition,
    /// Generator values at `x = 0` per time and regime.
    pub at_boundary: Vec<GeneratorSample>,
    pub max_at_boundary: f64,
    pub passed: bool,
}

/// Checks the three conditions of the superharmonic-function test for
/// regularity at `x = 0` under a constant control.
pub fn check_superharmonic(
    model: &ModelSpec,
    phi: &TestFunction,
    u_const: f64,
    t_grid: &[f64],
    x_grid: &[f64],
) -> SuperharmonicReport {
    let m = model.n_regimes();
    let (_, hi) = phi.neighborhood;

    // (i) positivity on the punctured neighbourhood.
    let mut positivity = Condition {
        verdict: Verdict::Pass,
        witness: None,
    };
    let mut lowest = f64::INFINITY;
    for &x in x_grid.iter().filter(|&&x| x > 0.0 && x <= hi) {
        for a in 0..m {
            let v = phi.value(x, a);
            if !(v >= lowest) {
                lowest = v;
                positivity.witness = Some(Witness {
                    t: f64::NAN,
                    x,
                    regime: a,
                    value: v,
                });
            }
        }
    }
    if !(lowest > 0.0) {
        positivity.verdict = Verdict::Fail;
    }

    // (ii) vanishing towards the boundary point.
    let mut vanishing = Condition {
        verdict: Verdict::Pass,
        witness: None,
    };
    for a in 0..m {
        let mut prev = f64::INFINITY;
        let mut last = f64::NAN;
        for k in 1..=40 {
            let x = hi / 2f64.powi(k);
            let v = phi.value(x, a).abs();
            if !(v <= prev) {
                vanishing.verdict = Verdict::Fail;
                vanishing.witness = Some(Witness {
                    t: f64::NAN,
                    x,
                    regime: a,
                    value: v,
                });
            }
            prev = v;
            last = x;
        }
        if vanishing.verdict == Verdict::Pass && !(prev < 1e-9) {
            vanishing.verdict = Verdict::Fail;
            vanishing.witness = Some(Witness {
                t: f64::NAN,
                x: last,
                regime: a,
                value: prev,
            });
        }
    }

    // (iii) non-positive generator.
    let mut worst: Option<Witness> = None;
    let mut at_boundary = Vec::new();
    let mut max_at_boundary = f64::NEG_INFINITY;
    for &t in t_grid {
        for &x in x_grid {
            for a in 0..m {
                let value = generator_value(model, phi, u_const, t, x, a);
                if worst.is_none_or(|w| !(value <= w.value)) {
                    worst = Some(Witness {
                        t,
                        x,
                        regime: a,
                        value,
                    });
                }
                if x == 0.0 {
                    at_boundary.push(GeneratorSample {
                        t,
                        regime: a,
                        value,
                    });
                    max_at_boundary = max_at_boundary.max(value);
                }
            }
        }
    }
    let generator = Condition {
        verdict: match worst {
            Some(w) if w.value < -ZERO_TOL => Verdict::Pass,
            Some(w) if w.value <= ZERO_TOL => Verdict::Marginal,
            _ => Verdict::Fail,
        },
        witness: worst,
    };

    let passed = positivity.verdict == Verdict::Pass
        && vanishing.verdict == Verdict::Pass
        && generator.verdict != Verdict::Fail;
    SuperharmonicReport {
        control: u_const,
        positivity,
        vanishing,
        generator,
        at_boundary,
        max_at_boundary,
        passed,
    }
}

/// Result of [`mc_regularity_probe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityProbe {
    pub s: f64,
    pub control: f64,
    pub deltas: Vec<f64>,
    /// Fraction of paths with `tau <= s + delta`, per delta.
    pub estimates: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
}

impl RegularityProbe {
    /// Estimate at the smallest window.
    pub fn smallest_window_estimate(&self) -> f64 {
        let k =
            self.deltas.iter().enumerate().fold(
                0,
                |best, (i, d)| if *d < self.deltas[best] { i } else { best },
            );
        self.estimates[k]
    }
}

/// Fraction of paths started at `x = 0` that reach `(-inf, 0]` again within
/// `delta`, for each window length.
///
/// Exit is only checked at grid points, which biases the estimates towards
/// non-exit by `O(sqrt(dt / delta))` for diffusive dynamics; `dt` must be at
/// most a hundredth of the smallest window.
pub fn mc_regularity_probe(
    model: &ModelSpec,
    u_const: f64,
    s: f64,
    regime: usize,
    deltas: &[f64],
    cfg: &McConfig,
) -> Result<RegularityProbe> {
    let smallest = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let largest = deltas.iter().copied().fold(0.0, f64::max);
    if deltas.is_empty() || !(smallest > 0.0) {
        return Err(Error::InvalidParameter("windows must be positive".into()));
    }
    if cfg.dt > smallest / 100.0 {
        return Err(Error::ProbeStepTooCoarse {
            dt: cfg.dt,
            delta: smallest,
        });
    }
    if s + largest > model.horizon {
        return Err(Error::InvalidParameter(format!(
            "window end {} exceeds the horizon {}",
            s + largest,
            model.horizon
        )));
    }
    let policy = ConstantControl(u_const);
    let taus = fan_out(cfg.n_paths, cfg.seed, |rng| {
        let p = simulate_from_boundary(model, &policy, s, regime, cfg.dt, s + largest, rng)?;
        Ok(if p.exited { p.tau } else { f64::INFINITY })
    })?;
    let estimates = deltas
        .iter()
        .map(|d| taus.iter().filter(|&&tau| tau <= s + d).count() as f64 / cfg.n_paths as f64)
        .collect();
    Ok(RegularityProbe {
        s,
        control: u_const,
        deltas: deltas.to_vec(),
        estimates,
        n_paths: cfg.n_paths,
        dt: cfg.dt,
    })
}

/// Uniform grid of `n + 1` points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|k| lo + (hi - lo) * k as f64 / n as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov_chain::GeneratorMatrix;
    use crate::models;

    fn drift_only(b: f64) -> ModelSpec {
        ModelSpec::new("drift", GeneratorMatrix::zero(1), 2.0).with_drift(move |_, _, _, _| b)
    }

    #[test]
    fn prop36_on_noisy_tangency() {
        let t_grid = linspace(0.0, 2.0, 200);
        let rep = check_prop36_ii(
            &models::noisy_tangency(),
            &TestFunction::signed_distance((0.0, 1.0)),
            0.0,
            &t_grid,
            0.0,
        )
        .unwrap();
        assert!(!rep.passed);
        for s in &rep.values {
            assert!((s.value - (-2.0 * (s.t - 1.0))).abs() < 1e-12);
        }
        assert!(rep.failing_times.iter().all(|&t| t >= 1.0 - 1e-12));
        assert_eq!(rep.failing_times.len(), 101);
        assert_eq!(rep.coupling_max_abs, 0.0);
    }

    #[test]
    fn prop36_sign_read_off() {
        let psi = TestFunction::signed_distance((0.0, 1.0));
        let t = [0.0, 1.0];
        assert!(
            !check_prop36_ii(&drift_only(1.0), &psi, 0.0, &t, 0.0)
                .unwrap()
                .passed
        );
        let rep = check_prop36_ii(&drift_only(-1.0), &psi, 0.0, &t, 0.0).unwrap();
        assert!(rep.passed && rep.min_value == 1.0);
    }

    #[test]
    fn prop36_hypotheses_are_checked() {
        let t = [0.0];
        let shifted = TestFunction::new(|x, _| 0.1 - x, (0.0, 1.0));
        assert!(matches!(
            check_prop36_ii(&drift_only(-1.0), &shifted, 0.0, &t, 0.0),
            Err(Error::HypothesisViolated(_))
        ));
        let positive = TestFunction::new(|x, _| x, (0.0, 1.0));
        assert!(matches!(
            check_prop36_ii(&drift_only(-1.0), &positive, 0.0, &t, 0.0),
            Err(Error::HypothesisViolated(_))
        ));
    }

    #[test]
    fn superharmonic_noisy_tangency() {
        let phi = TestFunction::concave_quadratic(vec![1.0], (0.0, 0.05));
        let model = models::noisy_tangency();
        let t_grid = linspace(0.0, 2.0, 200);
        let rep = check_superharmonic(&model, &phi, 0.0, &t_grid, &[0.0]);
        for s in &rep.at_boundary {
            assert!((s.value - (-(s.t - 1.0).powi(2) - 1.0)).abs() < 1e-12);
        }
        assert!((rep.max_at_boundary + 1.0).abs() < 1e-12);
        assert_eq!(rep.generator.verdict, Verdict::Pass);

        let rep = check_superharmonic(&model, &phi, 0.0, &t_grid, &linspace(0.0, 0.05, 50));
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn superharmonic_reinsurance_at_boundary() {
        let phi = TestFunction::concave_quadratic(vec![0.5, 2.0], (0.0, 0.01));
        let model = models::reinsurance(0.05);
        let t_grid = linspace(0.0, 100.0, 1000);
        let rep = check_superharmonic(&model, &phi, 0.5, &t_grid, &[0.0]);
        for s in &rep.at_boundary {
            let expected = if s.regime == 0 {
                -s.t.sin().powi(2) - 0.0625
            } else {
                -1.0 - s.t.cos().powi(2)
            };
            assert!((s.value - expected).abs() < 1e-9);
        }
        assert_eq!(rep.generator.verdict, Verdict::Pass);
    }

    #[test]
    fn linear_function_without_dynamics_is_marginal() {
        let model = ModelSpec::new("still", GeneratorMatrix::zero(1), 1.0);
        let phi = TestFunction::new(|x, _| x, (0.0, 1.0)).with_derivatives(|_, _| 1.0, |_, _| 0.0);
        let rep = check_superharmonic(&model, &phi, 0.0, &[0.0, 0.5], &linspace(0.0, 1.0, 10));
        assert_eq!(rep.generator.verdict, Verdict::Marginal);
        assert_eq!(rep.positivity.verdict, Verdict::Pass);
        assert_eq!(rep.vanishing.verdict, Verdict::Pass);
    }

    #[test]
    fn failing_conditions_carry_witnesses() {
        let model = drift_only(1.0);
        let phi = TestFunction::new(|x, _| 1.0 - x, (0.0, 2.0));
        let rep = check_superharmonic(&model, &phi, 0.0, &[0.0], &linspace(0.0, 2.0, 20));
        assert_eq!(rep.positivity.verdict, Verdict::Fail);
        assert_eq!(rep.vanishing.verdict, Verdict::Fail);
        assert!(rep.positivity.witness.unwrap().value <= 0.0);
        assert!(!rep.passed);
    }

    #[test]
    fn numerical_derivatives_match_polynomials() {
        let analytic = TestFunction::new(|x, _| x * x * x - 2.0 * x, (0.0, 1.0))
            .with_derivatives(|x, _| 3.0 * x * x - 2.0, |x, _| 6.0 * x);
        let numeric = TestFunction::new(|x, _| x * x * x - 2.0 * x, (0.0, 1.0));
        for &x in &linspace(-1.0, 2.0, 30) {
            assert!((analytic.first(x, 0) - numeric.first(x, 0)).abs() < 1e-6);
            assert!((analytic.second(x, 0) - numeric.second(x, 0)).abs() < 1e-6);
        }
        assert!(analytic.derivative_consistency(&linspace(0.0, 1.0, 10), 1) < 1e-6);
    }

    #[test]
    fn probe_deterministic_cases() {
        let cfg = McConfig::new(50, 1e-5, 3);
        let rep = mc_regularity_probe(&drift_only(-1.0), 0.0, 0.0, 0, &[0.01, 0.1], &cfg).unwrap();
        assert_eq!(rep.estimates, vec![1.0, 1.0]);

        let rep =
            mc_regularity_probe(&models::tangency(), 0.0, 1.5, 0, &[0.01, 0.1], &cfg).unwrap();
        assert_eq!(rep.estimates, vec![0.0, 0.0]);
    }

    #[test]
    fn probe_brownian_exits_immediately() {
        let bm =
            ModelSpec::new("bm", GeneratorMatrix::zero(1), 1.0).with_diffusion(|_, _, _, _| 1.0);
        let rep =
            mc_regularity_probe(&bm, 0.0, 0.0, 0, &[0.01], &McConfig::new(400, 1e-6, 5)).unwrap();
        assert!(rep.smallest_window_estimate() >= 0.98, "{rep:?}");
    }

    #[test]
    fn probe_rejects_coarse_steps() {
        let err = mc_regularity_probe(
            &drift_only(-1.0),
            0.0,
            0.0,
            0,
            &[0.01],
            &McConfig::new(4, 1e-3, 0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::ProbeStepTooCoarse { .. }));
    }
}
