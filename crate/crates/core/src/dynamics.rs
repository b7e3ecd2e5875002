//! Controlled regime-switching models and an empirical growth/Lipschitz probe.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::markov_chain::GeneratorMatrix;
use crate::{Error, Result};

/// Coefficient evaluated at `(t, x, regime, u)`.
pub type CoefficientFn = Arc<dyn Fn(f64, f64, usize, f64) -> f64 + Send + Sync>;
/// Boundary/terminal cost evaluated at `(t, x, regime)`.
pub type BoundaryFn = Arc<dyn Fn(f64, f64, usize) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Minimize,
    Maximize,
}

impl Sense {
    /// Multiplier that turns the user objective into a cost to minimise.
    pub fn sign(self) -> f64 {
        match self {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        }
    }
}

/// Admissible control values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ControlSet {
    Interval { lo: f64, hi: f64 },
    Finite { values: Vec<f64> },
}

impl ControlSet {
    /// A single admissible value; used for uncontrolled models.
    pub fn fixed(u: f64) -> Self {
        ControlSet::Finite { values: vec![u] }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ControlSet::Interval { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(Error::InvalidParameter(format!(
                        "control interval [{lo}, {hi}] is empty or unbounded"
                    )));
                }
            }
            ControlSet::Finite { values } => {
                if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter(
                        "finite control set must hold finite values".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Candidate controls in ascending order. Intervals are split into `n_u`
    /// uniformly spaced points including both ends; finite sets ignore `n_u`.
    pub fn discretize(&self, n_u: usize) -> Vec<f64> {
        match self {
            ControlSet::Interval { lo, hi } => {
                if lo == hi || n_u <= 1 {
                    vec![*lo]
                } else {
                    (0..n_u)
                        .map(|k| lo + (hi - lo) * k as f64 / (n_u - 1) as f64)
                        .collect()
                }
            }
            ControlSet::Finite { values } => {
                let mut v = values.clone();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v.dedup();
                v
            }
        }
    }

    pub fn contains(&self, u: f64) -> bool {
        match self {
            ControlSet::Interval { lo, hi } => *lo <= u && u <= *hi,
            ControlSet::Finite { values } => values.iter().any(|v| *v == u),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ControlSet::Interval { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            ControlSet::Finite { values } => values[rng.random_range(0..values.len())],
        }
    }
}

/// A controlled regime-switching diffusion with exit-time cost.
///
/// The state lives on `(0, upper_barrier)`, with `upper_barrier = None`
/// meaning the half-line. Both barriers are absorbing. Costs returned by
/// [`ModelSpec::cost_rate`] and [`ModelSpec::boundary_cost`] are always in
/// minimisation form: a maximisation problem has its running and terminal
/// rewards negated.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub generator: GeneratorMatrix,
    pub control_set: ControlSet,
    pub horizon: f64,
    pub upper_barrier: Option<f64>,
    pub sense: Sense,
    /// Named scalar parameters, recorded in output metadata.
    pub parameters: Vec<(String, f64)>,
    drift: CoefficientFn,
    diffusion: CoefficientFn,
    running_cost: CoefficientFn,
    terminal_cost: BoundaryFn,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("generator", &self.generator)
            .field("control_set", &self.control_set)
            .field("horizon", &self.horizon)
            .field("upper_barrier", &self.upper_barrier)
            .field("sense", &self.sense)
            .field("parameters", &self.parameters)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    /// A model with zero drift, diffusion and costs; set coefficients with
    /// the `with_*` builders.
    pub fn new(name: impl Into<String>, generator: GeneratorMatrix, horizon: f64) -> Self {
        Self {
            name: name.into(),
            generator,
            control_set: ControlSet::fixed(0.0),
            horizon,
            upper_barrier: None,
            sense: Sense::Minimize,
            parameters: Vec::new(),
            drift: Arc::new(|_, _, _, _| 0.0),
            diffusion: Arc::new(|_, _, _, _| 0.0),
            running_cost: Arc::new(|_, _, _, _| 0.0),
            terminal_cost: Arc::new(|_, _, _| 0.0),
        }
    }

    pub fn with_drift(
        mut self,
        f: impl Fn(f64, f64, usize, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.drift = Arc::new(f);
        self
    }

    pub fn with_diffusion(
        mut self,
        f: impl Fn(f64, f64, usize, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.diffusion = Arc::new(f);
        self
    }

    pub fn with_running_cost(
        mut self,
        f: impl Fn(f64, f64, usize, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.running_cost = Arc::new(f);
        self
    }

    pub fn with_terminal_cost(
        mut self,
        f: impl Fn(f64, f64, usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.terminal_cost = Arc::new(f);
        self
    }

    pub fn with_controls(mut self, set: ControlSet) -> Self {
        self.control_set = set;
        self
    }

    pub fn with_upper_barrier(mut self, barrier: f64) -> Self {
        self.upper_barrier = Some(barrier);
        self
    }

    pub fn with_sense(mut self, sense: Sense) -> Self {
        self.sense = sense;
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_parameter(mut self, key: impl Into<String>, value: f64) -> Self {
        self.parameters.push((key.into(), value));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if let Some(b) = self.upper_barrier {
            if !(b > 0.0) || !b.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "upper barrier must be positive, got {b}"
                )));
            }
        }
        self.control_set.validate()
    }

    pub fn n_regimes(&self) -> usize {
        self.generator.m()
    }

    #[inline]
    pub fn drift(&self, t: f64, x: f64, regime: usize, u: f64) -> f64 {
        (self.drift)(t, x, regime, u)
    }

    #[inline]
    pub fn diffusion(&self, t: f64, x: f64, regime: usize, u: f64) -> f64 {
        (self.diffusion)(t, x, regime, u)
    }

    /// Running cost in minimisation form.
    #[inline]
    pub fn cost_rate(&self, t: f64, x: f64, regime: usize, u: f64) -> f64 {
        self.sense.sign() * (self.running_cost)(t, x, regime, u)
    }

    /// Terminal/boundary cost in minimisation form.
    #[inline]
    pub fn boundary_cost(&self, t: f64, x: f64, regime: usize) -> f64 {
        self.sense.sign() * (self.terminal_cost)(t, x, regime)
    }

    /// Running cost as supplied by the user, before any sign change.
    pub fn raw_running_cost(&self, t: f64, x: f64, regime: usize, u: f64) -> f64 {
        (self.running_cost)(t, x, regime, u)
    }

    pub fn raw_terminal_cost(&self, t: f64, x: f64, regime: usize) -> f64 {
        (self.terminal_cost)(t, x, regime)
    }

    /// Maps a minimisation-form value back to the user's objective.
    pub fn objective(&self, cost: f64) -> f64 {
        self.sense.sign() * cost
    }

    /// Returns a copy whose running cost is shifted by `dl` and terminal
    /// cost by `dg`, both in minimisation form.
    pub fn shifted_costs(&self, dl: f64, dg: f64) -> Self {
        let l = self.running_cost.clone();
        let g = self.terminal_cost.clone();
        let sign = self.sense.sign();
        let mut out = self.clone();
        out.running_cost = Arc::new(move |t, x, a, u| l(t, x, a, u) + sign * dl);
        out.terminal_cost = Arc::new(move |t, x, a| g(t, x, a) + sign * dg);
        out
    }

    /// Digest of the model name, parameters and coefficient values on a
    /// fixed probe lattice. Used to tie exported grids to the model that
    /// produced them.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(self.name.as_bytes());
        h.write_f64(self.horizon);
        h.write_f64(self.upper_barrier.unwrap_or(-1.0));
        for (k, v) in &self.parameters {
            h.write(k.as_bytes());
            h.write_f64(*v);
        }
        for row in self.generator.rows() {
            row.iter().for_each(|v| h.write_f64(*v));
        }
        let controls = self.control_set.discretize(3);
        let x_top = self.upper_barrier.unwrap_or(4.0);
        for ti in 0..5 {
            let t = self.horizon * ti as f64 / 4.0;
            for xi in 0..5 {
                let x = x_top * xi as f64 / 4.0;
                for a in 0..self.n_regimes() {
                    for &u in &controls {
                        h.write_f64(self.drift(t, x, a, u));
                        h.write_f64(self.diffusion(t, x, a, u));
                        h.write_f64(self.cost_rate(t, x, a, u));
                    }
                    h.write_f64(self.boundary_cost(t, x, a));
                }
            }
        }
        h.finish()
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
    fn write_f64(&mut self, v: f64) {
        self.write(&v.to_bits().to_le_bytes());
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// Sampling window for [`check_assumption_a1`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct A1Probe {
    pub x_lo: f64,
    pub x_hi: f64,
    /// Time window; defaults to the whole horizon when `None`.
    pub t_window: Option<(f64, f64)>,
    pub n_pairs: usize,
    /// Largest acceptable ratio before the report fails.
    pub cap: f64,
    pub seed: u64,
}

impl A1Probe {
    pub fn new(x_lo: f64, x_hi: f64) -> Self {
        Self {
            x_lo,
            x_hi,
            t_window: None,
            n_pairs: 4096,
            cap: 100.0,
            seed: 0,
        }
    }
}

/// Location of the largest ratio seen by the probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub quantity: String,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub regime: usize,
    pub u: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Largest difference quotient over drift, diffusion and both costs.
    pub lipschitz_hat: f64,
    /// Largest `(|b| + |sigma|) / (1 + |x|)`.
    pub linear_growth_hat: f64,
    /// Largest `(|l| + |g|) / (1 + |x|^p)` with `p = max(p_hat, 1)`.
    pub cost_growth_hat: f64,
    /// Maximum of the three ratios above.
    pub kappa0_hat: f64,
    /// Largest log-log slope of the cost magnitude between sample pairs with `|x| >= 1`.
    pub p_hat: f64,
    pub worst_violation: Violation,
    pub cap: f64,
    pub passed: bool,
}

/// Samples `(t, regime, u)` and pairs `(x, y)` from the probe window and
/// reports the empirical Lipschitz and growth constants of the model.
///
/// Pairs are drawn as `x = x_lo + v (x_hi - x_lo)` from a fixed stream of
/// unit variates, so two probes with the same seed on nested windows with a
/// common lower end see scaled copies of the same points.
pub fn check_assumption_a1(model: &ModelSpec, probe: &A1Probe) -> Result<AssumptionReport> {
    if probe.n_pairs == 0 {
        return Err(Error::InvalidParameter("n_pairs must be at least 1".into()));
    }
    if !(probe.x_lo <= probe.x_hi) || !probe.x_lo.is_finite() || !probe.x_hi.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "x range [{}, {}] must be bounded and ordered",
            probe.x_lo, probe.x_hi
        )));
    }
    let (t_lo, t_hi) = probe.t_window.unwrap_or((0.0, model.horizon));
    let m = model.n_regimes();
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);

    let eval = |name: &'static str, v: f64, t: f64, x: f64, a: usize, u: f64| -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteCoefficient {
                coefficient: name,
                t,
                x,
                regime: a,
                u,
            })
        }
    };

    struct Sample {
        t: f64,
        x: f64,
        y: f64,
        a: usize,
        u: f64,
        b: (f64, f64),
        s: (f64, f64),
        l: (f64, f64),
        g: (f64, f64),
    }

    let mut samples = Vec::with_capacity(probe.n_pairs);
    for _ in 0..probe.n_pairs {
        let t = t_lo + (t_hi - t_lo) * rng.random::<f64>();
        let a = rng.random_range(0..m);
        let u = model.control_set.sample(&mut rng);
        let x = probe.x_lo + (probe.x_hi - probe.x_lo) * rng.random::<f64>();
        let y = probe.x_lo + (probe.x_hi - probe.x_lo) * rng.random::<f64>();
        let pair = |z: f64| -> Result<(f64, f64, f64, f64)> {
            Ok((
                eval("drift", model.drift(t, z, a, u), t, z, a, u)?,
                eval("diffusion", model.diffusion(t, z, a, u), t, z, a, u)?,
                eval(
                    "running cost",
                    model.raw_running_cost(t, z, a, u),
                    t,
                    z,
                    a,
                    u,
                )?,
                eval(
                    "terminal cost",
                    model.raw_terminal_cost(t, z, a),
                    t,
                    z,
                    a,
                    u,
                )?,
            ))
        };
        let (bx, sx, lx, gx) = pair(x)?;
        let (by, sy, ly, gy) = pair(y)?;
        samples.push(Sample {
            t,
            x,
            y,
            a,
            u,
            b: (bx, by),
            s: (sx, sy),
            l: (lx, ly),
            g: (gx, gy),
        });
    }

    let mut worst = Violation {
        quantity: "none".into(),
        t: 0.0,
        x: 0.0,
        y: 0.0,
        regime: 0,
        u: 0.0,
        ratio: 0.0,
    };
    let track = |worst: &mut Violation, q: &str, s: &Sample, ratio: f64| {
        if ratio > worst.ratio {
            *worst = Violation {
                quantity: q.to_string(),
                t: s.t,
                x: s.x,
                y: s.y,
                regime: s.a,
                u: s.u,
                ratio,
            };
        }
    };

    let mut lipschitz_hat: f64 = 0.0;
    let mut linear_growth_hat: f64 = 0.0;
    let mut p_hat: f64 = 0.0;
    for s in &samples {
        let dx = (s.x - s.y).abs();
        if dx > 0.0 {
            for (name, (vx, vy)) in [
                ("lipschitz:drift", s.b),
                ("lipschitz:diffusion", s.s),
                ("lipschitz:running_cost", s.l),
                ("lipschitz:terminal_cost", s.g),
            ] {
                let q = (vx - vy).abs() / dx;
                lipschitz_hat = lipschitz_hat.max(q);
                track(&mut worst, name, s, q);
            }
        }
        for (z, b, sg) in [(s.x, s.b.0, s.s.0), (s.y, s.b.1, s.s.1)] {
            let r = (b.abs() + sg.abs()) / (1.0 + z.abs());
            linear_growth_hat = linear_growth_hat.max(r);
            track(&mut worst, "growth:drift+diffusion", s, r);
        }
        let (near, far, c_near, c_far) = if s.x.abs() < s.y.abs() {
            (
                s.x,
                s.y,
                s.l.0.abs() + s.g.0.abs(),
                s.l.1.abs() + s.g.1.abs(),
            )
        } else {
            (
                s.y,
                s.x,
                s.l.1.abs() + s.g.1.abs(),
                s.l.0.abs() + s.g.0.abs(),
            )
        };
        // Log-log slope of the cost magnitude away from the origin.
        if near.abs() >= 1.0 && c_near > 0.0 && c_far > 0.0 {
            let spread = (far.abs() / near.abs()).ln();
            if spread > 0.1_f64.ln_1p() {
                p_hat = p_hat.max((c_far / c_near).ln() / spread);
            }
        }
    }

    let p = p_hat.max(1.0);
    let mut cost_growth_hat: f64 = 0.0;
    for s in &samples {
        for (z, l, g) in [(s.x, s.l.0, s.g.0), (s.y, s.l.1, s.g.1)] {
            let r = (l.abs() + g.abs()) / (1.0 + z.abs().powf(p));
            cost_growth_hat = cost_growth_hat.max(r);
            track(&mut worst, "growth:costs", s, r);
        }
    }

    let kappa0_hat = lipschitz_hat.max(linear_growth_hat).max(cost_growth_hat);
    let passed = kappa0_hat.is_finite() && worst.ratio <= probe.cap;
    Ok(AssumptionReport {
        lipschitz_hat,
        linear_growth_hat,
        cost_growth_hat,
        kappa0_hat,
        p_hat,
        worst_violation: worst,
        cap: probe.cap,
        passed,
    })
}
