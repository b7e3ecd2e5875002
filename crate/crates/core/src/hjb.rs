//! Finite-difference solver for the coupled HJB system.
//!
//! Backward induction on a uniform `(t, x)` lattice with one value per
//! regime. The explicit scheme is
//!
//! ```text
//! V^n_i = V^{n+1}_i + dt * min_u [ b D_up V^{n+1} + sigma^2/2 D_xx V^{n+1} + sum_j q_aj V^{n+1}(j) + l ]
//! ```
//!
//! with the drift difference taken upwind, coefficients evaluated at
//! `t_n + dt/2`, and a minimum over a finite scan of controls. The
//! implicit-diffusion variant picks the control from the same explicit
//! Hamiltonian and then treats only the diffusion term implicitly, solving
//! one tridiagonal system per regime and time step.
//!
//! The node `x = 0` is pinned to the boundary cost. At `x_max` the node is
//! pinned too when the model has an upper barrier there; otherwise the grid
//! is truncated with a reflecting ghost node `V_{N+1} = V_N`, which removes
//! the outward drift term and halves the diffusion stencil. Truncation is
//! an approximation: keep `x_max` at least four times the largest state of
//! interest.
//!
//! All values are in minimisation form; see [`ModelSpec::objective`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::ModelSpec;
use crate::simulate::{monte_carlo_value, FeedbackPolicy, InitialState, McConfig, McEstimate};
use crate::{Error, Result};

/// Grids with more stored values than this are refused.
pub const MAX_GRID_VALUES: usize = 200_000_000;

const WEIGHT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Explicit,
    ImplicitDiffusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_max: f64,
    /// Number of space intervals; nodes are `0..=n_x`.
    pub n_x: usize,
    /// Number of time steps.
    pub n_t: usize,
    /// Control points scanned per node when the control set is an interval.
    pub n_u: usize,
    pub scheme: Scheme,
    /// Solve on `[0, horizon]` instead of the model horizon, with the
    /// terminal cost applied there.
    #[serde(default)]
    pub horizon: Option<f64>,
}

impl GridSpec {
    pub fn new(x_max: f64, n_x: usize, n_t: usize, n_u: usize) -> Self {
        Self {
            x_max,
            n_x,
            n_t,
            n_u,
            scheme: Scheme::Explicit,
            horizon: None,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = Some(horizon);
        self
    }

    pub fn dx(&self) -> f64 {
        self.x_max / self.n_x as f64
    }

    pub fn horizon_for(&self, model: &ModelSpec) -> f64 {
        self.horizon.unwrap_or(model.horizon)
    }

    pub fn dt_for(&self, model: &ModelSpec) -> f64 {
        self.horizon_for(model) / self.n_t as f64
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        if !(self.x_max > 0.0 && self.x_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "x_max must be positive, got {}",
                self.x_max
            )));
        }
        if self.n_x < 3 || self.n_t < 1 || self.n_u < 1 {
            return Err(Error::InvalidParameter(
                "need n_x >= 3, n_t >= 1 and n_u >= 1".into(),
            ));
        }
        let horizon = self.horizon_for(model);
        if !(horizon > 0.0 && horizon <= model.horizon) {
            return Err(Error::InvalidParameter(format!(
                "grid horizon {horizon} must lie in (0, {}]",
                model.horizon
            )));
        }
        if let Some(b) = model.upper_barrier {
            if (b - self.x_max).abs() > 1e-12 * b.max(1.0) {
                return Err(Error::InvalidParameter(format!(
                    "x_max {} must coincide with the upper barrier {b}",
                    self.x_max
                )));
            }
        }
        let size = (self.n_t + 1)
            .saturating_mul(self.n_x + 1)
            .saturating_mul(model.n_regimes());
        if size > MAX_GRID_VALUES {
            return Err(Error::InvalidParameter(format!(
                "grid would store {size} values; use a coarser grid or the implicit scheme"
            )));
        }
        Ok(())
    }

    /// A grid whose time step meets the stability bound over every node and
    /// scanned control.
    pub fn cfl_compliant(
        model: &ModelSpec,
        x_max: f64,
        n_x: usize,
        n_u: usize,
        scheme: Scheme,
    ) -> Result<GridSpec> {
        GridSpec::new(x_max, n_x, 1, n_u)
            .with_scheme(scheme)
            .fit_time_steps(model)
    }

    /// Replaces `n_t` by the smallest count meeting the stability bound;
    /// all other fields are kept.
    pub fn fit_time_steps(self, model: &ModelSpec) -> Result<GridSpec> {
        let mut grid = GridSpec { n_t: 1, ..self };
        grid.validate(model)?;
        let horizon = grid.horizon_for(model);
        // Coarse pass over sampled times, then refine against the full scan.
        let lat = Lattice::new(model, &grid)?;
        let mut rate: f64 = 0.0;
        for k in 0..=1000 {
            let t = horizon * k as f64 / 1000.0;
            rate = rate.max(lat.max_rate_at(model, t)?);
        }
        for _ in 0..8 {
            grid.n_t = ((horizon * rate * (1.0 - 1e-12)).ceil() as usize).max(1);
            let scan = scan_weights(model, &grid)?;
            if scan.actual_dt <= scan.required_dt * (1.0 + 1e-12) {
                return Ok(grid);
            }
            rate = scan.max_rate;
        }
        Err(Error::CflViolation {
            required_dt: 1.0 / rate,
            actual_dt: grid.dt_for(model),
        })
    }
}

/// Resolved lattice constants.
#[derive(Debug, Clone)]
struct Lattice {
    dx: f64,
    dt: f64,
    n_x: usize,
    n_t: usize,
    m: usize,
    horizon: f64,
    absorbing_top: bool,
    implicit: bool,
    controls: Vec<f64>,
}

/// Drift, half squared diffusion and running cost at a node.
#[derive(Debug, Clone, Copy)]
struct Terms {
    b: f64,
    half_sig2: f64,
    l: f64,
}

impl Lattice {
    fn new(model: &ModelSpec, grid: &GridSpec) -> Result<Self> {
        model.validate()?;
        grid.validate(model)?;
        Ok(Self {
            dx: grid.dx(),
            dt: grid.dt_for(model),
            n_x: grid.n_x,
            n_t: grid.n_t,
            m: model.n_regimes(),
            horizon: grid.horizon_for(model),
            absorbing_top: model.upper_barrier.is_some(),
            implicit: grid.scheme == Scheme::ImplicitDiffusion,
            controls: model.control_set.discretize(grid.n_u),
        })
    }

    fn t(&self, n: usize) -> f64 {
        if n == self.n_t {
            self.horizon
        } else {
            n as f64 * self.dt
        }
    }

    fn coefficient_time(&self, n: usize) -> f64 {
        self.t(n) + 0.5 * self.dt
    }

    fn x(&self, i: usize) -> f64 {
        if i == self.n_x {
            self.dx * self.n_x as f64
        } else {
            i as f64 * self.dx
        }
    }

    /// Last node whose value is computed by the scheme.
    fn last_free(&self) -> usize {
        if self.absorbing_top {
            self.n_x - 1
        } else {
            self.n_x
        }
    }

    fn is_pinned(&self, i: usize) -> bool {
        i == 0 || (i == self.n_x && self.absorbing_top)
    }

    fn terms(&self, model: &ModelSpec, t: f64, i: usize, a: usize, u: f64) -> Result<Terms> {
        let x = self.x(i);
        let b = model.drift(t, x, a, u);
        let s = model.diffusion(t, x, a, u);
        let l = model.cost_rate(t, x, a, u);
        for (coefficient, v) in [("drift", b), ("diffusion", s), ("running_cost", l)] {
            if !v.is_finite() {
                return Err(Error::NonFiniteCoefficient {
                    coefficient,
                    t,
                    x,
                    regime: a,
                    u,
                });
            }
        }
        Ok(Terms {
            b,
            half_sig2: 0.5 * s * s,
            l,
        })
    }

    /// Neighbour weights per unit time: `(down, up)` for the explicit part.
    fn rates(&self, terms: &Terms, i: usize) -> (f64, f64) {
        let diff = if self.implicit {
            0.0
        } else {
            terms.half_sig2 / (self.dx * self.dx)
        };
        let bp = terms.b.max(0.0) / self.dx;
        let bm = (-terms.b).max(0.0) / self.dx;
        if i == self.n_x {
            (diff + bm, 0.0)
        } else {
            (diff + bm, diff + bp)
        }
    }

    fn max_rate_at(&self, model: &ModelSpec, t: f64) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for i in 1..=self.last_free() {
            for a in 0..self.m {
                let q = model.generator.exit_rate(a);
                for &u in &self.controls {
                    let (d, up) = self.rates(&self.terms(model, t, i, a, u)?, i);
                    worst = worst.max(d + up + q);
                }
            }
        }
        Ok(worst)
    }

    fn idx(&self, i: usize, a: usize) -> usize {
        i * self.m + a
    }

    /// Upwind drift, central diffusion and coupling applied to `layer`,
    /// with the diffusion term taken from `diffusion_layer` (omitted when
    /// `None`).
    fn operator(
        &self,
        model: &ModelSpec,
        terms: &Terms,
        i: usize,
        a: usize,
        layer: &[f64],
        diffusion_layer: Option<&[f64]>,
    ) -> f64 {
        let v = layer[self.idx(i, a)];
        let down = layer[self.idx(i - 1, a)];
        let up = if i == self.n_x {
            v
        } else {
            layer[self.idx(i + 1, a)]
        };
        let drift = if terms.b > 0.0 {
            terms.b * (up - v) / self.dx
        } else {
            terms.b * (v - down) / self.dx
        };
        let diffusion = diffusion_layer.map_or(0.0, |d| {
            let dv = d[self.idx(i, a)];
            let dd = d[self.idx(i - 1, a)];
            let du = if i == self.n_x {
                dv
            } else {
                d[self.idx(i + 1, a)]
            };
            terms.half_sig2 * (du - 2.0 * dv + dd) / (self.dx * self.dx)
        });
        let coupling = model.generator.couple(a, |j| layer[self.idx(i, j)]);
        drift + diffusion + coupling
    }

    /// Smallest explicit Hamiltonian over the control scan, with the first
    /// minimiser. Checks the monotonicity of every candidate's weights.
    fn best_control(
        &self,
        model: &ModelSpec,
        n: usize,
        i: usize,
        a: usize,
        next: &[f64],
    ) -> Result<(f64, f64, Terms)> {
        let tc = self.coefficient_time(n);
        let q = model.generator.exit_rate(a);
        let mut best: Option<(f64, f64, Terms)> = None;
        for &u in &self.controls {
            let terms = self.terms(model, tc, i, a, u)?;
            let (d, up) = self.rates(&terms, i);
            let stay = 1.0 - self.dt * (d + up + q);
            if stay < -WEIGHT_TOLERANCE {
                return Err(Error::NonMonotoneScheme {
                    t_idx: n,
                    x_idx: i,
                    regime: a,
                    u,
                    weight: stay,
                });
            }
            let h = self.operator(model, &terms, i, a, next, Some(next)) + terms.l;
            if best.is_none_or(|(bh, _, _)| h < bh) {
                best = Some((h, u, terms));
            }
        }
        Ok(best.expect("control set is non-empty"))
    }
}

/// Stability scan over every free node, regime and scanned control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CflReport {
    /// Largest total outflow rate `sum of neighbour weights / dt`.
    pub max_rate: f64,
    pub required_dt: f64,
    pub actual_dt: f64,
    /// `actual_dt * max_rate`; at most one for a monotone scheme.
    pub courant: f64,
    /// Smallest weight (neighbour, coupling or self) found.
    pub min_weight: f64,
    pub weights_checked: usize,
}

/// Weights of one explicit update. For the implicit-diffusion scheme the
/// diffusion part is reported separately in `implicit_diffusion`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionWeights {
    pub down: f64,
    pub up: f64,
    pub stay: f64,
    /// `dt * q_aj` for `j != a`, zero at `a`.
    pub coupling: Vec<f64>,
    /// `dt * sigma^2 / (2 dx^2)`, the off-diagonal magnitude of the implicit
    /// diffusion matrix; zero for the explicit scheme.
    pub implicit_diffusion: f64,
}

impl TransitionWeights {
    pub fn min(&self) -> f64 {
        self.coupling
            .iter()
            .copied()
            .fold(self.down.min(self.up).min(self.stay), f64::min)
    }

    pub fn total(&self) -> f64 {
        self.down + self.up + self.stay + self.coupling.iter().sum::<f64>()
    }
}

/// Explicit-update weights at a free node.
pub fn transition_weights(
    model: &ModelSpec,
    grid: &GridSpec,
    t_idx: usize,
    x_idx: usize,
    regime: usize,
    u: f64,
) -> Result<TransitionWeights> {
    let lat = Lattice::new(model, grid)?;
    model.generator.check_regime(regime)?;
    if t_idx >= lat.n_t || x_idx > lat.n_x || lat.is_pinned(x_idx) {
        return Err(Error::InvalidParameter(format!(
            "({t_idx}, {x_idx}) is not a free node"
        )));
    }
    let terms = lat.terms(model, lat.coefficient_time(t_idx), x_idx, regime, u)?;
    Ok(weights_at(&lat, model, &terms, x_idx, regime))
}

fn weights_at(
    lat: &Lattice,
    model: &ModelSpec,
    terms: &Terms,
    i: usize,
    a: usize,
) -> TransitionWeights {
    let (d, up) = lat.rates(terms, i);
    let coupling = (0..lat.m)
        .map(|j| {
            if j == a {
                0.0
            } else {
                lat.dt * model.generator.rate(a, j)
            }
        })
        .collect();
    let implicit_diffusion = if lat.implicit {
        lat.dt * terms.half_sig2 / (lat.dx * lat.dx)
    } else {
        0.0
    };
    TransitionWeights {
        down: lat.dt * d,
        up: lat.dt * up,
        stay: 1.0 - lat.dt * (d + up + model.generator.exit_rate(a)),
        coupling,
        implicit_diffusion,
    }
}

/// Computes every transition weight of the grid and the stability bound.
pub fn scan_weights(model: &ModelSpec, grid: &GridSpec) -> Result<CflReport> {
    let lat = Lattice::new(model, grid)?;
    let mut max_rate: f64 = 0.0;
    let mut min_weight = f64::INFINITY;
    let mut checked = 0usize;
    for n in 0..lat.n_t {
        let tc = lat.coefficient_time(n);
        for i in 1..=lat.last_free() {
            for a in 0..lat.m {
                for &u in &lat.controls {
                    let terms = lat.terms(model, tc, i, a, u)?;
                    let w = weights_at(&lat, model, &terms, i, a);
                    let (d, up) = lat.rates(&terms, i);
                    max_rate = max_rate.max(d + up + model.generator.exit_rate(a));
                    min_weight = min_weight.min(w.min());
                    checked += 1;
                }
            }
        }
    }
    let required_dt = if max_rate > 0.0 {
        1.0 / max_rate
    } else {
        f64::INFINITY
    };
    Ok(CflReport {
        max_rate,
        required_dt,
        actual_dt: lat.dt,
        courant: lat.dt * max_rate,
        min_weight,
        weights_checked: checked,
    })
}

/// Values on the lattice, flat in `(t_idx, x_idx, regime)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueGrid {
    pub grid: GridSpec,
    pub horizon: f64,
    pub m: usize,
    pub values: Vec<f64>,
    /// Fingerprint of the model that produced the values, if any.
    pub model_hash: Option<u64>,
    pub model_name: Option<String>,
}

impl ValueGrid {
    /// Samples `f(t, x, regime)` on every node.
    pub fn from_fn(
        grid: GridSpec,
        horizon: f64,
        m: usize,
        f: impl Fn(f64, f64, usize) -> f64,
    ) -> Self {
        let dt = horizon / grid.n_t as f64;
        let dx = grid.dx();
        let mut values = Vec::with_capacity((grid.n_t + 1) * (grid.n_x + 1) * m);
        for n in 0..=grid.n_t {
            for i in 0..=grid.n_x {
                for a in 0..m {
                    values.push(f(n as f64 * dt, i as f64 * dx, a));
                }
            }
        }
        Self {
            grid,
            horizon,
            m,
            values,
            model_hash: None,
            model_name: None,
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.grid.n_t as f64
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.grid.dx()
    }

    fn layer_len(&self) -> usize {
        (self.grid.n_x + 1) * self.m
    }

    pub fn index(&self, n: usize, i: usize, regime: usize) -> usize {
        n * self.layer_len() + i * self.m + regime
    }

    pub fn value(&self, n: usize, i: usize, regime: usize) -> f64 {
        self.values[self.index(n, i, regime)]
    }

    pub fn layer(&self, n: usize) -> &[f64] {
        let len = self.layer_len();
        &self.values[n * len..(n + 1) * len]
    }

    /// Bilinear interpolation in `(t, x)`, clamped to the grid.
    pub fn value_at(&self, t: f64, x: f64, regime: usize) -> f64 {
        let (n0, n1, wt) = bracket(t / self.dt(), self.grid.n_t);
        let (i0, i1, wx) = bracket(x / self.grid.dx(), self.grid.n_x);
        let at = |n: usize| (1.0 - wx) * self.value(n, i0, regime) + wx * self.value(n, i1, regime);
        (1.0 - wt) * at(n0) + wt * at(n1)
    }

    /// Same lattice, regime count and horizon.
    pub fn same_lattice(&self, other: &ValueGrid) -> bool {
        self.grid == other.grid && self.m == other.m && self.horizon == other.horizon
    }
}

fn bracket(pos: f64, n: usize) -> (usize, usize, f64) {
    let pos = pos.clamp(0.0, n as f64);
    let lo = (pos.floor() as usize).min(n.saturating_sub(1));
    let w = pos - lo as f64;
    (lo, (lo + 1).min(n), w)
}

/// Feedback control on the lattice, flat in `(t_idx, x_idx, regime)` order.
///
/// As a policy, time is floored to the step containing it and the state is
/// rounded to the nearest node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyGrid {
    pub grid: GridSpec,
    pub horizon: f64,
    pub m: usize,
    pub controls: Vec<f64>,
}

impl PolicyGrid {
    pub fn control_at(&self, n: usize, i: usize, regime: usize) -> f64 {
        self.controls[(n * (self.grid.n_x + 1) + i) * self.m + regime]
    }
}

impl FeedbackPolicy for PolicyGrid {
    fn control(&self, t: f64, x: f64, regime: usize) -> f64 {
        let dt = self.horizon / self.grid.n_t as f64;
        let n = ((t / dt).floor().max(0.0) as usize).min(self.grid.n_t - 1);
        let i = ((x / self.grid.dx()).round().max(0.0) as usize).min(self.grid.n_x);
        self.control_at(n, i, regime.min(self.m - 1))
    }
}

/// Output of [`solve_hjb`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HjbSolution {
    pub value: ValueGrid,
    pub policy: PolicyGrid,
    pub cfl: CflReport,
}

/// Description of the upper-boundary treatment, for metadata.
pub fn upper_boundary_treatment(model: &ModelSpec) -> &'static str {
    if model.upper_barrier.is_some() {
        "absorbing: pinned to the boundary cost"
    } else {
        "truncated: reflecting ghost node V[N+1] = V[N], no Dirichlet data"
    }
}

/// Backward induction from the horizon.
pub fn solve_hjb(model: &ModelSpec, grid: &GridSpec) -> Result<HjbSolution> {
    let lat = Lattice::new(model, grid)?;
    let cfl = scan_weights(model, grid)?;
    if cfl.actual_dt > cfl.required_dt * (1.0 + 1e-12) {
        return Err(Error::CflViolation {
            required_dt: cfl.required_dt,
            actual_dt: cfl.actual_dt,
        });
    }
    let len = (lat.n_x + 1) * lat.m;
    let mut values = vec![0.0; (lat.n_t + 1) * len];
    let mut controls = vec![lat.controls[0]; lat.n_t * len];

    let t_end = lat.t(lat.n_t);
    for i in 0..=lat.n_x {
        for a in 0..lat.m {
            values[lat.n_t * len + lat.idx(i, a)] = model.boundary_cost(t_end, lat.x(i), a);
        }
    }

    for n in (0..lat.n_t).rev() {
        let (head, tail) = values.split_at_mut((n + 1) * len);
        let next = &tail[..len];
        let current = &mut head[n * len..];
        let pol = &mut controls[n * len..(n + 1) * len];
        if lat.implicit {
            implicit_step(&lat, model, n, next, current, pol)?;
        } else {
            current
                .par_chunks_mut(lat.m)
                .zip(pol.par_chunks_mut(lat.m))
                .enumerate()
                .with_min_len(32)
                .try_for_each(|(i, (vals, us))| -> Result<()> {
                    for a in 0..lat.m {
                        if lat.is_pinned(i) {
                            vals[a] = model.boundary_cost(lat.t(n), lat.x(i), a);
                        } else {
                            let (h, u, _) = lat.best_control(model, n, i, a, next)?;
                            vals[a] = next[lat.idx(i, a)] + lat.dt * h;
                            us[a] = u;
                        }
                    }
                    Ok(())
                })?;
        }
    }

    let hash = Some(model.fingerprint());
    let name = Some(model.name.clone());
    Ok(HjbSolution {
        value: ValueGrid {
            grid: *grid,
            horizon: lat.horizon,
            m: lat.m,
            values,
            model_hash: hash,
            model_name: name,
        },
        policy: PolicyGrid {
            grid: *grid,
            horizon: lat.horizon,
            m: lat.m,
            controls,
        },
        cfl,
    })
}

fn implicit_step(
    lat: &Lattice,
    model: &ModelSpec,
    n: usize,
    next: &[f64],
    current: &mut [f64],
    pol: &mut [f64],
) -> Result<()> {
    let t = lat.t(n);
    let last = lat.last_free();
    let k = last; // unknowns are nodes 1..=last
    let mut lower = vec![0.0; k];
    let mut diag = vec![0.0; k];
    let mut upper = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    for a in 0..lat.m {
        let bottom = model.boundary_cost(t, 0.0, a);
        current[lat.idx(0, a)] = bottom;
        let top = model.boundary_cost(t, lat.x(lat.n_x), a);
        if lat.absorbing_top {
            current[lat.idx(lat.n_x, a)] = top;
        }
        for i in 1..=last {
            let (_, u, terms) = lat.best_control(model, n, i, a, next)?;
            pol[lat.idx(i, a)] = u;
            // Explicit part: drift and coupling on the next layer.
            let explicit = lat.operator(model, &terms, i, a, next, None) + terms.l;
            let r = lat.dt * terms.half_sig2 / (lat.dx * lat.dx);
            let row = i - 1;
            rhs[row] = next[lat.idx(i, a)] + lat.dt * explicit;
            lower[row] = -r;
            upper[row] = -r;
            diag[row] = 1.0 + 2.0 * r;
            if i == lat.n_x {
                // Ghost node V[N+1] = V[N].
                diag[row] = 1.0 + r;
                upper[row] = 0.0;
            }
            if i == 1 {
                rhs[row] += r * bottom;
                lower[row] = 0.0;
            }
            if lat.absorbing_top && i == lat.n_x - 1 {
                rhs[row] += r * top;
                upper[row] = 0.0;
            }
        }
        let solution = thomas(&lower, &diag, &upper, &rhs);
        for (row, v) in solution.into_iter().enumerate() {
            current[lat.idx(row + 1, a)] = v;
        }
    }
    Ok(())
}

/// Solves a tridiagonal system; `lower[0]` and `upper[k-1]` are ignored.
fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let k = diag.len();
    let mut c = vec![0.0; k];
    let mut d = vec![0.0; k];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..k {
        let denom = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / denom;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; k];
    x[k - 1] = d[k - 1];
    for i in (0..k - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// The discrete generator `b D + sigma^2/2 D_xx + Q` at a free node,
/// applied to one time layer laid out as `layer[x_idx * m + regime]`.
/// Coefficients are evaluated at the step's midpoint time.
pub fn discrete_operator(
    model: &ModelSpec,
    grid: &GridSpec,
    t_idx: usize,
    x_idx: usize,
    regime: usize,
    u: f64,
    layer: &[f64],
) -> Result<f64> {
    let lat = Lattice::new(model, grid)?;
    model.generator.check_regime(regime)?;
    if x_idx == 0 || x_idx > lat.n_x || t_idx >= lat.n_t {
        return Err(Error::InvalidParameter(format!(
            "({t_idx}, {x_idx}) is not a free node"
        )));
    }
    if layer.len() != (lat.n_x + 1) * lat.m {
        return Err(Error::GridMismatch(format!(
            "layer has {} values, expected {}",
            layer.len(),
            (lat.n_x + 1) * lat.m
        )));
    }
    let terms = lat.terms(model, lat.coefficient_time(t_idx), x_idx, regime, u)?;
    Ok(lat.operator(model, &terms, x_idx, regime, layer, Some(layer)))
}

/// Largest discrete HJB residual and where it occurs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub max: f64,
    pub t_idx: usize,
    pub x_idx: usize,
    pub regime: usize,
}

/// `max |(V^{n+1} - V^n)/dt + min_u (L^u V + l)|` over free nodes, using
/// the solver's stencils; the implicit scheme takes the diffusion term from
/// `V^n`.
pub fn bellman_residual(vg: &ValueGrid, model: &ModelSpec) -> Result<Residual> {
    check_match(vg, model)?;
    let lat = Lattice::new(model, &vg.grid)?;
    let mut worst = Residual {
        max: 0.0,
        t_idx: 0,
        x_idx: 0,
        regime: 0,
    };
    for n in 0..lat.n_t {
        let cur = vg.layer(n);
        let next = vg.layer(n + 1);
        let tc = lat.coefficient_time(n);
        let diffusion_layer = if lat.implicit { cur } else { next };
        for i in 1..=lat.last_free() {
            for a in 0..lat.m {
                let mut best = f64::INFINITY;
                for &u in &lat.controls {
                    let terms = lat.terms(model, tc, i, a, u)?;
                    let h =
                        lat.operator(model, &terms, i, a, next, Some(diffusion_layer)) + terms.l;
                    best = best.min(h);
                }
                let r = ((next[lat.idx(i, a)] - cur[lat.idx(i, a)]) / lat.dt + best).abs();
                if !(r <= worst.max) {
                    worst = Residual {
                        max: r,
                        t_idx: n,
                        x_idx: i,
                        regime: a,
                    };
                }
            }
        }
    }
    Ok(worst)
}

fn check_match(vg: &ValueGrid, model: &ModelSpec) -> Result<()> {
    if let Some(h) = vg.model_hash {
        if h != model.fingerprint() {
            return Err(Error::GridMismatch(format!(
                "grid was produced by model {:?}, not '{}'",
                vg.model_name, model.name
            )));
        }
    }
    if vg.m != model.n_regimes() {
        return Err(Error::GridMismatch(format!(
            "grid has {} regimes, model has {}",
            vg.m,
            model.n_regimes()
        )));
    }
    if vg.horizon != vg.grid.horizon_for(model) {
        return Err(Error::GridMismatch(format!(
            "grid horizon {} differs from {}",
            vg.horizon,
            vg.grid.horizon_for(model)
        )));
    }
    let expected = (vg.grid.n_t + 1) * (vg.grid.n_x + 1) * vg.m;
    if vg.values.len() != expected {
        return Err(Error::GridMismatch(format!(
            "grid holds {} values, expected {expected}",
            vg.values.len()
        )));
    }
    Ok(())
}

/// Argmin of the explicit Hamiltonian of `vg` at every free node; pinned
/// nodes get the smallest control.
pub fn extract_policy(vg: &ValueGrid, model: &ModelSpec) -> Result<PolicyGrid> {
    check_match(vg, model)?;
    let lat = Lattice::new(model, &vg.grid)?;
    let len = (lat.n_x + 1) * lat.m;
    let mut controls = vec![lat.controls[0]; lat.n_t * len];
    for n in 0..lat.n_t {
        let next = vg.layer(n + 1);
        for i in 1..=lat.last_free() {
            for a in 0..lat.m {
                let (_, u, _) = lat.best_control(model, n, i, a, next)?;
                controls[n * len + lat.idx(i, a)] = u;
            }
        }
    }
    Ok(PolicyGrid {
        grid: vg.grid,
        horizon: vg.horizon,
        m: vg.m,
        controls,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Candidate value at the start point.
    pub phi: f64,
    pub mc: McEstimate,
    /// `mc.mean - phi`.
    pub gap: f64,
    pub allowance: f64,
    /// `|gap| > allowance + 2 * std_error`.
    pub flagged: bool,
}

/// Simulates the policy read off `vg` and compares its cost to the
/// candidate value at `init`. `allowance` is the tolerated discretisation
/// error.
pub fn verify_candidate(
    vg: &ValueGrid,
    model: &ModelSpec,
    init: InitialState,
    mc: &McConfig,
    allowance: f64,
) -> Result<VerificationReport> {
    let policy = extract_policy(vg, model)?;
    let est = monte_carlo_value(model, &policy, init, mc)?;
    let phi = vg.value_at(init.s, init.x0, init.regime);
    let gap = est.mean - phi;
    Ok(VerificationReport {
        phi,
        mc: est,
        gap,
        allowance,
        flagged: gap.abs() > allowance + 2.0 * est.std_error,
    })
}
