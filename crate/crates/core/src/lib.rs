//! Exit-time stochastic control of regime-switching diffusions.
//!
//! A controlled state `X` on `(0, inf)` (or `(0, b)`) is driven by drift and
//! diffusion coefficients that depend on a finite-state Markov chain. The
//! cost of a control accrues until the first exit from the domain or the
//! horizon `T`. The crate provides
//!
//! - [`markov_chain`]: generator matrices, transition probabilities and
//!   exact regime-path sampling;
//! - [`dynamics`] and [`models`]: model descriptions and the built-in
//!   examples;
//! - [`simulate`]: Euler–Maruyama paths, exit-time costs and Monte Carlo;
//! - [`hjb`]: a monotone finite-difference solver for the coupled HJB system;
//! - [`penalty`]: the penalised auxiliary problem and its diagnostics;
//! - [`regularity`]: certificates and probes for regularity of `x = 0`;
//! - [`io`]: CSV and JSON output.
//!
//! Regimes are indexed from zero throughout.

pub mod dynamics;
pub mod error;
pub mod hjb;
pub mod io;
pub mod markov_chain;
pub mod models;
pub mod penalty;
pub mod regularity;
pub mod simulate;

pub use dynamics::{check_assumption_a1, A1Probe, AssumptionReport, ControlSet, ModelSpec, Sense};
pub use error::{Error, Result};
pub use hjb::{solve_hjb, GridSpec, HjbSolution, PolicyGrid, Scheme, ValueGrid};
pub use markov_chain::{GeneratorMatrix, RegimePath};
pub use penalty::PenaltySpec;
pub use regularity::TestFunction;
pub use simulate::{
    monte_carlo_value, simulate_path, ConstantControl, FeedbackPolicy, InitialState, McConfig,
    McEstimate, Path, StopRule,
};
