//! Built-in models with known closed-form behaviour.
//!
//! | name              | dynamics                                       | notes                                  |
//! |-------------------|------------------------------------------------|----------------------------------------|
//! | `tangency`        | `dX = 2(t-1) dt`                               | deterministic, value jumps on `x = (s-1)^2` |
//! | `noisy_tangency`  | `dX = 2(t-1) dt + (t-X)^+ dw`                  | degenerate noise, boundary is regular  |
//! | `reinsurance`     | two regimes, retention rate `u in [0,1]`      | maximises discounted surplus           |
//! | `brownian_exit`   | `dX = dw` on `(0, 1)`                          | expected exit time `x(1-x)`            |

use crate::dynamics::{ControlSet, ModelSpec, Sense};
use crate::markov_chain::GeneratorMatrix;
use crate::{Error, Result};

pub const BUILTIN_NAMES: [&str; 4] = ["tangency", "noisy_tangency", "reinsurance", "brownian_exit"];

/// Default discount rate for [`reinsurance`].
pub const DEFAULT_DISCOUNT_RATE: f64 = 0.05;

/// Deterministic tangency problem on `[0, 2]` with unit running cost, so the
/// cost of a path is its exit time minus the start time.
pub fn tangency() -> ModelSpec {
    ModelSpec::new("tangency", GeneratorMatrix::zero(1), 2.0)
        .with_drift(|t, _, _, _| 2.0 * (t - 1.0))
        .with_running_cost(|_, _, _, _| 1.0)
}

/// Exit time of [`tangency`] started at `(s, x)`; the horizon is 2.
pub fn tangency_exit_time(s: f64, x: f64) -> f64 {
    let gap = (s - 1.0).powi(2) - x;
    if s <= 1.0 && gap >= 0.0 {
        1.0 - gap.sqrt()
    } else {
        2.0
    }
}

/// [`tangency`] with diffusion `(t - x)^+`.
pub fn noisy_tangency() -> ModelSpec {
    ModelSpec::new("noisy_tangency", GeneratorMatrix::zero(1), 2.0)
        .with_drift(|t, _, _, _| 2.0 * (t - 1.0))
        .with_diffusion(|t, x, _, _| (t - x).max(0.0))
        .with_running_cost(|_, _, _, _| 1.0)
}

/// Two-regime surplus under proportional reinsurance with retention
/// `u in [0, 1]`, maximising `E int e^{-rt} X(t) dt` up to ruin or `t = 100`.
pub fn reinsurance(discount_rate: f64) -> ModelSpec {
    let q = GeneratorMatrix::new(vec![vec![-3.0, 3.0], vec![4.0, -4.0]])
        .expect("static generator is valid");
    ModelSpec::new("reinsurance", q, 100.0)
        .with_drift(|t, x, a, u| match a {
            0 => t.sin() + x + 0.4 - 0.8 * (1.0 - u),
            _ => t.cos() + 3.0 * x + 1.0 - 2.0 * (1.0 - u),
        })
        .with_diffusion(|t, x, a, u| match a {
            0 => t.sin() + 0.5 * x + 0.5 * u,
            _ => t.cos() + x + 2.0 * u,
        })
        .with_running_cost(move |t, x, _, _| (-discount_rate * t).exp() * x)
        .with_controls(ControlSet::Interval { lo: 0.0, hi: 1.0 })
        .with_sense(Sense::Maximize)
        .with_parameter("discount_rate", discount_rate)
}

/// Standard Brownian motion on `(0, 1)` with unit running cost, horizon 10.
pub fn brownian_exit() -> ModelSpec {
    ModelSpec::new("brownian_exit", GeneratorMatrix::zero(1), 10.0)
        .with_diffusion(|_, _, _, _| 1.0)
        .with_running_cost(|_, _, _, _| 1.0)
        .with_upper_barrier(1.0)
}

/// Expected exit time of Brownian motion from `(0, 1)` started at `x`.
pub fn brownian_exit_time(x: f64) -> f64 {
    x * (1.0 - x)
}

/// Looks up a built-in model. `discount_rate` only affects `reinsurance`.
pub fn builtin(name: &str, discount_rate: Option<f64>) -> Result<ModelSpec> {
    match name.replace('-', "_").as_str() {
        "tangency" => Ok(tangency()),
        "noisy_tangency" => Ok(noisy_tangency()),
        "reinsurance" => Ok(reinsurance(discount_rate.unwrap_or(DEFAULT_DISCOUNT_RATE))),
        "brownian_exit" => Ok(brownian_exit()),
        other => Err(Error::InvalidParameter(format!(
            "unknown model '{other}', expected one of {}",
            BUILTIN_NAMES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_resolves_every_name() {
        for name in BUILTIN_NAMES {
            let m = builtin(name, None).unwrap();
            assert_eq!(m.name, name);
            m.validate().unwrap();
        }
        assert!(builtin("noisy-tangency", None).is_ok());
        assert!(builtin("nope", None).is_err());
    }

    #[test]
    fn tangency_exit_time_branches() {
        assert!((tangency_exit_time(0.0, 0.5) - (1.0 - 0.5f64.sqrt())).abs() < 1e-15);
        assert_eq!(tangency_exit_time(0.0, 1.5), 2.0);
        assert_eq!(tangency_exit_time(0.5, 0.25), 1.0);
        assert_eq!(tangency_exit_time(1.5, 0.1), 2.0);
    }

    #[test]
    fn reinsurance_coefficients_at_half_retention() {
        let m = reinsurance(0.05);
        let t = 0.7;
        assert!((m.drift(t, 0.0, 0, 0.5) - t.sin()).abs() < 1e-15);
        assert!((m.drift(t, 0.0, 1, 0.5) - t.cos()).abs() < 1e-15);
        assert!((m.diffusion(t, 0.0, 0, 0.5) - (t.sin() + 0.25)).abs() < 1e-15);
        assert!((m.diffusion(t, 0.0, 1, 0.5) - (t.cos() + 1.0)).abs() < 1e-15);
        assert_eq!(m.sense, Sense::Maximize);
    }
}
