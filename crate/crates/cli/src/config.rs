//! Run configuration: a JSON file whose sections mirror the command-line
//! flag groups. Flags override file values field by field.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Either a bare built-in name or a block with parameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Name(String),
    Block(ModelBlock),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub name: String,
    #[serde(default)]
    pub discount_rate: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelRef>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub start: StartArgs,
    pub monte_carlo: McArgs,
    pub grid: GridArgs,
    pub penalty: PenaltyArgs,
    pub regularity: RegularityArgs,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }
}

/// `self` wins wherever it has a value.
macro_rules! overlay {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $ty {
            pub fn overlay(self, base: Self) -> Self {
                Self { $($field: self.$field.or(base.$field)),* }
            }
        }
    };
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartArgs {
    /// Start time.
    #[arg(long)]
    pub s: Option<f64>,
    /// Initial state.
    #[arg(long)]
    pub x0: Option<f64>,
    /// Initial regime (0-based).
    #[arg(long)]
    pub regime: Option<usize>,
    /// Constant control applied along paths.
    #[arg(long, allow_hyphen_values = true)]
    pub control: Option<f64>,
}
overlay!(StartArgs {
    s,
    x0,
    regime,
    control
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McArgs {
    #[arg(long)]
    pub n_paths: Option<usize>,
    /// Euler step.
    #[arg(long)]
    pub dt: Option<f64>,
}
overlay!(McArgs { n_paths, dt });

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeArg {
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridArgs {
    /// Upper end of the space grid.
    #[arg(long)]
    pub x_max: Option<f64>,
    #[arg(long)]
    pub n_x: Option<usize>,
    /// Time steps; the smallest stable count when omitted.
    #[arg(long)]
    pub n_t: Option<usize>,
    /// Control grid size for interval control sets.
    #[arg(long)]
    pub n_u: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Solve on `[0, horizon]` instead of the model horizon.
    #[arg(long)]
    pub horizon: Option<f64>,
}
overlay!(GridArgs {
    x_max,
    n_x,
    n_t,
    n_u,
    scheme,
    horizon
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyArgs {
    /// Penalty parameters, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub epsilons: Option<Vec<f64>>,
    /// Initial states for the penalised value sweep.
    #[arg(long, value_delimiter = ',')]
    pub x0s: Option<Vec<f64>>,
    /// Times at which the accumulated penalty is inspected.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Option<Vec<f64>>,
}
overlay!(PenaltyArgs {
    epsilons,
    x0s,
    checkpoints
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularityArgs {
    /// Per-regime slopes c of the test function -x^2 + c x.
    #[arg(long, value_delimiter = ',')]
    pub slopes: Option<Vec<f64>>,
    /// Right end of the neighbourhood of 0 where the test function is checked.
    #[arg(long)]
    pub neighborhood: Option<f64>,
    /// Number of time intervals on which the generator is evaluated.
    #[arg(long)]
    pub t_points: Option<usize>,
    /// Window lengths for the Monte Carlo probe.
    #[arg(long, value_delimiter = ',')]
    pub deltas: Option<Vec<f64>>,
    #[arg(long)]
    pub margin: Option<f64>,
}
overlay!(RegularityArgs {
    slopes,
    neighborhood,
    t_points,
    deltas,
    margin
});
