use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the toolkit.
///
/// Regime indices in every variant are zero-based.
#[derive(Debug, Error)]
pub enum Error {
    #[error("generator matrix is empty")]
    EmptyGenerator,
    #[error("generator matrix is not square: row {row} has {len} entries, expected {expected}")]
    NotSquare {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("generator entry ({i}, {j}) is not finite")]
    NonFiniteEntry { i: usize, j: usize },
    #[error("negative off-diagonal rate q[{i}][{j}] = {value}")]
    NegativeOffDiagonal { i: usize, j: usize, value: f64 },
    #[error("row {row} of the generator sums to {sum}, expected 0")]
    RowSumNonzero { row: usize, sum: f64 },
    #[error("regime {regime} out of range for a chain with {m} states")]
    InvalidRegime { regime: usize, m: usize },
    #[error("invalid time interval [{start}, {end}]")]
    InvalidInterval { start: f64, end: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite {coefficient} at t={t}, x={x}, regime={regime}, u={u}")]
    NonFiniteCoefficient {
        coefficient: &'static str,
        t: f64,
        x: f64,
        regime: usize,
        u: f64,
    },
    #[error("step size {dt} exceeds the remaining horizon {span}")]
    StepsizeTooLarge { dt: f64, span: f64 },
    #[error("state became non-finite at t={t}")]
    NonFiniteState { t: f64 },
    #[error("auxiliary cost needs a path simulated past the exit time")]
    RequiresUnstoppedPath,
    #[error("time step {actual_dt} violates the CFL bound; need dt <= {required_dt}")]
    CflViolation { required_dt: f64, actual_dt: f64 },
    #[error("negative transition weight {weight} at t-index {t_idx}, x-index {x_idx}, regime {regime}, u={u}")]
    NonMonotoneScheme {
        t_idx: usize,
        x_idx: usize,
        regime: usize,
        u: f64,
        weight: f64,
    },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("test-function hypothesis violated: {0}")]
    HypothesisViolated(String),
    #[error("probe step dt={dt} too coarse for smallest window {delta}; need dt <= delta/100")]
    ProbeStepTooCoarse { dt: f64, delta: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
