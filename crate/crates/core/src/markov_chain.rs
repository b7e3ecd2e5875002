//! Finite-state continuous-time Markov chains driving regime switches.
//!
//! Regimes are indexed `0..m`. A chain is described by its generator `Q`:
//! off-diagonal entries are jump rates, and each row sums to zero.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Absolute tolerance on generator row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

const EXPM_SERIES_ORDER: usize = 10;

/// A validated generator matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct GeneratorMatrix {
    m: usize,
    q: Vec<f64>,
}

impl GeneratorMatrix {
    /// Validates `rows` as a generator: square, finite, non-negative
    /// off-diagonal rates and zero row sums.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(Error::EmptyGenerator);
        }
        for (row, r) in rows.iter().enumerate() {
            if r.len() != m {
                return Err(Error::NotSquare {
                    row,
                    len: r.len(),
                    expected: m,
                });
            }
        }
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteEntry { i, j });
                }
                if i != j && v < 0.0 {
                    return Err(Error::NegativeOffDiagonal { i, j, value: v });
                }
            }
        }
        for (row, r) in rows.iter().enumerate() {
            let sum: f64 = r.iter().sum();
            if sum.abs() > ROW_SUM_TOLERANCE {
                return Err(Error::RowSumNonzero { row, sum });
            }
        }
        Ok(Self {
            m,
            q: rows.into_iter().flatten().collect(),
        })
    }

    /// The generator of a chain that never leaves its starting state.
    pub fn zero(m: usize) -> Self {
        assert!(m >= 1, "a chain needs at least one state");
        Self {
            m,
            q: vec![0.0; m * m],
        }
    }

    /// Re-validates an existing generator.
    pub fn validate(&self) -> Result<Self> {
        Self::new(self.rows())
    }

    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.q[i * self.m + j]
    }

    /// Total rate of leaving state `i`, i.e. `-q[i][i]`.
    #[inline]
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.rate(i, i)
    }

    pub fn max_exit_rate(&self) -> f64 {
        (0..self.m).map(|i| self.exit_rate(i)).fold(0.0, f64::max)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.q[i * self.m..(i + 1) * self.m]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.m).map(|i| self.row(i).to_vec()).collect()
    }

    /// `sum_j q[i][j] h[j]`, the regime-coupling term of the generator.
    #[inline]
    pub fn couple(&self, i: usize, h: impl Fn(usize) -> f64) -> f64 {
        self.row(i)
            .iter()
            .enumerate()
            .filter(|(_, q)| **q != 0.0)
            .map(|(j, q)| q * h(j))
            .sum()
    }

    pub fn check_regime(&self, regime: usize) -> Result<()> {
        if regime < self.m {
            Ok(())
        } else {
            Err(Error::InvalidRegime { regime, m: self.m })
        }
    }

    /// Transition matrix `exp(Q t)` by scaling and squaring a truncated
    /// Taylor series.
    pub fn transition_matrix(&self, t: f64) -> Result<Vec<Vec<f64>>> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "transition time must be finite and non-negative, got {t}"
            )));
        }
        let m = self.m;
        let norm = (0..m)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
            * t;
        let squarings = if norm > 0.5 {
            (norm / 0.5).log2().ceil() as u32
        } else {
            0
        };
        let scale = t / 2f64.powi(squarings as i32);
        let a: Vec<f64> = self.q.iter().map(|v| v * scale).collect();

        let mut result = identity(m);
        let mut term = identity(m);
        for n in 1..=EXPM_SERIES_ORDER {
            term = matmul(&term, &a, m);
            let inv = 1.0 / n as f64;
            term.iter_mut().for_each(|v| *v *= inv);
            result.iter_mut().zip(&term).for_each(|(r, t)| *r += t);
        }
        for _ in 0..squarings {
            result = matmul(&result, &result, m);
        }

        Ok((0..m)
            .map(|i| {
                result[i * m..(i + 1) * m]
                    .iter()
                    .map(|v| v.clamp(0.0, 1.0))
                    .collect()
            })
            .collect())
    }

    /// Solves `pi Q = 0`, `sum pi = 1`. Fails when the solution is not unique.
    pub fn stationary_distribution(&self) -> Result<Vec<f64>> {
        let m = self.m;
        // Rows of the system are the columns of Q; the last one is replaced by
        // the normalisation constraint.
        let mut a = vec![0.0; m * m];
        let mut rhs = vec![0.0; m];
        for i in 0..m {
            for j in 0..m {
                a[i * m + j] = if i == m - 1 { 1.0 } else { self.rate(j, i) };
            }
        }
        rhs[m - 1] = 1.0;
        solve_dense(&mut a, &mut rhs, m).ok_or_else(|| {
            Error::InvalidParameter("generator has no unique stationary distribution".into())
        })
    }

    /// Samples the chain exactly on `[s, horizon]` starting from `initial`.
    ///
    /// Holding times are exponential with rate `-q[i][i]`; a state with zero
    /// exit rate holds until the horizon.
    pub fn sample_path<R: Rng + ?Sized>(
        &self,
        initial: usize,
        s: f64,
        horizon: f64,
        rng: &mut R,
    ) -> Result<RegimePath> {
        self.check_regime(initial)?;
        if !(s < horizon) || !s.is_finite() || !horizon.is_finite() {
            return Err(Error::InvalidInterval {
                start: s,
                end: horizon,
            });
        }
        let mut jump_times = Vec::new();
        let mut states = vec![initial];
        let mut t = s;
        let mut state = initial;
        loop {
            let rate = self.exit_rate(state);
            if rate <= 0.0 {
                break;
            }
            let hold: f64 = Exp1.sample(rng);
            t += hold / rate;
            if t > horizon {
                break;
            }
            state = self.sample_jump_target(state, rng);
            jump_times.push(t);
            states.push(state);
        }
        Ok(RegimePath {
            s,
            horizon,
            jump_times,
            states,
        })
    }

    fn sample_jump_target<R: Rng + ?Sized>(&self, from: usize, rng: &mut R) -> usize {
        let rate = self.exit_rate(from);
        let target = rng.random::<f64>() * rate;
        let mut acc = 0.0;
        let mut last = from;
        for (j, &q) in self.row(from).iter().enumerate() {
            if j == from || q <= 0.0 {
                continue;
            }
            acc += q;
            last = j;
            if target < acc {
                return j;
            }
        }
        last
    }
}

impl TryFrom<Vec<Vec<f64>>> for GeneratorMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<GeneratorMatrix> for Vec<Vec<f64>> {
    fn from(g: GeneratorMatrix) -> Self {
        g.rows()
    }
}

/// Free-function form of [`GeneratorMatrix::new`].
pub fn validate_generator(rows: Vec<Vec<f64>>) -> Result<GeneratorMatrix> {
    GeneratorMatrix::new(rows)
}

/// One realisation of the regime process on `[s, horizon]`.
///
/// `states[k]` is the regime on `[jump_times[k-1], jump_times[k])`, with
/// `states[0]` the initial regime. The path is right-continuous.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePath {
    pub s: f64,
    pub horizon: f64,
    pub jump_times: Vec<f64>,
    pub states: Vec<usize>,
}

impl RegimePath {
    /// A path with no switches.
    pub fn constant(regime: usize, s: f64, horizon: f64) -> Self {
        Self {
            s,
            horizon,
            jump_times: Vec::new(),
            states: vec![regime],
        }
    }

    pub fn initial(&self) -> usize {
        self.states[0]
    }

    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Regime in force at time `t`.
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&j| j <= t);
        self.states[k]
    }

    /// Time spent in `state` during `[self.s, t_end]`.
    pub fn occupation_time(&self, state: usize, t_end: f64) -> f64 {
        let t_end = t_end.min(self.horizon);
        let mut start = self.s;
        let mut total = 0.0;
        for (k, &st) in self.states.iter().enumerate() {
            let end = self
                .jump_times
                .get(k)
                .copied()
                .unwrap_or(self.horizon)
                .min(t_end);
            if st == state && end > start {
                total += end - start;
            }
            start = end;
            if start >= t_end {
                break;
            }
        }
        total
    }

    /// Sojourn lengths of completed visits to `state` (the final, censored
    /// visit is excluded).
    pub fn completed_holding_times(&self, state: usize) -> Vec<f64> {
        let mut out = Vec::new();
        let mut start = self.s;
        for (k, &jt) in self.jump_times.iter().enumerate() {
            if self.states[k] == state && k > 0 {
                out.push(jt - start);
            }
            start = jt;
        }
        out
    }
}

fn identity(m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        out[i * m + i] = 1.0;
    }
    out
}

fn matmul(a: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += aik * b[k * m + j];
            }
        }
    }
    out
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i * n + col]
                .abs()
                .partial_cmp(&a[j * n + col].abs())
                .unwrap()
        })?;
        if a[pivot * n + col].abs() < 1e-14 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(pivot * n + j, col * n + j);
            }
            b.swap(pivot, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|j| a[row * n + j] * x[j]).sum();
        x[row] = (b[row] - tail) / a[row * n + row];
    }
    Some(x)
}
