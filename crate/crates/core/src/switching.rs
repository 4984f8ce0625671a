//! The jump chain `I_t`: rate matrices, stationary law, sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;
use thiserror::Error;

use crate::rng::{stream_rng, StreamRng};

const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RateError {
    #[error("rate matrix must be square and non-empty")]
    NotSquare,
    #[error("rate matrix has non-finite entries")]
    NonFinite,
    #[error("negative off-diagonal rate Q[{row}][{col}] = {value}")]
    NegativeRate { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, not 0")]
    RowSum { row: usize, sum: f64 },
    #[error("rate matrix is not irreducible: state {to} unreachable from state {from}")]
    Reducible { from: usize, to: usize },
    #[error("state {state} is absorbing (no outgoing rates)")]
    Absorbing { state: usize },
    #[error("state index {state} out of range for {n} states")]
    StateOutOfRange { state: usize, n: usize },
    #[error("scaling factor must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
}

/// Non-fatal findings of [`validate_rate_matrix`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RateWarning {
    /// An off-diagonal entry is zero, so `Q` lies outside the strictly
    /// positive class; irreducible matrices remain usable.
    NotStrictlyPositive { row: usize, col: usize },
}

/// Generator of a continuous-time Markov chain on `{0..n-1}`; diagonal
/// entries are exactly minus the off-diagonal row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    n: usize,
    entries: Vec<f64>,
    warnings: Vec<RateWarning>,
}

pub fn validate_rate_matrix(rows: &[Vec<f64>]) -> Result<RateMatrix, Vec<RateError>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(vec![RateError::NotSquare]);
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(vec![RateError::NonFinite]);
    }
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let scale = rows.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut entries = vec![0.0; n * n];
    for (i, row) in rows.iter().enumerate() {
        let mut off = 0.0;
        for (j, &q) in row.iter().enumerate() {
            if i == j {
                continue;
            }
            if q < 0.0 {
                errors.push(RateError::NegativeRate {
                    row: i,
                    col: j,
                    value: q,
                });
            } else if q == 0.0 {
                warnings.push(RateWarning::NotStrictlyPositive { row: i, col: j });
            }
            entries[i * n + j] = q;
            off += q;
        }
        let sum: f64 = row.iter().sum();
        if sum.abs() > ROW_SUM_TOL * scale {
            errors.push(RateError::RowSum { row: i, sum });
        }
        entries[i * n + i] = -off;
    }
    if errors.is_empty() {
        Ok(RateMatrix { n, entries, warnings })
    } else {
        Err(errors)
    }
}

impl RateMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// `-Q_ii`, the total rate of leaving `i`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.entries[i * self.n + i]
    }

    pub fn warnings(&self) -> &[RateWarning] {
        &self.warnings
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks_exact(self.n).map(<[f64]>::to_vec).collect()
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.warnings.is_empty()
    }

    /// Returns the first unreachable pair over the positive-rate digraph, if any.
    fn unreachable_pair(&self) -> Option<(usize, usize)> {
        for start in 0..self.n {
            let mut seen = vec![false; self.n];
            seen[start] = true;
            let mut stack = vec![start];
            while let Some(i) = stack.pop() {
                for (j, s) in seen.iter_mut().enumerate() {
                    if !*s && self.rate(i, j) > 0.0 {
                        *s = true;
                        stack.push(j);
                    }
                }
            }
            if let Some(to) = seen.iter().position(|s| !s) {
                return Some((start, to));
            }
        }
        None
    }

    pub fn check_irreducible(&self) -> Result<(), RateError> {
        match self.unreachable_pair() {
            Some((from, to)) => Err(RateError::Reducible { from, to }),
            None => Ok(()),
        }
    }

    pub fn check_state(&self, state: usize) -> Result<(), RateError> {
        if state < self.n {
            Ok(())
        } else {
            Err(RateError::StateOutOfRange { state, n: self.n })
        }
    }

    /// Next state after leaving `from`, chosen with probability `Q_ij / -Q_ii`.
    pub(crate) fn sample_next<R: Rng + ?Sized>(&self, from: usize, rng: &mut R) -> usize {
        let total = self.exit_rate(from);
        let mut u = rng.random::<f64>() * total;
        let mut last = from;
        for j in 0..self.n {
            if j == from {
                continue;
            }
            let q = self.rate(from, j);
            if q <= 0.0 {
                continue;
            }
            last = j;
            if u < q {
                return j;
            }
            u -= q;
        }
        last
    }

    /// Exponential holding time with rate `-Q_ii`.
    pub(crate) fn sample_hold<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> f64 {
        let e: f64 = Exp1.sample(rng);
        e / self.exit_rate(state)
    }
}

/// Stationary distribution of the chain, `pi Q = 0`, `sum pi = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainStationaryLaw {
    pub weights: Vec<f64>,
}

impl ChainStationaryLaw {
    /// `max_j |(pi Q)_j|`.
    pub fn residual(&self, q: &RateMatrix) -> f64 {
        (0..q.n())
            .map(|j| (0..q.n()).map(|i| self.weights[i] * q.rate(i, j)).sum::<f64>().abs())
            .fold(0.0, f64::max)
    }
}

pub fn stationary_law(q: &RateMatrix) -> Result<ChainStationaryLaw, RateError> {
    q.check_irreducible()?;
    let n = q.n();
    // Solve Q^T pi = 0 with the last equation replaced by the normalization.
    let mut a = DMatrix::from_fn(n, n, |r, c| q.rate(c, r));
    let mut rhs = DVector::zeros(n);
    for c in 0..n {
        a[(n - 1, c)] = 1.0;
    }
    rhs[n - 1] = 1.0;
    let lu = a.clone().lu();
    let mut pi = lu.solve(&rhs).ok_or(RateError::Reducible { from: 0, to: 0 })?;
    // One round of iterative refinement.
    let resid = &rhs - &a * &pi;
    if let Some(corr) = lu.solve(&resid) {
        pi += corr;
    }
    let weights: Vec<f64> = pi.iter().map(|p| p.max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    Ok(ChainStationaryLaw {
        weights: weights.into_iter().map(|p| p / total).collect(),
    })
}

/// `lambda Q`: same jump probabilities, all holding times divided by `lambda`.
pub fn scale(q: &RateMatrix, lambda: f64) -> Result<RateMatrix, RateError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(RateError::BadScale(lambda));
    }
    Ok(RateMatrix {
        n: q.n,
        entries: q.entries.iter().map(|v| v * lambda).collect(),
        warnings: q.warnings.clone(),
    })
}

/// States visited and time spent in each. The last hold is cut at the
/// horizon, so `holds` always sums to the horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchingRecord {
    pub start_state: usize,
    pub states: Vec<usize>,
    pub holds: Vec<f64>,
}

impl SwitchingRecord {
    pub fn total_time(&self) -> f64 {
        self.holds.iter().sum()
    }

    /// Fraction of the total time spent in each of `n` states.
    pub fn occupation_fractions(&self, n: usize) -> Vec<f64> {
        let mut occ = vec![0.0; n];
        for (&s, &h) in self.states.iter().zip(&self.holds) {
            occ[s] += h;
        }
        let total = self.total_time();
        occ.iter().map(|o| o / total).collect()
    }
}

pub fn sample_chain(q: &RateMatrix, i0: usize, horizon: f64, seed: u64) -> Result<SwitchingRecord, RateError> {
    let mut rng = stream_rng(seed, 0);
    sample_chain_with(q, i0, horizon, &mut rng)
}

pub fn sample_chain_with(
    q: &RateMatrix,
    i0: usize,
    horizon: f64,
    rng: &mut StreamRng,
) -> Result<SwitchingRecord, RateError> {
    q.check_state(i0)?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(RateError::BadHorizon(horizon));
    }
    let mut states = Vec::new();
    let mut holds = Vec::new();
    let mut t = 0.0;
    let mut state = i0;
    loop {
        if q.exit_rate(state) <= 0.0 {
            return Err(RateError::Absorbing { state });
        }
        let hold = q.sample_hold(state, rng);
        states.push(state);
        if t + hold >= horizon {
            holds.push(horizon - t);
            break;
        }
        holds.push(hold);
        t += hold;
        state = q.sample_next(state, rng);
    }
    Ok(SwitchingRecord {
        start_state: i0,
        states,
        holds,
    })
}
