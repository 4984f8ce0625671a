//! Simulation of the switched process `(X_t, I_t)`.
//!
//! Exponential holding times drive the discrete state; between jumps the
//! position follows the active field with fixed-step RK4 and the last step
//! of every segment is shortened to land on the jump time. Observers see
//! every integration step, every jump and every landing point, so
//! statistics are accumulated on the fly without storing paths.

use std::ops::{ControlFlow, Range};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dsl::EvalError;
use crate::flow::{step_sizes, Rk4};
use crate::rng::{stream_rng, StreamRng};
use crate::switching::{RateError, RateMatrix, SwitchingRecord};
use crate::vecfield::{Field, VectorFieldSpec};

/// Slack allowed on box faces, relative to the box extent.
const BOX_TOL: f64 = 1e-9;

/// Batches are split into at most this many fixed chunks. Chunk boundaries
/// depend only on the trajectory count, never on the worker count.
const MAX_CHUNKS: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Rates(#[from] RateError),
    #[error("trajectory left the box at t = {time} in state {state}, position {position:?}")]
    BoxExit {
        time: f64,
        state: usize,
        position: Vec<f64>,
    },
    #[error("state became non-finite at t = {time}")]
    NonFinite { time: f64 },
    #[error("field evaluation failed at t = {time}: {source}")]
    Eval {
        time: f64,
        #[source]
        source: EvalError,
    },
    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<SimError>,
    },
}

/// Axis-aligned box standing in for the forward-invariant set `M`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundingBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoundingBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, SimError> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(SimError::Config(
                "box bounds must be non-empty and of equal length".into(),
            ));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite())
        {
            return Err(SimError::Config("box needs finite lower < upper on every axis".into()));
        }
        Ok(BoundingBox { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn diagonal(&self) -> f64 {
        (0..self.dim()).map(|k| self.extent(k).powi(2)).sum::<f64>().sqrt()
    }

    /// Membership with a small relative slack on every face.
    #[inline]
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(k, &v)| {
            let slack = BOX_TOL * (self.upper[k] - self.lower[k]);
            v >= self.lower[k] - slack && v <= self.upper[k] + slack
        })
    }

    /// Distance from `x` to the nearest face (negative outside).
    pub fn depth(&self, x: &[f64]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(k, &v)| (v - self.lower[k]).min(self.upper[k] - v))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Everything needed to simulate `PDMP(Q)` from a fixed initial condition.
#[derive(Debug, Clone, PartialEq)]
pub struct PdmpConfig {
    pub fields: Vec<VectorFieldSpec>,
    pub rates: RateMatrix,
    pub bbox: BoundingBox,
    pub x0: Vec<f64>,
    pub i0: usize,
    pub horizon: f64,
    /// `None` selects `max(100, 10 / min_i(-Q_ii))`.
    pub burn_in: Option<f64>,
    pub step: f64,
    pub seed: u64,
    /// Spacing of dense output samples.
    pub output_dt: Option<f64>,
}

impl PdmpConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.rates.n();
        if self.fields.len() != n {
            return Err(SimError::Config(format!(
                "{} fields for a {n}-state rate matrix",
                self.fields.len()
            )));
        }
        let d = self.bbox.dim();
        if let Some(f) = self.fields.iter().find(|f| f.dim() != d) {
            return Err(SimError::Config(format!(
                "field `{}` has dimension {}, box has {d}",
                f.label(),
                f.dim()
            )));
        }
        if self.x0.len() != d {
            return Err(SimError::Config(format!(
                "x0 has dimension {}, box has {d}",
                self.x0.len()
            )));
        }
        if !self.bbox.contains(&self.x0) {
            return Err(SimError::Config(format!("x0 {:?} lies outside the box", self.x0)));
        }
        self.rates.check_state(self.i0)?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SimError::Config(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(SimError::Config(format!("step must be positive, got {}", self.step)));
        }
        if let Some(b) = self.burn_in {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(SimError::Config(format!("burn-in must be non-negative, got {b}")));
            }
        }
        if let Some(dt) = self.output_dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(SimError::Config(format!("output spacing must be positive, got {dt}")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bbox.dim()
    }

    pub fn n_states(&self) -> usize {
        self.rates.n()
    }

    pub fn burn_in(&self) -> f64 {
        self.burn_in.unwrap_or_else(|| default_burn_in(&self.rates))
    }

    /// Burn-in, checked to leave a non-empty recording window.
    pub fn recording_start(&self) -> Result<f64, SimError> {
        let b = self.burn_in();
        if b >= self.horizon {
            return Err(SimError::Config(format!(
                "burn-in {b} leaves nothing to record before horizon {}",
                self.horizon
            )));
        }
        Ok(b)
    }
}

/// `max(100, 10 / min_i(-Q_ii))`, ignoring absorbing states.
pub fn default_burn_in(rates: &RateMatrix) -> f64 {
    let slowest = (0..rates.n())
        .map(|i| rates.exit_rate(i))
        .filter(|&r| r > 0.0)
        .fold(f64::INFINITY, f64::min);
    if slowest.is_finite() {
        (10.0 / slowest).max(100.0)
    } else {
        100.0
    }
}

/// Callbacks invoked while a path is generated.
pub trait Observer {
    /// One integration step over `[t, t + dt]` in `state`.
    fn on_step(&mut self, t: f64, dt: f64, state: usize, from: &[f64], to: &[f64]) -> ControlFlow<()>;

    /// Discrete jump at time `t`, at position `x`.
    fn on_jump(&mut self, _t: f64, _from: usize, _to: usize, _x: &[f64]) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    /// Position at a landing time (burn-in end or an output sample time).
    fn on_landing(&mut self, _t: f64, _state: usize, _x: &[f64]) {}
}

/// Times at which the integrator must land besides jump times.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Landings {
    pub record_from: f64,
    pub output_dt: Option<f64>,
}

impl Landings {
    fn first(&self) -> f64 {
        if self.output_dt.is_some() || self.record_from <= 0.0 {
            0.0
        } else {
            self.record_from
        }
    }

    fn next_after(&self, t: f64) -> f64 {
        let mut next = f64::INFINITY;
        if t < self.record_from {
            next = self.record_from;
        }
        if let Some(dt) = self.output_dt {
            let k = (t / dt).floor() + 1.0;
            let mut cand = k * dt;
            if cand <= t {
                cand = (k + 1.0) * dt;
            }
            next = next.min(cand);
        }
        next
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct WalkEnd {
    pub time: f64,
    pub state: usize,
    pub position: Vec<f64>,
    pub stopped: bool,
}

/// Path generator over borrowed fields and rates.
pub(crate) struct Walker<'a, F: Field> {
    fields: &'a [F],
    rates: &'a RateMatrix,
    bbox: Option<&'a BoundingBox>,
    step: f64,
    rk: Rk4,
    prev: Vec<f64>,
}

impl<'a, F: Field> Walker<'a, F> {
    pub(crate) fn new(fields: &'a [F], rates: &'a RateMatrix, bbox: Option<&'a BoundingBox>, step: f64) -> Self {
        let d = fields.first().map_or(0, |f| f.dim());
        Walker {
            fields,
            rates,
            bbox,
            step,
            rk: Rk4::new(d),
            prev: vec![0.0; d],
        }
    }

    /// Runs from `(x0, i0)` at time 0 until `t_end` or until the observer
    /// breaks.
    pub(crate) fn walk<O: Observer>(
        &mut self,
        x0: &[f64],
        i0: usize,
        t_end: f64,
        landings: Landings,
        rng: &mut StreamRng,
        obs: &mut O,
    ) -> Result<WalkEnd, SimError> {
        let mut x = x0.to_vec();
        let mut state = i0;
        let mut t = 0.0;
        let mut hold_end = self.rates.sample_hold(state, rng);
        let mut next_landing = landings.first();
        if next_landing == 0.0 {
            obs.on_landing(0.0, state, &x);
            next_landing = landings.next_after(0.0);
        }
        let done = |time: f64, state: usize, x: Vec<f64>, stopped: bool| WalkEnd {
            time,
            state,
            position: x,
            stopped,
        };
        loop {
            let seg_end = hold_end.min(t_end);
            while t < seg_end {
                let stop = seg_end.min(next_landing);
                let mut tc = t;
                for h in step_sizes(stop - t, self.step) {
                    self.prev.copy_from_slice(&x);
                    self.rk
                        .step(&self.fields[state], 1.0, &mut x, h)
                        .map_err(|source| SimError::Eval { time: tc, source })?;
                    if !x.iter().all(|v| v.is_finite()) {
                        return Err(SimError::NonFinite { time: tc + h });
                    }
                    if let Some(b) = self.bbox {
                        if !b.contains(&x) {
                            return Err(SimError::BoxExit {
                                time: tc + h,
                                state,
                                position: x,
                            });
                        }
                    }
                    if obs.on_step(tc, h, state, &self.prev, &x).is_break() {
                        return Ok(done(tc + h, state, x, true));
                    }
                    tc += h;
                }
                t = stop;
                if stop == next_landing {
                    obs.on_landing(t, state, &x);
                    next_landing = landings.next_after(t);
                }
            }
            if t >= t_end {
                return Ok(done(t, state, x, false));
            }
            let next = self.rates.sample_next(state, rng);
            if obs.on_jump(t, state, next, &x).is_break() {
                return Ok(done(t, next, x, true));
            }
            state = next;
            hold_end = t + self.rates.sample_hold(state, rng);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub t: f64,
    pub state: usize,
    pub x: Vec<f64>,
}

/// A simulated path: the switching record, positions at every hold start,
/// and optional dense samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub record: SwitchingRecord,
    /// Start time of each hold in `record`.
    pub jump_times: Vec<f64>,
    /// Position at the start of each hold in `record`.
    pub jump_positions: Vec<Vec<f64>>,
    pub samples: Vec<Sample>,
    pub final_position: Vec<f64>,
}

struct TrajectoryRecorder {
    states: Vec<usize>,
    starts: Vec<f64>,
    positions: Vec<Vec<f64>>,
    samples: Vec<Sample>,
}

impl Observer for TrajectoryRecorder {
    fn on_step(&mut self, _: f64, _: f64, _: usize, _: &[f64], _: &[f64]) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    fn on_jump(&mut self, t: f64, _from: usize, to: usize, x: &[f64]) -> ControlFlow<()> {
        self.states.push(to);
        self.starts.push(t);
        self.positions.push(x.to_vec());
        ControlFlow::Continue(())
    }

    fn on_landing(&mut self, t: f64, state: usize, x: &[f64]) {
        self.samples.push(Sample {
            t,
            state,
            x: x.to_vec(),
        });
    }
}

fn simulate_indexed(cfg: &PdmpConfig, index: u64) -> Result<Trajectory, SimError> {
    let mut rng = stream_rng(cfg.seed, index);
    let mut rec = TrajectoryRecorder {
        states: vec![cfg.i0],
        starts: vec![0.0],
        positions: vec![cfg.x0.clone()],
        samples: Vec::new(),
    };
    let landings = Landings {
        record_from: 0.0,
        output_dt: cfg.output_dt,
    };
    let mut walker = Walker::new(&cfg.fields, &cfg.rates, Some(&cfg.bbox), cfg.step);
    let end = walker.walk(&cfg.x0, cfg.i0, cfg.horizon, landings, &mut rng, &mut rec)?;
    let mut holds: Vec<f64> = rec.starts.windows(2).map(|w| w[1] - w[0]).collect();
    holds.push(end.time - rec.starts.last().copied().unwrap_or(0.0));
    if cfg.output_dt.is_none() {
        rec.samples.clear();
    }
    Ok(Trajectory {
        record: SwitchingRecord {
            start_state: cfg.i0,
            states: rec.states,
            holds,
        },
        jump_times: rec.starts,
        jump_positions: rec.positions,
        samples: rec.samples,
        final_position: end.position,
    })
}

/// Simulates trajectory 0 of `cfg`'s seed family over `[0, horizon]`.
pub fn simulate(cfg: &PdmpConfig) -> Result<Trajectory, SimError> {
    cfg.validate()?;
    simulate_indexed(cfg, 0)
}

/// Runs `run` over fixed index chunks of `0..count` on `workers` threads
/// and folds the chunk results in index order, so the outcome is the same
/// for every worker count.
pub fn map_reduce_chunks<T, A>(
    count: usize,
    workers: usize,
    run: impl Fn(Range<usize>) -> T + Sync,
    init: A,
    mut fold: impl FnMut(A, T) -> A,
) -> A
where
    T: Send,
{
    if count == 0 {
        return init;
    }
    let chunk = count.div_ceil(MAX_CHUNKS);
    let ranges: Vec<Range<usize>> = (0..count).step_by(chunk).map(|s| s..(s + chunk).min(count)).collect();
    let results: Vec<T> = if workers <= 1 {
        ranges.into_iter().map(&run).collect()
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            Ok(pool) => pool.install(|| ranges.into_par_iter().map(&run).collect()),
            Err(_) => ranges.into_iter().map(&run).collect(),
        }
    };
    results.into_iter().fold(init, &mut fold)
}

/// Per-trajectory outcome of [`simulate_batch`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectorySummary {
    pub index: usize,
    pub final_time: f64,
    pub final_state: usize,
    pub final_position: Vec<f64>,
    pub jumps: usize,
    /// Time spent in each state after burn-in.
    pub occupation: Vec<f64>,
}

struct SummaryObserver {
    record_from: f64,
    jumps: usize,
    occupation: Vec<f64>,
}

impl Observer for SummaryObserver {
    #[inline]
    fn on_step(&mut self, t: f64, dt: f64, state: usize, _: &[f64], _: &[f64]) -> ControlFlow<()> {
        if t >= self.record_from {
            self.occupation[state] += dt;
        }
        ControlFlow::Continue(())
    }

    fn on_jump(&mut self, _: f64, _: usize, _: usize, _: &[f64]) -> ControlFlow<()> {
        self.jumps += 1;
        ControlFlow::Continue(())
    }
}

/// Runs `observer`-driven trajectories `0..count` of `cfg` and folds their
/// observers in index order.
pub fn run_observed<O, A>(
    cfg: &PdmpConfig,
    count: usize,
    workers: usize,
    make: impl Fn(usize) -> O + Sync,
    init: A,
    mut fold: impl FnMut(A, usize, Result<(O, WalkSummary), SimError>) -> A,
) -> Result<A, SimError>
where
    O: Observer + Send,
{
    cfg.validate()?;
    let record_from = cfg.recording_start()?;
    let landings = Landings {
        record_from,
        output_dt: None,
    };
    let out = map_reduce_chunks(
        count,
        workers,
        |range| {
            let mut walker = Walker::new(&cfg.fields, &cfg.rates, Some(&cfg.bbox), cfg.step);
            range
                .map(|index| {
                    let mut rng = stream_rng(cfg.seed, index as u64);
                    let mut obs = make(index);
                    let res = walker
                        .walk(&cfg.x0, cfg.i0, cfg.horizon, landings, &mut rng, &mut obs)
                        .map(|end| {
                            (
                                obs,
                                WalkSummary {
                                    time: end.time,
                                    state: end.state,
                                    position: end.position,
                                },
                            )
                        });
                    (index, res)
                })
                .collect::<Vec<_>>()
        },
        init,
        |acc, chunk| chunk.into_iter().fold(acc, |a, (i, r)| fold(a, i, r)),
    );
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkSummary {
    pub time: f64,
    pub state: usize,
    pub position: Vec<f64>,
}

/// Independent trajectories `0..count`, each seeded from
/// `stream(seed, index)`. Results are ordered by index.
pub fn simulate_batch(
    cfg: &PdmpConfig,
    count: usize,
    workers: usize,
) -> Result<Vec<Result<TrajectorySummary, SimError>>, SimError> {
    let record_from = cfg.burn_in();
    let n = cfg.n_states();
    run_observed(
        cfg,
        count,
        workers,
        |_| SummaryObserver {
            record_from,
            jumps: 0,
            occupation: vec![0.0; n],
        },
        Vec::with_capacity(count),
        |mut acc, index, res| {
            acc.push(
                res.map(|(obs, end)| TrajectorySummary {
                    index,
                    final_time: end.time,
                    final_state: end.state,
                    final_position: end.position,
                    jumps: obs.jumps,
                    occupation: obs.occupation,
                })
                .map_err(|e| SimError::Trajectory {
                    index,
                    source: Box::new(e),
                }),
            );
            acc
        },
    )
}

/// One excursion between consecutive entries into the marked state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegenerationCycle {
    /// `X_tau` at the entry that opens the cycle.
    pub entry_position: Vec<f64>,
    pub duration: f64,
    /// Sparse occupation over the cycle: `(flat cell index, time)` on the
    /// coarse grid described by [`crate::density::GridSpec`].
    pub occupation: Vec<(usize, f64)>,
}

type SparseOccupation = Vec<(usize, f64)>;

struct RegenerationObserver<'a> {
    record_from: f64,
    mark: usize,
    grid: &'a crate::density::GridSpec,
    wanted: usize,
    cycles: Vec<RegenerationCycle>,
    /// Start time, entry position and sparse occupation of the open cycle.
    open: Option<(f64, Vec<f64>, SparseOccupation)>,
    mid: Vec<f64>,
}

impl Observer for RegenerationObserver<'_> {
    #[inline]
    fn on_step(&mut self, t: f64, dt: f64, state: usize, from: &[f64], to: &[f64]) -> ControlFlow<()> {
        if t < self.record_from {
            return ControlFlow::Continue(());
        }
        if let Some((_, _, occ)) = &mut self.open {
            for (m, (a, b)) in self.mid.iter_mut().zip(from.iter().zip(to)) {
                *m = 0.5 * (a + b);
            }
            let cell = self.grid.flat_index(state, &self.mid);
            match occ.iter_mut().find(|(c, _)| *c == cell) {
                Some((_, w)) => *w += dt,
                None => occ.push((cell, dt)),
            }
        }
        ControlFlow::Continue(())
    }

    fn on_jump(&mut self, t: f64, _from: usize, to: usize, x: &[f64]) -> ControlFlow<()> {
        if t < self.record_from || to != self.mark {
            return ControlFlow::Continue(());
        }
        if let Some((start, pos, occ)) = self.open.take() {
            self.cycles.push(RegenerationCycle {
                entry_position: pos,
                duration: t - start,
                occupation: occ,
            });
            if self.cycles.len() == self.wanted {
                return ControlFlow::Break(());
            }
        }
        self.open = Some((t, x.to_vec(), Vec::new()));
        ControlFlow::Continue(())
    }
}

/// Cycles between successive entries into `mark_state` along one long
/// trajectory (stream 0, after burn-in). The pooled occupation divided by
/// the pooled duration estimates the stationary law.
pub fn regeneration_samples(
    cfg: &PdmpConfig,
    mark_state: usize,
    count: usize,
    grid: &crate::density::GridSpec,
) -> Result<Vec<RegenerationCycle>, SimError> {
    cfg.validate()?;
    cfg.rates.check_state(mark_state)?;
    cfg.rates.check_irreducible()?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let record_from = cfg.burn_in();
    let mut obs = RegenerationObserver {
        record_from,
        mark: mark_state,
        grid,
        wanted: count,
        cycles: Vec::with_capacity(count),
        open: None,
        mid: vec![0.0; cfg.dim()],
    };
    let mut rng = stream_rng(cfg.seed, 0);
    let landings = Landings {
        record_from,
        output_dt: None,
    };
    let mut walker = Walker::new(&cfg.fields, &cfg.rates, Some(&cfg.bbox), cfg.step);
    walker.walk(&cfg.x0, cfg.i0, f64::INFINITY, landings, &mut rng, &mut obs)?;
    Ok(obs.cycles)
}
