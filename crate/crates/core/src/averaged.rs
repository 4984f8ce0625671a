//! The averaged field `sum_i w_i v^i` with stationary weights, its
//! attractor estimated by advecting a point cloud, and membership of the
//! rate matrix in the class where the 1-Hörmander condition holds on the
//! attractor.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dsl::EvalError;
use crate::flow::{flow, FlowError};
use crate::liealg::{hormander_rank, LieError, RankReport, RankVerdict};
use crate::pdmp::BoundingBox;
use crate::rng::stream_rng;
use crate::switching::{stationary_law, RateError, RateMatrix};
use crate::vecfield::{Field, Jacobian, VectorFieldSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AveragedError {
    #[error(transparent)]
    Rates(#[from] RateError),
    #[error("{fields} fields for a {states}-state rate matrix")]
    Count { fields: usize, states: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("sample count must be positive")]
    NoSamples,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("cloud point {point:?} left the box at iteration {iteration}")]
    CloudExit { iteration: usize, point: Vec<f64> },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// `x -> sum_i weights[i] v^i(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedField {
    fields: Vec<VectorFieldSpec>,
    weights: Vec<f64>,
}

impl AveragedField {
    pub fn with_weights(fields: Vec<VectorFieldSpec>, weights: Vec<f64>) -> Result<Self, AveragedError> {
        let d = fields.first().map(|f| f.dim()).ok_or(AveragedError::Count {
            fields: 0,
            states: weights.len(),
        })?;
        if fields.len() != weights.len() {
            return Err(AveragedError::Count {
                fields: fields.len(),
                states: weights.len(),
            });
        }
        if fields.iter().any(|f| f.dim() != d) {
            return Err(AveragedError::Dimension("fields of different dimensions".into()));
        }
        Ok(AveragedField { fields, weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// The averaged field with the stationary law of `q` as weights.
pub fn averaged_field(fields: &[VectorFieldSpec], q: &RateMatrix) -> Result<AveragedField, AveragedError> {
    if fields.len() != q.n() {
        return Err(AveragedError::Count {
            fields: fields.len(),
            states: q.n(),
        });
    }
    let law = stationary_law(q)?;
    AveragedField::with_weights(fields.to_vec(), law.weights)
}

impl Field for AveragedField {
    fn dim(&self) -> usize {
        self.fields[0].dim()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut buf = vec![0.0; out.len()];
        for (f, w) in self.fields.iter().zip(&self.weights) {
            f.eval_into(x, &mut buf)?;
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += w * b;
            }
        }
        Ok(())
    }

    fn jacobian(&self, x: &[f64]) -> Result<Jacobian, EvalError> {
        let d = self.dim();
        let mut jac = Jacobian::zeros(d, d);
        for (f, w) in self.fields.iter().zip(&self.weights) {
            jac += f.jacobian(x)? * *w;
        }
        Ok(jac)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttractorParams {
    pub samples: usize,
    /// Advection time per iteration.
    pub t_step: f64,
    pub max_iters: usize,
    /// Stop once the one-sided Hausdorff decrement drops below this.
    pub tol: f64,
    pub seed: u64,
    /// RK4 step.
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttractorEstimate {
    pub points: Vec<Vec<f64>>,
    /// Total advection time applied to the cloud.
    pub time: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diameter: f64,
    /// `sup_{p in previous cloud} dist(p, current cloud)` per iteration.
    pub decrements: Vec<f64>,
}

impl AttractorEstimate {
    pub fn centroid(&self) -> Vec<f64> {
        let n = self.points.len() as f64;
        let d = self.points.first().map_or(0, Vec::len);
        (0..d)
            .map(|k| self.points.iter().map(|p| p[k]).sum::<f64>() / n)
            .collect()
    }

    /// Largest distance from a cloud point to `x`.
    pub fn max_distance_to(&self, x: &[f64]) -> f64 {
        self.points.iter().map(|p| dist(p, x)).fold(0.0, f64::max)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn one_sided_hausdorff(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    from.par_iter()
        .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .reduce(|| 0.0, f64::max)
}

fn diameter(points: &[Vec<f64>]) -> f64 {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| points[i + 1..].iter().map(|q| dist(p, q)).fold(0.0, f64::max))
        .reduce(|| 0.0, f64::max)
}

/// Seeds a uniform cloud in `bbox` and applies the time-`t_step` flow of
/// `field` until the cloud stops shrinking. The result is an outer
/// approximation of the attractor once the transient has passed.
pub fn attractor_estimate<F: Field>(
    field: &F,
    bbox: &BoundingBox,
    params: &AttractorParams,
) -> Result<AttractorEstimate, AveragedError> {
    if params.samples == 0 {
        return Err(AveragedError::NoSamples);
    }
    if field.dim() != bbox.dim() {
        return Err(AveragedError::Dimension(format!(
            "field has dimension {}, box has {}",
            field.dim(),
            bbox.dim()
        )));
    }
    if !(params.t_step > 0.0) || !(params.step > 0.0) || params.tol.is_nan() {
        return Err(AveragedError::Parameter("t_step and step must be positive".into()));
    }
    let mut rng = stream_rng(params.seed, 0);
    let mut cloud: Vec<Vec<f64>> = (0..params.samples)
        .map(|_| {
            (0..bbox.dim())
                .map(|k| bbox.lower()[k] + rng.random::<f64>() * bbox.extent(k))
                .collect()
        })
        .collect();
    let mut decrements = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iters {
        iterations += 1;
        let next = cloud
            .par_iter()
            .map(|p| flow(field, p, params.t_step, params.step).map(|r| r.endpoint))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(p) = next.iter().find(|p| !bbox.contains(p)) {
            return Err(AveragedError::CloudExit {
                iteration: iterations,
                point: p.clone(),
            });
        }
        let dec = one_sided_hausdorff(&cloud, &next);
        decrements.push(dec);
        cloud = next;
        if dec < params.tol {
            converged = true;
            break;
        }
    }
    Ok(AttractorEstimate {
        diameter: diameter(&cloud),
        points: cloud,
        time: iterations as f64 * params.t_step,
        iterations,
        converged,
        decrements,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Q0Report {
    pub member: bool,
    pub delta: f64,
    pub reports: Vec<RankReport>,
}

/// Default dilation margin: 5% of the box diagonal.
pub fn default_margin(bbox: &BoundingBox) -> f64 {
    0.05 * bbox.diagonal()
}

/// Runs the Hörmander rank test at `depth` on every cloud point and on its
/// offsets `p +- delta e_k`. Member iff every test has full rank.
pub fn q0_membership(
    fields: &[VectorFieldSpec],
    attractor: &AttractorEstimate,
    depth: usize,
    rank_tol: f64,
    delta: f64,
) -> Result<Q0Report, AveragedError> {
    if attractor.points.is_empty() {
        return Err(AveragedError::NoSamples);
    }
    if !(delta >= 0.0) {
        return Err(AveragedError::Parameter(format!(
            "margin must be non-negative, got {delta}"
        )));
    }
    let mut probes = Vec::new();
    for p in &attractor.points {
        probes.push(p.clone());
        if delta > 0.0 {
            for k in 0..p.len() {
                for s in [-1.0, 1.0] {
                    let mut q = p.clone();
                    q[k] += s * delta;
                    probes.push(q);
                }
            }
        }
    }
    let reports = probes
        .par_iter()
        .map(|p| hormander_rank(fields, p, depth, rank_tol))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Q0Report {
        member: reports.iter().all(|r| r.verdict == RankVerdict::Full),
        delta,
        reports,
    })
}
