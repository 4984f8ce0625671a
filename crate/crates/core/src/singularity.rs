//! Hypotheses of the slow-switching blow-up criterion for a candidate set
//! `Gamma` and state `i`, the threshold `R(Gamma, i)` and the exponent that
//! drives the divergence of the density.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::dsl::EvalError;
use crate::flow::{flow, FlowError};
use crate::liealg::{accessibility_sample, hormander_rank, AccessibilityQuery, LieError, RankReport, RankVerdict};
use crate::pdmp::BoundingBox;
use crate::switching::RateMatrix;
use crate::vecfield::{Field, VectorFieldSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SingularityError {
    #[error("candidate set has no points")]
    EmptyCandidate,
    #[error("state {state} out of range for {count} fields")]
    UnknownState { state: usize, count: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// A finite discretization of a closed set `Gamma`, paired with a state.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct GammaCandidate {
    pub points: Vec<Vec<f64>>,
    pub state: usize,
    /// Radius of the neighbourhood probed for accessibility.
    pub radius: f64,
}

impl GammaCandidate {
    pub fn point(x: Vec<f64>, state: usize, radius: f64) -> Self {
        GammaCandidate {
            points: vec![x],
            state,
            radius,
        }
    }

    fn check(&self) -> Result<usize, SingularityError> {
        let d = self.points.first().ok_or(SingularityError::EmptyCandidate)?.len();
        if self.points.iter().any(|p| p.len() != d) {
            return Err(SingularityError::Dimension(
                "candidate points of different lengths".into(),
            ));
        }
        Ok(d)
    }

    /// Distance from `x` to the nearest sample point.
    pub fn distance(&self, x: &[f64]) -> f64 {
        self.points
            .iter()
            .map(|p| p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceCheck {
    pub pass: bool,
    /// Largest distance from a backward image to the candidate points.
    pub max_deviation: f64,
}

/// Flows every point of `gamma` backward under `field` at `n_times` evenly
/// spaced times in `(0, t_max]` and measures the distance of each image to
/// the discretization. `tol` should cover the gaps between sample points.
pub fn check_backward_invariance(
    gamma: &GammaCandidate,
    field: &dyn Field,
    t_max: f64,
    n_times: usize,
    tol: f64,
    step: f64,
) -> Result<InvarianceCheck, SingularityError> {
    gamma.check()?;
    if !(t_max > 0.0) || n_times == 0 {
        return Err(SingularityError::Parameter(
            "t_max and the number of times must be positive".into(),
        ));
    }
    let dt = t_max / n_times as f64;
    let mut max_dev: f64 = 0.0;
    for p in &gamma.points {
        let mut x = p.clone();
        for _ in 0..n_times {
            x = flow(field, &x, -dt, step)?.endpoint;
            max_dev = max_dev.max(gamma.distance(&x));
        }
    }
    Ok(InvarianceCheck {
        pass: max_dev <= tol,
        max_deviation: max_dev,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RValue {
    /// `min over Gamma of -tr(Dv^i)`.
    pub r: f64,
    /// Whether `sup over Gamma of tr(Dv^i) < 0`.
    pub negative_divergence: bool,
}

#[allow(non_snake_case)]
pub fn compute_R(gamma: &GammaCandidate, field: &dyn Field) -> Result<RValue, SingularityError> {
    gamma.check()?;
    let mut r = f64::INFINITY;
    for p in &gamma.points {
        r = r.min(-field.divergence(p)?);
    }
    Ok(RValue {
        r,
        negative_divergence: r > 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClauseStatus {
    Pass,
    Fail,
    /// Sampling found no evidence; nothing is claimed either way.
    NotWitnessed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    BlowupExpected,
    NoPrediction,
}

/// Settings for [`full_verdict`].
#[derive(Debug, Clone, PartialEq)]
pub struct VerdictOptions {
    pub bbox: BoundingBox,
    pub invariance_t_max: f64,
    pub invariance_times: usize,
    pub invariance_tol: f64,
    /// Start of the accessibility trials.
    pub access_from: Vec<f64>,
    pub access_trials: usize,
    pub access_horizon: f64,
    pub hormander_depth: usize,
    pub rank_tol: f64,
    pub step: f64,
    pub seed: u64,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingularityVerdict {
    pub state: usize,
    pub interior: ClauseStatus,
    pub backward_invariant: ClauseStatus,
    pub accessible_neighbourhood: ClauseStatus,
    pub hormander: ClauseStatus,
    pub negative_divergence: ClauseStatus,
    pub invariance_deviation: f64,
    /// Hit fraction for each probed target in the neighbourhood.
    pub access_fractions: Vec<f64>,
    pub rank_reports: Vec<RankReport>,
    pub r_value: f64,
    pub exit_rate: f64,
    pub inequality_holds: bool,
    pub prediction: Prediction,
}

impl SingularityVerdict {
    pub fn clauses(&self) -> [ClauseStatus; 5] {
        [
            self.interior,
            self.backward_invariant,
            self.accessible_neighbourhood,
            self.hormander,
            self.negative_divergence,
        ]
    }
}

fn status(ok: bool) -> ClauseStatus {
    if ok {
        ClauseStatus::Pass
    } else {
        ClauseStatus::Fail
    }
}

/// Evaluates all five clauses for `(gamma, i)` and combines them with the
/// slow-switching inequality `-Q_ii <= R(Gamma, i)`.
pub fn full_verdict(
    gamma: &GammaCandidate,
    fields: &[VectorFieldSpec],
    q: &RateMatrix,
    opts: &VerdictOptions,
) -> Result<SingularityVerdict, SingularityError> {
    let d = gamma.check()?;
    let i = gamma.state;
    if fields.len() != q.n() {
        return Err(SingularityError::Dimension(format!(
            "{} fields for {} states",
            fields.len(),
            q.n()
        )));
    }
    let field = fields.get(i).ok_or(SingularityError::UnknownState {
        state: i,
        count: fields.len(),
    })?;
    if d != opts.bbox.dim() || opts.access_from.len() != d {
        return Err(SingularityError::Dimension(
            "candidate, box and start point must share a dimension".into(),
        ));
    }
    if !(gamma.radius > 0.0) {
        return Err(SingularityError::Parameter(
            "neighbourhood radius must be positive".into(),
        ));
    }

    let interior = status(gamma.points.iter().all(|p| opts.bbox.depth(p) > 0.0));

    let inv = check_backward_invariance(
        gamma,
        field,
        opts.invariance_t_max,
        opts.invariance_times,
        opts.invariance_tol,
        opts.step,
    )?;

    // Targets: each point and its offsets by the radius along every axis,
    // each hit within half the radius.
    let mut access_fractions = Vec::new();
    for p in &gamma.points {
        let mut targets = vec![p.clone()];
        for k in 0..d {
            for s in [-1.0, 1.0] {
                let mut t = p.clone();
                t[k] += s * gamma.radius;
                targets.push(t);
            }
        }
        for (n, target) in targets.into_iter().enumerate() {
            let query = AccessibilityQuery {
                x: opts.access_from.clone(),
                i0: i,
                target,
                radius: 0.5 * gamma.radius,
                trials: opts.access_trials,
                horizon: opts.access_horizon,
                step: opts.step,
                seed: opts.seed.wrapping_add(n as u64),
            };
            access_fractions.push(accessibility_sample(fields, q, &query, opts.workers)?);
        }
    }
    let accessible = if access_fractions.iter().all(|f| *f > 0.0) {
        ClauseStatus::Pass
    } else {
        ClauseStatus::NotWitnessed
    };

    let rank_reports = gamma
        .points
        .iter()
        .map(|p| hormander_rank(fields, p, opts.hormander_depth, opts.rank_tol))
        .collect::<Result<Vec<_>, _>>()?;
    let hormander = status(rank_reports.iter().all(|r| r.verdict == RankVerdict::Full));

    let r = compute_R(gamma, field)?;
    let exit_rate = q.exit_rate(i);
    let inequality_holds = exit_rate <= r.r;
    let mut verdict = SingularityVerdict {
        state: i,
        interior,
        backward_invariant: status(inv.pass),
        accessible_neighbourhood: accessible,
        hormander,
        negative_divergence: status(r.negative_divergence),
        invariance_deviation: inv.max_deviation,
        access_fractions,
        rank_reports,
        r_value: r.r,
        exit_rate,
        inequality_holds,
        prediction: Prediction::NoPrediction,
    };
    if verdict.clauses().iter().all(|c| *c == ClauseStatus::Pass) && inequality_holds {
        verdict.prediction = Prediction::BlowupExpected;
    }
    Ok(verdict)
}

/// `s -> Q_ii s - int_0^s tr(Dv^i(phi^i_{-r}(y))) dr` at `n + 1` evenly
/// spaced `s` in `[0, s_max]`. This is the log of `e^{Q_ii s} det(D phi^i_{-s}(y))`,
/// the weight with which mass near the backward orbit feeds the density at
/// `y`. The orbit and the integral are advanced together by RK4.
pub fn blowup_exponent(
    y: &[f64],
    field: &dyn Field,
    q_ii: f64,
    s_max: f64,
    n: usize,
    step: f64,
) -> Result<Vec<(f64, f64)>, SingularityError> {
    if !(s_max > 0.0) || n == 0 || !(step > 0.0) {
        return Err(SingularityError::Parameter(
            "s_max, sample count and step must be positive".into(),
        ));
    }
    if y.len() != field.dim() {
        return Err(SingularityError::Dimension(format!(
            "point has {} coordinates, field has {}",
            y.len(),
            field.dim()
        )));
    }
    let d = y.len();
    // z = (x, c) with x' = -v(x), c' = tr Dv(x).
    let rhs = |z: &[f64]| -> Result<Vec<f64>, EvalError> {
        let x = &z[..d];
        let mut out: Vec<f64> = field.eval(x)?.into_iter().map(|v| -v).collect();
        out.push(field.divergence(x)?);
        Ok(out)
    };
    let axpy = |z: &[f64], k: &[f64], h: f64| -> Vec<f64> { z.iter().zip(k).map(|(a, b)| a + h * b).collect() };
    let mut z = y.to_vec();
    z.push(0.0);
    let ds = s_max / n as f64;
    let mut out = vec![(0.0, 0.0)];
    for m in 1..=n {
        let steps = (ds / step).ceil().max(1.0) as usize;
        let h = ds / steps as f64;
        for _ in 0..steps {
            let k1 = rhs(&z)?;
            let k2 = rhs(&axpy(&z, &k1, h / 2.0))?;
            let k3 = rhs(&axpy(&z, &k2, h / 2.0))?;
            let k4 = rhs(&axpy(&z, &k3, h))?;
            for j in 0..=d {
                z[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(FlowError::NonFinite.into());
        }
        let s = m as f64 * ds;
        out.push((s, q_ii * s - z[d]));
    }
    Ok(out)
}

/// Backward-orbit Jacobian determinant check used in tests: the log of
/// `det D phi_{-s}` equals minus the integrated divergence.
#[doc(hidden)]
pub fn log_det_backward(field: &dyn Field, y: &[f64], s: f64, step: f64) -> Result<f64, SingularityError> {
    let r = crate::flow::flow_with_jacobian(field, y, -s, step)?;
    let jac: DMatrix<f64> = r.jacobian.expect("variational flow carries a Jacobian");
    Ok(jac.determinant().abs().ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example;
    use crate::liealg::DEFAULT_RANK_TOL;

    fn origin() -> GammaCandidate {
        GammaCandidate::point(vec![0.0, 0.0], example::STATE_V, 0.01)
    }

    fn options() -> VerdictOptions {
        VerdictOptions {
            bbox: example::bounding_box(),
            invariance_t_max: 5.0,
            invariance_times: 20,
            invariance_tol: 1e-9,
            access_from: vec![0.3, -0.2],
            access_trials: 300,
            access_horizon: 100.0,
            hormander_depth: 1,
            rank_tol: DEFAULT_RANK_TOL,
            step: 0.01,
            seed: 5,
            workers: 1,
        }
    }

    #[test]
    fn invariance_examples() {
        let inv = check_backward_invariance(&origin(), &example::field_v(), 5.0, 10, 1e-9, 1e-3).unwrap();
        assert!(inv.pass && inv.max_deviation == 0.0);
        let e0 = GammaCandidate::point(example::E0.to_vec(), example::STATE_W, 0.1);
        assert!(
            check_backward_invariance(&e0, &example::field_w(), 5.0, 10, 1e-9, 1e-3)
                .unwrap()
                .pass
        );
        // Backward flow of w from 0 is e0 + e^t (0 - e0), leaving 0.
        let inv = check_backward_invariance(&origin(), &example::field_w(), 1.0, 10, 1e-3, 1e-3).unwrap();
        assert!(!inv.pass);
        assert!((inv.max_deviation - (1f64.exp() - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn r_values() {
        assert_eq!(compute_R(&origin(), &example::field_v()).unwrap().r, 2.0);
        let anywhere = GammaCandidate {
            points: vec![vec![0.3, -0.2], vec![-0.5, 0.1]],
            state: 1,
            radius: 0.1,
        };
        assert_eq!(compute_R(&anywhere, &example::field_w()).unwrap().r, 2.0);
        let expanding = VectorFieldSpec::expression("e", &["x1", "x2"]).unwrap();
        let r = compute_R(&origin(), &expanding).unwrap();
        assert_eq!(r.r, -2.0);
        assert!(!r.negative_divergence);
    }

    #[test]
    fn example_slow_switching_predicts_blowup() {
        let q = example::rates(1.5, 2.0, 1.0).unwrap();
        let v = full_verdict(&origin(), &example::fields(), &q, &options()).unwrap();
        assert_eq!(v.clauses(), [ClauseStatus::Pass; 5], "{v:?}");
        assert_eq!(v.r_value, 2.0);
        assert_eq!(v.exit_rate, 1.5);
        assert_eq!(v.prediction, Prediction::BlowupExpected);
    }

    #[test]
    fn fast_exit_gives_no_prediction() {
        let q = example::rates(10.0, 2.0, 1.0).unwrap();
        let v = full_verdict(&origin(), &example::fields(), &q, &options()).unwrap();
        assert!(!v.inequality_holds);
        assert_eq!(v.prediction, Prediction::NoPrediction);
    }

    #[test]
    fn verdict_is_monotone_in_exit_rate() {
        let opts = options();
        for (slow, fast) in [(0.5, 1.5), (1.0, 2.0), (1.9, 2.0)] {
            let a = full_verdict(
                &origin(),
                &example::fields(),
                &example::rates(slow, 2.0, 1.0).unwrap(),
                &opts,
            )
            .unwrap();
            let b = full_verdict(
                &origin(),
                &example::fields(),
                &example::rates(fast, 2.0, 1.0).unwrap(),
                &opts,
            )
            .unwrap();
            if b.prediction == Prediction::BlowupExpected {
                assert_eq!(a.prediction, Prediction::BlowupExpected);
            }
        }
    }

    #[test]
    fn positive_divergence_point_fails_clause_five() {
        let fields = vec![
            VectorFieldSpec::expression("s", &["x1 - x1^3", "x2 - x2^3 + 0.2"]).unwrap(),
            example::field_w(),
        ];
        let gamma = GammaCandidate::point(vec![0.0, 0.0], 0, 0.1);
        let q = example::rates(1.5, 2.0, 1.0).unwrap();
        let mut opts = options();
        opts.access_trials = 20;
        opts.access_horizon = 5.0;
        let v = full_verdict(&gamma, &fields, &q, &opts).unwrap();
        assert_eq!(v.negative_divergence, ClauseStatus::Fail);
        assert_eq!(v.prediction, Prediction::NoPrediction);
    }

    #[test]
    fn unreached_neighbourhood_is_not_witnessed() {
        let q = example::rates(1.5, 2.0, 1.0).unwrap();
        let mut opts = options();
        opts.access_horizon = 0.0;
        let v = full_verdict(&origin(), &example::fields(), &q, &opts).unwrap();
        assert_eq!(v.accessible_neighbourhood, ClauseStatus::NotWitnessed);
        assert_eq!(v.prediction, Prediction::NoPrediction);
    }

    #[test]
    fn exponent_examples() {
        let v = example::field_v();
        for (q_ii, slope) in [(-2.0, 0.0), (-1.0, 1.0), (-4.0, -2.0)] {
            let samples = blowup_exponent(&[0.0, 0.0], &v, q_ii, 3.0, 6, 1e-3).unwrap();
            assert_eq!(samples[0], (0.0, 0.0));
            for (s, e) in samples {
                assert!((e - slope * s).abs() < 1e-12, "{q_ii}: {s} -> {e}");
            }
        }
    }

    #[test]
    fn exponent_matches_backward_jacobian() {
        let f = VectorFieldSpec::expression("f", &["-x1 + 0.3*sin(x2)", "-0.5*x2 + 0.2*x1^2"]).unwrap();
        let y = [0.4, -0.3];
        let samples = blowup_exponent(&y, &f, -1.2, 1.0, 4, 1e-3).unwrap();
        for &(s, e) in &samples[1..] {
            let log_det = log_det_backward(&f, &y, s, 1e-3).unwrap();
            assert!(
                (e - (-1.2 * s + log_det)).abs() < 1e-8,
                "{s}: {e} vs {}",
                -1.2 * s + log_det
            );
        }
    }
}
