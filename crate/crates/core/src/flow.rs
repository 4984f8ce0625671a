//! Flow maps `phi^i_t`, their compositions along a switching word, and
//! density transport along a fixed switching record.
//!
//! Integration is classical fixed-step RK4. A flow of duration `t` takes
//! `floor(|t|/step)` full steps and one shortened step, so endpoints land
//! exactly on segment ends. Negative `t` integrates `-v`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dsl::EvalError;
use crate::switching::SwitchingRecord;
use crate::vecfield::Field;

pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("field evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("state became non-finite")]
    NonFinite,
    #[error("step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("time must be finite")]
    BadTime,
    #[error("{states} states but {times} durations")]
    LengthMismatch { states: usize, times: usize },
    #[error("segment durations must be non-negative, got {0}")]
    NegativeDuration(f64),
    #[error("state index {0} has no field")]
    UnknownState(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub endpoint: Vec<f64>,
    pub jacobian: Option<DMatrix<f64>>,
    pub log_jacobian_det: Option<f64>,
}

impl FlowResult {
    fn with_jacobian(endpoint: Vec<f64>, jac: DMatrix<f64>) -> Self {
        let log_det = jac.clone().lu().determinant().abs().ln();
        FlowResult {
            endpoint,
            jacobian: Some(jac),
            log_jacobian_det: Some(log_det),
        }
    }
}

/// Step sizes covering `duration` with full steps then one remainder.
pub(crate) fn step_sizes(duration: f64, step: f64) -> impl Iterator<Item = f64> {
    let full = (duration / step).floor();
    let rem = duration - full * step;
    let last = if rem > 0.0 { Some(rem) } else { None };
    std::iter::repeat_n(step, full as usize).chain(last)
}

/// RK4 scratch space for a `d`-dimensional state.
#[derive(Debug, Clone)]
pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(d: usize) -> Self {
        Rk4 {
            k1: vec![0.0; d],
            k2: vec![0.0; d],
            k3: vec![0.0; d],
            k4: vec![0.0; d],
            tmp: vec![0.0; d],
        }
    }

    /// One step of `x' = sign * f(x)` with size `h`.
    #[inline]
    pub(crate) fn step<F: Field + ?Sized>(&mut self, f: &F, sign: f64, x: &mut [f64], h: f64) -> Result<(), EvalError> {
        let hh = sign * h;
        f.eval_into(x, &mut self.k1)?;
        for ((t, &xi), &k) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k1) {
            *t = xi + 0.5 * hh * k;
        }
        f.eval_into(&self.tmp, &mut self.k2)?;
        for ((t, &xi), &k) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k2) {
            *t = xi + 0.5 * hh * k;
        }
        f.eval_into(&self.tmp, &mut self.k3)?;
        for ((t, &xi), &k) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k3) {
            *t = xi + hh * k;
        }
        f.eval_into(&self.tmp, &mut self.k4)?;
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += hh / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        Ok(())
    }
}

fn check_step(step: f64) -> Result<(), FlowError> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(FlowError::BadStep(step))
    }
}

fn check_finite(x: &[f64]) -> Result<(), FlowError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FlowError::NonFinite)
    }
}

/// Endpoint of `phi_t(x)`.
pub fn flow<F: Field + ?Sized>(f: &F, x: &[f64], t: f64, step: f64) -> Result<FlowResult, FlowError> {
    check_step(step)?;
    if !t.is_finite() {
        return Err(FlowError::BadTime);
    }
    let sign = if t < 0.0 { -1.0 } else { 1.0 };
    let mut state = x.to_vec();
    let mut rk = Rk4::new(x.len());
    for h in step_sizes(t.abs(), step) {
        rk.step(f, sign, &mut state, h)?;
        check_finite(&state)?;
    }
    Ok(FlowResult {
        endpoint: state,
        jacobian: None,
        log_jacobian_det: None,
    })
}

/// Time derivative of the joint state `(x, Y)` under `x' = s v(x)`,
/// `Y' = s Dv(x) Y`.
fn variational_rhs<F: Field + ?Sized>(f: &F, sign: f64, d: usize, z: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
    let (x, y) = z.split_at(d);
    let (ox, oy) = out.split_at_mut(d);
    f.eval_into(x, ox)?;
    ox.iter_mut().for_each(|v| *v *= sign);
    let jac = f.jacobian(x)?;
    // Y stored row-major.
    for r in 0..d {
        for c in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += jac[(r, k)] * y[k * d + c];
            }
            oy[r * d + c] = sign * acc;
        }
    }
    Ok(())
}

/// `phi_t(x)` together with `D phi_t(x)` from the variational equation,
/// integrated with the same RK4 steps.
pub fn flow_with_jacobian<F: Field + ?Sized>(f: &F, x: &[f64], t: f64, step: f64) -> Result<FlowResult, FlowError> {
    check_step(step)?;
    if !t.is_finite() {
        return Err(FlowError::BadTime);
    }
    let d = x.len();
    let sign = if t < 0.0 { -1.0 } else { 1.0 };
    let n = d + d * d;
    let mut z = vec![0.0; n];
    z[..d].copy_from_slice(x);
    for i in 0..d {
        z[d + i * d + i] = 1.0;
    }
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for h in step_sizes(t.abs(), step) {
        variational_rhs(f, sign, d, &z, &mut k1)?;
        for i in 0..n {
            tmp[i] = z[i] + 0.5 * h * k1[i];
        }
        variational_rhs(f, sign, d, &tmp, &mut k2)?;
        for i in 0..n {
            tmp[i] = z[i] + 0.5 * h * k2[i];
        }
        variational_rhs(f, sign, d, &tmp, &mut k3)?;
        for i in 0..n {
            tmp[i] = z[i] + h * k3[i];
        }
        variational_rhs(f, sign, d, &tmp, &mut k4)?;
        for i in 0..n {
            z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        check_finite(&z)?;
    }
    let jac = DMatrix::from_row_slice(d, d, &z[d..]);
    z.truncate(d);
    Ok(FlowResult::with_jacobian(z, jac))
}

/// Matrix exponential by scaling and squaring of the Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = m / 2f64.powi(squarings);
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=30 {
        term = &term * &scaled / k as f64;
        result += &term;
        if term.amax() <= f64::EPSILON * 1e-3 * result.amax() {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Exact flow of `x' = A x + b`: the exponential of the augmented
/// `(d+1)x(d+1)` matrix `[[A, b], [0, 0]]` scaled by `t`.
pub fn affine_flow(a: &DMatrix<f64>, b: &[f64], x: &[f64], t: f64) -> FlowResult {
    let d = b.len();
    let mut aug = DMatrix::zeros(d + 1, d + 1);
    aug.view_mut((0, 0), (d, d)).copy_from(a);
    for i in 0..d {
        aug[(i, d)] = b[i];
    }
    let e = expm(&(aug * t));
    let xs = DVector::from_column_slice(x);
    let top = e.view((0, 0), (d, d)).into_owned();
    let shift = e.view((0, d), (d, 1)).into_owned();
    let end = &top * xs + shift;
    FlowResult::with_jacobian(end.iter().copied().collect(), top)
}

fn check_word(n_fields: usize, states: &[usize], times: &[f64]) -> Result<(), FlowError> {
    if states.len() != times.len() {
        return Err(FlowError::LengthMismatch {
            states: states.len(),
            times: times.len(),
        });
    }
    if let Some(&s) = states.iter().find(|&&s| s >= n_fields) {
        return Err(FlowError::UnknownState(s));
    }
    Ok(())
}

/// `phi^{i_l}_{t_l} o ... o phi^{i_1}_{t_1}(x)`; with `jacobian` the
/// chain-rule product of the segment Jacobians is returned too.
pub fn composite_flow<F: Field>(
    fields: &[F],
    states: &[usize],
    times: &[f64],
    x: &[f64],
    step: f64,
    jacobian: bool,
) -> Result<FlowResult, FlowError> {
    check_word(fields.len(), states, times)?;
    if let Some(&t) = times.iter().find(|&&t| t < 0.0) {
        return Err(FlowError::NegativeDuration(t));
    }
    apply_word(
        fields,
        states.iter().copied().zip(times.iter().copied()),
        x,
        step,
        jacobian,
    )
}

/// The reversed map `phi^{i_1}_{-t_1} o ... o phi^{i_l}_{-t_l}`, which
/// undoes [`composite_flow`].
pub fn reverse_composite_flow<F: Field>(
    fields: &[F],
    states: &[usize],
    times: &[f64],
    y: &[f64],
    step: f64,
    jacobian: bool,
) -> Result<FlowResult, FlowError> {
    check_word(fields.len(), states, times)?;
    if let Some(&t) = times.iter().find(|&&t| t < 0.0) {
        return Err(FlowError::NegativeDuration(t));
    }
    let segs = states.iter().copied().zip(times.iter().map(|t| -t)).rev();
    apply_word(fields, segs, y, step, jacobian)
}

fn apply_word<F: Field>(
    fields: &[F],
    segments: impl Iterator<Item = (usize, f64)>,
    x: &[f64],
    step: f64,
    jacobian: bool,
) -> Result<FlowResult, FlowError> {
    let d = x.len();
    let mut point = x.to_vec();
    let mut jac = DMatrix::identity(d, d);
    for (s, t) in segments {
        if jacobian {
            let r = flow_with_jacobian(&fields[s], &point, t, step)?;
            jac = r.jacobian.expect("variational flow carries a Jacobian") * jac;
            point = r.endpoint;
        } else {
            point = flow(&fields[s], &point, t, step)?.endpoint;
        }
    }
    if jacobian {
        Ok(FlowResult::with_jacobian(point, jac))
    } else {
        check_step(step)?;
        Ok(FlowResult {
            endpoint: point,
            jacobian: None,
            log_jacobian_det: None,
        })
    }
}

/// Density at `y` after transporting `rho0` along `record`:
/// `rho0(Phi^{-1}(y)) |det D Phi^{-1}(y)|`.
pub fn transport_density<F: Field>(
    fields: &[F],
    record: &SwitchingRecord,
    rho0: &dyn Fn(&[f64]) -> f64,
    y: &[f64],
    step: f64,
) -> Result<f64, FlowError> {
    let back = reverse_composite_flow(fields, &record.states, &record.holds, y, step, true)?;
    let log_det = back.log_jacobian_det.expect("jacobian requested");
    Ok(rho0(&back.endpoint) * log_det.exp())
}
