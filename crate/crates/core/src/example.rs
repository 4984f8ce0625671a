//! The built-in two-state planar system: a rotating contraction toward the
//! origin switched with a linear contraction toward `e0 = (1, 0)`.
//!
//! State 0 follows `v(x) = A x` with `A = [[-1, 1], [-1, -1]]`; state 1
//! follows `w(x) = -(x - e0)`. Both fields leave the closed unit disc
//! forward invariant, so the square `[-1, 1]^2` bounds every trajectory
//! started in the disc.

use crate::pdmp::{BoundingBox, PdmpConfig};
use crate::switching::{scale, validate_rate_matrix, RateMatrix};
use crate::vecfield::VectorFieldSpec;

pub const A: [[f64; 2]; 2] = [[-1.0, 1.0], [-1.0, -1.0]];
pub const E0: [f64; 2] = [1.0, 0.0];

/// Index of the rotating field `v`.
pub const STATE_V: usize = 0;
/// Index of the contraction `w`.
pub const STATE_W: usize = 1;

pub fn field_v() -> VectorFieldSpec {
    VectorFieldSpec::linear("v", &[A[0].to_vec(), A[1].to_vec()]).expect("2x2 matrix")
}

/// `w` as a closed-form affine field.
pub fn field_w() -> VectorFieldSpec {
    VectorFieldSpec::affine("w", &[vec![-1.0, 0.0], vec![0.0, -1.0]], &E0).expect("2x2 matrix")
}

/// `w` written in the expression language.
pub fn field_w_expression() -> VectorFieldSpec {
    VectorFieldSpec::expression("w", &["-(x1 - 1)", "-x2"]).expect("valid expressions")
}

pub fn fields() -> Vec<VectorFieldSpec> {
    vec![field_v(), field_w()]
}

pub fn bounding_box() -> BoundingBox {
    BoundingBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).expect("valid box")
}

/// `lambda * [[-q1, q1], [q2, -q2]]`.
pub fn rates(q1: f64, q2: f64, lambda: f64) -> Result<RateMatrix, String> {
    let q = validate_rate_matrix(&[vec![-q1, q1], vec![q2, -q2]])
        .map_err(|errs| errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))?;
    if lambda == 1.0 {
        Ok(q)
    } else {
        scale(&q, lambda).map_err(|e| e.to_string())
    }
}

/// Simulation setup started at the origin in state `v`.
pub fn config(q1: f64, q2: f64, lambda: f64, horizon: f64, step: f64, seed: u64) -> Result<PdmpConfig, String> {
    Ok(PdmpConfig {
        fields: fields(),
        rates: rates(q1, q2, lambda)?,
        bbox: bounding_box(),
        x0: vec![0.0, 0.0],
        i0: STATE_V,
        horizon,
        burn_in: None,
        step,
        seed,
        output_dt: None,
    })
}

/// Equilibrium of the averaged field `p v + (1 - p) w`, where `p` is the
/// stationary weight of state `v`: the solution of `(p A - (1 - p) I) x = -(1 - p) e0`.
pub fn averaged_equilibrium(p: f64) -> [f64; 2] {
    let q = 1.0 - p;
    let m = [[p * A[0][0] - q, p * A[0][1]], [p * A[1][0], p * A[1][1] - q]];
    let rhs = [-q * E0[0], -q * E0[1]];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [
        (rhs[0] * m[1][1] - m[0][1] * rhs[1]) / det,
        (m[0][0] * rhs[1] - m[1][0] * rhs[0]) / det,
    ]
}
