//! Vector fields `v^i : R^d -> R^d` with exact first derivatives.

use nalgebra::DMatrix;

use crate::dsl::{parse_expr, EvalError, ExprAst, ParseError};
use crate::scalar::{Dual, Scalar};

/// Row `r` is the gradient of component `r`.
pub type Jacobian = DMatrix<f64>;

/// Anything that can be evaluated with a Jacobian: generator fields,
/// averaged fields, bracket fields.
pub trait Field: Send + Sync {
    fn dim(&self) -> usize;

    fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), EvalError>;

    fn jacobian(&self, x: &[f64]) -> Result<Jacobian, EvalError>;

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    fn divergence(&self, x: &[f64]) -> Result<f64, EvalError> {
        Ok(self.jacobian(x)?.trace())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldKind {
    /// `x -> A x + b`, `matrix` row-major.
    Affine {
        matrix: Vec<f64>,
        offset: Vec<f64>,
    },
    Expression {
        components: Vec<ExprAst>,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FieldError {
    #[error("field `{label}`: {reason}")]
    Shape { label: String, reason: String },
    #[error("field `{label}` component {component}: {source}")]
    Parse {
        label: String,
        component: usize,
        #[source]
        source: ParseError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldSpec {
    label: String,
    dim: usize,
    kind: FieldKind,
}

/// Value and directional derivative of a field at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct DualVector {
    pub value: Vec<f64>,
    pub derivative: Vec<f64>,
}

impl VectorFieldSpec {
    pub fn affine(label: impl Into<String>, rows: &[Vec<f64>], offset: &[f64]) -> Result<Self, FieldError> {
        let label = label.into();
        let dim = offset.len();
        let shape_err = |reason: String| FieldError::Shape {
            label: label.clone(),
            reason,
        };
        if dim == 0 {
            return Err(shape_err("dimension must be at least 1".into()));
        }
        if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
            return Err(shape_err(format!("matrix must be {dim}x{dim} to match the offset")));
        }
        let matrix: Vec<f64> = rows.iter().flatten().copied().collect();
        if matrix.iter().chain(offset).any(|v| !v.is_finite()) {
            return Err(shape_err("non-finite coefficient".into()));
        }
        Ok(VectorFieldSpec {
            label,
            dim,
            kind: FieldKind::Affine {
                matrix,
                offset: offset.to_vec(),
            },
        })
    }

    pub fn linear(label: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self, FieldError> {
        let zero = vec![0.0; rows.len()];
        Self::affine(label, rows, &zero)
    }

    /// Parses one expression per component over `x1..x{d}`, `d = sources.len()`.
    pub fn expression<S: AsRef<str>>(label: impl Into<String>, sources: &[S]) -> Result<Self, FieldError> {
        let label = label.into();
        let dim = sources.len();
        if dim == 0 {
            return Err(FieldError::Shape {
                label,
                reason: "at least one component is required".into(),
            });
        }
        let components = sources
            .iter()
            .enumerate()
            .map(|(k, s)| {
                parse_expr(s.as_ref(), dim).map_err(|source| FieldError::Parse {
                    label: label.clone(),
                    component: k,
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(VectorFieldSpec {
            label,
            dim,
            kind: FieldKind::Expression { components },
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn kind(&self) -> &FieldKind {
        &self.kind
    }

    pub fn is_affine(&self) -> bool {
        matches!(self.kind, FieldKind::Affine { .. })
    }

    /// Evaluates over any scalar type, so nested directional derivatives
    /// can be taken by passing jets.
    pub fn eval_generic<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>, EvalError> {
        if x.len() != self.dim {
            return Err(EvalError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        match &self.kind {
            FieldKind::Affine { matrix, offset } => Ok(matrix
                .chunks_exact(self.dim)
                .zip(offset)
                .map(|(row, &b)| {
                    row.iter()
                        .zip(x)
                        .fold(S::constant(b), |acc, (&a, xi)| acc + xi.scale(a))
                })
                .collect()),
            FieldKind::Expression { components } => components.iter().map(|c| c.eval(x)).collect(),
        }
    }

    /// Value and derivative along `direction`, in one dual pass.
    pub fn directional(&self, x: &[f64], direction: &[f64]) -> Result<DualVector, EvalError> {
        if direction.len() != self.dim {
            return Err(EvalError::DimensionMismatch {
                expected: self.dim,
                got: direction.len(),
            });
        }
        let duals: Vec<Dual> = x.iter().zip(direction).map(|(&v, &d)| Dual::new(v, d)).collect();
        let out = self.eval_generic(&duals)?;
        Ok(DualVector {
            value: out.iter().map(|d| d.value).collect(),
            derivative: out.iter().map(|d| d.deriv).collect(),
        })
    }
}

impl Field for VectorFieldSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        if x.len() != self.dim || out.len() != self.dim {
            return Err(EvalError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        match &self.kind {
            FieldKind::Affine { matrix, offset } => {
                for ((o, row), &b) in out.iter_mut().zip(matrix.chunks_exact(self.dim)).zip(offset) {
                    *o = row.iter().zip(x).fold(b, |acc, (a, xi)| acc + a * xi);
                }
            }
            FieldKind::Expression { components } => {
                for (o, c) in out.iter_mut().zip(components) {
                    *o = c.eval(x)?;
                }
            }
        }
        Ok(())
    }

    fn jacobian(&self, x: &[f64]) -> Result<Jacobian, EvalError> {
        let d = self.dim;
        match &self.kind {
            FieldKind::Affine { matrix, .. } => {
                if x.len() != d {
                    return Err(EvalError::DimensionMismatch {
                        expected: d,
                        got: x.len(),
                    });
                }
                Ok(DMatrix::from_row_slice(d, d, matrix))
            }
            FieldKind::Expression { .. } => {
                let mut jac = DMatrix::zeros(d, d);
                let mut dir = vec![0.0; d];
                for k in 0..d {
                    dir[k] = 1.0;
                    let dv = self.directional(x, &dir)?;
                    dir[k] = 0.0;
                    for r in 0..d {
                        jac[(r, k)] = dv.derivative[r];
                    }
                }
                Ok(jac)
            }
        }
    }
}

pub fn eval_field(f: &dyn Field, x: &[f64]) -> Result<Vec<f64>, EvalError> {
    f.eval(x)
}

pub fn jacobian(f: &dyn Field, x: &[f64]) -> Result<Jacobian, EvalError> {
    f.jacobian(x)
}

pub fn divergence(f: &dyn Field, x: &[f64]) -> Result<f64, EvalError> {
    f.divergence(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v() -> VectorFieldSpec {
        VectorFieldSpec::linear("v", &[vec![-1.0, 1.0], vec![-1.0, -1.0]]).unwrap()
    }

    fn w() -> VectorFieldSpec {
        VectorFieldSpec::expression("w", &["-(x1-1)", "-x2"]).unwrap()
    }

    #[test]
    fn rotation_field_at_e0() {
        assert_eq!(v().eval(&[1.0, 0.0]).unwrap(), vec![-1.0, -1.0]);
    }

    #[test]
    fn contraction_has_fixed_point_e0() {
        assert_eq!(w().eval(&[1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn eval_error_propagates() {
        let f = VectorFieldSpec::expression("f", &["1/x1", "x2"]).unwrap();
        assert_eq!(f.eval(&[0.0, 1.0]), Err(EvalError::DivisionByZero));
        assert_eq!(f.jacobian(&[0.0, 1.0]), Err(EvalError::DivisionByZero));
    }

    #[test]
    fn jacobians() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, -1.0, -1.0]);
        assert_eq!(v().jacobian(&[0.3, 7.0]).unwrap(), a);
        assert_eq!(w().jacobian(&[0.3, 7.0]).unwrap(), -DMatrix::<f64>::identity(2, 2));
        let p = VectorFieldSpec::expression("p", &["x1*x2", "0"]).unwrap();
        assert_eq!(
            p.jacobian(&[2.0, 3.0]).unwrap(),
            DMatrix::from_row_slice(2, 2, &[3.0, 2.0, 0.0, 0.0])
        );
    }

    #[test]
    fn divergences() {
        assert_eq!(v().divergence(&[0.0, 0.0]).unwrap(), -2.0);
        assert_eq!(w().divergence(&[5.0, -3.0]).unwrap(), -2.0);
        let c = VectorFieldSpec::expression("c", &["1", "2"]).unwrap();
        assert_eq!(c.divergence(&[0.1, 0.2]).unwrap(), 0.0);
    }

    #[test]
    fn shape_errors() {
        assert!(VectorFieldSpec::affine("a", &[vec![1.0]], &[0.0, 0.0]).is_err());
        assert!(VectorFieldSpec::expression("e", &["x3", "x1"]).is_err());
        assert!(VectorFieldSpec::expression::<&str>("e", &[]).is_err());
    }

    #[test]
    fn affine_exact_against_matrix_arithmetic() {
        let rows = vec![vec![0.3, -1.7, 2.0], vec![4.1, 0.0, -0.2], vec![1e-3, 5.0, 0.7]];
        let b = [0.5, -0.25, 3.0];
        let f = VectorFieldSpec::affine("a", &rows, &b).unwrap();
        let x = [0.9, -1.1, 2.5];
        let got = f.eval(&x).unwrap();
        for r in 0..3 {
            let expect = b[r] + rows[r][0] * x[0] + rows[r][1] * x[1] + rows[r][2] * x[2];
            assert_eq!(got[r], expect);
        }
    }

    const SMOOTH_TEMPLATES: [&str; 6] = [
        "sin(A*x1) * x2 + B",
        "exp(A*x2) - x1^2 * B",
        "tanh(x1 + A*x2) * cos(B*x1)",
        "x1*x2*A + x2^3",
        "A / (1 + x1^2) - B*x2",
        "cos(x1*x2) * exp(-B*x1^2) + A*x1",
    ];

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn dual_jacobian_matches_central_differences(
            t1 in 0..6usize, t2 in 0..6usize,
            a in -1.5f64..1.5, b in -1.5f64..1.5,
            x in proptest::array::uniform2(-1.0f64..1.0),
        ) {
            let c1 = SMOOTH_TEMPLATES[t1].replace('A', &format!("({a})")).replace('B', &format!("({b})"));
            let c2 = SMOOTH_TEMPLATES[t2].replace('A', &format!("({b})")).replace('B', &format!("({a})"));
            let f = VectorFieldSpec::expression("f", &[c1, c2]).unwrap();
            let jac = f.jacobian(&x).unwrap();
            let h = 1e-5;
            for k in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                let fp = f.eval(&xp).unwrap();
                let fm = f.eval(&xm).unwrap();
                for r in 0..2 {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    let scale = jac[(r, k)].abs().max(1.0);
                    prop_assert!((fd - jac[(r, k)]).abs() <= 1e-6 * scale,
                        "r={} k={} fd={} dual={}", r, k, fd, jac[(r, k)]);
                }
            }
        }
    }
}
