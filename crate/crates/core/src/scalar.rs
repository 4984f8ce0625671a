//! Scalar types for forward-mode differentiation.
//!
//! [`Dual`] carries one directional derivative and is what Jacobians are
//! built from. [`Jet`] carries any number of independent infinitesimals
//! `e_1..e_k` with `e_i^2 = 0`; nesting directional derivatives (needed for
//! iterated Lie brackets) amounts to adding one more infinitesimal.

use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub};

/// Arithmetic needed by the expression evaluator and the affine fields.
pub trait Scalar:
    Clone + Debug + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    fn constant(v: f64) -> Self;
    /// The real (non-infinitesimal) part.
    fn value(&self) -> f64;
    /// Multiplicative inverse; callers check `value() != 0`.
    fn recip(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;
    fn tanh(&self) -> Self;
    fn all_finite(&self) -> bool;

    fn scale(&self, k: f64) -> Self {
        self.clone() * Self::constant(k)
    }

    /// Integer power by repeated squaring; negative exponents invert first.
    fn powi(&self, n: i32) -> Self {
        let mut base = if n < 0 { self.recip() } else { self.clone() };
        let mut e = n.unsigned_abs();
        let mut acc = Self::constant(1.0);
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * base.clone();
            }
            e >>= 1;
            if e > 0 {
                base = base.clone() * base;
            }
        }
        acc
    }
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn recip(&self) -> Self {
        1.0 / self
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
    fn scale(&self, k: f64) -> Self {
        self * k
    }
    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }
}

/// First-order dual number `value + deriv * e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub value: f64,
    pub deriv: f64,
}

impl Dual {
    pub fn new(value: f64, deriv: f64) -> Self {
        Dual { value, deriv }
    }

    pub fn variable(value: f64) -> Self {
        Dual { value, deriv: 1.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.value + rhs.value, self.deriv + rhs.deriv)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.value - rhs.value, self.deriv - rhs.deriv)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(self.value * rhs.value, self.deriv * rhs.value + self.value * rhs.deriv)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.value, -self.deriv)
    }
}

impl Scalar for Dual {
    fn constant(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn recip(&self) -> Self {
        let r = 1.0 / self.value;
        Dual::new(r, -self.deriv * r * r)
    }
    fn sin(&self) -> Self {
        Dual::new(self.value.sin(), self.deriv * self.value.cos())
    }
    fn cos(&self) -> Self {
        Dual::new(self.value.cos(), -self.deriv * self.value.sin())
    }
    fn exp(&self) -> Self {
        let e = self.value.exp();
        Dual::new(e, self.deriv * e)
    }
    fn tanh(&self) -> Self {
        let t = self.value.tanh();
        Dual::new(t, self.deriv * (1.0 - t * t))
    }
    fn all_finite(&self) -> bool {
        self.value.is_finite() && self.deriv.is_finite()
    }
    fn scale(&self, k: f64) -> Self {
        Dual::new(self.value * k, self.deriv * k)
    }
}

/// Truncated multivariate jet over `order` independent nilpotent
/// infinitesimals. Coefficient `coeffs[mask]` multiplies the product of the
/// infinitesimals whose bits are set in `mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    coeffs: Vec<f64>,
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Jet { coeffs: vec![v] }
    }

    /// Number of infinitesimals carried.
    pub fn order(&self) -> usize {
        self.coeffs.len().trailing_zeros() as usize
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// `self + dir * e_new`, where `e_new` is a fresh infinitesimal with
    /// index `order` (the caller's common order). Both inputs are first
    /// lifted to `order`.
    pub fn with_new_infinitesimal(&self, dir: &Jet, order: usize) -> Jet {
        let base = self.lifted(order);
        let dir = dir.lifted(order);
        let mut coeffs = base.coeffs;
        coeffs.extend_from_slice(&dir.coeffs);
        Jet { coeffs }
    }

    /// Splits off the highest infinitesimal: `(rest, coefficient)`, both
    /// jets in the remaining lower infinitesimals.
    pub fn split_top(&self) -> (Jet, Jet) {
        let half = self.coeffs.len() / 2;
        (
            Jet {
                coeffs: self.coeffs[..half].to_vec(),
            },
            Jet {
                coeffs: self.coeffs[half..].to_vec(),
            },
        )
    }

    /// Zero-pad to `order` infinitesimals.
    pub fn lifted(&self, order: usize) -> Jet {
        let len = 1usize << order;
        if self.coeffs.len() >= len {
            return self.clone();
        }
        let mut coeffs = self.coeffs.clone();
        coeffs.resize(len, 0.0);
        Jet { coeffs }
    }

    fn align(a: &Jet, b: &Jet) -> (Jet, Jet) {
        let order = a.order().max(b.order());
        (a.lifted(order), b.lifted(order))
    }

    /// `f(a0 + n) = sum_m taylor[m] * n^m`, with `taylor[m] = f^(m)(a0)/m!`
    /// and `n` the nilpotent part. `n^(order+1) = 0`, so `order+1` terms
    /// suffice.
    fn apply_taylor(&self, taylor: &[f64]) -> Jet {
        let mut nil = self.clone();
        nil.coeffs[0] = 0.0;
        let mut out = Jet {
            coeffs: vec![0.0; self.coeffs.len()],
        };
        out.coeffs[0] = taylor[0];
        let mut power = Jet {
            coeffs: vec![0.0; self.coeffs.len()],
        };
        power.coeffs[0] = 1.0;
        for &t in taylor.iter().skip(1) {
            power = power * nil.clone();
            for (o, p) in out.coeffs.iter_mut().zip(&power.coeffs) {
                *o += t * p;
            }
        }
        out
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        let (mut a, b) = Jet::align(&self, &rhs);
        for (x, y) in a.coeffs.iter_mut().zip(&b.coeffs) {
            *x += y;
        }
        a
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        let (mut a, b) = Jet::align(&self, &rhs);
        for (x, y) in a.coeffs.iter_mut().zip(&b.coeffs) {
            *x -= y;
        }
        a
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        let (a, b) = Jet::align(&self, &rhs);
        let n = a.coeffs.len();
        let mut coeffs = vec![0.0; n];
        // Subset convolution: c[S] = sum over T subset of S of a[T] b[S \ T].
        for (s, c) in coeffs.iter_mut().enumerate() {
            let mut t = s;
            loop {
                *c += a.coeffs[t] * b.coeffs[s & !t];
                if t == 0 {
                    break;
                }
                t = (t - 1) & s;
            }
        }
        Jet { coeffs }
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(mut self) -> Jet {
        for c in &mut self.coeffs {
            *c = -*c;
        }
        self
    }
}

fn factorials(n: usize) -> Vec<f64> {
    let mut f = vec![1.0; n + 1];
    for k in 1..=n {
        f[k] = f[k - 1] * k as f64;
    }
    f
}

impl Scalar for Jet {
    fn constant(v: f64) -> Self {
        Jet::constant(v)
    }
    fn value(&self) -> f64 {
        self.coeffs[0]
    }
    fn recip(&self) -> Self {
        let a0 = self.coeffs[0];
        let taylor: Vec<f64> = (0..=self.order())
            .map(|m| {
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                sign / a0.powi(m as i32 + 1)
            })
            .collect();
        self.apply_taylor(&taylor)
    }
    fn sin(&self) -> Self {
        let (s, c) = self.coeffs[0].sin_cos();
        let cycle = [s, c, -s, -c];
        let fact = factorials(self.order());
        let taylor: Vec<f64> = (0..=self.order()).map(|m| cycle[m % 4] / fact[m]).collect();
        self.apply_taylor(&taylor)
    }
    fn cos(&self) -> Self {
        let (s, c) = self.coeffs[0].sin_cos();
        let cycle = [c, -s, -c, s];
        let fact = factorials(self.order());
        let taylor: Vec<f64> = (0..=self.order()).map(|m| cycle[m % 4] / fact[m]).collect();
        self.apply_taylor(&taylor)
    }
    fn exp(&self) -> Self {
        let e = self.coeffs[0].exp();
        let fact = factorials(self.order());
        let taylor: Vec<f64> = (0..=self.order()).map(|m| e / fact[m]).collect();
        self.apply_taylor(&taylor)
    }
    fn tanh(&self) -> Self {
        // d^m/dx^m tanh = P_m(tanh x) with P_0(t) = t, P_{m+1} = P_m'(t) (1 - t^2).
        let t = self.coeffs[0].tanh();
        let order = self.order();
        let fact = factorials(order);
        let mut poly = vec![0.0, 1.0];
        let mut taylor = Vec::with_capacity(order + 1);
        for f in &fact[..=order] {
            let val = poly.iter().rev().fold(0.0, |acc, c| acc * t + c);
            taylor.push(val / f);
            let deriv: Vec<f64> = poly.iter().enumerate().skip(1).map(|(k, c)| k as f64 * c).collect();
            let mut next = vec![0.0; deriv.len() + 2];
            for (k, c) in deriv.iter().enumerate() {
                next[k] += c;
                next[k + 2] -= c;
            }
            poly = next;
        }
        self.apply_taylor(&taylor)
    }
    fn all_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }
    fn scale(&self, k: f64) -> Self {
        Jet {
            coeffs: self.coeffs.iter().map(|c| c * k).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(x: f64) -> Jet {
        Jet::constant(x).with_new_infinitesimal(&Jet::constant(1.0), 0)
    }

    #[test]
    fn dual_product_rule() {
        let x = Dual::variable(3.0);
        let y = x * x * x;
        assert_eq!(y.value, 27.0);
        assert_eq!(y.deriv, 27.0);
    }

    #[test]
    fn dual_powi_negative() {
        let x = Dual::variable(2.0);
        let y = x.powi(-2);
        assert!((y.value - 0.25).abs() < 1e-15);
        assert!((y.deriv + 0.25).abs() < 1e-15);
    }

    #[test]
    fn jet_second_derivative_of_cube() {
        // x^3 at 2 with two infinitesimals both along x: coefficient of e1 e2 is 6x = 12.
        let x = var(2.0);
        let x2 = x.with_new_infinitesimal(&Jet::constant(1.0), 1);
        let y = x2.clone() * x2.clone() * x2;
        assert_eq!(y.coeffs(), &[8.0, 12.0, 12.0, 12.0]);
    }

    #[test]
    fn jet_functions_match_closed_form_derivatives() {
        let a = 0.7;
        let x = var(a).with_new_infinitesimal(&Jet::constant(1.0), 1);
        let check = |j: Jet, f0: f64, f1: f64, f2: f64| {
            let c = j.coeffs();
            assert!((c[0] - f0).abs() < 1e-14, "{c:?}");
            assert!((c[1] - f1).abs() < 1e-14, "{c:?}");
            assert!((c[2] - f1).abs() < 1e-14, "{c:?}");
            assert!((c[3] - f2).abs() < 1e-13, "{c:?}");
        };
        check(x.sin(), a.sin(), a.cos(), -a.sin());
        check(x.cos(), a.cos(), -a.sin(), -a.cos());
        check(x.exp(), a.exp(), a.exp(), a.exp());
        let t = a.tanh();
        check(x.tanh(), t, 1.0 - t * t, -2.0 * t * (1.0 - t * t));
        check(x.recip(), 1.0 / a, -1.0 / (a * a), 2.0 / (a * a * a));
    }

    #[test]
    fn jet_lifting_keeps_lower_coefficients() {
        let x = var(1.5);
        let y = x.lifted(2);
        assert_eq!(y.coeffs(), &[1.5, 1.0, 0.0, 0.0]);
        let (lo, hi) = x.split_top();
        assert_eq!(lo.coeffs(), &[1.5]);
        assert_eq!(hi.coeffs(), &[1.0]);
    }
}
