use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Real-number abstraction every differentiable computation in the crate is
/// written against.
///
/// Implemented by plain `f64`, by [`Dual`](super::Dual) (forward mode) and by
/// [`Var`](super::Var) (reverse mode, over any other `Scalar`). Model code is
/// generic over this trait so that the same source yields values, gradients
/// and Hessian-vector products.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn from_f64(v: f64) -> Self;

    /// Primal value, with all derivative information discarded.
    fn value(&self) -> f64;

    /// True only when every component (primal and any derivative parts) is
    /// zero, so the value can be skipped during accumulation.
    fn is_exact_zero(&self) -> bool;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn square(self) -> Self {
        self * self
    }

    /// Inner product. Reverse-mode variables override this to record a single
    /// n-ary node instead of a chain of binary ones.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = Self::zero();
        for (x, y) in a.iter().zip(b) {
            acc = acc + *x * *y;
        }
        acc
    }

    /// `bias + Σ w[k]·x[k]` where `w` are differentiable and `x` may be too.
    fn affine(bias: Self, w: &[Self], x: &[Self]) -> Self {
        bias + Self::dot(w, x)
    }

    fn sum(xs: &[Self]) -> Self {
        xs.iter().fold(Self::zero(), |acc, x| acc + *x)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn is_exact_zero(&self) -> bool {
        *self == 0.0
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}
