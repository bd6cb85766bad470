use std::ops::{Deref, DerefMut};

use super::{Dual, Scalar, Tape};
use crate::error::{ensure_finite, Error, Result};

/// Flat parameter vector of a model.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `self + scale·other`, elementwise.
    pub fn axpy(&self, scale: f64, other: &[f64]) -> Self {
        debug_assert_eq!(self.len(), other.len());
        Self(self.iter().zip(other).map(|(a, b)| a + scale * b).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// A scalar loss over a parameter vector. The objective owns whatever
/// context (samples, targets, fixed weights) it needs, and must be a pure
/// function of `phi` given that context.
pub trait Objective {
    fn evaluate<S: Scalar>(&self, phi: &[S]) -> S;

    /// Expected parameter count, when the objective is tied to a model.
    fn param_len(&self) -> Option<usize> {
        None
    }

    fn label(&self) -> &str {
        "objective"
    }
}

impl<O: Objective + ?Sized> Objective for &O {
    fn evaluate<S: Scalar>(&self, phi: &[S]) -> S {
        (**self).evaluate(phi)
    }
    fn param_len(&self) -> Option<usize> {
        (**self).param_len()
    }
    fn label(&self) -> &str {
        (**self).label()
    }
}

/// How the Jacobian of the inner step is treated by [`bilevel_gradient`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SecondOrder {
    /// Differentiate through the inner step exactly.
    #[default]
    Exact,
    /// Treat `d probe / d phi` as the identity.
    FirstOrder,
}

impl std::str::FromStr for SecondOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "first" | "first-order" => Ok(Self::FirstOrder),
            other => Err(Error::invalid(format!("unknown second-order mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SecondOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::FirstOrder => "first",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BilevelGradient {
    pub grad: ParamVector,
    pub probe: ParamVector,
}

fn check_len<O: Objective>(obj: &O, phi: &[f64]) -> Result<()> {
    match obj.param_len() {
        Some(n) if n != phi.len() => Err(Error::invalid(format!(
            "{}: expected {n} parameters, got {}",
            obj.label(),
            phi.len()
        ))),
        _ => Ok(()),
    }
}

fn check_vec(term: &str, what: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::numerical(term, format!("{what} entry {i} is {}", v[i]))),
    }
}

pub fn eval_loss<O: Objective>(obj: &O, phi: &[f64]) -> Result<f64> {
    check_len(obj, phi)?;
    ensure_finite(obj.label(), obj.evaluate(phi))
}

pub fn value_and_gradient<O: Objective>(obj: &O, phi: &[f64]) -> Result<(f64, ParamVector)> {
    check_len(obj, phi)?;
    let tape = Tape::<f64>::with_capacity(phi.len() * 4, phi.len() * 8);
    let vars = tape.vars(phi);
    let out = obj.evaluate(&vars);
    let value = ensure_finite(obj.label(), out.value())?;
    let mut adj = tape.adjoints(out);
    adj.truncate(phi.len());
    check_vec(obj.label(), "gradient", &adj)?;
    Ok((value, ParamVector(adj)))
}

pub fn gradient<O: Objective>(obj: &O, phi: &[f64]) -> Result<ParamVector> {
    value_and_gradient(obj, phi).map(|(_, g)| g)
}

/// `H(phi)·v` by forward-over-reverse differentiation: the reverse sweep is
/// run in dual arithmetic seeded with direction `v`.
pub fn hessian_vector_product<O: Objective>(obj: &O, phi: &[f64], v: &[f64]) -> Result<ParamVector> {
    check_len(obj, phi)?;
    if v.len() != phi.len() {
        return Err(Error::invalid(format!(
            "direction has length {}, parameters {}",
            v.len(),
            phi.len()
        )));
    }
    let seeds: Vec<Dual> = phi.iter().zip(v).map(|(p, d)| Dual::new(*p, *d)).collect();
    let tape = Tape::<Dual>::with_capacity(phi.len() * 4, phi.len() * 8);
    let vars = tape.vars(&seeds);
    let out = obj.evaluate(&vars);
    ensure_finite(obj.label(), out.value())?;
    let adj = tape.adjoints(out);
    let hv: Vec<f64> = adj[..phi.len()].iter().map(|d| d.eps).collect();
    check_vec(obj.label(), "Hessian-vector product", &hv)?;
    Ok(ParamVector(hv))
}

/// Gradient of `phi ↦ upper(phi − alpha·∇lower(phi))`.
///
/// In [`SecondOrder::Exact`] mode this is `(I − alpha·H_lower(phi)) ·
/// ∇upper(probe)` (the Hessian is symmetric); in first-order mode it is
/// `∇upper(probe)`. With `alpha == 0` no inner curvature is evaluated and the
/// result is exactly `∇upper(phi)`.
pub fn bilevel_gradient<L: Objective, U: Objective>(
    lower: &L,
    upper: &U,
    phi: &[f64],
    alpha: f64,
    mode: SecondOrder,
) -> Result<BilevelGradient> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid(format!(
            "inner step size must be a finite non-negative number, got {alpha}"
        )));
    }
    let phi = ParamVector(phi.to_vec());
    if alpha == 0.0 {
        let grad = gradient(upper, &phi)?;
        return Ok(BilevelGradient { grad, probe: phi });
    }
    let g_low = gradient(lower, &phi)?;
    let probe = phi.axpy(-alpha, &g_low);
    check_vec(lower.label(), "probe", &probe)?;
    let g_up = gradient(upper, &probe)?;
    let grad = match mode {
        SecondOrder::FirstOrder => g_up,
        SecondOrder::Exact => {
            let hv = hessian_vector_product(lower, &phi, &g_up)?;
            g_up.axpy(-alpha, &hv)
        }
    };
    check_vec(upper.label(), "bilevel gradient", &grad)?;
    Ok(BilevelGradient { grad, probe })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct HalfNormSq;
    impl Objective for HalfNormSq {
        fn evaluate<S: Scalar>(&self, phi: &[S]) -> S {
            S::dot(phi, phi) * 0.5
        }
    }

    struct Constant;
    impl Objective for Constant {
        fn evaluate<S: Scalar>(&self, _phi: &[S]) -> S {
            S::zero()
        }
    }

    /// Non-quadratic test function with a dense Hessian.
    struct Rosenbrockish;
    impl Objective for Rosenbrockish {
        fn evaluate<S: Scalar>(&self, p: &[S]) -> S {
            let mut acc = S::zero();
            for w in p.windows(2) {
                let a = w[1] - w[0] * w[0];
                acc = acc + a * a * 3.0 + (w[0] - 1.0).square() + (w[0] * w[1]).tanh().exp();
            }
            acc + p[0].sin() * p[p.len() - 1].cos()
        }
    }

    struct Nan;
    impl Objective for Nan {
        fn evaluate<S: Scalar>(&self, phi: &[S]) -> S {
            (phi[0] * 0.0 - 1.0).ln()
        }
        fn label(&self) -> &str {
            "nan-term"
        }
    }

    #[test]
    fn half_norm_squared() {
        assert_eq!(eval_loss(&HalfNormSq, &[3.0, 4.0]).unwrap(), 12.5);
        assert_eq!(gradient(&HalfNormSq, &[3.0, 4.0]).unwrap().0, vec![3.0, 4.0]);
    }

    #[test]
    fn constant_objective() {
        assert_eq!(eval_loss(&Constant, &[0.3, -2.0]).unwrap(), 0.0);
        assert_eq!(gradient(&Constant, &[0.3, -2.0]).unwrap().0, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_reports_term() {
        let err = eval_loss(&Nan, &[1.0]).unwrap_err();
        match err {
            Error::Numerical { term, .. } => assert_eq!(term, "nan-term"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hvp_matches_gradient_differences() {
        let phi = [0.3, -0.7, 1.1, 0.2];
        let v = [0.5, 1.0, -0.25, 2.0];
        let hv = hessian_vector_product(&Rosenbrockish, &phi, &v).unwrap();
        let h = 1e-5;
        let plus = gradient(&Rosenbrockish, &ParamVector(phi.to_vec()).axpy(h, &v)).unwrap();
        let minus = gradient(&Rosenbrockish, &ParamVector(phi.to_vec()).axpy(-h, &v)).unwrap();
        for k in 0..phi.len() {
            let fd = (plus[k] - minus[k]) / (2.0 * h);
            assert!((hv[k] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {} {}", hv[k], fd);
        }
    }

    #[test]
    fn quadratic_bilevel_closed_form() {
        let phi = [1.5, -2.0, 0.25];
        let alpha = 0.3;
        let out = bilevel_gradient(&HalfNormSq, &HalfNormSq, &phi, alpha, SecondOrder::Exact).unwrap();
        for (k, p) in phi.iter().enumerate() {
            assert!((out.probe[k] - (1.0 - alpha) * p).abs() < 1e-15);
            assert!((out.grad[k] - (1.0 - alpha).powi(2) * p).abs() < 1e-12);
        }
        let fo = bilevel_gradient(&HalfNormSq, &HalfNormSq, &phi, alpha, SecondOrder::FirstOrder).unwrap();
        for (g, p) in fo.grad.iter().zip(&phi) {
            assert!((g - (1.0 - alpha) * p).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_alpha_is_plain_gradient() {
        let phi = [0.3, -0.7, 1.1];
        let out = bilevel_gradient(&HalfNormSq, &Rosenbrockish, &phi, 0.0, SecondOrder::Exact).unwrap();
        assert_eq!(out.probe.0, phi.to_vec());
        assert_eq!(out.grad, gradient(&Rosenbrockish, &phi).unwrap());
    }

    #[test]
    fn negative_alpha_rejected() {
        let err = bilevel_gradient(&HalfNormSq, &HalfNormSq, &[1.0], -0.1, SecondOrder::Exact);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }
}
