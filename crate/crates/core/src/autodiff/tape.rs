//! Reverse-mode tape.
//!
//! A [`Tape`] records every operation performed on its [`Var`]s as a node
//! holding `(parent, local partial)` edges. The element type is itself a
//! [`Scalar`], so a tape of [`Dual`](super::Dual) numbers yields directional
//! derivatives of the gradient, i.e. Hessian-vector products.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Scalar;

#[derive(Debug, Default)]
struct Nodes<T> {
    /// `offsets[i]..offsets[i + 1]` indexes the edges of node `i`.
    offsets: Vec<usize>,
    edges: Vec<(u32, T)>,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: RefCell<Nodes<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Nodes {
                offsets: vec![0],
                edges: Vec::new(),
            }),
        }
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        let mut offsets = Vec::with_capacity(nodes + 1);
        offsets.push(0);
        Self {
            nodes: RefCell::new(Nodes {
                offsets,
                edges: Vec::with_capacity(edges),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push<I>(&self, edges: I) -> u32
    where
        I: IntoIterator<Item = (u32, T)>,
    {
        let mut n = self.nodes.borrow_mut();
        n.edges.extend(edges);
        let end = n.edges.len();
        n.offsets.push(end);
        (n.offsets.len() - 2) as u32
    }

    /// Registers an independent variable.
    pub fn var(&self, value: T) -> Var<'_, T> {
        let idx = self.push(std::iter::empty());
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    pub fn vars(&self, values: &[T]) -> Vec<Var<'_, T>> {
        values.iter().map(|v| self.var(*v)).collect()
    }

    /// Back-propagates a unit seed from `output` and returns the adjoint of
    /// every node on the tape, indexed by creation order.
    pub fn adjoints(&self, output: Var<'_, T>) -> Vec<T> {
        let n = self.nodes.borrow();
        let count = n.offsets.len() - 1;
        let mut adj = vec![T::zero(); count];
        let Some(tape) = output.tape else {
            return adj;
        };
        debug_assert!(std::ptr::eq(tape, self), "output recorded on another tape");
        adj[output.idx as usize] = T::from_f64(1.0);
        for node in (0..=output.idx as usize).rev() {
            let a = adj[node];
            if a.is_exact_zero() {
                continue;
            }
            for &(parent, partial) in &n.edges[n.offsets[node]..n.offsets[node + 1]] {
                let p = parent as usize;
                adj[p] = adj[p] + a * partial;
            }
        }
        adj
    }
}

/// Reverse-mode variable bound to a [`Tape`]. Constants carry no tape.
#[derive(Clone, Copy, Debug)]
pub struct Var<'t, T> {
    tape: Option<&'t Tape<T>>,
    idx: u32,
    val: T,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn constant(val: T) -> Self {
        Self {
            tape: None,
            idx: 0,
            val,
        }
    }

    pub fn inner(&self) -> T {
        self.val
    }

    pub fn index(&self) -> Option<usize> {
        self.tape.map(|_| self.idx as usize)
    }

    #[inline]
    fn unary(self, val: T, d: T) -> Self {
        match self.tape {
            None => Self::constant(val),
            Some(t) => Self {
                tape: Some(t),
                idx: t.push([(self.idx, d)]),
                val,
            },
        }
    }

    #[inline]
    fn binary(self, other: Self, val: T, da: T, db: T) -> Self {
        match (self.tape, other.tape) {
            (None, None) => Self::constant(val),
            (Some(t), None) => Self {
                tape: Some(t),
                idx: t.push([(self.idx, da)]),
                val,
            },
            (None, Some(t)) => Self {
                tape: Some(t),
                idx: t.push([(other.idx, db)]),
                val,
            },
            (Some(t), Some(u)) => {
                debug_assert!(std::ptr::eq(t, u), "mixing variables of two tapes");
                Self {
                    tape: Some(t),
                    idx: t.push([(self.idx, da), (other.idx, db)]),
                    val,
                }
            }
        }
    }
}

fn common_tape<'t, T>(xs: &[Var<'t, T>]) -> Option<&'t Tape<T>> {
    xs.iter().find_map(|v| v.tape)
}

impl<T: Scalar> Add for Var<'_, T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        let one = T::from_f64(1.0);
        self.binary(o, self.val + o.val, one, one)
    }
}

impl<T: Scalar> Sub for Var<'_, T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.val - o.val, T::from_f64(1.0), T::from_f64(-1.0))
    }
}

impl<T: Scalar> Mul for Var<'_, T> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl<T: Scalar> Div for Var<'_, T> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let q = self.val / o.val;
        let inv = T::from_f64(1.0) / o.val;
        self.binary(o, q, inv, -(q * inv))
    }
}

impl<T: Scalar> Neg for Var<'_, T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.unary(-self.val, T::from_f64(-1.0))
    }
}

impl<T: Scalar> Add<f64> for Var<'_, T> {
    type Output = Self;
    #[inline]
    fn add(self, c: f64) -> Self {
        self.unary(self.val + c, T::from_f64(1.0))
    }
}

impl<T: Scalar> Sub<f64> for Var<'_, T> {
    type Output = Self;
    #[inline]
    fn sub(self, c: f64) -> Self {
        self.unary(self.val - c, T::from_f64(1.0))
    }
}

impl<T: Scalar> Mul<f64> for Var<'_, T> {
    type Output = Self;
    #[inline]
    fn mul(self, c: f64) -> Self {
        self.unary(self.val * c, T::from_f64(c))
    }
}

impl<T: Scalar> Div<f64> for Var<'_, T> {
    type Output = Self;
    #[inline]
    fn div(self, c: f64) -> Self {
        self.unary(self.val / c, T::from_f64(1.0 / c))
    }
}

impl<T: Scalar> Scalar for Var<'_, T> {
    fn from_f64(v: f64) -> Self {
        Self::constant(T::from_f64(v))
    }

    fn value(&self) -> f64 {
        self.val.value()
    }

    fn is_exact_zero(&self) -> bool {
        self.tape.is_none() && self.val.is_exact_zero()
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }

    fn ln(self) -> Self {
        self.unary(self.val.ln(), T::from_f64(1.0) / self.val)
    }

    fn sqrt(self) -> Self {
        let r = self.val.sqrt();
        self.unary(r, T::from_f64(0.5) / r)
    }

    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }

    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }

    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, T::from_f64(1.0) - t * t)
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let av: Vec<T> = a.iter().map(|v| v.val).collect();
        let bv: Vec<T> = b.iter().map(|v| v.val).collect();
        let val = T::dot(&av, &bv);
        let Some(t) = common_tape(a).or_else(|| common_tape(b)) else {
            return Self::constant(val);
        };
        let edges = a
            .iter()
            .zip(b)
            .flat_map(|(x, y)| {
                let ex = x.tape.map(|_| (x.idx, y.val));
                let ey = y.tape.map(|_| (y.idx, x.val));
                ex.into_iter().chain(ey)
            })
            .collect::<Vec<_>>();
        Self {
            tape: Some(t),
            idx: t.push(edges),
            val,
        }
    }

    fn sum(xs: &[Self]) -> Self {
        let vals: Vec<T> = xs.iter().map(|v| v.val).collect();
        let val = T::sum(&vals);
        let Some(t) = common_tape(xs) else {
            return Self::constant(val);
        };
        let one = T::from_f64(1.0);
        let idx = t.push(xs.iter().filter(|v| v.tape.is_some()).map(|v| (v.idx, one)));
        Self {
            tape: Some(t),
            idx,
            val,
        }
    }
}
