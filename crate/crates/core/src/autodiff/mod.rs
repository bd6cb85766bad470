//! Scalar automatic differentiation: reverse mode for gradients, forward over
//! reverse for Hessian-vector products, and the gradient of an objective
//! evaluated after one inner gradient step.

mod dual;
mod engine;
mod scalar;
mod tape;

pub use dual::Dual;
pub use engine::{
    bilevel_gradient, eval_loss, gradient, hessian_vector_product, value_and_gradient, BilevelGradient, Objective,
    ParamVector, SecondOrder,
};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
