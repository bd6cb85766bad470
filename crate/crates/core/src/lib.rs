//! Online bilevel adaptation of a pose regressor to shifted streams.

pub mod adaptation;
pub mod autodiff;
pub mod body;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod pretrain;
pub mod regressor;
pub mod world;

pub use error::{Error, Result};
