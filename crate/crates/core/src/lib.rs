//! Meta-learning of an initialization, a preconditioner and a loss
//! function for few-shot tasks.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod inner;
pub mod loss;
pub mod model;
pub mod outer;
pub mod params;
pub mod tasks;
pub mod verify;

pub use error::{Error, Result};
