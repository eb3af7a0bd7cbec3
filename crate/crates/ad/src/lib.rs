//! Dense tensors and a reverse-mode tape that can differentiate its own
//! backward pass.
//!
//! ```
//! use npbml_ad::{grad, Precision, Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(2.0, Precision::Double));
//! let y = x.square().unwrap().mul(&x).unwrap();
//! let dy = grad(&y, &[&x], true).unwrap().remove(0);
//! let d2y = grad(&dy, &[&x], false).unwrap().remove(0);
//! assert_eq!(d2y.item(), 12.0);
//! ```

mod check;
mod error;
mod ops;
mod tape;
mod tensor;

pub use check::{finite_diff, finite_diff_coords, relative_error};
pub use error::{AdError, Result};
pub use tape::{concat, grad, Tape, Var};
pub use tensor::{Precision, Tensor};
