//! Dense `f64` tensors, a reverse-mode tape, and the Adam optimizer.
//!
//! Model code binds parameters from a [`ParameterStore`] onto a fresh
//! [`Tape`] for each forward pass, calls [`Tape::backward`] on a scalar loss,
//! and hands the resulting gradients to [`Adam::step`].
//!
//! ```
//! use rvae_autodiff::{Adam, ParameterStore, Tape, Tensor};
//!
//! let mut store = ParameterStore::new();
//! store.insert("w", Tensor::scalar(0.0));
//! let mut tape = Tape::new();
//! let w = tape.param(&store, "w").unwrap();
//! let shifted = tape.add_scalar(w, -3.0).unwrap();
//! let loss = tape.square(shifted).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.param("w").unwrap().item(), -6.0);
//! let grads = grads.for_store(&store);
//! Adam::with_lr(0.1).step(&mut store, &grads).unwrap();
//! ```

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{Adam, ParameterStore};
pub use tape::{Gradients, SegmentMode, Tape, Var};
pub use tensor::Tensor;

/// `ln(1 + e^x)` evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    tape::softplus(x)
}
