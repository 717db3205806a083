//! `f64` tensors, a gradient tape with the primitives needed by small
//! convolutional GANs, and an ADAM optimizer.
//!
//! ```
//! use dehaze_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true).unwrap();
//! let sq = tape.square(x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod error;
mod gemm;
pub mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use kernels::conv2d;
pub use optim::{adam_step, AdamConfig, AdamState, Bound, ParamId, ParamSet};
pub use tape::{Gradients, NormMode, RunningStats, Tape, Var};
pub use tensor::Tensor;
