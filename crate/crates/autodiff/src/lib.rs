//! Dense n-dimensional tensors with tape-based reverse-mode differentiation.
//!
//! The engine is deliberately small: every primitive a convolutional
//! encoder-decoder with attention needs (elementwise arithmetic, matrix
//! products, convolutions and their transposes, pooling, softmax and layer
//! normalization), each with a hand-written adjoint that is checked against
//! central finite differences in the test suite.
//!
//! Values are generic over [`Real`], so the same graph runs in `f32` for
//! training and in `f64` for gradient verification.
//!
//! ```
//! use midband_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_vec(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod checkpoint;
mod conv;
mod error;
mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{conv_output_len, conv_transpose_output_len};
pub use error::{AutodiffError, Result};
pub use gradcheck::{compare_gradients, grad_check, GradCheckReport};
pub use scalar::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Single-precision tensor, the storage type used for training.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by gradient oracles.
pub type Tensor64 = Tensor<f64>;
/// Single-precision tape.
pub type Tape32 = Tape<f32>;
/// Double-precision tape.
pub type Tape64 = Tape<f64>;
