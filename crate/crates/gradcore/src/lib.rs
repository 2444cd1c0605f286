//! Dense tensors and reverse-mode automatic differentiation.
//!
//! The op set is the one a small convolutional GAN needs: convolutions with
//! zero or reflect padding, nearest upsampling, instance normalization,
//! pointwise activations and arithmetic, and mean / L1 / logistic losses.
//! Ops outside this set plug in through [`CustomOp`].

pub mod checkpoint;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use element::Element;
pub use error::{GradError, Result};
pub use gradcheck::{check_gradients, GradCheckConfig, GradReport};
pub use ops::{PadMode, Padding};
pub use tape::{CustomOp, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
