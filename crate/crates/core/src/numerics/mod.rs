//! Tensors, random streams, reverse-mode autodiff and SGD.

pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub use optim::{sgd_step, SgdConfig, SgdState};
pub use rng::{RngStream, StreamLabel};
pub use tape::{register_custom_primitive, Gradients, Primitive, PrimitiveHandle, Tape, Var};
pub use tensor::Tensor;
