//! Numeric substrate: tensors, reverse-mode differentiation, Adam, and
//! finite-difference gradient verification.

pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, DEFAULT_FD_STEP};
pub use optim::{adam_step, AdamHyper, AdamState, ParamBundle};
pub use tape::{Tape, TensorId, NO_ROW};
pub use tensor::{kl_categorical, logsumexp, matmul, softmax, Tensor};
