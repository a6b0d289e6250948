//! Numeric foundation: dense tensors, reverse-mode differentiation,
//! optimization, gradient checking, and the top-2 singular projection.

pub mod gradcheck;
pub mod optim;
pub mod svd;
pub mod tape;
pub mod tensor;
