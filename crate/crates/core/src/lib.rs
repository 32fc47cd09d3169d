//! Laboratory for the optimization dynamics of differentiable architecture
//! search: a small reverse-mode autodiff engine, a relaxed cell supernet,
//! bi-level and single-level search, gradient diagnostics, numeric checks of
//! the softmax-competition results, and a brute-force oracle over micro
//! search spaces.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod oracle;
pub mod search;
pub mod space;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::Tensor;
