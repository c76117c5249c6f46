//! Forward and backward numeric kernels on plain tensors.

pub mod conv;
pub mod dense;
pub mod norm;
pub mod pool;
