//! Numeric kernels on flat slices. The autodiff tape wires these together.

pub mod broadcast;
pub mod conv;
pub mod linalg;
pub mod pool;
