//! Raw numeric kernels over flat slices. The graph layer owns shape checking.

pub mod conv;
pub(crate) mod gemm;
pub mod norm;
pub mod softmax;
