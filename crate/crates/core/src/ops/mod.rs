//! Forward/backward kernels for the standard layers. The autograd tape in
//! [`crate::autograd`] records which kernel produced each value and replays
//! the matching backward kernel.

pub(crate) mod conv;
pub(crate) mod pool;
pub mod resize;

pub use conv::Conv2dParams;
