//! Minimal reverse-mode differentiable-computation substrate.
//!
//! Dense tensors over `f32`/`f64`, a tape-based autodiff graph with the
//! handful of primitives the networks need (convolution, fully-connected,
//! activations, channel-wise normalization arithmetic, scatter/gather,
//! fused losses), a flat parameter store with plain-SGD updates, and a
//! binary checkpoint codec.

mod checkpoint;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{load_into, read_checkpoint, write_checkpoint};
pub use params::{ParamId, ParamStore, ParamTensor};
pub use scalar::{gemm_a_bt, gemm_at_b, gemm_rm, Scalar};
pub use tape::{ConvSpec, Padding, Tape, Var, IGNORE_LABEL};
pub use tensor::Tensor;
