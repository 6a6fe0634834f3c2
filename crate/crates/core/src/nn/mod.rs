//! Minimal CPU neural-network engine with hand-written backward passes.
//!
//! Activations are stored channel-major as `[C][N][H][W]` ([`Tensor`]), which
//! turns every convolution into a single GEMM over the whole batch. Layers
//! cache what they need during `forward` and accumulate parameter gradients
//! in `backward`. Everything runs on one thread, so results are bit-exact
//! across runs.

mod adamw;
mod attention;
mod gemm;
mod layers;
mod param;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use attention::{attention_backward, attention_forward, SpatialAttention};
pub use gemm::gemm;
pub use layers::{
    AvgPool2, Conv1x1, Conv3x3, Dropout, GroupNorm, Linear, Silu, TokenNorm, Upsample2,
};
pub use param::{xavier_uniform, Module, Param, ParamStore};
pub use tensor::Tensor;
