//! Transformer building blocks whose every component is either a row map or
//! position-free attention.

mod block;
mod layers;
mod positional;

pub use block::{self_attention, BlockDims, Encoder, EncoderBlock, HeadParams, LayerNormParams};
pub use layers::{gradient_reversal, mean_pool_time, Linear, MlpHead};
pub use positional::{positional_embedding, PositionalEmbedding};
