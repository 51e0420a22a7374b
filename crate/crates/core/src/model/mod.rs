//! The velocity model: noise-level embedding, AdaLN-Zero modulation, rotary
//! positions, joint attention and the block stack.

mod block;
mod embed;
mod params;
mod vedit;

pub use block::{ada_ln_zero, joint_attention, modulate, vedit_block, AdaLnOutput, BlockParams, BranchParams};
pub use embed::{clip_positions, rope_rotate, sinusoidal_features, RopeTables, TimestepEmbedder};
pub use params::{gelu, layer_norm, Init, LayerNorm, Linear, Parameterized};
pub use vedit::{clips_to_tensor, tensor_to_clips, vedit_forward, BatchLayout, FinalLayer, VeditParams};
