//! Vision-transformer building blocks over a parameter-bound tape.

mod blocks;
mod gradcheck;
mod params;
mod patch;
mod posembed;

pub use blocks::{
    attention_with_weights, gelu, layer_norm, linear, mlp, multi_head_attention, transformer_block, AttentionParams,
    BlockParams, LayerNormParams, LinearParams, MlpParams, LN_EPS,
};
pub use gradcheck::param_grad_check;
pub use params::{Graph, ParamEntry, ParamId, ParamStore};
pub use patch::{patch_embed, patchify, patchify_var, unpatchify, PatchEmbedParams};
pub use posembed::sincos_pos_embed;
