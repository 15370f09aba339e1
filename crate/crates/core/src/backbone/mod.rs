//! CLIP ViT image tower and the final-layer attention surgery.

pub mod attention;
mod block;
mod vit;

pub use attention::{
    attention_from_projections, refined_attention, self_self_attention, AttentionMap, AttentionMode, AttentionWeights,
    FusionGranularity, Projections,
};
pub use block::ResidualBlock;
pub use vit::{
    cosine_logits, patch_grid, scores_to_grid, DenseEncoder, EncoderConfig, EncoderTrace, VisionTransformer,
    VisionWeights, VisualFeatures, VisualTokens,
};
