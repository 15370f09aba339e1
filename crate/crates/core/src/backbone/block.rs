use ndarray::Array2;

use super::attention::{AttentionMap, AttentionWeights};
use crate::error::Result;
use crate::tensor::{LayerNorm, Mlp};

/// Pre-norm transformer layer: `x + SA(LN(x))` followed by `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub ln1: LayerNorm,
    pub attn: AttentionWeights,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl ResidualBlock {
    /// Attention half of the block with an externally supplied map.
    /// Returns `SA(LN(x))` (not yet added to the residual).
    pub fn attention_output(&self, normed: &Array2<f32>, map: &AttentionMap) -> Result<Array2<f32>> {
        let v = self.attn.v.forward(normed);
        self.attn.apply(map, &v)
    }

    pub fn mlp_output(&self, x: &Array2<f32>) -> Array2<f32> {
        self.mlp.forward(&self.ln2.forward(x))
    }
}
