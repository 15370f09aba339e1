use std::hash::{Hash, Hasher};

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tokenizer::ClipTokenizer;
use crate::backbone::{attention_from_projections, AttentionMode, ResidualBlock};
use crate::error::{Error, Result};
use crate::tensor::{l2_normalize, LayerNorm};

/// Anything that maps a sentence to a vector in the joint embedding space.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    /// Raw (unnormalised) embedding of one sentence.
    fn embed(&self, text: &str) -> Result<Array1<f32>>;

    fn embed_batch(&self, texts: &[String]) -> Result<Array2<f32>> {
        let rows: Vec<Array1<f32>> = texts.par_iter().map(|t| self.embed(t)).collect::<Result<_>>()?;
        let mut out = Array2::zeros((rows.len(), self.dim()));
        for (mut dst, row) in out.outer_iter_mut().zip(rows) {
            dst.assign(&row);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TextWeights {
    /// `(vocab, d)`.
    pub token_embedding: Array2<f32>,
    /// `(context, d)`.
    pub position_embedding: Array2<f32>,
    pub blocks: Vec<ResidualBlock>,
    pub final_norm: LayerNorm,
    /// `(d, d_text)`.
    pub projection: Array2<f32>,
}

/// CLIP text tower: causal transformer pooled at the end-of-text token.
#[derive(Debug, Clone)]
pub struct ClipTextEncoder {
    weights: TextWeights,
    tokenizer: ClipTokenizer,
}

impl ClipTextEncoder {
    pub fn new(weights: TextWeights, tokenizer: ClipTokenizer) -> Result<Self> {
        let d = weights.token_embedding.ncols();
        if weights.position_embedding.ncols() != d || weights.projection.nrows() != d {
            return Err(Error::dim(format!(
                "text tower width: token embedding {d}, positions {}, projection {}",
                weights.position_embedding.ncols(),
                weights.projection.nrows()
            )));
        }
        Ok(Self { weights, tokenizer })
    }

    pub fn encode_ids(&self, ids: &[u32]) -> Result<Array1<f32>> {
        let w = &self.weights;
        let n = ids.len();
        if n == 0 || n > w.position_embedding.nrows() {
            return Err(Error::dim(format!(
                "sequence length {n} outside [1, {}]",
                w.position_embedding.nrows()
            )));
        }
        let mut x = Array2::<f32>::zeros((n, w.token_embedding.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= w.token_embedding.nrows() {
                return Err(Error::dim(format!("token id {id} outside vocabulary")));
            }
            x.row_mut(i).assign(&w.token_embedding.row(id as usize));
        }
        x += &w.position_embedding.slice(s![..n, ..]);
        for block in &w.blocks {
            let normed = block.ln1.forward(&x);
            let proj = block.attn.project(&normed)?;
            let map = attention_from_projections(&proj, block.attn.num_heads, AttentionMode::OriginalQk, true);
            x = x + block.attn.apply(&map, &proj.v)?;
            x = &x + &block.mlp_output(&x);
        }
        let x = w.final_norm.forward(&x);
        // pooled at the first end-of-text token; the causal mask makes padding irrelevant
        let eot = ids
            .iter()
            .position(|&t| t == self.tokenizer.end_token())
            .unwrap_or(n - 1);
        Ok(x.index_axis(Axis(0), eot).dot(&w.projection))
    }
}

impl TextEncoder for ClipTextEncoder {
    fn dim(&self) -> usize {
        self.weights.projection.ncols()
    }

    fn embed(&self, text: &str) -> Result<Array1<f32>> {
        self.encode_ids(&self.tokenizer.encode(text))
    }
}

/// Deterministic bag-of-words encoder: each lowercase word maps to a seeded random
/// direction and a sentence is the sum of its words. Sentences sharing words share
/// directions, which is enough to exercise the text-bank machinery without weights.
#[derive(Debug, Clone)]
pub struct HashingTextEncoder {
    dim: usize,
    seed: u64,
}

impl HashingTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn word_vector(&self, word: &str) -> Array1<f32> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        word.hash(&mut h);
        self.seed.hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let mut v = Array1::from_shape_fn(self.dim, |_| rng.gen_range(-1.0f32..1.0));
        l2_normalize(&mut v);
        v
    }
}

impl TextEncoder for HashingTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Array1<f32>> {
        let mut out = Array1::<f32>::zeros(self.dim);
        for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            out += &self.word_vector(&word.to_lowercase());
        }
        if out.iter().all(|&v| v == 0.0) {
            out = self.word_vector("");
        }
        Ok(out)
    }
}
