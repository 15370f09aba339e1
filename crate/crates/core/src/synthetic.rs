//! Seeded stand-ins for pretrained assets: small random ViT weights and procedurally
//! drawn images. Used by the test-suites and the runnable examples so that the whole
//! pipeline can execute without downloading a checkpoint.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use crate::backbone::{AttentionWeights, ResidualBlock, VisionWeights};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::tensor::{Activation, LayerNorm, Linear, Mlp};
use crate::text::{byte_level_vocabulary, ClipTokenizer, TextWeights, CONTEXT_LENGTH};
use crate::weights::write_checkpoint;

#[derive(Debug, Clone, Copy)]
pub struct SyntheticVit {
    pub patch_size: usize,
    /// Side of the square grid the position embedding is built for.
    pub grid: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for SyntheticVit {
    fn default() -> Self {
        Self {
            patch_size: 8,
            grid: 4,
            width: 32,
            layers: 4,
            heads: 2,
            embed_dim: 16,
            mlp_ratio: 2,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f32) -> Array2<f32> {
    Array2::from_shape_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn vector(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Array1<f32> {
    Array1::from_shape_fn(n, |_| rng.gen_range(-scale..scale))
}

fn linear(rng: &mut ChaCha8Rng, i: usize, o: usize) -> Linear {
    let scale = (3.0 / i as f32).sqrt();
    Linear::new(uniform(rng, (i, o), scale), Some(vector(rng, o, 0.1)))
}

fn norm(rng: &mut ChaCha8Rng, d: usize) -> LayerNorm {
    LayerNorm::new(
        Array1::from_shape_fn(d, |_| 1.0 + rng.gen_range(-0.1..0.1)),
        vector(rng, d, 0.1),
    )
}

fn blocks(rng: &mut ChaCha8Rng, layers: usize, d: usize, heads: usize, mlp_ratio: usize) -> Vec<ResidualBlock> {
    (0..layers)
        .map(|_| ResidualBlock {
            ln1: norm(rng, d),
            attn: AttentionWeights {
                q: linear(rng, d, d),
                k: linear(rng, d, d),
                v: linear(rng, d, d),
                out: linear(rng, d, d),
                num_heads: heads,
            },
            ln2: norm(rng, d),
            mlp: Mlp {
                fc1: linear(rng, d, d * mlp_ratio),
                fc2: linear(rng, d * mlp_ratio, d),
                activation: Activation::QuickGelu,
            },
        })
        .collect()
}

impl SyntheticVit {
    pub fn weights(&self, seed: u64) -> VisionWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.width;
        let p = self.patch_size;
        let blocks = blocks(&mut rng, self.layers, d, self.heads, self.mlp_ratio);
        VisionWeights {
            patch_size: p,
            patch_embedding: uniform(&mut rng, (3 * p * p, d), (3.0 / (3 * p * p) as f32).sqrt()),
            class_embedding: vector(&mut rng, d, 1.0),
            position_embedding: uniform(&mut rng, (self.grid * self.grid + 1, d), 0.5),
            pre_norm: norm(&mut rng, d),
            blocks,
            post_norm: norm(&mut rng, d),
            projection: uniform(&mut rng, (d, self.embed_dim), (3.0 / d as f32).sqrt()),
        }
    }

    /// Window size matching the pretrained grid.
    pub fn native_window(&self) -> usize {
        self.grid * self.patch_size
    }
}

/// A small causal text tower over the byte-level vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticText {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

impl Default for SyntheticText {
    fn default() -> Self {
        Self {
            width: 32,
            layers: 2,
            heads: 2,
            embed_dim: 16,
        }
    }
}

impl SyntheticText {
    pub fn weights(&self, seed: u64) -> TextWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.width;
        let vocab = byte_level_vocabulary().len();
        TextWeights {
            token_embedding: uniform(&mut rng, (vocab, d), 1.0),
            position_embedding: uniform(&mut rng, (CONTEXT_LENGTH, d), 0.2),
            blocks: blocks(&mut rng, self.layers, d, self.heads, 2),
            final_norm: norm(&mut rng, d),
            projection: uniform(&mut rng, (d, self.embed_dim), (3.0 / d as f32).sqrt()),
        }
    }

    pub fn tokenizer() -> ClipTokenizer {
        ClipTokenizer::new(byte_level_vocabulary(), Vec::new()).expect("markers present")
    }
}

/// Writes a complete random checkpoint directory (weights, config and tokenizer files)
/// in the same layout as a downloaded one. Both towers must share `embed_dim`.
pub fn write_synthetic_checkpoint(dir: &Path, vit: &SyntheticVit, text: &SyntheticText, seed: u64) -> Result<()> {
    if vit.embed_dim != text.embed_dim {
        return Err(Error::dim(format!(
            "image embedding {} differs from text embedding {}",
            vit.embed_dim, text.embed_dim
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_checkpoint(dir, &vit.weights(seed), &text.weights(seed ^ 0x5eed))?;
    let vocab = serde_json::to_string(&byte_level_vocabulary()).expect("json");
    let vocab_path = dir.join("vocab.json");
    std::fs::write(&vocab_path, vocab).map_err(|e| Error::io(&vocab_path, e))?;
    let merges_path = dir.join("merges.txt");
    std::fs::write(&merges_path, "#version: 0.2\n").map_err(|e| Error::io(&merges_path, e))
}

/// Uniform noise image in `[0, 1]`.
pub fn noise_image(height: usize, width: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Raster::new(Array3::from_shape_fn((3, height, width), |_| rng.gen_range(0.0..1.0))).expect("three channels")
}

/// Image whose columns mirror each other: `img == img.flip_horizontal()`.
pub fn mirrored_image(height: usize, width: usize, seed: u64) -> Raster {
    let base = noise_image(height, width, seed);
    let data = Array3::from_shape_fn((3, height, width), |(c, y, x)| {
        let xx = x.min(width - 1 - x);
        base.data()[[c, y, xx]]
    });
    Raster::new(data).expect("three channels")
}

/// A few axis-aligned coloured rectangles on a flat background, with the matching label
/// raster (`0` is background, rectangle `i` is label `i + 1`).
pub fn blocks_scene(height: usize, width: usize, seed: u64) -> (Raster, Array2<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette = [[0.9f32, 0.1, 0.1], [0.1, 0.8, 0.2], [0.15, 0.2, 0.95]];
    let mut img = Raster::filled(height, width, [0.5, 0.5, 0.5]).into_inner();
    let mut labels = Array2::<u32>::zeros((height, width));
    for (i, color) in palette.iter().enumerate() {
        let h = rng.gen_range(height / 4..=height / 2);
        let w = rng.gen_range(width / 4..=width / 2);
        let top = rng.gen_range(0..=height - h);
        let left = rng.gen_range(0..=width - w);
        for y in top..top + h {
            for x in left..left + w {
                for c in 0..3 {
                    img[[c, y, x]] = color[c];
                }
                labels[[y, x]] = i as u32 + 1;
            }
        }
    }
    (Raster::new(img).expect("three channels"), labels)
}
