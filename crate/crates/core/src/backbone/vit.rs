use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::attention::{refined_attention, AttentionMap, AttentionMode, FusionGranularity};
use super::block::ResidualBlock;
use crate::error::{Error, Result};
use crate::raster::{Raster, CLIP_MEAN, CLIP_STD};
use crate::tensor::{l2_normalize_rows, resize_bicubic, LayerNorm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backbone_id: String,
    pub patch_size: usize,
    pub num_layers: usize,
    /// 1-based indices of the layers whose maps are fused into the final layer.
    pub intermediate_layers: Vec<usize>,
    pub attention_mode: AttentionMode,
    pub drop_final_ffn: bool,
    pub use_intermediate_fusion: bool,
    pub fusion_granularity: FusionGranularity,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone_id: "ViT-B/16".into(),
            patch_size: 16,
            num_layers: 12,
            intermediate_layers: vec![7, 8, 10],
            attention_mode: AttentionMode::QqPlusKk,
            drop_final_ffn: true,
            use_intermediate_fusion: true,
            fusion_granularity: FusionGranularity::PerHead,
        }
    }
}

impl EncoderConfig {
    /// The unmodified pretrained encoder.
    pub fn reference() -> Self {
        Self {
            attention_mode: AttentionMode::OriginalQk,
            drop_final_ffn: false,
            use_intermediate_fusion: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("patch_size must be positive"));
        }
        if self.num_layers == 0 {
            return Err(Error::config("num_layers must be positive"));
        }
        let mut seen = BTreeSet::new();
        for &l in self.fused_layers() {
            if l == 0 || l >= self.num_layers {
                return Err(Error::config(format!(
                    "intermediate layer {l} outside [1, {}]",
                    self.num_layers - 1
                )));
            }
            if !seen.insert(l) {
                return Err(Error::config(format!("intermediate layer {l} listed twice")));
            }
        }
        Ok(())
    }

    /// Layers actually fused into the final map.
    pub fn fused_layers(&self) -> &[usize] {
        if self.use_intermediate_fusion {
            &self.intermediate_layers
        } else {
            &[]
        }
    }
}

/// Patch grid `(rows, cols)` for an `height×width` window.
pub fn patch_grid(height: usize, width: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 {
        return Err(Error::config("patch size must be positive"));
    }
    if height == 0 || !height.is_multiple_of(patch) {
        return Err(Error::dim(format!(
            "height {height} is not a positive multiple of patch size {patch}"
        )));
    }
    if width == 0 || !width.is_multiple_of(patch) {
        return Err(Error::dim(format!(
            "width {width} is not a positive multiple of patch size {patch}"
        )));
    }
    Ok((height / patch, width / patch))
}

/// CLS token followed by `rows·cols` patch tokens, row-major over the grid.
#[derive(Debug, Clone)]
pub struct VisualTokens {
    pub tokens: Array2<f32>,
    pub grid: (usize, usize),
}

impl VisualTokens {
    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Patch features in the joint embedding space; the CLS row is already dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub patch_features: Array2<f32>,
    pub grid: (usize, usize),
}

/// Frozen parameters of a CLIP ViT image tower.
#[derive(Debug, Clone)]
pub struct VisionWeights {
    pub patch_size: usize,
    /// Flattened patch filter, `(3·P·P, d)`, input order channel → row → column.
    pub patch_embedding: Array2<f32>,
    pub class_embedding: Array1<f32>,
    /// `(1 + g², d)` with the CLS position first.
    pub position_embedding: Array2<f32>,
    pub pre_norm: LayerNorm,
    pub blocks: Vec<ResidualBlock>,
    pub post_norm: LayerNorm,
    /// `(d, d_text)`.
    pub projection: Array2<f32>,
}

impl VisionWeights {
    pub fn width(&self) -> usize {
        self.class_embedding.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Side of the square grid the position embedding was trained for.
    pub fn pretrained_grid(&self) -> usize {
        ((self.position_embedding.nrows() - 1) as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        let p = self.patch_size;
        if self.patch_embedding.dim() != (3 * p * p, d) {
            return Err(Error::dim(format!(
                "patch embedding is {:?}, expected ({}, {d})",
                self.patch_embedding.dim(),
                3 * p * p
            )));
        }
        let g = self.pretrained_grid();
        if self.position_embedding.dim() != (g * g + 1, d) {
            return Err(Error::dim(format!(
                "position embedding is {:?}, expected a square grid plus CLS over width {d}",
                self.position_embedding.dim()
            )));
        }
        if self.projection.nrows() != d {
            return Err(Error::dim(format!(
                "projection has {} input rows, width is {d}",
                self.projection.nrows()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.attn.width() != d || !d.is_multiple_of(b.attn.num_heads) {
                return Err(Error::dim(format!(
                    "layer {}: width {} with {} heads does not match model width {d}",
                    i + 1,
                    b.attn.width(),
                    b.attn.num_heads
                )));
            }
        }
        Ok(())
    }
}

/// Internal states of one forward pass, for inspection and testing.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// Maps recorded at the requested intermediate layers, `(layer, map)` in layer order.
    pub recorded: Vec<(usize, AttentionMap)>,
    /// Map used by the final layer's value path.
    pub final_map: AttentionMap,
    /// `X^(L-1)`.
    pub pre_final: Array2<f32>,
    /// `SA(LN(X^(L-1)))` under the final map.
    pub attention_output: Array2<f32>,
    /// `X^(L)` before the output normalisation.
    pub final_tokens: Array2<f32>,
}

/// Encoders that turn an image window with pixel values in `[0, 1]` into patch features.
pub trait DenseEncoder: Send + Sync {
    fn patch_size(&self) -> usize;
    fn encode(&self, window: &Raster) -> Result<VisualFeatures>;
}

/// A CLIP ViT image tower with the final-layer surgery applied according to its config.
#[derive(Debug, Clone)]
pub struct VisionTransformer {
    weights: Arc<VisionWeights>,
    cfg: EncoderConfig,
    pixel_mean: [f32; 3],
    pixel_std: [f32; 3],
}

impl VisionTransformer {
    pub fn new(weights: impl Into<Arc<VisionWeights>>, cfg: EncoderConfig) -> Result<Self> {
        let weights = weights.into();
        weights.validate()?;
        cfg.validate()?;
        if cfg.patch_size != weights.patch_size {
            return Err(Error::config(format!(
                "config patch_size {} but {} weights use {}",
                cfg.patch_size, cfg.backbone_id, weights.patch_size
            )));
        }
        if cfg.num_layers != weights.num_layers() {
            return Err(Error::config(format!(
                "config num_layers {} but {} weights have {}",
                cfg.num_layers,
                cfg.backbone_id,
                weights.num_layers()
            )));
        }
        Ok(Self {
            weights,
            cfg,
            pixel_mean: CLIP_MEAN,
            pixel_std: CLIP_STD,
        })
    }

    /// Same weights under a different surgery configuration.
    pub fn with_config(&self, cfg: EncoderConfig) -> Result<Self> {
        let mut out = Self::new(self.weights.clone(), cfg)?;
        out.pixel_mean = self.pixel_mean;
        out.pixel_std = self.pixel_std;
        Ok(out)
    }

    pub fn with_pixel_stats(mut self, mean: [f32; 3], std: [f32; 3]) -> Self {
        self.pixel_mean = mean;
        self.pixel_std = std;
        self
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &VisionWeights {
        &self.weights
    }

    /// Splits a normalised image into patch tokens, prepends CLS and adds positions.
    pub fn patchify(&self, image: &Raster) -> Result<VisualTokens> {
        let p = self.weights.patch_size;
        let (rows, cols) = patch_grid(image.height(), image.width(), p)?;
        let data = image.data();
        let n = rows * cols;
        let mut patches = Array2::<f32>::zeros((n, 3 * p * p));
        for r in 0..rows {
            for c in 0..cols {
                let mut out = patches.row_mut(r * cols + c);
                let mut i = 0;
                for ch in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            out[i] = data[[ch, r * p + y, c * p + x]];
                            i += 1;
                        }
                    }
                }
            }
        }
        let embedded = patches.dot(&self.weights.patch_embedding);
        let cls = self.weights.class_embedding.view().insert_axis(Axis(0));
        let mut tokens = concatenate(Axis(0), &[cls, embedded.view()]).expect("same width");
        tokens += &self.positions(rows, cols);
        Ok(VisualTokens {
            tokens,
            grid: (rows, cols),
        })
    }

    /// Position embedding for a `rows×cols` grid, bicubically resampled when it differs
    /// from the pretrained grid. The CLS position is kept verbatim.
    fn positions(&self, rows: usize, cols: usize) -> Array2<f32> {
        let pos = &self.weights.position_embedding;
        let g = self.weights.pretrained_grid();
        if rows == g && cols == g {
            return pos.clone();
        }
        let d = pos.ncols();
        let grid = pos
            .slice(s![1.., ..])
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((d, g, g))
            .expect("square grid");
        let resized: Array3<f32> = resize_bicubic(grid.view(), rows, cols);
        let flat = resized
            .into_shape_with_order((d, rows * cols))
            .expect("contiguous")
            .reversed_axes();
        concatenate(Axis(0), &[pos.slice(s![0..1, ..]), flat.view()]).expect("same width")
    }

    /// Encodes a normalised image into patch features.
    pub fn encode_image(&self, image: &Raster) -> Result<VisualFeatures> {
        Ok(self.encode_traced(image, &[])?.0)
    }

    /// Forward pass that also returns internal states. `extra_layers` (1-based, < L) are
    /// recorded alongside the fused layers without affecting the result.
    pub fn encode_traced(&self, image: &Raster, extra_layers: &[usize]) -> Result<(VisualFeatures, EncoderTrace)> {
        let tokens = self.patchify(image)?;
        self.forward_tokens(tokens, extra_layers)
    }

    pub fn forward_tokens(
        &self,
        tokens: VisualTokens,
        extra_layers: &[usize],
    ) -> Result<(VisualFeatures, EncoderTrace)> {
        let w = &self.weights;
        let num_layers = w.num_layers();
        for &l in extra_layers {
            if l == 0 || l >= num_layers {
                return Err(Error::Argument(format!("layer {l} outside [1, {}]", num_layers - 1)));
            }
        }
        let fused: BTreeSet<usize> = self.cfg.fused_layers().iter().copied().collect();
        let record: BTreeSet<usize> = fused.iter().chain(extra_layers).copied().collect();

        let mut x = w.pre_norm.forward(&tokens.tokens);
        let mut recorded = Vec::new();
        for (i, block) in w.blocks[..num_layers - 1].iter().enumerate() {
            let layer = i + 1;
            let normed = block.ln1.forward(&x);
            let proj = block.attn.project(&normed)?;
            if record.contains(&layer) {
                recorded.push((
                    layer,
                    super::attention::attention_from_projections(
                        &proj,
                        block.attn.num_heads,
                        self.cfg.attention_mode,
                        false,
                    ),
                ));
            }
            let map = super::attention::attention_from_projections(
                &proj,
                block.attn.num_heads,
                AttentionMode::OriginalQk,
                false,
            );
            x = x + block.attn.apply(&map, &proj.v)?;
            x = &x + &block.mlp_output(&x);
        }

        let last = &w.blocks[num_layers - 1];
        let normed = last.ln1.forward(&x);
        let last_map = last.attn.attention_map(&normed, self.cfg.attention_mode)?;
        let intermediate: Vec<AttentionMap> = recorded
            .iter()
            .filter(|(l, _)| fused.contains(l))
            .map(|(_, m)| m.clone())
            .collect();
        let final_map = refined_attention(&last_map, &intermediate, self.cfg.fusion_granularity)?;
        let attention_output = last.attention_output(&normed, &final_map)?;
        let mut final_tokens = &x + &attention_output;
        if !self.cfg.drop_final_ffn {
            final_tokens = &final_tokens + &last.mlp_output(&final_tokens);
        }

        let out = w.post_norm.forward(&final_tokens).dot(&w.projection);
        let patch_features = out.slice(s![1.., ..]).to_owned();
        if patch_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("encoder produced non-finite features".into()));
        }
        let features = VisualFeatures {
            patch_features,
            grid: tokens.grid,
        };
        let trace = EncoderTrace {
            recorded,
            final_map,
            pre_final: x,
            attention_output,
            final_tokens,
        };
        Ok((features, trace))
    }
}

impl DenseEncoder for VisionTransformer {
    fn patch_size(&self) -> usize {
        self.weights.patch_size
    }

    fn encode(&self, window: &Raster) -> Result<VisualFeatures> {
        self.encode_image(&window.normalized(self.pixel_mean, self.pixel_std))
    }
}

/// Cosine similarity between every patch feature and every text row, laid out as
/// `classes × rows × cols`.
pub fn cosine_logits(features: &VisualFeatures, text: &Array2<f32>) -> Array3<f32> {
    let mut f = features.patch_features.clone();
    l2_normalize_rows(&mut f);
    scores_to_grid(&f, text, features.grid)
}

/// `features · textᵀ` reshaped onto the patch grid, `classes × rows × cols`.
pub fn scores_to_grid(features: &Array2<f32>, text: &Array2<f32>, grid: (usize, usize)) -> Array3<f32> {
    let scores = text.dot(&features.t());
    scores
        .into_shape_with_order((text.nrows(), grid.0, grid.1))
        .expect("one feature row per grid cell")
}
