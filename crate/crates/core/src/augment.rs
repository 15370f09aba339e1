//! Image engineering: order-preserving augmentations fused at feature level and
//! order-altering augmentations fused at logit level after undoing them on the grid.

use std::fmt::Debug;
use std::sync::Arc;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::{cosine_logits, DenseEncoder};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::tensor::l2_normalize_rows;
use crate::volume::{LogitVolume, Resolution};

/// Augmentations that keep every pixel where it is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PixelAugmentation {
    GaussianBlur { kernel: usize, sigma: f32 },
    Grayscale,
    Identity,
}

impl PixelAugmentation {
    pub fn name(&self) -> String {
        match self {
            PixelAugmentation::GaussianBlur { kernel, sigma } => {
                format!("gaussian_blur({kernel}, {sigma})")
            }
            PixelAugmentation::Grayscale => "grayscale".into(),
            PixelAugmentation::Identity => "identity".into(),
        }
    }

    pub fn apply(&self, image: &Raster) -> Result<Raster> {
        let out = match self {
            PixelAugmentation::GaussianBlur { kernel, sigma } => image.gaussian_blur(*kernel, *sigma)?,
            PixelAugmentation::Grayscale => image.grayscale(),
            PixelAugmentation::Identity => image.clone(),
        };
        if !out.is_finite() {
            return Err(Error::Augmentation {
                transform: self.name(),
                reason: "produced non-finite pixels".into(),
            });
        }
        Ok(out)
    }
}

/// An invertible rearrangement of pixels. The inverse is applied to the patch-resolution
/// score grid, so it must map grid cells the same way the forward map moves patches.
pub trait SpatialTransform: Debug + Send + Sync {
    fn name(&self) -> String;
    fn apply_image(&self, image: &Raster) -> Raster;
    /// Applies the same rearrangement to every channel of a `C×H×W` grid.
    fn apply_grid(&self, grid: &Array3<f32>) -> Array3<f32>;
    fn inverse(&self) -> Option<Arc<dyn SpatialTransform>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialOp {
    HorizontalFlip,
    VerticalFlip,
    Rotate180,
}

impl SpatialTransform for SpatialOp {
    fn name(&self) -> String {
        match self {
            SpatialOp::HorizontalFlip => "horizontal_flip",
            SpatialOp::VerticalFlip => "vertical_flip",
            SpatialOp::Rotate180 => "rotate_180",
        }
        .into()
    }

    fn apply_image(&self, image: &Raster) -> Raster {
        match self {
            SpatialOp::HorizontalFlip => image.flip_horizontal(),
            SpatialOp::VerticalFlip => image.flip_vertical(),
            SpatialOp::Rotate180 => image.flip_horizontal().flip_vertical(),
        }
    }

    fn apply_grid(&self, grid: &Array3<f32>) -> Array3<f32> {
        match self {
            SpatialOp::HorizontalFlip => grid.slice(s![.., .., ..;-1]).to_owned(),
            SpatialOp::VerticalFlip => grid.slice(s![.., ..;-1, ..]).to_owned(),
            SpatialOp::Rotate180 => grid.slice(s![.., ..;-1, ..;-1]).to_owned(),
        }
    }

    fn inverse(&self) -> Option<Arc<dyn SpatialTransform>> {
        // all built-ins are involutions
        Some(Arc::new(*self))
    }
}

/// Whether the two logit groups are fused as raw scores or as class probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionSpace {
    #[default]
    Logits,
    Probabilities,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub category1: Vec<PixelAugmentation>,
    pub category2: Vec<SpatialOp>,
    /// Extra order-altering transforms supplied programmatically.
    #[serde(skip)]
    pub custom_category2: Vec<Arc<dyn SpatialTransform>>,
    /// Weight of the order-preserving logits.
    pub lambda: f32,
    pub fusion_space: FusionSpace,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            category1: vec![
                PixelAugmentation::GaussianBlur { kernel: 5, sigma: 1.0 },
                PixelAugmentation::Grayscale,
            ],
            category2: vec![SpatialOp::HorizontalFlip, SpatialOp::VerticalFlip],
            custom_category2: Vec::new(),
            lambda: 0.75,
            fusion_space: FusionSpace::Logits,
        }
    }
}

impl AugmentationSpec {
    /// No augmentation at all: plain cosine logits of the window.
    pub fn disabled() -> Self {
        Self {
            category1: Vec::new(),
            category2: Vec::new(),
            custom_category2: Vec::new(),
            lambda: 1.0,
            fusion_space: FusionSpace::Logits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        for t in &self.custom_category2 {
            if t.inverse().is_none() {
                return Err(Error::config(format!(
                    "category-2 transform `{}` has no registered inverse",
                    t.name()
                )));
            }
        }
        Ok(())
    }

    /// Every order-altering transform, built-ins first.
    pub fn spatial_transforms(&self) -> Vec<Arc<dyn SpatialTransform>> {
        self.category2
            .iter()
            .map(|op| Arc::new(*op) as Arc<dyn SpatialTransform>)
            .chain(self.custom_category2.iter().cloned())
            .collect()
    }

    pub fn has_spatial(&self) -> bool {
        !self.category2.is_empty() || !self.custom_category2.is_empty()
    }

    /// Number of encoder passes per window.
    pub fn passes(&self) -> usize {
        1 + self.category1.len()
            + if self.has_spatial() && self.lambda < 1.0 {
                self.category2.len() + self.custom_category2.len()
            } else {
                0
            }
    }
}

pub(crate) fn check_text_width(features: usize, text: &Array2<f32>) -> Result<()> {
    if features != text.ncols() {
        return Err(Error::dim(format!(
            "image features have {features} dimensions, text embeddings {}",
            text.ncols()
        )));
    }
    Ok(())
}

/// Mean of per-token L2-normalised patch features over the original window and each
/// order-preserving augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures {
    pub features: Array2<f32>,
    pub grid: (usize, usize),
}

pub fn first_category_features(
    window: &Raster,
    spec: &AugmentationSpec,
    encoder: &dyn DenseEncoder,
) -> Result<FusedFeatures> {
    let mut views = vec![window.clone()];
    for aug in &spec.category1 {
        views.push(aug.apply(window)?);
    }
    let mut sum: Option<Array2<f32>> = None;
    let mut grid = (0, 0);
    for view in &views {
        let encoded = encoder.encode(view)?;
        grid = encoded.grid;
        let mut f = encoded.patch_features;
        l2_normalize_rows(&mut f);
        sum = Some(match sum {
            None => f,
            Some(acc) => acc + f,
        });
    }
    let count = views.len() as f32;
    let features = sum.expect("at least the original window").mapv(|v| v / count);
    Ok(FusedFeatures { features, grid })
}

/// For every order-altering transform: augment, encode, score against `text`, undo the
/// transform on the score grid; then average. The original window is not included.
pub fn second_category_logits(
    window: &Raster,
    spec: &AugmentationSpec,
    encoder: &dyn DenseEncoder,
    text: &Array2<f32>,
) -> Result<LogitVolume> {
    let transforms = spec.spatial_transforms();
    if transforms.is_empty() {
        return Err(Error::config("no category-2 transforms configured"));
    }
    let inverses = transforms
        .iter()
        .map(|t| {
            t.inverse()
                .ok_or_else(|| Error::config(format!("category-2 transform `{}` has no registered inverse", t.name())))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum: Option<Array3<f32>> = None;
    for (t, inv) in transforms.iter().zip(&inverses) {
        let encoded = encoder.encode(&t.apply_image(window))?;
        check_text_width(encoded.patch_features.ncols(), text)?;
        let restored = inv.apply_grid(&cosine_logits(&encoded, text));
        sum = Some(match sum {
            None => restored,
            Some(acc) => acc + restored,
        });
    }
    let n = transforms.len() as f32;
    Ok(LogitVolume::raw(
        sum.expect("non-empty").mapv(|v| v / n),
        Resolution::Patch,
    ))
}

/// `lambda·l1 + (1-lambda)·l2`.
pub fn fuse_logits(l1: &LogitVolume, l2: &LogitVolume, lambda: f32) -> Result<LogitVolume> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda {lambda} outside [0, 1]")));
    }
    l1.ensure_same_shape(l2, "logit fusion")?;
    Ok(LogitVolume {
        scores: &l1.scores * lambda + &l2.scores * (1.0 - lambda),
        resolution: l1.resolution,
        normalized: l1.normalized && l2.normalized,
    })
}
