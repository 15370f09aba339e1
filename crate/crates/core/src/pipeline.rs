//! Sliding-window dense inference: per-window fused logits, accumulation over
//! placements, group merging, softmax, upsampling, optional refinement, argmax.

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{
    check_text_width, first_category_features, fuse_logits, second_category_logits, AugmentationSpec, FusionSpace,
};
use crate::backbone::{scores_to_grid, DenseEncoder};
use crate::error::{Error, Result};
use crate::pamr::{refine, PamrConfig};
use crate::raster::{Raster, CLIP_MEAN};
use crate::tensor::{crop, resize_bilinear};
use crate::text::TextBank;
use crate::volume::{LogitVolume, Resolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Resize target for the shorter image side; `None` keeps the input size.
    pub short_side: Option<usize>,
    pub window: usize,
    pub stride: usize,
    pub logit_scale: f32,
    pub apply_pamr: bool,
    pub tie_break: TieBreak,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            short_side: Some(336),
            window: 224,
            stride: 28,
            logit_scale: 100.0,
            apply_pamr: true,
            tie_break: TieBreak::LowestIndex,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::config("inference.stride must be at least 1"));
        }
        if self.window == 0 || !self.window.is_multiple_of(patch_size) {
            return Err(Error::config(format!(
                "inference.window {} is not a positive multiple of the patch size {patch_size}",
                self.window
            )));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::config(format!(
                "inference.logit_scale must be positive, got {}",
                self.logit_scale
            )));
        }
        if self.short_side == Some(0) {
            return Err(Error::config("inference.short_side must be positive"));
        }
        Ok(())
    }
}

/// Window offsets along one axis; the last one is clamped so the window ends at the edge.
pub fn axis_positions(size: usize, window: usize, stride: usize) -> Vec<usize> {
    if size <= window {
        return vec![0];
    }
    let steps = (size - window).div_ceil(stride) + 1;
    (0..steps).map(|i| (i * stride).min(size - window)).collect()
}

/// Top-left corners of every window placement over an `h×w` image.
pub fn window_placements(h: usize, w: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let rows = axis_positions(h, window, stride);
    let cols = axis_positions(w, window, stride);
    rows.iter().flat_map(|&y| cols.iter().map(move |&x| (y, x))).collect()
}

/// Number of window placements covering each pixel.
pub fn count_map(h: usize, w: usize, window: usize, stride: usize) -> Array2<f32> {
    let mut counts = Array2::zeros((h, w));
    for (y, x) in window_placements(h, w, window, stride) {
        counts
            .slice_mut(s![y..(y + window).min(h), x..(x + window).min(w)])
            .mapv_inplace(|c: f32| c + 1.0);
    }
    counts
}

/// Fused patch-resolution scores of one window against every bank row.
pub fn window_logits(
    window: &Raster,
    encoder: &dyn DenseEncoder,
    bank: &TextBank,
    spec: &AugmentationSpec,
    logit_scale: f32,
) -> Result<LogitVolume> {
    let text = &bank.refined_embeddings;
    let fused = first_category_features(window, spec, encoder)?;
    check_text_width(fused.features.ncols(), text)?;
    let l1 = LogitVolume::raw(scores_to_grid(&fused.features, text, fused.grid), Resolution::Patch);
    if !spec.has_spatial() || spec.lambda == 1.0 {
        return Ok(match spec.fusion_space {
            FusionSpace::Logits => l1,
            FusionSpace::Probabilities => l1.softmax(logit_scale),
        });
    }
    let l2 = second_category_logits(window, spec, encoder, text)?;
    match spec.fusion_space {
        FusionSpace::Logits => fuse_logits(&l1, &l2, spec.lambda),
        FusionSpace::Probabilities => fuse_logits(&l1.softmax(logit_scale), &l2.softmax(logit_scale), spec.lambda),
    }
}

/// Collapses bank rows into classes by taking the per-location maximum over each group.
pub fn merge_groups(raw: &LogitVolume, group_map: &[usize], num_classes: usize) -> Result<LogitVolume> {
    let (rows, h, w) = raw.scores.dim();
    if group_map.len() != rows {
        return Err(Error::dim(format!(
            "group map covers {} rows but the volume has {rows}",
            group_map.len()
        )));
    }
    let mut present = vec![false; num_classes];
    for &g in group_map {
        if g >= num_classes {
            return Err(Error::dim(format!("group map entry {g} is not below {num_classes}")));
        }
        present[g] = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(Error::dim(format!("class {missing} has no rows in the group map")));
    }
    let mut scores = Array3::from_elem((num_classes, h, w), f32::NEG_INFINITY);
    for (row, &g) in group_map.iter().enumerate() {
        let src = raw.scores.index_axis(Axis(0), row);
        scores
            .index_axis_mut(Axis(0), g)
            .zip_mut_with(&src, |d, &s| *d = d.max(s));
    }
    let mut out = LogitVolume {
        scores,
        resolution: raw.resolution,
        normalized: raw.normalized,
    };
    if raw.normalized && rows != num_classes {
        out.renormalize();
    }
    Ok(out)
}

/// Per-pixel class labels plus the colours used to draw them.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub labels: Array2<u32>,
    pub palette: Vec<[u8; 3]>,
}

impl SegmentationMap {
    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }

    pub fn colorized(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            image::Rgb(self.palette[self.labels[[y as usize, x as usize]] as usize])
        })
    }

    /// Original image and colour labels blended, next to the plain colour labels.
    pub fn overlay(&self, image: &Raster) -> image::RgbImage {
        let base = image.to_rgb8();
        let colors = self.colorized();
        let (w, h) = (self.width() as u32, self.height() as u32);
        let mut out = image::RgbImage::new(w * 2, h);
        for y in 0..h {
            for x in 0..w {
                let a = base.get_pixel(x, y).0;
                let b = colors.get_pixel(x, y).0;
                let mixed = [0, 1, 2].map(|i| ((a[i] as u16 + b[i] as u16) / 2) as u8);
                out.put_pixel(x, y, image::Rgb(mixed));
                out.put_pixel(x + w, y, image::Rgb(b));
            }
        }
        out
    }

    /// Writes labels as a single-channel PNG (8-bit when they fit, 16-bit otherwise).
    pub fn save_labels(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width() as u32, self.height() as u32);
        let result = if self.num_classes() <= 256 {
            let buf: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
            image::GrayImage::from_raw(w, h, buf)
                .expect("buffer matches dims")
                .save(path)
        } else {
            let buf: Vec<u16> = self.labels.iter().map(|&l| l as u16).collect();
            image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, buf)
                .expect("buffer matches dims")
                .save(path)
        };
        result.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// The usual bit-interleaved segmentation colour map.
pub fn palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            let mut c = [0u8; 3];
            let mut id = i;
            for shift in (0..8).rev() {
                for (ch, v) in c.iter_mut().enumerate() {
                    *v |= (((id >> ch) & 1) as u8) << shift;
                }
                id >>= 3;
            }
            c
        })
        .collect()
}

/// Per-pixel argmax of a normalised volume, ties going to the lower class index.
pub fn segment(probabilities: &LogitVolume, cfg: &InferenceConfig) -> Result<SegmentationMap> {
    if !probabilities.normalized {
        return Err(Error::Contract("segment expects softmax-normalised scores".into()));
    }
    let TieBreak::LowestIndex = cfg.tie_break;
    let (classes, h, w) = probabilities.scores.dim();
    let labels = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for c in 1..classes {
            if probabilities.scores[[c, y, x]] > probabilities.scores[[best, y, x]] {
                best = c;
            }
        }
        best as u32
    });
    Ok(SegmentationMap {
        labels,
        palette: palette(classes),
    })
}

/// Everything needed to turn images into segmentation maps.
#[derive(Clone)]
pub struct Segmenter {
    pub encoder: Arc<dyn DenseEncoder>,
    pub bank: TextBank,
    pub augmentation: AugmentationSpec,
    pub inference: InferenceConfig,
    pub pamr: PamrConfig,
}

impl Segmenter {
    pub fn new(
        encoder: Arc<dyn DenseEncoder>,
        bank: TextBank,
        augmentation: AugmentationSpec,
        inference: InferenceConfig,
        pamr: PamrConfig,
    ) -> Result<Self> {
        augmentation.validate()?;
        inference.validate(encoder.patch_size())?;
        if inference.apply_pamr {
            pamr.validate()?;
        }
        Ok(Self {
            encoder,
            bank,
            augmentation,
            inference,
            pamr,
        })
    }

    /// Normalised class probabilities at the original image resolution, before refinement.
    pub fn slide_inference(&self, image: &Raster) -> Result<LogitVolume> {
        let cfg = &self.inference;
        let resized = match cfg.short_side {
            Some(side) => image.resize_short_side(side),
            None => image.clone(),
        };
        let (padded, (top, left)) = resized.pad_to(cfg.window, cfg.window, CLIP_MEAN);
        let (h, w) = (padded.height(), padded.width());
        let placements = window_placements(h, w, cfg.window, cfg.stride);
        tracing::info!(
            height = h,
            width = w,
            stride = cfg.stride,
            windows = placements.len(),
            "sliding-window inference"
        );

        let per_window = placements
            .par_iter()
            .map(|&(y, x)| {
                let win = padded.crop(y, x, cfg.window, cfg.window)?;
                window_logits(
                    &win,
                    self.encoder.as_ref(),
                    &self.bank,
                    &self.augmentation,
                    cfg.logit_scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let rows = self.bank.num_rows();
        let normalized = per_window.iter().all(|v| v.normalized);
        let mut canvas = Array3::<f32>::zeros((rows, h, w));
        let mut counts = Array2::<f32>::zeros((h, w));
        for (&(y, x), logits) in placements.iter().zip(&per_window) {
            let up = resize_bilinear(logits.scores.view(), cfg.window, cfg.window);
            canvas
                .slice_mut(s![.., y..y + cfg.window, x..x + cfg.window])
                .zip_mut_with(&up, |c, &u| *c += u);
            counts
                .slice_mut(s![y..y + cfg.window, x..x + cfg.window])
                .mapv_inplace(|c| c + 1.0);
        }
        for mut plane in canvas.axis_iter_mut(Axis(0)) {
            plane.zip_mut_with(&counts, |c, &n| *c /= n);
        }
        let averaged = LogitVolume {
            scores: crop(canvas.view(), top, left, resized.height(), resized.width()),
            resolution: Resolution::Pixel,
            normalized,
        };

        let merged = merge_groups(&averaged, &self.bank.group_map, self.bank.num_classes())?;
        let probs = if merged.normalized {
            merged
        } else {
            merged.softmax(cfg.logit_scale)
        };
        Ok(LogitVolume {
            scores: resize_bilinear(probs.scores.view(), image.height(), image.width()),
            resolution: Resolution::Pixel,
            normalized: true,
        })
    }

    /// Final probabilities, refined when configured.
    pub fn probabilities(&self, image: &Raster) -> Result<LogitVolume> {
        let probs = self.slide_inference(image)?;
        if self.inference.apply_pamr {
            refine(&probs, image, &self.pamr)
        } else {
            Ok(probs)
        }
    }

    pub fn run(&self, image: &Raster) -> Result<SegmentationMap> {
        segment(&self.probabilities(image)?, &self.inference)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placements_clamp_to_edges() {
        assert_eq!(axis_positions(224, 224, 28), vec![0]);
        assert_eq!(axis_positions(100, 224, 28), vec![0]);
        assert_eq!(axis_positions(300, 224, 28), vec![0, 28, 56, 76]);
        assert_eq!(axis_positions(448, 224, 224), vec![0, 224]);
    }

    #[test]
    fn stride_equal_to_window_covers_once() {
        let counts = count_map(224, 448, 224, 224);
        assert!(counts.iter().all(|&c| c == 1.0));
    }

    #[test]
    fn coverage_for_standard_strides() {
        for stride in [28, 56, 112, 224] {
            for (h, w) in [(336, 500), (336, 336), (400, 336)] {
                assert!(count_map(h, w, 224, stride).iter().all(|&c| c >= 1.0));
            }
        }
    }

    #[test]
    fn merge_identity_map_is_unchanged() {
        let raw = LogitVolume::raw(
            Array3::from_shape_fn((3, 2, 2), |(c, y, x)| (c * 4 + y * 2 + x) as f32),
            Resolution::Patch,
        );
        assert_eq!(merge_groups(&raw, &[0, 1, 2], 3).unwrap(), raw);
    }

    #[test]
    fn merge_rejects_uncovered_class() {
        let raw = LogitVolume::raw(Array3::zeros((2, 1, 1)), Resolution::Patch);
        assert!(merge_groups(&raw, &[0, 0], 2).is_err());
        assert!(merge_groups(&raw, &[0], 1).is_err());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let probs = LogitVolume {
            scores: Array3::from_elem((2, 3, 3), 0.5),
            resolution: Resolution::Pixel,
            normalized: true,
        };
        let map = segment(&probs, &InferenceConfig::default()).unwrap();
        assert!(map.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn raw_scores_are_rejected_by_segment() {
        let raw = LogitVolume::raw(Array3::zeros((2, 1, 1)), Resolution::Pixel);
        assert!(matches!(
            segment(&raw, &InferenceConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn palette_starts_with_standard_colours() {
        let p = palette(4);
        assert_eq!(p, vec![[0, 0, 0], [128, 0, 0], [0, 128, 0], [128, 128, 0]]);
    }
}
