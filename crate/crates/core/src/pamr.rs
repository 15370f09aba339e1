//! Pixel-adaptive mask refinement: class maps are repeatedly averaged over dilated
//! 8-neighbourhoods, weighted by colour affinity to the centre pixel.

use ndarray::{Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::volume::{LogitVolume, Resolution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PamrConfig {
    pub iterations: usize,
    pub dilations: Vec<usize>,
}

impl Default for PamrConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            dilations: vec![1, 2, 4, 8, 12, 24],
        }
    }
}

impl PamrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() {
            return Err(Error::config("pamr.dilations must not be empty"));
        }
        let mut seen = self.dilations.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.dilations.len() || seen[0] == 0 {
            return Err(Error::config(format!(
                "pamr.dilations must be positive and distinct, got {:?}",
                self.dilations
            )));
        }
        Ok(())
    }

    fn offsets(&self) -> Vec<(isize, isize)> {
        let mut out = Vec::with_capacity(8 * self.dilations.len());
        for &d in &self.dilations {
            let d = d as isize;
            for (dy, dx) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
                out.push((dy * d, dx * d));
            }
        }
        out
    }
}

#[inline]
fn clamp(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Softmax-normalised neighbour weights, `H·W·P` laid out pixel-major.
fn affinities(image: &Array3<f32>, cfg: &PamrConfig) -> Vec<f32> {
    let (channels, h, w) = image.dim();
    let offsets = cfg.offsets();
    let p = offsets.len();
    let mut out = vec![0.0f32; h * w * p];
    out.par_chunks_mut(w * p).enumerate().for_each(|(y, row)| {
        let mut logits = vec![0.0f64; p];
        for x in 0..w {
            logits.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..channels {
                let plane = image.index_axis(Axis(0), c);
                let centre = plane[[y, x]] as f64;
                // spread over every dilated 3x3 window, centre counted once per dilation
                let mut values = Vec::with_capacity(9 * cfg.dilations.len());
                for chunk in offsets.chunks(8) {
                    values.push(centre);
                    for &(dy, dx) in chunk {
                        values.push(plane[[clamp(y as isize + dy, h), clamp(x as isize + dx, w)]] as f64);
                    }
                }
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let denom = 1e-8 + 0.1 * var.sqrt();
                for (di, chunk) in values.chunks(9).enumerate() {
                    for (j, nb) in chunk[1..].iter().enumerate() {
                        logits[di * 8 + j] -= (centre - nb).abs() / denom;
                    }
                }
            }
            let logits_mean: Vec<f64> = logits.iter().map(|v| v / channels as f64).collect();
            let max = logits_mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits_mean.iter().map(|v| (v - max).exp()).sum();
            for (j, v) in logits_mean.iter().enumerate() {
                row[x * p + j] = ((v - max).exp() / sum) as f32;
            }
        }
    });
    out
}

/// Refines a pixel-resolution probability volume using colour affinities of `image`.
pub fn refine(probabilities: &LogitVolume, image: &Raster, cfg: &PamrConfig) -> Result<LogitVolume> {
    cfg.validate()?;
    let (classes, h, w) = probabilities.scores.dim();
    if (h, w) != (image.height(), image.width()) {
        return Err(Error::dim(format!(
            "PAMR: probabilities are {h}x{w} but the image is {}x{}",
            image.height(),
            image.width()
        )));
    }
    if cfg.iterations == 0 {
        return Ok(probabilities.clone());
    }
    let offsets = cfg.offsets();
    let p = offsets.len();
    let aff = affinities(image.data(), cfg);

    // pixel-major working layout: mask[(y*w + x)*classes + c]
    let mut mask: Vec<f32> = Vec::with_capacity(h * w * classes);
    for y in 0..h {
        for x in 0..w {
            for c in 0..classes {
                mask.push(probabilities.scores[[c, y, x]]);
            }
        }
    }
    let mut next = vec![0.0f32; mask.len()];
    for _ in 0..cfg.iterations {
        next.par_chunks_mut(w * classes).enumerate().for_each(|(y, row)| {
            let mut acc = vec![0.0f64; classes];
            for x in 0..w {
                acc.iter_mut().for_each(|v| *v = 0.0);
                let weights = &aff[(y * w + x) * p..(y * w + x + 1) * p];
                for (&(dy, dx), &a) in offsets.iter().zip(weights) {
                    let ny = clamp(y as isize + dy, h);
                    let nx = clamp(x as isize + dx, w);
                    let src = &mask[(ny * w + nx) * classes..(ny * w + nx + 1) * classes];
                    for (o, &m) in acc.iter_mut().zip(src) {
                        *o += a as f64 * m as f64;
                    }
                }
                for (c, v) in acc.iter().enumerate() {
                    row[x * classes + c] = *v as f32;
                }
            }
        });
        std::mem::swap(&mut mask, &mut next);
    }

    let scores = Array3::from_shape_fn((classes, h, w), |(c, y, x)| mask[(y * w + x) * classes + c]);
    let mut out = LogitVolume {
        scores,
        resolution: Resolution::Pixel,
        normalized: probabilities.normalized,
    };
    if probabilities.normalized {
        out.renormalize();
    }
    Ok(out)
}
