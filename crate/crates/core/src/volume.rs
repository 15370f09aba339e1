use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Patch,
    Pixel,
}

/// Class scores over a spatial grid, `classes × rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVolume {
    pub scores: Array3<f32>,
    pub resolution: Resolution,
    /// Whether every location's class vector is a probability distribution.
    pub normalized: bool,
}

impl LogitVolume {
    pub fn raw(scores: Array3<f32>, resolution: Resolution) -> Self {
        Self {
            scores,
            resolution,
            normalized: false,
        }
    }

    pub fn classes(&self) -> usize {
        self.scores.dim().0
    }

    pub fn height(&self) -> usize {
        self.scores.dim().1
    }

    pub fn width(&self) -> usize {
        self.scores.dim().2
    }

    pub fn ensure_same_shape(&self, other: &LogitVolume, what: &str) -> Result<()> {
        if self.scores.dim() != other.scores.dim() {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.scores.dim(),
                other.scores.dim()
            )));
        }
        Ok(())
    }

    /// Multiplies by `scale` and applies a softmax over classes at every location.
    pub fn softmax(&self, scale: f32) -> LogitVolume {
        let mut scores = self.scores.mapv(|v| v * scale);
        for mut lane in scores.lanes_mut(Axis(0)) {
            let max = lane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                sum += *v as f64;
            }
            lane.mapv_inplace(|v| (v as f64 / sum) as f32);
        }
        LogitVolume {
            scores,
            resolution: self.resolution,
            normalized: true,
        }
    }

    /// Rescales each location's class vector to sum to one.
    pub fn renormalize(&mut self) {
        for mut lane in self.scores.lanes_mut(Axis(0)) {
            let sum: f64 = lane.iter().map(|&v| v as f64).sum();
            if sum > 0.0 {
                lane.mapv_inplace(|v| (v as f64 / sum) as f32);
            }
        }
        self.normalized = true;
    }

    /// Largest deviation of a per-location class sum from one.
    pub fn max_mass_error(&self) -> f32 {
        self.scores
            .lanes(Axis(0))
            .into_iter()
            .map(|l| (l.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() as f32)
            .fold(0.0, f32::max)
    }
}
