//! Channel-first RGB rasters.

use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::tensor;

pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

/// A 3×H×W image. Pixel values are in `[0, 1]` unless explicitly normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    data: Array3<f32>,
}

impl Raster {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(Error::dim(format!("channels: expected 3, got {}", data.dim().0)));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self {
            data: Array3::from_shape_fn((3, height, width), |(c, _, _)| rgb[c]),
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        });
        Self { data }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (_, h, w) = self.data.dim();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.data[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-channel `(x - mean) / std`.
    pub fn normalized(&self, mean: [f32; 3], std: [f32; 3]) -> Self {
        let mut data = self.data.clone();
        for (c, mut plane) in data.outer_iter_mut().enumerate() {
            plane.mapv_inplace(|v| (v - mean[c]) / std[c]);
        }
        Self { data }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            data: self.data.slice(s![.., .., ..;-1]).to_owned(),
        }
    }

    pub fn flip_vertical(&self) -> Self {
        Self {
            data: self.data.slice(s![.., ..;-1, ..]).to_owned(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() {
            return Err(Error::dim(format!(
                "crop {height}x{width}@({top},{left}) exceeds raster {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Self {
            data: tensor::crop(self.data.view(), top, left, height, width),
        })
    }

    pub fn resize(&self, height: usize, width: usize) -> Self {
        Self {
            data: tensor::resize_bilinear(self.data.view(), height, width),
        }
    }

    /// Scales so that the shorter side equals `short_side`, keeping the aspect ratio.
    pub fn resize_short_side(&self, short_side: usize) -> Self {
        let (h, w) = (self.height(), self.width());
        let scale = short_side as f64 / h.min(w) as f64;
        let nh = ((h as f64 * scale).round() as usize).max(1);
        let nw = ((w as f64 * scale).round() as usize).max(1);
        self.resize(nh, nw)
    }

    /// Pads so that both sides are at least `min_h`×`min_w`, splitting the padding evenly
    /// between the two ends of each axis. Returns the padded raster and the `(top, left)` offset.
    pub fn pad_to(&self, min_h: usize, min_w: usize, fill: [f32; 3]) -> (Self, (usize, usize)) {
        let (h, w) = (self.height(), self.width());
        let (ph, pw) = (h.max(min_h), w.max(min_w));
        if (ph, pw) == (h, w) {
            return (self.clone(), (0, 0));
        }
        let (top, left) = ((ph - h) / 2, (pw - w) / 2);
        let mut out = Self::filled(ph, pw, fill);
        out.data
            .slice_mut(s![.., top..top + h, left..left + w])
            .assign(&self.data);
        (out, (top, left))
    }

    /// Rec. 601 luminance replicated into all three channels.
    pub fn grayscale(&self) -> Self {
        let r = self.data.index_axis(Axis(0), 0);
        let g = self.data.index_axis(Axis(0), 1);
        let b = self.data.index_axis(Axis(0), 2);
        let y = &r * 0.299 + &g * 0.587 + &b * 0.114;
        let data = ndarray::stack(Axis(0), &[y.view(), y.view(), y.view()]).expect("same shape");
        Self { data }
    }

    /// Separable Gaussian blur with reflect padding.
    pub fn gaussian_blur(&self, kernel: usize, sigma: f32) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "gaussian blur kernel must be odd and positive, got {kernel}"
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!(
                "gaussian blur sigma must be positive, got {sigma}"
            )));
        }
        let half = (kernel / 2) as isize;
        let mut weights: Vec<f32> = (-half..=half)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f32 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);

        let (c, h, w) = self.data.dim();
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let mut m = i.rem_euclid(period);
            if m >= n {
                m = period - m;
            }
            m as usize
        };
        let mut tmp = Array3::<f32>::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, wt) in weights.iter().enumerate() {
                        let xx = reflect(x as isize + k as isize - half, w);
                        acc += wt * self.data[[ch, y, xx]];
                    }
                    tmp[[ch, y, x]] = acc;
                }
            }
        }
        let mut out = Array3::<f32>::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, wt) in weights.iter().enumerate() {
                        let yy = reflect(y as isize + k as isize - half, h);
                        acc += wt * tmp[[ch, yy, x]];
                    }
                    out[[ch, y, x]] = acc;
                }
            }
        }
        Ok(Self { data: out })
    }
}
