//! Dense math shared by the vision and text transformers.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(gamma: Array1<f32>, beta: Array1<f32>) -> Self {
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + self.eps as f64).sqrt();
            Zip::from(&mut row)
                .and(&self.gamma)
                .and(&self.beta)
                .for_each(|v, &g, &b| *v = ((*v as f64 - mean) * inv) as f32 * g + b);
        }
        out
    }
}

/// Affine map stored as `(in, out)` so that `forward` is `x · W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f32>,
    pub bias: Option<Array1<f32>>,
}

impl Linear {
    pub fn new(weight: Array2<f32>, bias: Option<Array1<f32>>) -> Self {
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x · sigmoid(1.702 x)`, the activation used by the OpenAI CLIP checkpoints.
    #[default]
    QuickGelu,
    GeluTanh,
}

impl Activation {
    pub fn apply(self, x: &mut Array2<f32>) {
        match self {
            Activation::QuickGelu => x.mapv_inplace(|v| v / (1.0 + (-1.702 * v).exp())),
            Activation::GeluTanh => x.mapv_inplace(|v| {
                let c = (2.0f32 / std::f32::consts::PI).sqrt();
                0.5 * v * (1.0 + (c * (v + 0.044_715 * v * v * v)).tanh())
            }),
        }
    }
}

/// Two-layer feed-forward block.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut h = self.fc1.forward(x);
        self.activation.apply(&mut h);
        self.fc2.forward(&h)
    }
}

/// Numerically stable softmax along each row, in place. Sums are accumulated in f64.
pub fn softmax_rows_inplace(x: &mut Array2<f32>) {
    for mut row in x.rows_mut() {
        softmax_inplace(row.as_slice_mut().expect("rows are contiguous"));
    }
}

pub fn softmax_inplace(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for x in v.iter_mut() {
        let e = ((*x - max) as f64).exp() as f32;
        sum += e as f64;
        *x = e;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x = (*x as f64 * inv) as f32;
    }
}

/// L2-normalises every row. Zero rows are left untouched.
pub fn l2_normalize_rows(x: &mut Array2<f32>) {
    for mut row in x.rows_mut() {
        let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| (v as f64 / norm) as f32);
        }
    }
}

pub fn l2_normalize(v: &mut Array1<f32>) {
    let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.mapv_inplace(|x| (x as f64 / norm) as f32);
    }
}

/// Source sample positions for a half-pixel-centred resize along one axis.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let t = (src - i0 as f64) as f32;
            (i0, i1, t)
        })
        .collect()
}

/// Bilinear resize of a channel-first volume with half-pixel centres
/// (the `align_corners = false` convention). Same-size input is returned verbatim.
pub fn resize_bilinear(src: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    if h == out_h && w == out_w {
        return src.to_owned();
    }
    let ys = bilinear_taps(h, out_h);
    let xs = bilinear_taps(w, out_w);
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    Zip::from(out.outer_iter_mut())
        .and(src.outer_iter())
        .par_for_each(|mut dst, plane| {
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let top = plane[[y0, x0]] * (1.0 - tx) + plane[[y0, x1]] * tx;
                    let bot = plane[[y1, x0]] * (1.0 - tx) + plane[[y1, x1]] * tx;
                    dst[[oy, ox]] = top * (1.0 - ty) + bot * ty;
                }
            }
        });
    out
}

fn cubic_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.75;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

fn bicubic_taps(in_len: usize, out_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let clamp = |k: f64| (base + k).clamp(0.0, (in_len - 1) as f64) as usize;
            ([clamp(-1.0), clamp(0.0), clamp(1.0), clamp(2.0)], cubic_weights(t))
        })
        .collect()
}

/// Bicubic resize (cubic convolution with a = -0.75, half-pixel centres, edge clamping).
pub fn resize_bicubic(src: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    if h == out_h && w == out_w {
        return src.to_owned();
    }
    let ys = bicubic_taps(h, out_h);
    let xs = bicubic_taps(w, out_w);
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for ch in 0..c {
        let plane = src.index_axis(Axis(0), ch);
        for (oy, (yi, yw)) in ys.iter().enumerate() {
            for (ox, (xi, xw)) in xs.iter().enumerate() {
                let mut acc = 0.0f64;
                for a in 0..4 {
                    let mut row = 0.0f64;
                    for b in 0..4 {
                        row += plane[[yi[a], xi[b]]] as f64 * xw[b];
                    }
                    acc += row * yw[a];
                }
                out[[ch, oy, ox]] = acc as f32;
            }
        }
    }
    out
}

/// Copies a `(rows, cols)` window starting at `(top, left)` out of a channel-first volume.
pub fn crop(src: ArrayView3<f32>, top: usize, left: usize, rows: usize, cols: usize) -> Array3<f32> {
    src.slice(s![.., top..top + rows, left..left + cols]).to_owned()
}
