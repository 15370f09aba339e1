//! Loop-based f64 reference implementations shared by the integration tests. They
//! read the same weight structs as the library but share none of its math.
#![allow(dead_code)]

use ovseg::backbone::{AttentionMode, AttentionWeights, VisionWeights};
use ovseg::raster::Raster;
use ovseg::tensor::{Activation, LayerNorm, Linear};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(a: &ndarray::Array2<f32>) -> Mat {
    a.outer_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

pub fn linear(x: &Mat, l: &Linear) -> Mat {
    let (din, dout) = (l.weight.nrows(), l.weight.ncols());
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| {
                    let mut s = l.bias.as_ref().map_or(0.0, |b| b[o] as f64);
                    for i in 0..din {
                        s += row[i] * l.weight[[i, o]] as f64;
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, ln: &LayerNorm) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + ln.eps as f64).sqrt() * ln.gamma[i] as f64 + ln.beta[i] as f64)
                .collect()
        })
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Which projection pairs each mode sums, written out independently of the library.
pub fn mode_pairs(mode: AttentionMode) -> Vec<(char, char)> {
    match mode {
        AttentionMode::OriginalQk => vec![('q', 'k')],
        AttentionMode::Qq => vec![('q', 'q')],
        AttentionMode::Kk => vec![('k', 'k')],
        AttentionMode::Vv => vec![('v', 'v')],
        AttentionMode::QqPlusKk => vec![('q', 'q'), ('k', 'k')],
        AttentionMode::QqPlusVv => vec![('q', 'q'), ('v', 'v')],
        AttentionMode::QqKkVv => vec![('q', 'q'), ('k', 'k'), ('v', 'v')],
    }
}

/// `heads × n × n` attention of already-normalised tokens.
pub fn attention(x: &Mat, w: &AttentionWeights, mode: AttentionMode) -> Vec<Mat> {
    let q = linear(x, &w.q);
    let k = linear(x, &w.k);
    let v = linear(x, &w.v);
    let n = x.len();
    let dh = q[0].len() / w.num_heads;
    let pick = |c: char| match c {
        'q' => &q,
        'k' => &k,
        _ => &v,
    };
    (0..w.num_heads)
        .map(|h| {
            let mut out = vec![vec![0.0; n]; n];
            for (a, b) in mode_pairs(mode) {
                let (a, b) = (pick(a), pick(b));
                for i in 0..n {
                    let scores: Vec<f64> = (0..n)
                        .map(|j| {
                            let mut s = 0.0;
                            for c in h * dh..(h + 1) * dh {
                                s += a[i][c] * b[j][c];
                            }
                            s / (dh as f64).sqrt()
                        })
                        .collect();
                    for (j, p) in softmax(&scores).into_iter().enumerate() {
                        out[i][j] += p;
                    }
                }
            }
            out
        })
        .collect()
}

/// Mean of the intermediate maps averaged with the final map, head by head.
pub fn fuse(final_map: &[Mat], intermediate: &[Vec<Mat>]) -> Vec<Mat> {
    if intermediate.is_empty() {
        return final_map.to_vec();
    }
    let m = intermediate.len() as f64;
    final_map
        .iter()
        .enumerate()
        .map(|(h, fm)| {
            fm.iter()
                .enumerate()
                .map(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, f)| {
                            let mean = intermediate.iter().map(|im| im[h][i][j]).sum::<f64>() / m;
                            (f + mean) / 2.0
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// `concat_h(A_h V_h) W_O + b_O`.
pub fn attend(x: &Mat, w: &AttentionWeights, maps: &[Mat]) -> Mat {
    let v = linear(x, &w.v);
    let n = x.len();
    let d = v[0].len();
    let dh = d / w.num_heads;
    let mut mixed = vec![vec![0.0; d]; n];
    for (h, map) in maps.iter().enumerate() {
        for i in 0..n {
            for c in h * dh..(h + 1) * dh {
                mixed[i][c] = (0..n).map(|j| map[i][j] * v[j][c]).sum();
            }
        }
    }
    linear(&mixed, &w.out)
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn mlp(x: &Mat, fc1: &Linear, fc2: &Linear, act: Activation) -> Mat {
    let mut h = linear(x, fc1);
    for row in &mut h {
        for v in row.iter_mut() {
            *v = match act {
                Activation::QuickGelu => *v / (1.0 + (-1.702 * *v).exp()),
                Activation::GeluTanh => {
                    0.5 * *v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (*v + 0.044715 * v.powi(3))).tanh())
                }
            };
        }
    }
    linear(&h, fc2)
}

/// Surgery settings for [`forward`].
#[derive(Debug, Clone)]
pub struct Surgery {
    pub mode: AttentionMode,
    pub intermediate: Vec<usize>,
    pub drop_final_ffn: bool,
}

impl Surgery {
    pub fn none() -> Self {
        Self {
            mode: AttentionMode::OriginalQk,
            intermediate: Vec::new(),
            drop_final_ffn: false,
        }
    }
}

/// Everything the reference pass computes, for comparison at several depths.
pub struct Forward {
    pub final_maps: Vec<Mat>,
    pub pre_final: Mat,
    pub final_tokens: Mat,
    /// Patch rows projected to the joint space (CLS dropped).
    pub features: Mat,
}

/// Full image-tower forward pass on an already normalised image whose grid equals the
/// pretrained grid.
pub fn forward(w: &VisionWeights, image: &Raster, s: &Surgery) -> Forward {
    let p = w.patch_size;
    let (rows, cols) = (image.height() / p, image.width() / p);
    assert_eq!(
        rows * cols + 1,
        w.position_embedding.nrows(),
        "oracle needs the native grid"
    );
    let d = w.class_embedding.len();
    let data = image.data();
    let mut tokens: Mat = vec![w.class_embedding.iter().map(|&v| v as f64).collect()];
    for r in 0..rows {
        for c in 0..cols {
            let mut t = vec![0.0; d];
            let mut i = 0;
            for ch in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        let px = data[[ch, r * p + y, c * p + x]] as f64;
                        for (o, tv) in t.iter_mut().enumerate() {
                            *tv += px * w.patch_embedding[[i, o]] as f64;
                        }
                        i += 1;
                    }
                }
            }
            tokens.push(t);
        }
    }
    for (i, t) in tokens.iter_mut().enumerate() {
        for (o, v) in t.iter_mut().enumerate() {
            *v += w.position_embedding[[i, o]] as f64;
        }
    }
    let mut x = layer_norm(&tokens, &w.pre_norm);
    let layers = w.blocks.len();
    let mut recorded = Vec::new();
    for (i, b) in w.blocks[..layers - 1].iter().enumerate() {
        let normed = layer_norm(&x, &b.ln1);
        if s.intermediate.contains(&(i + 1)) {
            recorded.push(attention(&normed, &b.attn, s.mode));
        }
        let maps = attention(&normed, &b.attn, AttentionMode::OriginalQk);
        x = add(&x, &attend(&normed, &b.attn, &maps));
        let h = layer_norm(&x, &b.ln2);
        x = add(&x, &mlp(&h, &b.mlp.fc1, &b.mlp.fc2, b.mlp.activation));
    }
    let last = &w.blocks[layers - 1];
    let normed = layer_norm(&x, &last.ln1);
    let final_maps = fuse(&attention(&normed, &last.attn, s.mode), &recorded);
    let mut out = add(&x, &attend(&normed, &last.attn, &final_maps));
    if !s.drop_final_ffn {
        let h = layer_norm(&out, &last.ln2);
        out = add(&out, &mlp(&h, &last.mlp.fc1, &last.mlp.fc2, last.mlp.activation));
    }
    let post = layer_norm(&out, &w.post_norm);
    let proj = Linear::new(w.projection.clone(), None);
    let features = linear(&post, &proj)[1..].to_vec();
    Forward {
        final_maps,
        pre_final: x,
        final_tokens: out,
        features,
    }
}

pub fn max_abs_diff(a: &Mat, b: &ndarray::Array2<f32>) -> f64 {
    assert_eq!((a.len(), a[0].len()), b.dim());
    a.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, v)| (v - b[[i, j]] as f64).abs()))
        .fold(0.0, f64::max)
}

/// Per-patch channel means and mean squares (plus a constant). Features ignore the
/// order of pixels inside a patch, so the encoder commutes with flips and rotations.
#[derive(Debug, Clone, Copy)]
pub struct PatchStatsEncoder {
    pub patch: usize,
}

impl ovseg::backbone::DenseEncoder for PatchStatsEncoder {
    fn patch_size(&self) -> usize {
        self.patch
    }

    fn encode(&self, window: &Raster) -> ovseg::Result<ovseg::backbone::VisualFeatures> {
        let p = self.patch;
        let (rows, cols) = (window.height() / p, window.width() / p);
        let data = window.data();
        let mut f = ndarray::Array2::<f32>::zeros((rows * cols, 7));
        for r in 0..rows {
            for c in 0..cols {
                let mut row = f.row_mut(r * cols + c);
                for ch in 0..3 {
                    let (mut s, mut s2) = (0.0f64, 0.0f64);
                    for y in 0..p {
                        for x in 0..p {
                            let v = data[[ch, r * p + y, c * p + x]] as f64;
                            s += v;
                            s2 += v * v;
                        }
                    }
                    let n = (p * p) as f64;
                    row[ch] = (s / n) as f32 - 0.5;
                    row[3 + ch] = (s2 / n) as f32 - 0.3;
                }
                row[6] = 0.1;
            }
        }
        Ok(ovseg::backbone::VisualFeatures {
            patch_features: f,
            grid: (rows, cols),
        })
    }
}

/// A text bank over `names` (with `extra` extra phrases for class 0) from the hashing
/// encoder, single plain template.
pub fn toy_bank(names: &[&str], extra: &[&str], dim: usize) -> ovseg::text::TextBank {
    use ovseg::text::{attach_background, ClassEntry, HashingTextEncoder, TextBank, Vocabulary};
    let classes = names
        .iter()
        .enumerate()
        .map(|(i, n)| ClassEntry {
            class_id: i,
            name: n.to_string(),
            subclass_names: Vec::new(),
            aux_definition: None,
            aux_synonym: None,
        })
        .collect();
    let mut vocab = Vocabulary::new("toy", classes, Some(0)).unwrap();
    if !extra.is_empty() {
        let phrases: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
        vocab = attach_background(&vocab, &phrases).unwrap();
    }
    let encoder = HashingTextEncoder::new(dim, 3);
    TextBank::build(&vocab, &["a photo of a {}.".to_string()], &encoder, None, 0.0).unwrap()
}

/// Cosine logits `rows × grid` computed with plain loops.
pub fn cosine_grid(features: &ndarray::Array2<f32>, text: &ndarray::Array2<f32>, grid: (usize, usize)) -> Vec<Mat> {
    let norms: Vec<f64> = features
        .outer_iter()
        .map(|r| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    (0..text.nrows())
        .map(|t| {
            (0..grid.0)
                .map(|y| {
                    (0..grid.1)
                        .map(|x| {
                            let i = y * grid.1 + x;
                            let dot: f64 = (0..text.ncols())
                                .map(|k| features[[i, k]] as f64 * text[[t, k]] as f64)
                                .sum();
                            dot / norms[i]
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Half-pixel-centred bilinear resize of one plane.
pub fn bilinear(plane: &Mat, out_h: usize, out_w: usize) -> Mat {
    let (h, w) = (plane.len(), plane[0].len());
    let tap = |o: usize, n_in: usize, n_out: usize| {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    (0..out_h)
        .map(|oy| {
            let (y0, y1, ty) = tap(oy, h, out_h);
            (0..out_w)
                .map(|ox| {
                    let (x0, x1, tx) = tap(ox, w, out_w);
                    let top = plane[y0][x0] * (1.0 - tx) + plane[y0][x1] * tx;
                    let bot = plane[y1][x0] * (1.0 - tx) + plane[y1][x1] * tx;
                    top * (1.0 - ty) + bot * ty
                })
                .collect()
        })
        .collect()
}
