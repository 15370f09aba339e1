//! Attention maps: the original query-key map and the self-self variants used by the
//! final encoder layer, plus the cross-layer fusion of recorded maps.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows_inplace, Linear};

/// Which similarity matrices are softmaxed and summed to form the attention map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// softmax(q kᵀ), the pretrained attention.
    OriginalQk,
    Qq,
    Kk,
    Vv,
    #[default]
    QqPlusKk,
    QqPlusVv,
    QqKkVv,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 7] = [
        AttentionMode::OriginalQk,
        AttentionMode::Qq,
        AttentionMode::Kk,
        AttentionMode::Vv,
        AttentionMode::QqPlusKk,
        AttentionMode::QqPlusVv,
        AttentionMode::QqKkVv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::OriginalQk => "original_qk",
            AttentionMode::Qq => "qq",
            AttentionMode::Kk => "kk",
            AttentionMode::Vv => "vv",
            AttentionMode::QqPlusKk => "qq_plus_kk",
            AttentionMode::QqPlusVv => "qq_plus_vv",
            AttentionMode::QqKkVv => "qq_kk_vv",
        }
    }

    /// Number of row-stochastic terms summed; every row of the map sums to this value.
    pub fn row_mass(self) -> f32 {
        self.terms().len() as f32
    }

    fn terms(self) -> &'static [(Proj, Proj)] {
        use Proj::*;
        match self {
            AttentionMode::OriginalQk => &[(Q, K)],
            AttentionMode::Qq => &[(Q, Q)],
            AttentionMode::Kk => &[(K, K)],
            AttentionMode::Vv => &[(V, V)],
            AttentionMode::QqPlusKk => &[(Q, Q), (K, K)],
            AttentionMode::QqPlusVv => &[(Q, Q), (V, V)],
            AttentionMode::QqKkVv => &[(Q, Q), (K, K), (V, V)],
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown attention mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Proj {
    Q,
    K,
    V,
}

/// How recorded intermediate-layer maps are combined with the final-layer map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionGranularity {
    /// Heads are aligned by index across layers.
    #[default]
    PerHead,
    /// Intermediate maps are averaged over heads first and shared by every final head.
    HeadAveraged,
}

/// One `(N+1)×(N+1)` map per head, stored as `heads × tokens × tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub per_head: Array3<f32>,
}

impl AttentionMap {
    pub fn new(per_head: Array3<f32>) -> Result<Self> {
        let (_, r, c) = per_head.dim();
        if r != c {
            return Err(Error::dim(format!("attention map is {r}x{c}, expected square")));
        }
        Ok(Self { per_head })
    }

    pub fn heads(&self) -> usize {
        self.per_head.dim().0
    }

    pub fn tokens(&self) -> usize {
        self.per_head.dim().1
    }

    pub fn head(&self, h: usize) -> ArrayView2<'_, f32> {
        self.per_head.index_axis(Axis(0), h)
    }

    /// Mean over heads.
    pub fn head_mean(&self) -> Array2<f32> {
        self.per_head
            .mean_axis(Axis(0))
            .expect("attention maps have at least one head")
    }

    /// Row sums per head, `heads × tokens`.
    pub fn row_sums(&self) -> Array2<f32> {
        self.per_head.sum_axis(Axis(2))
    }
}

/// The projected `q`, `k`, `v` activations of one layer.
#[derive(Debug, Clone)]
pub struct Projections {
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
}

/// Multi-head attention parameters of one residual block.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub num_heads: usize,
}

impl AttentionWeights {
    pub fn width(&self) -> usize {
        self.q.in_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.num_heads
    }

    pub fn project(&self, x: &Array2<f32>) -> Result<Projections> {
        if x.ncols() != self.width() {
            return Err(Error::dim(format!(
                "token width: input has {} features, projections expect {}",
                x.ncols(),
                self.width()
            )));
        }
        Ok(Projections {
            q: self.q.forward(x),
            k: self.k.forward(x),
            v: self.v.forward(x),
        })
    }

    /// Computes the attention map of `x` (already layer-normalised) under `mode`.
    pub fn attention_map(&self, x: &Array2<f32>, mode: AttentionMode) -> Result<AttentionMap> {
        let p = self.project(x)?;
        Ok(attention_from_projections(&p, self.num_heads, mode, false))
    }

    /// `concat_h(A_h v_h) · W_O + b_O`.
    pub fn apply(&self, map: &AttentionMap, v: &Array2<f32>) -> Result<Array2<f32>> {
        let n = v.nrows();
        if map.tokens() != n || map.heads() != self.num_heads {
            return Err(Error::dim(format!(
                "attention map: expected {} heads over {n} tokens, got {} heads over {} tokens",
                self.num_heads,
                map.heads(),
                map.tokens()
            )));
        }
        let dh = self.head_dim();
        let mut mixed = Array2::<f32>::zeros((n, self.width()));
        for h in 0..self.num_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let head_out = map.head(h).dot(&v.slice(cols));
            mixed.slice_mut(cols).assign(&head_out);
        }
        Ok(self.out.forward(&mixed))
    }
}

/// Per-head attention from already-projected activations. Scaling uses `1/√d_head`.
/// With `causal`, position `i` only sees positions `≤ i`.
pub fn attention_from_projections(
    p: &Projections,
    num_heads: usize,
    mode: AttentionMode,
    causal: bool,
) -> AttentionMap {
    let n = p.q.nrows();
    let dh = p.q.ncols() / num_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let pick = |which: Proj| match which {
        Proj::Q => &p.q,
        Proj::K => &p.k,
        Proj::V => &p.v,
    };
    let mut per_head = Array3::<f32>::zeros((num_heads, n, n));
    for h in 0..num_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut acc = per_head.index_axis_mut(Axis(0), h);
        for &(a, b) in mode.terms() {
            let lhs = pick(a).slice(cols);
            let rhs = pick(b).slice(cols);
            let mut scores = lhs.dot(&rhs.t());
            scores.mapv_inplace(|v| v * scale);
            if causal {
                for i in 0..n {
                    for j in i + 1..n {
                        scores[[i, j]] = f32::NEG_INFINITY;
                    }
                }
            }
            softmax_rows_inplace(&mut scores);
            acc += &scores;
        }
    }
    AttentionMap { per_head }
}

/// Self-self attention of a layer: `x` is the layer input after its pre-attention
/// normalisation.
pub fn self_self_attention(x: &Array2<f32>, weights: &AttentionWeights, mode: AttentionMode) -> Result<AttentionMap> {
    weights.attention_map(x, mode)
}

/// Averages the final-layer map with the mean of the recorded intermediate maps.
/// An empty intermediate list returns the final map unchanged.
pub fn refined_attention(
    final_map: &AttentionMap,
    intermediate: &[AttentionMap],
    granularity: FusionGranularity,
) -> Result<AttentionMap> {
    if intermediate.is_empty() {
        return Ok(final_map.clone());
    }
    for (i, m) in intermediate.iter().enumerate() {
        if m.per_head.dim() != final_map.per_head.dim() {
            return Err(Error::dim(format!(
                "intermediate map {i} has shape {:?}, final map has {:?}",
                m.per_head.dim(),
                final_map.per_head.dim()
            )));
        }
    }
    let count = intermediate.len() as f32;
    let mut mean = Array3::<f32>::zeros(final_map.per_head.dim());
    for m in intermediate {
        mean += &m.per_head;
    }
    mean.mapv_inplace(|v| v / count);
    if granularity == FusionGranularity::HeadAveraged {
        let shared = mean.mean_axis(Axis(0)).expect("at least one head");
        for mut head in mean.outer_iter_mut() {
            head.assign(&shared);
        }
    }
    let mut per_head = final_map.per_head.clone();
    per_head += &mean;
    per_head.mapv_inplace(|v| v / 2.0);
    Ok(AttentionMap { per_head })
}
