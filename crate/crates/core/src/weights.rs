//! Loading CLIP checkpoints in the Hugging Face `safetensors` layout.
//!
//! A backbone id such as `ViT-B/16` resolves to `<weights dir>/clip-vit-base-patch16/`,
//! which must contain `model.safetensors` and either `tokenizer.json` or the
//! `vocab.json` + `merges.txt` pair. The weights directory comes from the run config or
//! the `OVSEG_WEIGHTS_DIR` environment variable. Nothing is downloaded.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::backbone::{AttentionWeights, ResidualBlock, VisionWeights};
use crate::error::{Error, Result};
use crate::tensor::{Activation, LayerNorm, Linear, Mlp};
use crate::text::{ClipTokenizer, TextWeights};

pub const WEIGHTS_DIR_ENV: &str = "OVSEG_WEIGHTS_DIR";

pub fn backbone_dir_name(backbone_id: &str) -> Option<&'static str> {
    match backbone_id {
        "ViT-B/16" => Some("clip-vit-base-patch16"),
        "ViT-B/32" => Some("clip-vit-base-patch32"),
        "ViT-L/14" => Some("clip-vit-large-patch14"),
        "ViT-L/14@336px" => Some("clip-vit-large-patch14-336"),
        _ => None,
    }
}

/// The weights directory from config, falling back to the environment.
pub fn weights_root(configured: Option<&Path>) -> Option<PathBuf> {
    configured
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from))
}

/// Directory holding the checkpoint for `backbone_id`. `root` may itself be the
/// checkpoint directory.
pub fn resolve_backbone(backbone_id: &str, root: Option<&Path>) -> Result<PathBuf> {
    let root = weights_root(root).ok_or_else(|| {
        Error::asset(
            backbone_id,
            format!("no weights directory configured (set assets.weights_dir or {WEIGHTS_DIR_ENV})"),
        )
    })?;
    if root.join("model.safetensors").is_file() {
        return Ok(root);
    }
    let name = backbone_dir_name(backbone_id).unwrap_or(backbone_id);
    let dir = root.join(name);
    if dir.join("model.safetensors").is_file() {
        Ok(dir)
    } else {
        Err(Error::asset(
            backbone_id,
            format!("{} not found", dir.join("model.safetensors").display()),
        ))
    }
}

#[derive(Debug, Clone, Copy)]
struct TowerShape {
    heads: usize,
    activation: Activation,
}

/// Head counts and activation from `config.json` when present; otherwise 64-wide heads
/// and quick-GELU, which holds for every OpenAI CLIP checkpoint.
fn tower_shapes(dir: &Path, vision_width: usize, text_width: usize) -> (TowerShape, TowerShape) {
    let cfg: Option<serde_json::Value> = std::fs::read_to_string(dir.join("config.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let read = |section: &str, width: usize| {
        let sec = cfg.as_ref().and_then(|c| c.get(section));
        let heads = sec
            .and_then(|s| s.get("num_attention_heads"))
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .unwrap_or(width / 64);
        let activation = match sec.and_then(|s| s.get("hidden_act")).and_then(|v| v.as_str()) {
            Some("gelu") | Some("gelu_new") | Some("gelu_pytorch_tanh") => Activation::GeluTanh,
            _ => Activation::QuickGelu,
        };
        TowerShape { heads, activation }
    };
    (read("vision_config", vision_width), read("text_config", text_width))
}

struct Reader<'a> {
    st: SafeTensors<'a>,
    source: String,
}

impl Reader<'_> {
    fn raw(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let t = self
            .st
            .tensor(name)
            .map_err(|_| Error::asset(&self.source, format!("missing tensor `{name}`")))?;
        let bytes = t.data();
        let values: Vec<f32> = match t.dtype() {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            other => {
                return Err(Error::asset(
                    &self.source,
                    format!("tensor `{name}` has unsupported dtype {other:?}"),
                ))
            }
        };
        Ok((t.shape().to_vec(), values))
    }

    fn vector(&self, name: &str) -> Result<Array1<f32>> {
        let (shape, v) = self.raw(name)?;
        if shape.len() != 1 {
            return Err(Error::asset(&self.source, format!("`{name}` is not 1-D: {shape:?}")));
        }
        Ok(Array1::from(v))
    }

    fn matrix(&self, name: &str) -> Result<Array2<f32>> {
        let (shape, v) = self.raw(name)?;
        if shape.len() != 2 {
            return Err(Error::asset(&self.source, format!("`{name}` is not 2-D: {shape:?}")));
        }
        Ok(Array2::from_shape_vec((shape[0], shape[1]), v).expect("shape matches data"))
    }

    /// Torch linear layers store `(out, in)`; we keep `(in, out)`.
    fn linear(&self, prefix: &str, bias: bool) -> Result<Linear> {
        let w = self.matrix(&format!("{prefix}.weight"))?.reversed_axes();
        let w = w.as_standard_layout().into_owned();
        let b = if bias {
            Some(self.vector(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        Ok(Linear::new(w, b))
    }

    fn norm(&self, prefix: &str) -> Result<LayerNorm> {
        Ok(LayerNorm::new(
            self.vector(&format!("{prefix}.weight"))?,
            self.vector(&format!("{prefix}.bias"))?,
        ))
    }

    fn count_layers(&self, prefix: &str) -> usize {
        (0..)
            .take_while(|i| self.st.tensor(&format!("{prefix}.{i}.layer_norm1.weight")).is_ok())
            .count()
    }

    fn blocks(&self, prefix: &str, shape: TowerShape) -> Result<Vec<ResidualBlock>> {
        (0..self.count_layers(prefix))
            .map(|i| {
                let p = format!("{prefix}.{i}");
                Ok(ResidualBlock {
                    ln1: self.norm(&format!("{p}.layer_norm1"))?,
                    attn: AttentionWeights {
                        q: self.linear(&format!("{p}.self_attn.q_proj"), true)?,
                        k: self.linear(&format!("{p}.self_attn.k_proj"), true)?,
                        v: self.linear(&format!("{p}.self_attn.v_proj"), true)?,
                        out: self.linear(&format!("{p}.self_attn.out_proj"), true)?,
                        num_heads: shape.heads,
                    },
                    ln2: self.norm(&format!("{p}.layer_norm2"))?,
                    mlp: Mlp {
                        fc1: self.linear(&format!("{p}.mlp.fc1"), true)?,
                        fc2: self.linear(&format!("{p}.mlp.fc2"), true)?,
                        activation: shape.activation,
                    },
                })
            })
            .collect()
    }
}

/// Both towers of a CLIP checkpoint.
pub struct ClipCheckpoint {
    pub vision: VisionWeights,
    pub text: TextWeights,
    pub tokenizer: ClipTokenizer,
}

pub fn load_tokenizer(dir: &Path) -> Result<ClipTokenizer> {
    let json = dir.join("tokenizer.json");
    if json.is_file() {
        return ClipTokenizer::from_tokenizer_json(&json);
    }
    let (vocab, merges) = (dir.join("vocab.json"), dir.join("merges.txt"));
    if vocab.is_file() && merges.is_file() {
        return ClipTokenizer::from_vocab_merges(&vocab, &merges);
    }
    Err(Error::asset(
        dir.display().to_string(),
        "neither tokenizer.json nor vocab.json + merges.txt present",
    ))
}

pub fn load_checkpoint(dir: &Path) -> Result<ClipCheckpoint> {
    let path = dir.join("model.safetensors");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let source = path.display().to_string();
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::asset(&source, e.to_string()))?;
    let r = Reader { st, source };

    let (conv_shape, conv) = r.raw("vision_model.embeddings.patch_embedding.weight")?;
    let [width, channels, patch, patch_w] = conv_shape[..] else {
        return Err(Error::asset(&r.source, format!("patch embedding shape {conv_shape:?}")));
    };
    if channels != 3 || patch != patch_w {
        return Err(Error::asset(&r.source, format!("patch embedding shape {conv_shape:?}")));
    }
    let patch_embedding = Array2::from_shape_vec((width, 3 * patch * patch), conv)
        .expect("shape matches data")
        .reversed_axes()
        .as_standard_layout()
        .into_owned();
    let text_width = r.matrix("text_model.embeddings.token_embedding.weight")?.ncols();
    let (vshape, tshape) = tower_shapes(dir, width, text_width);

    let vision = VisionWeights {
        patch_size: patch,
        patch_embedding,
        class_embedding: r.vector("vision_model.embeddings.class_embedding")?,
        position_embedding: r.matrix("vision_model.embeddings.position_embedding.weight")?,
        pre_norm: r.norm("vision_model.pre_layrnorm")?,
        blocks: r.blocks("vision_model.encoder.layers", vshape)?,
        post_norm: r.norm("vision_model.post_layernorm")?,
        projection: r.linear("visual_projection", false)?.weight,
    };
    vision.validate()?;
    let text = TextWeights {
        token_embedding: r.matrix("text_model.embeddings.token_embedding.weight")?,
        position_embedding: r.matrix("text_model.embeddings.position_embedding.weight")?,
        blocks: r.blocks("text_model.encoder.layers", tshape)?,
        final_norm: r.norm("text_model.final_layer_norm")?,
        projection: r.linear("text_projection", false)?.weight,
    };
    Ok(ClipCheckpoint {
        vision,
        text,
        tokenizer: load_tokenizer(dir)?,
    })
}

/// Collects tensors in the checkpoint layout, converted back to torch conventions.
#[derive(Default)]
struct Writer {
    tensors: Vec<(String, Vec<usize>, Vec<u8>)>,
}

impl Writer {
    fn put(&mut self, name: &str, shape: Vec<usize>, values: impl IntoIterator<Item = f32>) {
        let bytes = values.into_iter().flat_map(f32::to_le_bytes).collect();
        self.tensors.push((name.to_string(), shape, bytes));
    }

    fn vector(&mut self, name: &str, v: &Array1<f32>) {
        self.put(name, vec![v.len()], v.iter().copied());
    }

    fn matrix(&mut self, name: &str, m: &Array2<f32>) {
        self.put(name, vec![m.nrows(), m.ncols()], m.iter().copied());
    }

    fn transposed(&mut self, name: &str, m: &Array2<f32>) {
        self.matrix(name, &m.t().as_standard_layout().into_owned());
    }

    fn linear(&mut self, prefix: &str, l: &Linear) {
        self.transposed(&format!("{prefix}.weight"), &l.weight);
        if let Some(b) = &l.bias {
            self.vector(&format!("{prefix}.bias"), b);
        }
    }

    fn norm(&mut self, prefix: &str, n: &LayerNorm) {
        self.vector(&format!("{prefix}.weight"), &n.gamma);
        self.vector(&format!("{prefix}.bias"), &n.beta);
    }

    fn blocks(&mut self, prefix: &str, blocks: &[ResidualBlock]) {
        for (i, b) in blocks.iter().enumerate() {
            let p = format!("{prefix}.{i}");
            self.norm(&format!("{p}.layer_norm1"), &b.ln1);
            self.linear(&format!("{p}.self_attn.q_proj"), &b.attn.q);
            self.linear(&format!("{p}.self_attn.k_proj"), &b.attn.k);
            self.linear(&format!("{p}.self_attn.v_proj"), &b.attn.v);
            self.linear(&format!("{p}.self_attn.out_proj"), &b.attn.out);
            self.norm(&format!("{p}.layer_norm2"), &b.ln2);
            self.linear(&format!("{p}.mlp.fc1"), &b.mlp.fc1);
            self.linear(&format!("{p}.mlp.fc2"), &b.mlp.fc2);
        }
    }
}

fn tower_config(blocks: &[ResidualBlock]) -> serde_json::Value {
    let first = blocks.first();
    let act = match first.map(|b| b.mlp.activation) {
        Some(Activation::GeluTanh) => "gelu_pytorch_tanh",
        _ => "quick_gelu",
    };
    serde_json::json!({
        "num_attention_heads": first.map(|b| b.attn.num_heads).unwrap_or(1),
        "hidden_act": act,
    })
}

/// Writes `model.safetensors` and `config.json` for both towers into `dir`; the
/// tokenizer files are the caller's business. The inverse of [`load_checkpoint`].
pub fn write_checkpoint(dir: &Path, vision: &VisionWeights, text: &TextWeights) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = Writer::default();
    let (p, d) = (vision.patch_size, vision.width());
    w.put(
        "vision_model.embeddings.patch_embedding.weight",
        vec![d, 3, p, p],
        vision.patch_embedding.t().iter().copied(),
    );
    w.vector("vision_model.embeddings.class_embedding", &vision.class_embedding);
    w.matrix(
        "vision_model.embeddings.position_embedding.weight",
        &vision.position_embedding,
    );
    w.norm("vision_model.pre_layrnorm", &vision.pre_norm);
    w.blocks("vision_model.encoder.layers", &vision.blocks);
    w.norm("vision_model.post_layernorm", &vision.post_norm);
    w.transposed("visual_projection.weight", &vision.projection);
    w.matrix("text_model.embeddings.token_embedding.weight", &text.token_embedding);
    w.matrix(
        "text_model.embeddings.position_embedding.weight",
        &text.position_embedding,
    );
    w.blocks("text_model.encoder.layers", &text.blocks);
    w.norm("text_model.final_layer_norm", &text.final_norm);
    w.transposed("text_projection.weight", &text.projection);

    let views = w
        .tensors
        .iter()
        .map(|(n, shape, bytes)| TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (n.clone(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::asset(dir.display().to_string(), e.to_string()))?;
    let path = dir.join("model.safetensors");
    safetensors::serialize_to_file(views, &None, &path)
        .map_err(|e| Error::asset(path.display().to_string(), e.to_string()))?;

    let config = serde_json::json!({
        "vision_config": tower_config(&vision.blocks),
        "text_config": tower_config(&text.blocks),
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).expect("json")).map_err(|e| Error::io(&path, e))
}
