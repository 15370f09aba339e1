//! Run configuration: one TOML document covering the encoder, inference, augmentation,
//! refinement, text and evaluation settings, layered as preset → file → overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::assets::{self, AssetRef};
use crate::augment::AugmentationSpec;
use crate::backbone::{DenseEncoder, EncoderConfig, VisionTransformer};
use crate::error::{Error, Result};
use crate::pamr::PamrConfig;
use crate::pipeline::{InferenceConfig, Segmenter};
use crate::text::templates::{imagenet_templates, validate_templates, PLAIN_TEMPLATE};
use crate::text::{
    attach_background, parse_background, AuxCache, AuxKind, AuxSource, ClipTextEncoder, LlmClient, TextBank,
    TextEncoder, Vocabulary,
};
use crate::weights::{load_checkpoint, resolve_backbone, ClipCheckpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSet {
    Imagenet,
    Plain,
}

/// A named template set or an explicit list of `{}` templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Templates {
    Named(TemplateSet),
    Custom(Vec<String>),
}

impl Templates {
    pub fn resolve(&self) -> Vec<String> {
        match self {
            Templates::Named(TemplateSet::Imagenet) => imagenet_templates(),
            Templates::Named(TemplateSet::Plain) => vec![PLAIN_TEMPLATE.to_string()],
            Templates::Custom(list) => list.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub vocabulary: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux_cache: Option<String>,
    pub aux_kind: AuxKind,
    /// Weight of the auxiliary-text embedding.
    pub alpha: f32,
    pub templates: Templates,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocabulary: "builtin:voc21.toml".into(),
            background: None,
            aux_cache: None,
            aux_kind: AuxKind::Definition,
            alpha: 0.0,
            templates: Templates::Named(TemplateSet::Imagenet),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AssetsConfig {
    /// Overrides the weights directory environment variable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset: Option<usize>,
    pub seed: u64,
    /// Whether the vocabulary's background class counts towards the mean.
    pub include_background: bool,
    pub persist_maps: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            subset: None,
            seed: 0,
            include_background: true,
            persist_maps: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub inference: InferenceConfig,
    pub augmentation: AugmentationSpec,
    pub pamr: PamrConfig,
    pub text: TextConfig,
    pub assets: AssetsConfig,
    pub eval: EvalConfig,
    /// Directory that relative paths in this config are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            encoder: EncoderConfig::default(),
            inference: InferenceConfig::default(),
            augmentation: AugmentationSpec::default(),
            pamr: PamrConfig::default(),
            text: TextConfig::default(),
            assets: AssetsConfig::default(),
            eval: EvalConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else is replaced.
pub fn merge_values(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge_values(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Interprets an override value as a TOML literal, falling back to a bare string.
pub fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets a dotted key such as `inference.stride`.
pub fn apply_override(doc: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override key `{key}`")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{part}` is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("override `{key}` does not address a table field")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw));
    Ok(())
}

fn parse_toml(text: &str, what: &str) -> Result<toml::Value> {
    text.parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| Error::config(format!("{what}: {e}")))
}

impl RunConfig {
    /// Layers a built-in preset, a config file and dotted overrides, in that order.
    pub fn build(preset: Option<&str>, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = toml::Value::Table(toml::Table::new());
        if let Some(name) = preset {
            let text = assets::preset(name).ok_or_else(|| {
                Error::config(format!(
                    "unknown preset `{name}` (available: {})",
                    assets::preset_names().collect::<Vec<_>>().join(", ")
                ))
            })?;
            merge_values(&mut doc, parse_toml(text, &format!("preset {name}"))?);
        }
        let mut base_dir = PathBuf::from(".");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            merge_values(&mut doc, parse_toml(&text, &path.display().to_string())?);
            base_dir = path.parent().map(Path::to_path_buf).unwrap_or(base_dir);
            if base_dir.as_os_str().is_empty() {
                base_dir = PathBuf::from(".");
            }
        }
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        Self::from_value(doc, &base_dir)
    }

    pub fn from_value(doc: toml::Value, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        // an empty path switches an optional asset off (`--text.background ""`)
        for slot in [
            &mut cfg.text.background,
            &mut cfg.text.aux_cache,
            &mut cfg.eval.manifest,
        ] {
            if slot.as_deref() == Some("") {
                *slot = None;
            }
        }
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::build(Some(name), None, &[])
    }

    /// A copy with dotted overrides applied.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        Self::from_value(doc, &self.base_dir)
    }

    pub fn asset(&self, reference: &str) -> AssetRef {
        AssetRef::parse(reference, &self.base_dir)
    }

    pub fn output_dir(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            self.base_dir.join(&self.output_dir)
        }
    }

    /// Checks every setting and every referenced file before anything is loaded.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.inference.validate(self.encoder.patch_size)?;
        self.augmentation.validate()?;
        if self.inference.apply_pamr {
            self.pamr.validate()?;
        }
        let t = &self.text;
        if !(0.0..=1.0).contains(&t.alpha) {
            return Err(Error::config(format!("text.alpha {} outside [0, 1]", t.alpha)));
        }
        validate_templates(&t.templates.resolve())?;
        let mut refs = vec![("text.vocabulary", t.vocabulary.as_str())];
        refs.extend(t.background.as_deref().map(|r| ("text.background", r)));
        refs.extend(self.eval.manifest.as_deref().map(|r| ("eval.manifest", r)));
        if let Some(cache) = t.aux_cache.as_deref() {
            // a missing file cache is fine, it is created by gen-aux
            if matches!(self.asset(cache), AssetRef::Builtin(_)) {
                refs.push(("text.aux_cache", cache));
            }
        }
        for (key, r) in refs {
            let asset = self.asset(r);
            if !asset.exists() {
                return Err(Error::asset(
                    asset.to_string(),
                    format!("referenced by {key} but not found"),
                ));
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes `config.toml` into `dir` so every artifact there can be reproduced.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.snapshot()).map_err(|e| Error::io(&path, e))
    }

    /// The vocabulary with its background phrases attached.
    pub fn load_vocabulary(&self) -> Result<Vocabulary> {
        let vocab = Vocabulary::parse(&self.asset(&self.text.vocabulary).read()?)?;
        match &self.text.background {
            Some(r) => attach_background(&vocab, &parse_background(&self.asset(r).read()?)),
            None => Ok(vocab),
        }
    }

    pub fn load_aux_cache(&self) -> Result<AuxCache> {
        match self.text.aux_cache.as_deref().map(|r| self.asset(r)) {
            Some(AssetRef::Builtin(name)) => AuxCache::parse(&AssetRef::Builtin(name).read()?),
            Some(AssetRef::File(path)) => AuxCache::load_or_default(&path),
            None => Ok(AuxCache::default()),
        }
    }

    /// Builds the text bank; misses in the auxiliary cache go to `client` when given.
    pub fn build_text_bank(&self, encoder: &dyn TextEncoder, client: Option<&dyn LlmClient>) -> Result<TextBank> {
        let vocab = self.load_vocabulary()?;
        let templates = self.text.templates.resolve();
        let mut cache = self.load_aux_cache()?;
        let source = (self.text.alpha > 0.0).then_some(AuxSource {
            kind: self.text.aux_kind,
            cache: &mut cache,
            client,
        });
        TextBank::build(&vocab, &templates, encoder, source, self.text.alpha)
    }

    pub fn segmenter(&self, encoder: Arc<dyn DenseEncoder>, bank: TextBank) -> Result<Segmenter> {
        Segmenter::new(
            encoder,
            bank,
            self.augmentation.clone(),
            self.inference.clone(),
            self.pamr.clone(),
        )
    }
}

/// Pretrained towers loaded once and shared by every configuration that uses them.
pub struct Engine {
    pub backbone_id: String,
    pub vision: Arc<crate::backbone::VisionWeights>,
    pub text: ClipTextEncoder,
}

impl Engine {
    pub fn from_checkpoint(backbone_id: &str, ckpt: ClipCheckpoint) -> Result<Self> {
        Ok(Self {
            backbone_id: backbone_id.to_string(),
            vision: Arc::new(ckpt.vision),
            text: ClipTextEncoder::new(ckpt.text, ckpt.tokenizer)?,
        })
    }

    /// Resolves and loads the checkpoint named by `cfg.encoder.backbone_id`.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let root = cfg.assets.weights_dir.as_ref().map(|p| {
            if p.is_absolute() {
                p.clone()
            } else {
                cfg.base_dir.join(p)
            }
        });
        let dir = resolve_backbone(&cfg.encoder.backbone_id, root.as_deref())?;
        tracing::info!(dir = %dir.display(), "loading weights");
        Self::from_checkpoint(&cfg.encoder.backbone_id, load_checkpoint(&dir)?)
    }

    pub fn vision_encoder(&self, cfg: &RunConfig) -> Result<VisionTransformer> {
        if cfg.encoder.backbone_id != self.backbone_id {
            return Err(Error::config(format!(
                "engine holds {} but the config asks for {}",
                self.backbone_id, cfg.encoder.backbone_id
            )));
        }
        VisionTransformer::new(self.vision.clone(), cfg.encoder.clone())
    }

    pub fn segmenter(&self, cfg: &RunConfig, client: Option<&dyn LlmClient>) -> Result<Segmenter> {
        let bank = cfg.build_text_bank(&self.text, client)?;
        cfg.segmenter(Arc::new(self.vision_encoder(cfg)?), bank)
    }
}
