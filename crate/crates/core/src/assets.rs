//! Vocabularies, background phrases, auxiliary-text caches and run presets that ship
//! with the crate. Referenced from configs as `builtin:<name>`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const BUILTIN_PREFIX: &str = "builtin:";

const FILES: &[(&str, &str)] = &[
    ("voc21.toml", include_str!("../assets/voc21.toml")),
    ("object81.toml", include_str!("../assets/object81.toml")),
    ("context60.toml", include_str!("../assets/context60.toml")),
    ("stuff171.toml", include_str!("../assets/stuff171.toml")),
    ("background.txt", include_str!("../assets/background.txt")),
    ("aux_voc21.toml", include_str!("../assets/aux_voc21.toml")),
    ("aux_object81.toml", include_str!("../assets/aux_object81.toml")),
    ("aux_context60.toml", include_str!("../assets/aux_context60.toml")),
    ("aux_stuff171.toml", include_str!("../assets/aux_stuff171.toml")),
];

const PRESETS: &[(&str, &str)] = &[
    ("voc", include_str!("../configs/voc.toml")),
    ("object", include_str!("../configs/object.toml")),
    ("context", include_str!("../configs/context.toml")),
    ("stuff", include_str!("../configs/stuff.toml")),
];

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    FILES.iter().map(|(n, _)| *n)
}

pub fn builtin(name: &str) -> Option<&'static str> {
    FILES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// A file on disk or one of the embedded assets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AssetRef {
    Builtin(String),
    File(PathBuf),
}

impl AssetRef {
    /// Relative file paths are taken relative to `base`.
    pub fn parse(reference: &str, base: &Path) -> Self {
        match reference.strip_prefix(BUILTIN_PREFIX) {
            Some(name) => AssetRef::Builtin(name.to_string()),
            None => {
                let p = Path::new(reference);
                AssetRef::File(if p.is_absolute() { p.to_path_buf() } else { base.join(p) })
            }
        }
    }

    pub fn read(&self) -> Result<String> {
        match self {
            AssetRef::Builtin(name) => builtin(name).map(str::to_string).ok_or_else(|| {
                Error::asset(
                    format!("{BUILTIN_PREFIX}{name}"),
                    format!(
                        "no such built-in asset (available: {})",
                        builtin_names().collect::<Vec<_>>().join(", ")
                    ),
                )
            }),
            AssetRef::File(path) => std::fs::read_to_string(path).map_err(|e| Error::io(path, e)),
        }
    }

    pub fn exists(&self) -> bool {
        match self {
            AssetRef::Builtin(name) => builtin(name).is_some(),
            AssetRef::File(path) => path.exists(),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            AssetRef::Builtin(_) => None,
            AssetRef::File(p) => Some(p),
        }
    }
}

impl std::fmt::Display for AssetRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AssetRef::Builtin(name) => write!(f, "{BUILTIN_PREFIX}{name}"),
            AssetRef::File(p) => write!(f, "{}", p.display()),
        }
    }
}
