use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    #[serde(rename = "id")]
    pub class_id: usize,
    pub name: String,
    /// Extra phrasings merged back into this class (text expansion).
    #[serde(default, rename = "subclasses", skip_serializing_if = "Vec::is_empty")]
    pub subclass_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_definition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_synonym: Option<String>,
}

impl ClassEntry {
    pub fn new(class_id: usize, name: impl Into<String>) -> Self {
        Self {
            class_id,
            name: name.into(),
            subclass_names: Vec::new(),
            aux_definition: None,
            aux_synonym: None,
        }
    }

    pub fn with_subclasses(mut self, subs: &[&str]) -> Self {
        self.subclass_names = subs.iter().map(|s| s.to_string()).collect();
        self
    }

    /// Every template filled with the class name.
    pub fn prompts(&self, templates: &[String]) -> Vec<String> {
        templates
            .iter()
            .map(|t| super::templates::fill(t, &self.name))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Name,
    Subclass,
    Background,
}

/// One row of the text bank: the phrase that is embedded and the class it votes for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankRow {
    pub phrase: String,
    pub class_id: usize,
    pub kind: RowKind,
}

/// A class vocabulary: dense ids `0..C`, optional designated background class and
/// optional background phrase set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    #[serde(default)]
    pub name: String,
    /// Id of the class that background phrases are merged into.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<usize>,
    #[serde(rename = "class")]
    pub classes: Vec<ClassEntry>,
    #[serde(default, skip)]
    pub background_phrases: Vec<String>,
}

impl Vocabulary {
    pub fn new(name: impl Into<String>, classes: Vec<ClassEntry>, background: Option<usize>) -> Result<Self> {
        let v = Self {
            name: name.into(),
            background,
            classes,
            background_phrases: Vec::new(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut v: Self = toml::from_str(text).map_err(|e| Error::config(format!("vocabulary: {e}")))?;
        v.classes.sort_by_key(|c| c.class_id);
        v.validate()?;
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("vocabulary has no classes"));
        }
        let mut ids = BTreeSet::new();
        for c in &self.classes {
            if !ids.insert(c.class_id) {
                return Err(Error::config(format!("duplicate class id {}", c.class_id)));
            }
            if c.name.trim().is_empty() {
                return Err(Error::config(format!("class {} has an empty name", c.class_id)));
            }
        }
        if ids.iter().copied().ne(0..self.classes.len()) {
            return Err(Error::config(format!(
                "class ids must be exactly 0..{}",
                self.classes.len()
            )));
        }
        if let Some(b) = self.background {
            if b >= self.classes.len() {
                return Err(Error::config(format!("background id {b} is not a class")));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Row layout of the text bank: each class name followed by its subclasses in class
    /// order, then every background phrase.
    pub fn rows(&self) -> Vec<BankRow> {
        let mut rows = Vec::new();
        for c in &self.classes {
            rows.push(BankRow {
                phrase: c.name.clone(),
                class_id: c.class_id,
                kind: RowKind::Name,
            });
            rows.extend(c.subclass_names.iter().map(|s| BankRow {
                phrase: s.clone(),
                class_id: c.class_id,
                kind: RowKind::Subclass,
            }));
        }
        if let Some(b) = self.background {
            rows.extend(self.background_phrases.iter().map(|p| BankRow {
                phrase: p.clone(),
                class_id: b,
                kind: RowKind::Background,
            }));
        }
        rows
    }

    /// Row index → class id.
    pub fn group_map(&self) -> Vec<usize> {
        self.rows().iter().map(|r| r.class_id).collect()
    }
}

/// Adds one bank row per background phrase, all merged into the designated background
/// class. An empty list leaves the vocabulary unchanged.
pub fn attach_background(vocab: &Vocabulary, background_names: &[String]) -> Result<Vocabulary> {
    if background_names.is_empty() {
        return Ok(vocab.clone());
    }
    if vocab.background.is_none() {
        return Err(Error::config(format!(
            "vocabulary `{}` declares no background class but {} background phrases were given",
            vocab.name,
            background_names.len()
        )));
    }
    let mut out = vocab.clone();
    out.background_phrases.extend(background_names.iter().cloned());
    Ok(out)
}

/// Parses a background set: one phrase per line or comma separated, `#` comments allowed.
pub fn parse_background(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split(','))
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

pub fn load_background(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_background(&text))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn voc_like() -> Vocabulary {
        Vocabulary::new(
            "toy",
            vec![
                ClassEntry::new(0, "background"),
                ClassEntry::new(1, "person").with_subclasses(&["person in shirt", "person in dress"]),
                ClassEntry::new(2, "cat"),
            ],
            Some(0),
        )
        .unwrap()
    }

    #[test]
    fn subclass_rows_follow_their_parent() {
        let v = voc_like();
        let phrases: Vec<_> = v.rows().into_iter().map(|r| r.phrase).collect();
        assert_eq!(
            phrases,
            ["background", "person", "person in shirt", "person in dress", "cat"]
        );
        assert_eq!(v.group_map(), vec![0, 1, 1, 1, 2]);
    }

    #[test]
    fn background_rows_are_appended_and_grouped() {
        let v = attach_background(&voc_like(), &["sky".into(), "wall".into()]).unwrap();
        assert_eq!(v.group_map(), vec![0, 1, 1, 1, 2, 0, 0]);
        assert_eq!(attach_background(&voc_like(), &[]).unwrap(), voc_like());
    }

    #[test]
    fn background_without_designated_class_is_rejected() {
        let v = Vocabulary::new("x", vec![ClassEntry::new(0, "cat")], None).unwrap();
        assert!(matches!(attach_background(&v, &["sky".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn ids_must_be_dense_and_unique() {
        assert!(Vocabulary::new("x", vec![ClassEntry::new(0, "a"), ClassEntry::new(0, "b")], None).is_err());
        assert!(Vocabulary::new("x", vec![ClassEntry::new(1, "a")], None).is_err());
    }

    #[test]
    fn parses_toml() {
        let v = Vocabulary::parse(
            r#"
            name = "t"
            background = 0
            [[class]]
            id = 1
            name = "person"
            subclasses = ["person in shirt"]
            [[class]]
            id = 0
            name = "background"
            "#,
        )
        .unwrap();
        assert_eq!(v.classes[0].name, "background");
        assert_eq!(v.rows().len(), 3);
    }

    #[test]
    fn background_file_formats() {
        let p = parse_background("sky, wall\n# comment\ntree\n\n");
        assert_eq!(p, ["sky", "wall", "tree"]);
    }
}
