//! Auxiliary class texts (definitions and synonyms): the on-disk cache, the few-shot
//! prompts sent to a language model, and the narrow client contract.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AuxKind {
    #[default]
    Definition,
    Synonym,
}

impl FromStr for AuxKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "definition" => Ok(AuxKind::Definition),
            "synonym" => Ok(AuxKind::Synonym),
            other => Err(Error::config(format!(
                "unknown auxiliary kind `{other}` (expected definition or synonym)"
            ))),
        }
    }
}

impl std::fmt::Display for AuxKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AuxKind::Definition => "definition",
            AuxKind::Synonym => "synonym",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AuxEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synonym: Option<String>,
    #[serde(default)]
    pub model_tag: String,
}

impl AuxEntry {
    pub fn get(&self, kind: AuxKind) -> Option<&str> {
        match kind {
            AuxKind::Definition => self.definition.as_deref(),
            AuxKind::Synonym => self.synonym.as_deref(),
        }
    }

    fn slot(&mut self, kind: AuxKind) -> &mut Option<String> {
        match kind {
            AuxKind::Definition => &mut self.definition,
            AuxKind::Synonym => &mut self.synonym,
        }
    }
}

/// Class name → generated texts. Stored as a TOML table so entries can be fixed by hand.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AuxCache {
    entries: BTreeMap<String, AuxEntry>,
}

impl AuxCache {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("auxiliary cache: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Loads `path` if it exists, otherwise starts empty.
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("string tables always serialise")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, class: &str) -> Option<&AuxEntry> {
        self.entries.get(class)
    }

    /// Exact lookup on the class-name string.
    pub fn get(&self, class: &str, kind: AuxKind) -> Option<&str> {
        self.entries.get(class).and_then(|e| e.get(kind))
    }

    /// Stores `text` unless a value already exists for `(class, kind)`; `force` overwrites.
    /// Returns whether the cache changed.
    pub fn insert(&mut self, class: &str, kind: AuxKind, text: &str, model_tag: &str, force: bool) -> bool {
        let entry = self.entries.entry(class.to_string()).or_default();
        let slot = entry.slot(kind);
        if slot.is_some() && !force {
            return false;
        }
        *slot = Some(text.to_string());
        if entry.model_tag.is_empty() || force {
            entry.model_tag = model_tag.to_string();
        } else if !entry.model_tag.split("; ").any(|t| t == model_tag) {
            entry.model_tag = format!("{}; {model_tag}", entry.model_tag);
        }
        true
    }
}

/// Send a prompt, receive text.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> std::result::Result<String, String>;
    fn model_tag(&self) -> String;
}

const DEFINITION_SHOTS: &[(&str, &str)] = &[
    (
        "dog",
        "a common animal with four legs, fur and a tail, kept as a pet or trained for work",
    ),
    (
        "chair",
        "a seat for one person, with a back, usually four legs and sometimes arms",
    ),
    (
        "river",
        "a natural wide flow of fresh water across the land into the sea, a lake or another river",
    ),
    (
        "bus",
        "a large road vehicle with many seats that carries passengers along a fixed route",
    ),
];

const SYNONYM_SHOTS: &[(&str, &str)] = &[
    ("car", "automobile"),
    ("sofa", "couch"),
    ("aeroplane", "airplane"),
    ("television", "TV"),
];

/// Few-shot prompt in the style of a learner's dictionary, ending with the target class.
pub fn auxiliary_prompt(class_name: &str, kind: AuxKind) -> String {
    let (instruction, label, shots) = match kind {
        AuxKind::Definition => (
            "Write a short dictionary definition for the given word, in the plain style of \
             the Cambridge Dictionary. Answer with the definition only, on one line.",
            "Definition",
            DEFINITION_SHOTS,
        ),
        AuxKind::Synonym => (
            "Give one common synonym for the given word, as listed in the Cambridge \
             Dictionary thesaurus. Answer with the synonym only, on one line.",
            "Synonym",
            SYNONYM_SHOTS,
        ),
    };
    let mut prompt = format!("{instruction}\n\n");
    for (word, answer) in shots {
        prompt.push_str(&format!("Word: {word}\n{label}: {answer}\n\n"));
    }
    prompt.push_str(&format!("Word: {class_name}\n{label}:"));
    prompt
}

/// First non-empty line of a model reply with any echoed label and quotes removed.
pub fn clean_reply(reply: &str, kind: AuxKind) -> String {
    let label = match kind {
        AuxKind::Definition => "definition:",
        AuxKind::Synonym => "synonym:",
    };
    let line = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let line = if line.to_lowercase().starts_with(label) {
        line[label.len()..].trim()
    } else {
        line
    };
    line.trim_matches(|c| c == '"' || c == '\'').trim().to_string()
}

/// Cache hit → stored text. Miss with a client → prompt, store, return. Miss without a
/// client → [`Error::MissingAuxiliary`].
pub fn generate_auxiliary_text(
    class_name: &str,
    kind: AuxKind,
    client: Option<&dyn LlmClient>,
    cache: &mut AuxCache,
) -> Result<String> {
    if let Some(hit) = cache.get(class_name, kind) {
        return Ok(hit.to_string());
    }
    let client = client.ok_or_else(|| Error::MissingAuxiliary {
        class: class_name.to_string(),
    })?;
    let reply = client
        .complete(&auxiliary_prompt(class_name, kind))
        .map_err(|reason| Error::Generation {
            class: class_name.to_string(),
            reason,
        })?;
    let text = clean_reply(&reply, kind);
    if text.is_empty() {
        return Err(Error::Generation {
            class: class_name.to_string(),
            reason: "empty reply".into(),
        });
    }
    cache.insert(class_name, kind, &text, &client.model_tag(), false);
    Ok(text)
}

/// Client for any server speaking the OpenAI chat-completions protocol
/// (llama.cpp, vLLM, Ollama and friends).
#[derive(Debug, Clone)]
pub struct ChatCompletionsClient {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub temperature: f32,
}

impl ChatCompletionsClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            temperature: 0.0,
        }
    }
}

impl LlmClient for ChatCompletionsClient {
    fn complete(&self, prompt: &str) -> std::result::Result<String, String> {
        let url = format!("{}/chat/completions", self.endpoint.trim_end_matches('/'));
        let mut req = ureq::post(&url);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let resp: serde_json::Value = req
            .send_json(body)
            .map_err(|e| e.to_string())?
            .into_json()
            .map_err(|e| e.to_string())?;
        resp.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| format!("unexpected response: {resp}"))
    }

    fn model_tag(&self) -> String {
        self.model.clone()
    }
}

/// Runs an external program with the prompt on stdin and takes its stdout as the reply.
#[derive(Debug, Clone)]
pub struct CommandClient {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandClient {
    /// Splits a command line on whitespace.
    pub fn from_command_line(cmd: &str) -> Option<Self> {
        let mut parts = cmd.split_whitespace().map(str::to_string);
        Some(Self {
            program: parts.next()?,
            args: parts.collect(),
        })
    }
}

impl LlmClient for CommandClient {
    fn complete(&self, prompt: &str) -> std::result::Result<String, String> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| format!("spawn {}: {e}", self.program))?;
        child
            .stdin
            .take()
            .expect("piped")
            .write_all(prompt.as_bytes())
            .map_err(|e| e.to_string())?;
        let out = child.wait_with_output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} exited with {}", self.program, out.status));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }

    fn model_tag(&self) -> String {
        std::iter::once(self.program.as_str())
            .chain(self.args.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
