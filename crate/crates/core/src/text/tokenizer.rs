//! Byte-level BPE tokenizer compatible with the CLIP text tower.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};

pub const CONTEXT_LENGTH: usize = 77;
const START: &str = "<|startoftext|>";
const END: &str = "<|endoftext|>";

#[derive(Debug, Clone)]
pub struct ClipTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_to_char: [char; 256],
    pattern: Regex,
    start: u32,
    end: u32,
}

/// The reversible byte → printable-char table used by byte-level BPE.
fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32)
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut chars = printable.clone();
    let mut extra = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            printable.push(b);
            chars.push(256 + extra);
            extra += 1;
        }
    }
    let mut table = ['\0'; 256];
    for (b, c) in printable.into_iter().zip(chars) {
        table[b as usize] = char::from_u32(c).expect("valid code point");
    }
    table
}

/// The byte-level base of a CLIP vocabulary: every byte symbol, the same symbols closing
/// a word, then the two markers. Without merges this tokenizes character by character.
pub fn byte_level_vocabulary() -> HashMap<String, u32> {
    let table = bytes_to_unicode();
    let mut symbols: Vec<char> = table.to_vec();
    symbols.sort_unstable();
    let mut vocab = HashMap::new();
    for c in &symbols {
        vocab.insert(c.to_string(), vocab.len() as u32);
    }
    for c in &symbols {
        vocab.insert(format!("{c}</w>"), vocab.len() as u32);
    }
    vocab.insert(START.to_string(), vocab.len() as u32);
    vocab.insert(END.to_string(), vocab.len() as u32);
    vocab
}

impl ClipTokenizer {
    /// `vocab` maps token strings to ids; `merges` is the ordered merge list.
    pub fn new(vocab: HashMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        let start = *vocab
            .get(START)
            .ok_or_else(|| Error::asset("tokenizer", format!("vocabulary lacks {START}")))?;
        let end = *vocab
            .get(END)
            .ok_or_else(|| Error::asset("tokenizer", format!("vocabulary lacks {END}")))?;
        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        let pattern =
            Regex::new(r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+")
                .expect("static pattern");
        Ok(Self {
            encoder: vocab,
            ranks,
            byte_to_char: bytes_to_unicode(),
            pattern,
            start,
            end,
        })
    }

    /// Loads a Hugging Face `tokenizer.json`.
    pub fn from_tokenizer_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::asset(path.display().to_string(), e.to_string()))?;
        let bad = |what: &str| Error::asset(path.display().to_string(), format!("missing {what}"));
        let model = json.get("model").ok_or_else(|| bad("model"))?;
        let vocab: HashMap<String, u32> = model
            .get("vocab")
            .and_then(|v| v.as_object())
            .ok_or_else(|| bad("model.vocab"))?
            .iter()
            .filter_map(|(k, v)| v.as_u64().map(|id| (k.clone(), id as u32)))
            .collect();
        let merges = model
            .get("merges")
            .and_then(|m| m.as_array())
            .ok_or_else(|| bad("model.merges"))?
            .iter()
            .filter_map(|m| match m {
                serde_json::Value::String(s) => s.split_once(' ').map(|(a, b)| (a.to_string(), b.to_string())),
                serde_json::Value::Array(pair) if pair.len() == 2 => {
                    Some((pair[0].as_str()?.to_string(), pair[1].as_str()?.to_string()))
                }
                _ => None,
            })
            .collect();
        let mut vocab = vocab;
        if let Some(added) = json.get("added_tokens").and_then(|a| a.as_array()) {
            for t in added {
                if let (Some(content), Some(id)) = (
                    t.get("content").and_then(|c| c.as_str()),
                    t.get("id").and_then(|i| i.as_u64()),
                ) {
                    vocab.insert(content.to_string(), id as u32);
                }
            }
        }
        Self::new(vocab, merges)
    }

    /// Loads the `vocab.json` + `merges.txt` pair.
    pub fn from_vocab_merges(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vocab_text = std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let vocab: HashMap<String, u32> = serde_json::from_str(&vocab_text)
            .map_err(|e| Error::asset(vocab_path.display().to_string(), e.to_string()))?;
        let merges_text = std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let merges = merges_text
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty())
            .filter_map(|l| l.split_once(' '))
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        Self::new(vocab, merges)
    }

    pub fn start_token(&self) -> u32 {
        self.start
    }

    pub fn end_token(&self) -> u32 {
        self.end
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let mut word: Vec<String> = token.chars().map(String::from).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|pair| {
                    self.ranks
                        .get(&(pair[0].clone(), pair[1].clone()))
                        .map(|&r| (r, pair[0].clone(), pair[1].clone()))
                })
                .min();
            let Some((_, a, b)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }

    /// Token ids framed by start/end markers and truncated to the context length.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = vec![self.start];
        for m in self.pattern.find_iter(&cleaned) {
            let piece: String = m.as_str().bytes().map(|b| self.byte_to_char[b as usize]).collect();
            for sub in self.bpe(&piece) {
                if let Some(&id) = self.encoder.get(&sub) {
                    ids.push(id);
                }
            }
        }
        ids.truncate(CONTEXT_LENGTH - 1);
        ids.push(self.end);
        ids
    }
}
