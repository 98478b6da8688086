//! Prompt bank, prompt rendering and word-level tokenization.
//!
//! A bank is a list of templates, each carrying one `<style>` placeholder,
//! plus an ordered list of substitutions per style. Substitution 0 is the
//! canonical style name.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result, StyleRegistry};

pub const PLACEHOLDER: &str = "<style>";

/// Template used by the fixed-prompt ablation.
pub const FIXED_TEMPLATE: &str = "Speech that is <style>.";

const DEFAULT_BANK_JSON: &str = include_str!("../data/prompt_bank.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBank {
    templates: Vec<String>,
    styles: BTreeMap<String, Vec<String>>,
}

impl PromptBank {
    pub fn new(templates: Vec<String>, styles: BTreeMap<String, Vec<String>>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Config("prompt bank has no templates".into()));
        }
        for t in &templates {
            if t.matches(PLACEHOLDER).count() != 1 {
                return Err(Error::Config(format!(
                    "template {t:?} must contain {PLACEHOLDER} exactly once"
                )));
            }
        }
        for (name, subs) in &styles {
            if subs.is_empty() {
                return Err(Error::Config(format!(
                    "style {name:?} has no substitutions"
                )));
            }
            if subs[0] != *name {
                return Err(Error::Config(format!(
                    "first substitution for {name:?} must be the canonical name, got {:?}",
                    subs[0]
                )));
            }
        }
        Ok(Self { templates, styles })
    }

    /// The bank shipped with the crate: 11 templates, 6 substitutions for each of 22 styles.
    pub fn default_bank() -> Self {
        Self::from_json(DEFAULT_BANK_JSON).expect("bundled prompt bank is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            templates: Vec<String>,
            styles: BTreeMap<String, Vec<String>>,
        }
        let raw: Raw = serde_json::from_str(text)?;
        Self::new(raw.templates, raw.styles)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bank serializes")
    }

    /// Single fixed template with only the canonical style names.
    pub fn fixed_prompt(&self) -> Self {
        let styles = self
            .styles
            .keys()
            .map(|k| (k.clone(), vec![k.clone()]))
            .collect();
        Self {
            templates: vec![FIXED_TEMPLATE.to_string()],
            styles,
        }
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn style_names(&self) -> impl Iterator<Item = &str> {
        self.styles.keys().map(String::as_str)
    }

    pub fn substitutions(&self, style: &str) -> Result<&[String]> {
        self.styles
            .get(style)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup {
                what: "style in prompt bank",
                key: style.to_string(),
            })
    }

    /// Errors unless every registry style has an entry in the bank.
    pub fn check_covers(&self, registry: &StyleRegistry) -> Result<()> {
        for name in registry.names() {
            self.substitutions(name)?;
        }
        Ok(())
    }

    pub fn render(&self, style: &str, template_idx: usize, synonym_idx: usize) -> Result<String> {
        let subs = self.substitutions(style)?;
        let template = self.templates.get(template_idx).ok_or(Error::Bounds {
            what: "template",
            index: template_idx,
            len: self.templates.len(),
        })?;
        let sub = subs.get(synonym_idx).ok_or(Error::Bounds {
            what: "substitution",
            index: synonym_idx,
            len: subs.len(),
        })?;
        Ok(template.replacen(PLACEHOLDER, sub, 1))
    }

    /// Draws a (template, substitution) pair uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, style: &str, rng: &mut R) -> Result<String> {
        let n_subs = self.substitutions(style)?.len();
        let t = rng.random_range(0..self.templates.len());
        let s = rng.random_range(0..n_subs);
        self.render(style, t, s)
    }

    /// Every template × substitution rendering, template-major.
    pub fn enumerate_all(&self, style: &str) -> Result<Vec<String>> {
        let n_subs = self.substitutions(style)?.len();
        let mut out = Vec::with_capacity(self.templates.len() * n_subs);
        for t in 0..self.templates.len() {
            for s in 0..n_subs {
                out.push(self.render(style, t, s)?);
            }
        }
        Ok(out)
    }
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Normalized query text: the words [`normalize_words`] keeps, space-joined.
pub fn normalize_text(text: &str) -> String {
    normalize_words(text).join(" ")
}

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Closed word-level vocabulary. Index 0 is the unknown token; known tokens
/// are sorted lexicographically and numbered from 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: BTreeMap<String, u32>,
}

impl Vocabulary {
    pub fn from_bank(bank: &PromptBank) -> Self {
        let mut words = std::collections::BTreeSet::new();
        for t in bank.templates() {
            words.extend(normalize_words(&t.replace(PLACEHOLDER, " ")));
        }
        for subs in bank.styles.values() {
            for s in subs {
                words.extend(normalize_words(s));
            }
        }
        Self::from_tokens(words.into_iter().collect()).expect("bank words are unique")
    }

    /// Rebuilds a vocabulary from its known tokens (without the unknown token).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut lookup = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if i > 0 && tokens[i - 1] >= *t {
                return Err(Error::Config(
                    "vocabulary tokens must be sorted and unique".into(),
                ));
            }
            lookup.insert(t.clone(), i as u32 + 1);
        }
        Ok(Self { tokens, lookup })
    }

    /// Known tokens, excluding the unknown token.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Number of ids, including the unknown token.
    pub fn len(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        match id {
            0 => Some(UNKNOWN_TOKEN),
            i => self.tokens.get(i as usize - 1).map(String::as_str),
        }
    }

    pub fn id(&self, word: &str) -> u32 {
        self.lookup.get(word).copied().unwrap_or(0)
    }

    /// Short content hash used to pair checkpoints with the vocabulary they were trained on.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let ids: Vec<u32> = normalize_words(text).iter().map(|w| self.id(w)).collect();
        if ids.is_empty() {
            TokenSequence { ids: vec![0] }
        } else {
            TokenSequence { ids }
        }
    }
}

/// Nonempty list of vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Contract("token sequence must be nonempty".into()));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
