//! Token/id tables with a reserved CTC blank.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved id of the CTC blank.
pub const BLANK: usize = 0;
pub const VOCAB_FILE_VERSION: u32 = 1;

/// Token table with dense ids `0..=V`; id 0 is the blank and never maps to a
/// token. Token at array position `i` has id `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlossVocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    lowercase: Option<bool>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lowercase: Option<bool>,
}

impl GlossVocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i + 1).is_some() {
                return Err(Error::invalid("vocab", format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            ids,
            lowercase: None,
        })
    }

    pub fn with_lowercase_flag(mut self, lowercase: bool) -> Self {
        self.lowercase = Some(lowercase);
        self
    }

    pub fn lowercase(&self) -> Option<bool> {
        self.lowercase
    }

    /// Number of real tokens `V` (excluding the blank).
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// `V + 1`, the classifier width.
    pub fn size(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id == BLANK {
            return None;
        }
        self.tokens.get(id - 1).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids, dropping unknown tokens. Returns the ids and the
    /// number of dropped tokens.
    pub fn encode_known<S: AsRef<str>>(&self, tokens: &[S]) -> (Vec<usize>, usize) {
        let mut unknown = 0;
        let ids = tokens
            .iter()
            .filter_map(|t| {
                let id = self.id(t.as_ref());
                unknown += usize::from(id.is_none());
                id
            })
            .collect();
        (ids, unknown)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter_map(|&i| self.token(i).map(str::to_owned))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            version: VOCAB_FILE_VERSION,
            tokens: self.tokens.clone(),
            lowercase: self.lowercase,
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::json("vocabulary", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| Error::json("vocabulary", e))?;
        if file.version != VOCAB_FILE_VERSION {
            return Err(Error::Format(format!(
                "unsupported vocabulary version {}",
                file.version
            )));
        }
        let mut v = Self::from_tokens(file.tokens)?;
        v.lowercase = file.lowercase;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
