use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Closed word-level vocabulary. Specials occupy the first four ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<mask>", "<bos>", "<eos>"];

impl Vocabulary {
    /// Builds a vocabulary from content words; specials are prepended.
    pub fn new<S: AsRef<str>>(content: &[S]) -> Result<Self> {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| String::from(*s)).collect();
        for w in content {
            let w = w.as_ref();
            if words.iter().any(|x| x == w) {
                return Err(Error::invalid(alloc::format!("duplicate word {w:?}")));
            }
            words.push(String::from(w));
        }
        Ok(Vocabulary { words })
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }
    pub fn mask_id(&self) -> TokenId {
        MASK
    }
    pub fn pad_id(&self) -> TokenId {
        PAD
    }
    pub fn bos_id(&self) -> TokenId {
        BOS
    }
    pub fn eos_id(&self) -> TokenId {
        EOS
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.words.iter().position(|w| w == word).map(|i| i as TokenId)
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id <= EOS
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::invalid(alloc::format!("unknown word {w:?}")))
            })
            .collect()
    }

    /// Space-joined words; pads are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids.iter().filter(|&&id| id != PAD) {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.word(id).unwrap_or("<unk>"));
        }
        out
    }

    pub fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.size()) {
            Some(id) => Err(Error::invalid(alloc::format!(
                "token id {id} out of range for vocabulary of size {}",
                self.size()
            ))),
            None => Ok(()),
        }
    }
}

/// Number of leading non-pad tokens.
pub fn content_len(ids: &[TokenId]) -> usize {
    ids.iter().take_while(|&&id| id != PAD).count()
}

pub fn pad_to(mut ids: Vec<TokenId>, len: usize) -> Vec<TokenId> {
    ids.resize(len.max(ids.len()), PAD);
    ids
}
