use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Corpus, Dialog};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SEP: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<sos>", "<eos>", "<unk>", "<sep>"];

/// Token/id bijection with the five reserved symbols at ids 0..4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<usize>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Ranks tokens by descending frequency, ties lexicographically.
    /// Reserved symbols count toward `max_size`.
    pub fn build(corpus: &Corpus, max_size: usize, min_freq: usize) -> Result<Self> {
        if max_size <= RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary size must exceed {}, got {max_size}",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for d in &corpus.dialogs {
            for u in d.context.iter().chain(std::iter::once(&d.response)) {
                for t in &u.tokens {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0; RESERVED.len()];
        for (t, c) in ranked {
            tokens.push(t.to_string());
            freqs.push(c);
        }
        Ok(Self::from_parts(tokens, freqs))
    }

    fn from_parts(tokens: Vec<String>, freqs: Vec<usize>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, freqs, index }
    }

    /// Restores the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn frequency(&self, id: usize) -> usize {
        self.freqs.get(id).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Context utterances joined by the separator id, with no trailing separator.
    pub fn flatten(&self, dialog: &Dialog) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, u) in dialog.context.iter().enumerate() {
            if i > 0 {
                out.push(SEP);
            }
            out.extend(self.encode(&u.tokens));
        }
        out
    }

    /// Converts a dialog to ids: one sequence per context utterance plus the response.
    pub fn encode_dialog(&self, dialog: &Dialog) -> EncodedDialog {
        EncodedDialog {
            context: dialog.context.iter().map(|u| self.encode(&u.tokens)).collect(),
            response: self.encode(&dialog.response.tokens),
        }
    }
}

/// A dialog mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedDialog {
    pub context: Vec<Vec<usize>>,
    pub response: Vec<usize>,
}

impl EncodedDialog {
    /// Context flattened with separators, as consumed by non-hierarchical models.
    pub fn flattened(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, u) in self.context.iter().enumerate() {
            if i > 0 {
                out.push(SEP);
            }
            out.extend_from_slice(u);
        }
        out
    }

    /// Decoder inputs (`SOS` + response) and targets (response + `EOS`).
    pub fn teacher_pair(&self) -> (Vec<usize>, Vec<usize>) {
        let mut input = vec![SOS];
        input.extend_from_slice(&self.response);
        let mut target = self.response.clone();
        target.push(EOS);
        (input, target)
    }
}
