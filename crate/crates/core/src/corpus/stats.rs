use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

/// Turn and utterance-length summary of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogs: usize,
    pub turns_max: usize,
    pub turns_avg: f64,
    pub turns_min: usize,
    pub length_max: usize,
    pub length_avg: f64,
    pub length_min: usize,
    pub vocab: usize,
}

/// Turns count context utterances per dialog. Lengths cover every utterance,
/// context and response alike. The vocabulary is the number of distinct tokens.
pub fn stats(corpus: &Corpus) -> Result<CorpusStats> {
    if corpus.dialogs.is_empty() {
        return Err(Error::Validation("statistics of an empty corpus".into()));
    }
    let turns: Vec<usize> = corpus.dialogs.iter().map(|d| d.context.len()).collect();
    let lengths: Vec<usize> = corpus
        .dialogs
        .iter()
        .flat_map(|d| d.context.iter().chain(std::iter::once(&d.response)))
        .map(|u| u.tokens.len())
        .collect();
    let vocab: HashSet<&str> = corpus
        .dialogs
        .iter()
        .flat_map(|d| d.context.iter().chain(std::iter::once(&d.response)))
        .flat_map(|u| u.tokens.iter().map(String::as_str))
        .collect();
    let avg = |xs: &[usize]| xs.iter().sum::<usize>() as f64 / xs.len() as f64;
    Ok(CorpusStats {
        dialogs: corpus.dialogs.len(),
        turns_max: *turns.iter().max().unwrap(),
        turns_avg: avg(&turns),
        turns_min: *turns.iter().min().unwrap(),
        length_max: *lengths.iter().max().unwrap(),
        length_avg: avg(&lengths),
        length_min: *lengths.iter().min().unwrap(),
        vocab: vocab.len(),
    })
}

impl CorpusStats {
    pub const HEADER: &'static str = "Dataset | Turn max | Turn avg | Turn min | Length max | Length avg | Length min | Vocab";

    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{name} | {} | {:.2} | {} | {} | {:.2} | {} | {}",
            self.turns_max,
            self.turns_avg,
            self.turns_min,
            self.length_max,
            self.length_avg,
            self.length_min,
            group_thousands(self.vocab)
        )
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::HEADER)?;
        write!(f, "{}", self.table_row("corpus"))
    }
}

fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}
