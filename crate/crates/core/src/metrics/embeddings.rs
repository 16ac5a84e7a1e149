use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::rng_for;

/// Token used to look up the fixed vector of out-of-table words.
pub const UNK_TOKEN: &str = "<unk>";

/// Deterministic token → vector lookup plus inverse document frequencies.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    /// The vector of `token`; unknown tokens share one fixed vector.
    fn vector(&self, token: &str) -> &[f64];
    /// Non-negative idf weight of `token`.
    fn idf(&self, token: &str) -> f64;
}

/// Inverse document frequencies `ln((M + 1) / (df + 1))` over `M` documents;
/// unseen tokens get `ln(M + 1)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    pub documents: usize,
    pub weights: HashMap<String, f64>,
}

impl IdfTable {
    pub fn from_documents<S: AsRef<str>>(docs: &[Vec<S>]) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            let unique: HashSet<&str> = doc.iter().map(|t| t.as_ref()).collect();
            for t in unique {
                *df.entry(t.to_string()).or_default() += 1;
            }
        }
        let m = docs.len() as f64;
        let weights = df
            .into_iter()
            .map(|(t, n)| (t, ((m + 1.0) / (n as f64 + 1.0)).ln()))
            .collect();
        IdfTable {
            documents: docs.len(),
            weights,
        }
    }

    pub fn weight(&self, token: &str) -> f64 {
        self.weights
            .get(token)
            .copied()
            .unwrap_or_else(|| (self.documents as f64 + 1.0).ln())
    }
}

/// An in-memory embedding table, loaded from text or generated from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    unk: Vec<f64>,
    idf: IdfTable,
}

fn gaussian_vector(seed: u64, token: &str, dim: usize) -> Vec<f64> {
    let mut rng = rng_for(seed, &format!("embedding/{token}"));
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl EmbeddingTable {
    /// Seeded random vectors for `tokens`. Each token's vector depends only
    /// on the seed and the token itself, not on the order of `tokens`.
    pub fn random<S: AsRef<str>>(tokens: &[S], dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let vectors = tokens
            .iter()
            .map(|t| (t.as_ref().to_string(), gaussian_vector(seed, t.as_ref(), dim)))
            .collect();
        Ok(EmbeddingTable {
            dim,
            vectors,
            unk: gaussian_vector(seed, UNK_TOKEN, dim),
            idf: IdfTable::default(),
        })
    }

    /// Parses `token v1 … vd` lines. A leading `count dim` header line, as
    /// written by common word-vector tools, is skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (no, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if no == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
                continue;
            }
            let values = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Validation(format!("embedding line {}: {e}", no + 1)))?;
            match dim {
                None if values.is_empty() => {
                    return Err(Error::Validation(format!("embedding line {}: no values", no + 1)));
                }
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::Validation(format!(
                        "embedding line {}: expected {d} values, found {}",
                        no + 1,
                        values.len()
                    )));
                }
                _ => {}
            }
            vectors.insert(fields[0].to_string(), values);
        }
        let dim = dim.ok_or_else(|| Error::Validation("embedding file contains no vectors".into()))?;
        let unk = vectors.get(UNK_TOKEN).cloned().unwrap_or_else(|| gaussian_vector(0, UNK_TOKEN, dim));
        Ok(EmbeddingTable {
            dim,
            vectors,
            unk,
            idf: IdfTable::default(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn with_idf(mut self, idf: IdfTable) -> Self {
        self.idf = idf;
        self
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Inserts or replaces a vector.
    pub fn set(&mut self, token: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Validation(format!(
                "vector for {token:?} has {} values, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if token == UNK_TOKEN {
            self.unk = vector.clone();
        }
        self.vectors.insert(token.to_string(), vector);
        Ok(())
    }
}

impl EmbeddingProvider for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn vector(&self, token: &str) -> &[f64] {
        self.vectors.get(token).unwrap_or(&self.unk)
    }

    fn idf(&self, token: &str) -> f64 {
        self.idf.weight(token)
    }
}
