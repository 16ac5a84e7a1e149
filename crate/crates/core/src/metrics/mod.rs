//! Reference-based response metrics over a pluggable embedding provider, and
//! a learned reference-free scorer.

mod embeddings;
mod unreferenced;

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use embeddings::{EmbeddingProvider, EmbeddingTable, IdfTable, UNK_TOKEN};
pub use unreferenced::{auc, ScorerConfig, UnreferencedScorer};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm};

/// Ratio of distinct to total `n`-grams across all responses.
pub fn distinct_n<S: AsRef<str>>(responses: &[Vec<S>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Validation("n-gram order must be at least 1".into()));
    }
    let mut seen: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for gram in r.windows(n) {
            seen.insert(gram.iter().map(|t| t.as_ref()).collect());
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Validation(format!("no {n}-grams in the responses")));
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Cosine similarity; zero vectors score 0 and identical non-zero vectors
/// score exactly 1.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

fn non_empty<S>(hyp: &[S], reference: &[S]) -> Result<()> {
    if hyp.is_empty() || reference.is_empty() {
        return Err(Error::Validation("hypothesis and reference must be non-empty".into()));
    }
    Ok(())
}

fn mean_vector<S: AsRef<str>>(tokens: &[S], p: &dyn EmbeddingProvider) -> Vec<f64> {
    let mut out = vec![0.0; p.dim()];
    for t in tokens {
        out.iter_mut().zip(p.vector(t.as_ref())).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= tokens.len() as f64);
    out
}

/// Cosine of the mean word vectors.
pub fn embedding_average<S: AsRef<str>>(hyp: &[S], reference: &[S], p: &dyn EmbeddingProvider) -> Result<f64> {
    non_empty(hyp, reference)?;
    Ok(cosine(&mean_vector(hyp, p), &mean_vector(reference, p)))
}

/// Per-dimension value of largest magnitude; equal magnitudes resolve to
/// the positive value.
pub fn extrema_vector<S: AsRef<str>>(tokens: &[S], p: &dyn EmbeddingProvider) -> Vec<f64> {
    let mut out = vec![0.0f64; p.dim()];
    for t in tokens {
        for (o, &v) in out.iter_mut().zip(p.vector(t.as_ref())) {
            if v.abs() > o.abs() || (v.abs() == o.abs() && v > *o) {
                *o = v;
            }
        }
    }
    out
}

/// Cosine of the per-dimension extrema vectors.
pub fn vector_extrema<S: AsRef<str>>(hyp: &[S], reference: &[S], p: &dyn EmbeddingProvider) -> Result<f64> {
    non_empty(hyp, reference)?;
    Ok(cosine(&extrema_vector(hyp, p), &extrema_vector(reference, p)))
}

/// Mean over `from` tokens of the best cosine against any `to` token.
pub fn greedy_direction<S: AsRef<str>>(from: &[S], to: &[S], p: &dyn EmbeddingProvider) -> Result<f64> {
    non_empty(from, to)?;
    let total: f64 = from.iter().map(|a| best_match(a.as_ref(), to, p)).sum();
    Ok(total / from.len() as f64)
}

fn best_match<S: AsRef<str>>(token: &str, to: &[S], p: &dyn EmbeddingProvider) -> f64 {
    let v = p.vector(token);
    to.iter()
        .map(|b| cosine(v, p.vector(b.as_ref())))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Greedy matching averaged over both directions, hence symmetric.
pub fn greedy_matching<S: AsRef<str>>(hyp: &[S], reference: &[S], p: &dyn EmbeddingProvider) -> Result<f64> {
    Ok(0.5 * (greedy_direction(hyp, reference, p)? + greedy_direction(reference, hyp, p)?))
}

fn weighted_greedy<S: AsRef<str>>(from: &[S], to: &[S], p: &dyn EmbeddingProvider) -> f64 {
    let mut weights: Vec<f64> = from.iter().map(|t| p.idf(t.as_ref())).collect();
    if weights.iter().all(|&w| w == 0.0) {
        weights.iter_mut().for_each(|w| *w = 1.0);
    }
    let num: f64 = from
        .iter()
        .zip(&weights)
        .map(|(t, w)| w * 0.5 * (1.0 + best_match(t.as_ref(), to, p)))
        .sum();
    num / weights.iter().sum::<f64>()
}

/// F1 of idf-weighted greedy precision (hypothesis → reference) and recall
/// (reference → hypothesis) over cosines rescaled by `(1 + cos) / 2`.
pub fn greedy_idf_f1<S: AsRef<str>>(hyp: &[S], reference: &[S], p: &dyn EmbeddingProvider) -> Result<f64> {
    non_empty(hyp, reference)?;
    let precision = weighted_greedy(hyp, reference, p);
    let recall = weighted_greedy(reference, hyp, p);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Corpus-level scores. Similarities are means over samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub dist1: f64,
    pub dist2: f64,
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
    pub greedy_idf_f1: f64,
    pub learned_score: Option<f64>,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 7] = [
        "Dist-1",
        "Dist-2",
        "Average",
        "Extrema",
        "Greedy",
        "greedy-idf-F1",
        "learned-unreferenced",
    ];

    fn values(&self) -> [Option<f64>; 7] {
        [
            Some(self.dist1),
            Some(self.dist2),
            Some(self.average),
            Some(self.extrema),
            Some(self.greedy),
            Some(self.greedy_idf_f1),
            self.learned_score,
        ]
    }

    /// Column header for [`MetricReport::table_row`].
    pub fn table_header(label_width: usize) -> String {
        let mut out = format!("{:<label_width$}", "Model");
        for c in Self::COLUMNS {
            let _ = write!(out, " {c:>20}");
        }
        out
    }

    /// Aligned row with every score as a percentage; missing scores print `-`.
    pub fn table_row(&self, label: &str, label_width: usize) -> String {
        let mut out = format!("{label:<label_width$}");
        for v in self.values() {
            match v {
                Some(v) => {
                    let _ = write!(out, " {:>20.2}", 100.0 * v);
                }
                None => {
                    let _ = write!(out, " {:>20}", "-");
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn ratio_or_zero<S: AsRef<str>>(responses: &[Vec<S>], n: usize) -> f64 {
    distinct_n(responses, n).unwrap_or(0.0)
}

/// Scores aligned `outputs` against `references`. Empty outputs score 0 on
/// every similarity metric; distinct ratios with no n-grams at all are 0.
pub fn evaluate(
    outputs: &[Vec<String>],
    references: &[Vec<String>],
    contexts: &[Vec<Vec<String>>],
    provider: &dyn EmbeddingProvider,
    scorer: Option<&UnreferencedScorer>,
) -> Result<MetricReport> {
    if outputs.len() != references.len() || outputs.len() != contexts.len() {
        return Err(Error::Validation(format!(
            "misaligned inputs: {} outputs, {} references, {} contexts",
            outputs.len(),
            references.len(),
            contexts.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    let n = outputs.len() as f64;
    let (mut average, mut extrema, mut greedy, mut f1, mut learned) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((hyp, reference), context) in outputs.iter().zip(references).zip(contexts) {
        if reference.is_empty() {
            return Err(Error::Validation("empty reference response".into()));
        }
        if !hyp.is_empty() {
            average += embedding_average(hyp, reference, provider)?;
            extrema += vector_extrema(hyp, reference, provider)?;
            greedy += greedy_matching(hyp, reference, provider)?;
            f1 += greedy_idf_f1(hyp, reference, provider)?;
        }
        if let Some(s) = scorer {
            learned += s.score(context, hyp, provider);
        }
    }
    Ok(MetricReport {
        samples: outputs.len(),
        dist1: ratio_or_zero(outputs, 1),
        dist2: ratio_or_zero(outputs, 2),
        average: average / n,
        extrema: extrema / n,
        greedy: greedy / n,
        greedy_idf_f1: f1 / n,
        learned_score: scorer.map(|_| learned / n),
    })
}
