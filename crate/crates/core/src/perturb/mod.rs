//! Test-time context perturbations and the sensitivity report built on them.
//!
//! A model that really uses its context should lose quality when the context
//! is destroyed; the report measures that loss as `perturbed − baseline` per
//! metric, averaged over the applied perturbations.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialog, PosTag, Utterance};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EmbeddingProvider, MetricReport, UnreferencedScorer};
use crate::models::{Architecture, Responder};
use crate::numerics::rng::{derive_seed, rng_for};

/// Fraction of each utterance's tokens removed by [`PerturbationKind::WordDrop`].
pub const WORD_DROP_RATE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Shuffle,
    Reverse,
    DropFirst,
    DropLast,
    Truncate,
    WordShuffle,
    WordReverse,
    WordDrop,
    NounDrop,
    VerbDrop,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 10] = [
        PerturbationKind::Shuffle,
        PerturbationKind::Reverse,
        PerturbationKind::DropFirst,
        PerturbationKind::DropLast,
        PerturbationKind::Truncate,
        PerturbationKind::WordShuffle,
        PerturbationKind::WordReverse,
        PerturbationKind::WordDrop,
        PerturbationKind::NounDrop,
        PerturbationKind::VerbDrop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Shuffle => "shuffle",
            PerturbationKind::Reverse => "reverse",
            PerturbationKind::DropFirst => "drop_first",
            PerturbationKind::DropLast => "drop_last",
            PerturbationKind::Truncate => "truncate",
            PerturbationKind::WordShuffle => "word_shuffle",
            PerturbationKind::WordReverse => "word_reverse",
            PerturbationKind::WordDrop => "word_drop",
            PerturbationKind::NounDrop => "noun_drop",
            PerturbationKind::VerbDrop => "verb_drop",
        }
    }

    pub fn needs_pos_tags(self) -> bool {
        matches!(self, PerturbationKind::NounDrop | PerturbationKind::VerbDrop)
    }

    /// Parses a comma-separated list; `all` selects every kind.
    pub fn parse_list(s: &str) -> Result<Vec<PerturbationKind>> {
        if s.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        let kinds = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<PerturbationKind>>>()?;
        if kinds.is_empty() {
            return Err(Error::Config("no perturbation kinds given".into()));
        }
        Ok(kinds)
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL.into_iter().find(|k| k.name() == norm).ok_or_else(|| {
            let valid: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown perturbation {s:?}; expected one of {}", valid.join(", ")))
        })
    }
}

/// Number of tokens that survive a word drop on an utterance of length `len`.
pub fn word_drop_survivors(len: usize) -> usize {
    let dropped = (WORD_DROP_RATE * len as f64).floor() as usize;
    len.saturating_sub(dropped).max(1).min(len)
}

fn keep_positions(u: &Utterance, keep: &[usize]) -> Utterance {
    Utterance {
        tokens: keep.iter().map(|&i| u.tokens[i].clone()).collect(),
        pos_tags: u.pos_tags.as_ref().map(|t| keep.iter().map(|&i| t[i]).collect()),
        speaker: u.speaker.clone(),
    }
}

fn drop_tag(u: &Utterance, tag: PosTag) -> Result<Utterance> {
    let tags = u
        .pos_tags
        .as_ref()
        .ok_or_else(|| Error::MissingAnnotation(format!("{tag:?} drop needs POS tags on every context utterance")))?;
    let mut keep: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] != tag).collect();
    if keep.is_empty() {
        keep.push(0);
    }
    Ok(keep_positions(u, &keep))
}

/// Reorders or filters the context utterances, keeping the persona count
/// equal to the number of original persona utterances still leading.
fn select_utterances(dialog: &Dialog, order: &[usize]) -> Dialog {
    let persona_turns = order.iter().take_while(|&&i| i < dialog.persona_turns).count();
    Dialog {
        context: order.iter().map(|&i| dialog.context[i].clone()).collect(),
        response: dialog.response.clone(),
        persona_turns,
    }
}

fn map_utterances(dialog: &Dialog, mut f: impl FnMut(usize, &Utterance) -> Result<Utterance>) -> Result<Dialog> {
    let context = dialog
        .context
        .iter()
        .enumerate()
        .map(|(i, u)| f(i, u))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dialog {
        context,
        response: dialog.response.clone(),
        persona_turns: dialog.persona_turns,
    })
}

/// Keeps only the last `k` context utterances (`k ≥ 1`).
pub fn truncate(dialog: &Dialog, k: usize) -> Dialog {
    let n = dialog.context.len();
    let start = n.saturating_sub(k.max(1));
    select_utterances(dialog, &(start..n).collect::<Vec<_>>())
}

/// Applies one perturbation to the context; the response is never touched.
pub fn perturb(dialog: &Dialog, kind: PerturbationKind, seed: u64) -> Result<Dialog> {
    let n = dialog.context.len();
    let all: Vec<usize> = (0..n).collect();
    Ok(match kind {
        PerturbationKind::Shuffle => {
            let mut order = all;
            order.shuffle(&mut rng_for(seed, "shuffle"));
            select_utterances(dialog, &order)
        }
        PerturbationKind::Reverse => {
            let order: Vec<usize> = all.into_iter().rev().collect();
            select_utterances(dialog, &order)
        }
        PerturbationKind::DropFirst if n >= 2 => select_utterances(dialog, &all[1..]),
        PerturbationKind::DropLast if n >= 2 => select_utterances(dialog, &all[..n - 1]),
        PerturbationKind::DropFirst | PerturbationKind::DropLast => dialog.clone(),
        PerturbationKind::Truncate => truncate(dialog, 1),
        PerturbationKind::WordShuffle => map_utterances(dialog, |i, u| {
            let mut order: Vec<usize> = (0..u.tokens.len()).collect();
            order.shuffle(&mut rng_for(seed, &format!("word_shuffle/{i}")));
            Ok(keep_positions(u, &order))
        })?,
        PerturbationKind::WordReverse => map_utterances(dialog, |_, u| {
            let order: Vec<usize> = (0..u.tokens.len()).rev().collect();
            Ok(keep_positions(u, &order))
        })?,
        PerturbationKind::WordDrop => map_utterances(dialog, |i, u| {
            let len = u.tokens.len();
            let mut keep = index::sample(&mut rng_for(seed, &format!("word_drop/{i}")), len, word_drop_survivors(len)).into_vec();
            keep.sort_unstable();
            Ok(keep_positions(u, &keep))
        })?,
        PerturbationKind::NounDrop => map_utterances(dialog, |_, u| drop_tag(u, PosTag::Noun))?,
        PerturbationKind::VerbDrop => map_utterances(dialog, |_, u| drop_tag(u, PosTag::Verb))?,
    })
}

/// Baseline and perturbed scores of one model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub model: String,
    pub seed: u64,
    pub baseline: MetricReport,
    pub perturbations: Vec<PerturbationResult>,
    /// Mean of `perturbed − baseline` over all perturbations, per metric.
    pub average_delta: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub name: String,
    pub scores: MetricReport,
    /// `perturbed − baseline` per metric.
    pub delta: BTreeMap<String, f64>,
}

/// Metric keys in report-column order.
pub const METRIC_KEYS: [&str; 7] = ["dist1", "dist2", "average", "extrema", "greedy", "greedy_idf_f1", "learned"];

/// Named metric values of a report, skipping absent ones.
pub fn metric_values(r: &MetricReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for (k, v) in [
        ("dist1", Some(r.dist1)),
        ("dist2", Some(r.dist2)),
        ("average", Some(r.average)),
        ("extrema", Some(r.extrema)),
        ("greedy", Some(r.greedy)),
        ("greedy_idf_f1", Some(r.greedy_idf_f1)),
        ("learned", r.learned_score),
    ] {
        if let Some(v) = v {
            m.insert(k.to_string(), v);
        }
    }
    m
}

/// A named context transformation; the index is the dialog's position.
pub type Transform<'a> = &'a dyn Fn(usize, &Dialog) -> Result<Dialog>;

fn score_set(
    responder: &dyn Responder,
    dialogs: &[Dialog],
    provider: &dyn EmbeddingProvider,
    scorer: Option<&UnreferencedScorer>,
) -> Result<MetricReport> {
    let mut outputs = Vec::with_capacity(dialogs.len());
    for d in dialogs {
        outputs.push(responder.respond(d)?);
    }
    let references: Vec<Vec<String>> = dialogs.iter().map(|d| d.response.tokens.clone()).collect();
    let contexts: Vec<Vec<Vec<String>>> = dialogs
        .iter()
        .map(|d| d.context.iter().map(|u| u.tokens.clone()).collect())
        .collect();
    evaluate(&outputs, &references, &contexts, provider, scorer)
}

/// Scores the unmodified dialogs and each transformed copy. The learned
/// scorer judges responses against the context the model actually saw.
pub fn custom_suite(
    model: &str,
    responder: &dyn Responder,
    dialogs: &[Dialog],
    provider: &dyn EmbeddingProvider,
    scorer: Option<&UnreferencedScorer>,
    transforms: &[(String, Transform<'_>)],
    seed: u64,
) -> Result<PerturbationReport> {
    if transforms.is_empty() {
        return Err(Error::Config("no perturbations requested".into()));
    }
    let baseline = score_set(responder, dialogs, provider, scorer)?;
    let base_values = metric_values(&baseline);
    let mut perturbations = Vec::with_capacity(transforms.len());
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for (name, f) in transforms {
        let perturbed = dialogs
            .iter()
            .enumerate()
            .map(|(i, d)| f(i, d))
            .collect::<Result<Vec<_>>>()?;
        let scores = score_set(responder, &perturbed, provider, scorer)?;
        let delta: BTreeMap<String, f64> = metric_values(&scores)
            .into_iter()
            .map(|(k, v)| {
                let d = v - base_values[&k];
                (k, d)
            })
            .collect();
        for (k, d) in &delta {
            *sums.entry(k.clone()).or_default() += d;
        }
        perturbations.push(PerturbationResult {
            name: name.clone(),
            scores,
            delta,
        });
    }
    let n = transforms.len() as f64;
    Ok(PerturbationReport {
        model: model.to_string(),
        seed,
        baseline,
        perturbations,
        average_delta: sums.into_iter().map(|(k, s)| (k, s / n)).collect(),
    })
}

/// Per-dialog seed of a perturbation.
pub fn dialog_seed(seed: u64, kind: PerturbationKind, index: usize) -> u64 {
    derive_seed(seed, &format!("{kind}/{index}"))
}

/// Applies each requested kind to every dialog and reports metric deltas.
pub fn perturbation_suite(
    model: &str,
    responder: &dyn Responder,
    dialogs: &[Dialog],
    provider: &dyn EmbeddingProvider,
    scorer: Option<&UnreferencedScorer>,
    kinds: &[PerturbationKind],
    seed: u64,
) -> Result<PerturbationReport> {
    if kinds.iter().any(|k| k.needs_pos_tags()) && !dialogs.iter().all(Dialog::is_tagged) {
        return Err(Error::MissingAnnotation(
            "noun/verb drop requested on a corpus without POS tags".into(),
        ));
    }
    let closures: Vec<_> = kinds
        .iter()
        .map(|&k| move |i: usize, d: &Dialog| perturb(d, k, dialog_seed(seed, k, i)))
        .collect();
    let transforms: Vec<(String, Transform<'_>)> = kinds
        .iter()
        .zip(&closures)
        .map(|(k, f)| (k.name().to_string(), f as Transform<'_>))
        .collect();
    custom_suite(model, responder, dialogs, provider, scorer, &transforms, seed)
}

impl PerturbationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text: one row per perturbation, one column per metric, in percent.
    pub fn to_text(&self) -> String {
        let present = metric_values(&self.baseline);
        let metrics: Vec<&str> = METRIC_KEYS.into_iter().filter(|k| present.contains_key(*k)).collect();
        let mut out = format!("{} (seed {})\n{:<14}", self.model, self.seed, "perturbation");
        for m in &metrics {
            let _ = write!(out, " {m:>14}");
        }
        out.push('\n');
        let mut row = |label: &str, values: &BTreeMap<String, f64>| {
            let _ = write!(out, "{label:<14}");
            for m in &metrics {
                let _ = write!(out, " {:>14.2}", 100.0 * values[*m]);
            }
            out.push('\n');
        };
        row("baseline", &metric_values(&self.baseline));
        for p in &self.perturbations {
            row(&format!("Δ {}", p.name), &p.delta);
        }
        row("Δ average", &self.average_delta);
        out
    }
}

/// The architecture a word-attention variant extends, if any.
pub fn base_architecture(arch: Architecture) -> Option<Architecture> {
    match arch {
        Architecture::HredWa | Architecture::Hran => Some(Architecture::Hred),
        Architecture::WseqWa => Some(Architecture::Wseq),
        Architecture::DshredWa => Some(Architecture::Dshred),
        Architecture::RecosaWa => Some(Architecture::Recosa),
        _ => None,
    }
}

/// Models × datasets matrix of average decreases for one metric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMatrix {
    pub metric: String,
    pub datasets: Vec<String>,
    pub models: Vec<String>,
    /// `cells[model][dataset]`.
    pub cells: BTreeMap<String, BTreeMap<String, f64>>,
}

impl SensitivityMatrix {
    pub fn new(metric: &str) -> Self {
        SensitivityMatrix {
            metric: metric.to_string(),
            ..Default::default()
        }
    }

    /// Records the average decrease of `report` on `dataset`.
    pub fn insert(&mut self, dataset: &str, report: &PerturbationReport) -> Result<()> {
        let value = *report.average_delta.get(&self.metric).ok_or_else(|| {
            Error::Validation(format!("report for {} has no {} score", report.model, self.metric))
        })?;
        if !self.datasets.iter().any(|d| d == dataset) {
            self.datasets.push(dataset.to_string());
        }
        if !self.models.iter().any(|m| *m == report.model) {
            self.models.push(report.model.clone());
        }
        self.cells
            .entry(report.model.clone())
            .or_default()
            .insert(dataset.to_string(), value);
        Ok(())
    }

    /// `↑` when a word-attention model's decrease is larger than its base
    /// model's on the same dataset, `↓` when smaller, nothing otherwise.
    pub fn marker(&self, model: &str, dataset: &str) -> &'static str {
        let base = model
            .parse::<Architecture>()
            .ok()
            .and_then(base_architecture)
            .and_then(|b| {
                self.models
                    .iter()
                    .find(|m| m.parse::<Architecture>().ok() == Some(b))
                    .and_then(|m| self.cells.get(m))
                    .and_then(|row| row.get(dataset))
            });
        let mine = self.cells.get(model).and_then(|r| r.get(dataset));
        match (mine, base) {
            (Some(a), Some(b)) if a < b => "↑",
            (Some(a), Some(b)) if a > b => "↓",
            _ => "",
        }
    }

    pub fn render(&self) -> String {
        let width = self.models.iter().map(|m| m.chars().count()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}", "Model");
        for d in &self.datasets {
            let _ = write!(out, " {d:>12}");
        }
        out.push('\n');
        for m in &self.models {
            let _ = write!(out, "{m:<width$}");
            for d in &self.datasets {
                match self.cells.get(m).and_then(|r| r.get(d)) {
                    Some(v) => {
                        let cell = format!("{:.2}{}", 100.0 * v, self.marker(m, d));
                        let _ = write!(out, " {:>12}", cell);
                    }
                    None => {
                        let _ = write!(out, " {:>12}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests;
