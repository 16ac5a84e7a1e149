//! Command implementations. Each returns the text printed on success.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dialoglab::corpus::{stats, Corpus, CorpusStats, Dialog, Vocabulary};
use dialoglab::metrics::{evaluate, EmbeddingTable, IdfTable, MetricReport, UnreferencedScorer};
use dialoglab::models::{
    load_checkpoint, save_checkpoint, AttentionRecord, Architecture, Model, ModelConfig, ModelResponder, Responder,
};
use dialoglab::numerics::rng::rng_for;
use dialoglab::perturb::{perturbation_suite, PerturbationKind, PerturbationReport};
use dialoglab::training::{train as run_training, TrainLog};
use dialoglab::{Error, Result};

use crate::artifacts::Artifacts;
use crate::config::RunConfig;

/// Relative path of an architecture's checkpoint inside a run directory.
pub fn checkpoint_rel(arch: Architecture) -> String {
    format!("{}/best.ckpt", arch.name())
}

fn load_corpus(cfg: &RunConfig, key: &str) -> Result<Corpus> {
    let corpus = Corpus::load(cfg.existing_path(key)?, cfg.load_options())?;
    if corpus.is_empty() {
        return Err(Error::Validation(format!("`{key}` contains no dialogs")));
    }
    Ok(corpus)
}

fn load_with_vocab(path: &Path) -> Result<(Model, Vocabulary)> {
    let (model, vocab) = load_checkpoint(path)?;
    let vocab = vocab.ok_or_else(|| {
        Error::Compatibility(format!("checkpoint {} carries no vocabulary", path.display()))
    })?;
    Ok((model, vocab))
}

/// Summary of a finished training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub architecture: Architecture,
    pub model: ModelConfig,
    pub parameters: usize,
    pub train_dialogs: usize,
    pub valid_dialogs: usize,
    pub vocab_size: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_valid_loss: f64,
}

pub fn train(cfg: &RunConfig) -> Result<String> {
    cfg.check_paths()?;
    let corpus = load_corpus(cfg, "train_corpus")?;
    let (train_set, valid_set) = match cfg.valid_corpus {
        Some(_) => (corpus, load_corpus(cfg, "valid_corpus")?),
        None => corpus.split(cfg.train.valid_fraction, cfg.train.seed)?,
    };
    let vocab = Vocabulary::build(&train_set, cfg.vocab_size, cfg.min_freq)?;
    let model_cfg = cfg.model_config(vocab.len())?;
    let mut model = Model::new(model_cfg.clone(), cfg.train.seed)?;
    let encode = |c: &Corpus| c.dialogs.iter().map(|d| vocab.encode_dialog(d)).collect::<Vec<_>>();
    let outcome = run_training(&mut model, &encode(&train_set), &encode(&valid_set), &cfg.train)?;

    let mut art = Artifacts::new(&cfg.out, "train");
    let rel = checkpoint_rel(cfg.arch);
    save_checkpoint(art.path(&rel), &model, Some(&vocab))?;
    art.record(&rel);
    let dir = cfg.arch.name();
    art.text(&format!("{dir}/train_log.csv"), &outcome.log.to_csv())?;
    art.json(&format!("{dir}/train_log.json"), &outcome.log)?;
    let best = &outcome.log.epochs[outcome.best_epoch - 1];
    let summary = TrainSummary {
        architecture: cfg.arch,
        model: model_cfg,
        parameters: model.params().num_scalars(),
        train_dialogs: train_set.len(),
        valid_dialogs: valid_set.len(),
        vocab_size: vocab.len(),
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.log.epochs.len(),
        stopped_early: outcome.log.stopped_early,
        best_valid_loss: best.valid_loss,
    };
    art.json(&format!("{dir}/train_summary.json"), &summary)?;
    art.finish()?;
    Ok(describe_training(cfg.arch, &outcome.log, &summary, &cfg.out.join(rel)))
}

fn describe_training(arch: Architecture, log: &TrainLog, s: &TrainSummary, ckpt: &Path) -> String {
    let mut out = String::new();
    for e in &log.epochs {
        let _ = writeln!(
            out,
            "epoch {:>3}  train {:.4}  valid {:.4}  lr {:.3e}  kl {:.3}",
            e.epoch, e.train_loss, e.valid_loss, e.lr, e.kl_weight
        );
    }
    let _ = writeln!(
        out,
        "{}: best epoch {} (valid {:.4}), {} parameters, checkpoint {}",
        arch.label(),
        s.best_epoch,
        s.best_valid_loss,
        s.parameters,
        ckpt.display()
    );
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub context: Vec<Vec<String>>,
    pub reference: Vec<String>,
    pub response: Vec<String>,
}

fn contexts(dialogs: &[Dialog]) -> Vec<Vec<Vec<String>>> {
    dialogs
        .iter()
        .map(|d| d.context.iter().map(|u| u.tokens.clone()).collect())
        .collect()
}

fn generate_all(responder: &dyn Responder, dialogs: &[Dialog]) -> Result<Vec<Generation>> {
    dialogs
        .iter()
        .map(|d| {
            Ok(Generation {
                context: d.context.iter().map(|u| u.tokens.clone()).collect(),
                reference: d.response.tokens.clone(),
                response: responder.respond(d)?,
            })
        })
        .collect()
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn generate(cfg: &RunConfig, checkpoint: &Path) -> Result<String> {
    cfg.check_paths()?;
    let (model, vocab) = load_with_vocab(checkpoint)?;
    let corpus = load_corpus(cfg, "test_corpus")?;
    let gens = generate_all(&ModelResponder::new(&model, &vocab), &corpus.dialogs)?;
    let mut art = Artifacts::new(&cfg.out, "generate");
    art.text(&format!("{}/generations.jsonl", model.architecture().name()), &jsonl(&gens)?)?;
    art.finish()?;
    let mut out = String::new();
    for g in &gens {
        let ctx: Vec<String> = g.context.iter().map(|u| u.join(" ")).collect();
        let _ = writeln!(out, "{} => {}", ctx.join(" | "), g.response.join(" "));
    }
    Ok(out)
}

/// The embedding provider and learned scorer shared by the evaluation commands.
pub struct Judges {
    pub provider: EmbeddingTable,
    pub scorer: UnreferencedScorer,
}

/// Builds the embedding provider (file or seeded random table over `vocab`),
/// fits idf weights on the test references and trains the learned scorer on
/// the training corpus when configured, else on the test corpus.
pub fn judges(cfg: &RunConfig, vocab: &Vocabulary, test: &Corpus) -> Result<Judges> {
    let table = match cfg.embeddings {
        Some(_) => EmbeddingTable::load(cfg.existing_path("embeddings")?)?,
        None => EmbeddingTable::random(vocab.tokens(), cfg.embedding_dim, cfg.train.seed)?,
    };
    let refs: Vec<Vec<String>> = test.dialogs.iter().map(|d| d.response.tokens.clone()).collect();
    let provider = table.with_idf(IdfTable::from_documents(&refs));
    let scorer_corpus = match cfg.train_corpus {
        Some(_) => load_corpus(cfg, "train_corpus")?,
        None => test.clone(),
    };
    let scorer = UnreferencedScorer::train(&scorer_corpus.dialogs, &provider, cfg.scorer_config())?;
    Ok(Judges { provider, scorer })
}

fn score(model: &Model, vocab: &Vocabulary, test: &Corpus, judges: &Judges) -> Result<(Vec<Generation>, MetricReport)> {
    let gens = generate_all(&ModelResponder::new(model, vocab), &test.dialogs)?;
    let outputs: Vec<Vec<String>> = gens.iter().map(|g| g.response.clone()).collect();
    let refs: Vec<Vec<String>> = gens.iter().map(|g| g.reference.clone()).collect();
    let report = evaluate(&outputs, &refs, &contexts(&test.dialogs), &judges.provider, Some(&judges.scorer))?;
    Ok((gens, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub model: String,
    pub architecture: Architecture,
    pub seed: u64,
    pub report: MetricReport,
}

pub fn evaluate_cmd(cfg: &RunConfig, checkpoint: &Path) -> Result<String> {
    cfg.check_paths()?;
    let (model, vocab) = load_with_vocab(checkpoint)?;
    let test = load_corpus(cfg, "test_corpus")?;
    let judges = judges(cfg, &vocab, &test)?;
    let (gens, report) = score(&model, &vocab, &test, &judges)?;
    let arch = model.architecture();
    let file = EvaluationFile {
        model: arch.label().to_string(),
        architecture: arch,
        seed: cfg.train.seed,
        report,
    };
    let width = label_width([file.model.as_str()]);
    let table = format!(
        "{}\n{}\n",
        MetricReport::table_header(width),
        file.report.table_row(&file.model, width)
    );
    let mut art = Artifacts::new(&cfg.out, "evaluate");
    art.json(&format!("{}/metrics.json", arch.name()), &file)?;
    art.text(&format!("{}/metrics.txt", arch.name()), &table)?;
    art.text(&format!("{}/generations.jsonl", arch.name()), &jsonl(&gens)?)?;
    art.finish()?;
    Ok(table)
}

fn label_width<'a>(labels: impl IntoIterator<Item = &'a str>) -> usize {
    labels.into_iter().map(|l| l.chars().count()).max().unwrap_or(0).max(5)
}

/// Best (`*`) and second-best (`+`) row per column; higher is better and
/// ties go to the earlier row.
pub fn rank_marks(values: &[Option<f64>]) -> Vec<&'static str> {
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    order.sort_by(|&a, &b| values[b].unwrap().total_cmp(&values[a].unwrap()).then(a.cmp(&b)));
    let mut marks = vec![""; values.len()];
    for (rank, &i) in order.iter().take(2).enumerate() {
        marks[i] = if rank == 0 { "*" } else { "+" };
    }
    marks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub checkpoint: PathBuf,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    /// `marks[row][column]` is `*`, `+` or empty.
    pub marks: Vec<Vec<String>>,
}

fn report_columns(r: &MetricReport) -> [Option<f64>; 7] {
    [
        Some(r.dist1),
        Some(r.dist2),
        Some(r.average),
        Some(r.extrema),
        Some(r.greedy),
        Some(r.greedy_idf_f1),
        r.learned_score,
    ]
}

impl Comparison {
    pub fn new(rows: Vec<ComparisonRow>) -> Self {
        let columns: Vec<String> = MetricReport::COLUMNS.iter().map(|c| c.to_string()).collect();
        let mut marks = vec![vec![String::new(); columns.len()]; rows.len()];
        for c in 0..columns.len() {
            let values: Vec<Option<f64>> = rows.iter().map(|r| report_columns(&r.report)[c]).collect();
            for (r, m) in rank_marks(&values).into_iter().enumerate() {
                marks[r][c] = m.to_string();
            }
        }
        Comparison { columns, rows, marks }
    }

    pub fn render(&self) -> String {
        let width = label_width(self.rows.iter().map(|r| r.model.as_str()));
        let mut out = format!("{:<width$}", "Model");
        for c in &self.columns {
            let _ = write!(out, " {c:>20}");
        }
        out.push('\n');
        for (r, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{:<width$}", row.model);
            for (c, v) in report_columns(&row.report).iter().enumerate() {
                let cell = match v {
                    Some(v) => format!("{:.2}{}", 100.0 * v, self.marks[r][c]),
                    None => "-".to_string(),
                };
                let _ = write!(out, " {cell:>20}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn compare(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<String> {
    if checkpoints.len() < 2 {
        return Err(Error::Config("compare needs at least two checkpoints".into()));
    }
    cfg.check_paths()?;
    let models = checkpoints
        .iter()
        .map(|p| load_with_vocab(p))
        .collect::<Result<Vec<_>>>()?;
    let vocab = &models[0].1;
    for (p, (_, v)) in checkpoints.iter().zip(&models).skip(1) {
        if v.tokens() != vocab.tokens() {
            return Err(Error::Compatibility(format!(
                "{} uses a different vocabulary than {}",
                p.display(),
                checkpoints[0].display()
            )));
        }
    }
    let test = load_corpus(cfg, "test_corpus")?;
    let judges = judges(cfg, vocab, &test)?;
    let mut rows = Vec::new();
    for (path, (model, vocab)) in checkpoints.iter().zip(&models) {
        let (_, report) = score(model, vocab, &test, &judges)?;
        rows.push(ComparisonRow {
            model: model.architecture().label().to_string(),
            checkpoint: path.clone(),
            report,
        });
    }
    let comparison = Comparison::new(rows);
    let text = comparison.render();
    let mut art = Artifacts::new(&cfg.out, "compare");
    art.json("compare.json", &comparison)?;
    art.text("compare.txt", &text)?;
    art.finish()?;
    Ok(text)
}

pub fn perturb(cfg: &RunConfig, checkpoint: &Path, kinds: &[PerturbationKind]) -> Result<String> {
    cfg.check_paths()?;
    let (model, vocab) = load_with_vocab(checkpoint)?;
    let test = load_corpus(cfg, "test_corpus")?;
    let judges = judges(cfg, &vocab, &test)?;
    let report: PerturbationReport = perturbation_suite(
        model.architecture().label(),
        &ModelResponder::new(&model, &vocab),
        &test.dialogs,
        &judges.provider,
        Some(&judges.scorer),
        kinds,
        cfg.train.seed,
    )?;
    let text = report.to_text();
    let dir = model.architecture().name();
    let mut art = Artifacts::new(&cfg.out, "perturb");
    art.json(&format!("{dir}/perturbation.json"), &report)?;
    art.text(&format!("{dir}/perturbation.txt"), &text)?;
    art.finish()?;
    Ok(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapStep {
    pub token: String,
    pub log_prob: f64,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapDialog {
    pub context: Vec<Vec<String>>,
    pub steps: Vec<HeatmapStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub model: String,
    pub architecture: Architecture,
    pub dialogs: Vec<HeatmapDialog>,
}

/// Greedy decoding traces of `dialogs`, one entry per generated token.
pub fn heatmap_traces(model: &Model, vocab: &Vocabulary, dialogs: &[Dialog]) -> Result<Heatmap> {
    let mut out = Vec::with_capacity(dialogs.len());
    for d in dialogs {
        let trace = model.generate(&vocab.encode_dialog(d), model.config().max_decode_len)?;
        let steps = trace
            .tokens
            .iter()
            .zip(trace.attention)
            .zip(&trace.log_probs)
            .map(|((&t, attention), &log_prob)| HeatmapStep {
                token: vocab.token(t).to_string(),
                log_prob,
                attention,
            })
            .collect();
        out.push(HeatmapDialog {
            context: d.context.iter().map(|u| u.tokens.clone()).collect(),
            steps,
        });
    }
    Ok(Heatmap {
        model: model.architecture().label().to_string(),
        architecture: model.architecture(),
        dialogs: out,
    })
}

pub fn heatmap(cfg: &RunConfig, checkpoint: &Path, dialogs: &Path) -> Result<String> {
    let (model, vocab) = load_with_vocab(checkpoint)?;
    let corpus = Corpus::load(dialogs, cfg.load_options())?;
    let doc = heatmap_traces(&model, &vocab, &corpus.dialogs)?;
    let mut art = Artifacts::new(&cfg.out, "heatmap");
    let path = art.json(&format!("{}/heatmap.json", model.architecture().name()), &doc)?;
    art.finish()?;
    let steps: usize = doc.dialogs.iter().map(|d| d.steps.len()).sum();
    Ok(format!(
        "{} dialogs, {steps} decoding steps written to {}\n",
        doc.dialogs.len(),
        path.display()
    ))
}

pub fn stats_cmd(cfg: &RunConfig, corpora: &[PathBuf]) -> Result<String> {
    if corpora.is_empty() {
        return Err(Error::Config("stats needs at least one corpus".into()));
    }
    let mut rows: Vec<(String, CorpusStats)> = Vec::new();
    for path in corpora {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        rows.push((name, stats(&Corpus::load(path, cfg.load_options())?)?));
    }
    let mut text = format!("{}\n", CorpusStats::HEADER);
    for (name, s) in &rows {
        let _ = writeln!(text, "{}", s.table_row(name));
    }
    let mut art = Artifacts::new(&cfg.out, "stats");
    art.json("stats.json", &rows.iter().cloned().collect::<std::collections::BTreeMap<_, _>>())?;
    art.text("stats.txt", &text)?;
    art.finish()?;
    Ok(text)
}

/// Largest relative gradient error of one architecture at toy size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub architecture: Architecture,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Tolerance of the finite-difference check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Toy model configuration used by `gradcheck`.
pub fn toy_model_config(arch: Architecture) -> ModelConfig {
    let mut c = ModelConfig::new(arch, 20).with_sizes(8, 6);
    c.heads = 2;
    c.transformer_layers = 2;
    c.latent_dim = 4;
    c.max_decode_len = 6;
    c
}

/// A random two-turn dialog over ids `5..20`.
pub fn toy_dialog(seed: u64) -> dialoglab::corpus::EncodedDialog {
    use rand::Rng as _;
    let mut rng = rng_for(seed, "gradcheck-dialog");
    let mut utterance = || -> Vec<usize> {
        let len = rng.random_range(1..=4);
        (0..len).map(|_| rng.random_range(5..20)).collect()
    };
    dialoglab::corpus::EncodedDialog {
        context: vec![utterance(), utterance()],
        response: utterance(),
    }
}

pub fn gradcheck_rows(archs: &[Architecture], seed: u64) -> Result<Vec<GradCheckRow>> {
    archs
        .iter()
        .map(|&arch| {
            let model = Model::new(toy_model_config(arch), seed)?;
            let report = model.check_gradients(&toy_dialog(seed), 1.0, 1e-5)?;
            Ok(GradCheckRow {
                architecture: arch,
                max_relative_error: report.max_relative_error,
                passed: report.max_relative_error < GRADCHECK_TOLERANCE,
            })
        })
        .collect()
}

pub fn gradcheck(cfg: &RunConfig, archs: &[Architecture]) -> Result<String> {
    let rows = gradcheck_rows(archs, cfg.train.seed)?;
    let mut text = String::new();
    for r in &rows {
        let _ = writeln!(
            text,
            "{:<12} max relative error {:.3e}  {}",
            r.architecture.label(),
            r.max_relative_error,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    let mut art = Artifacts::new(&cfg.out, "gradcheck");
    art.json("gradcheck.json", &rows)?;
    art.finish()?;
    if let Some(bad) = rows.iter().find(|r| !r.passed) {
        return Err(Error::Validation(format!(
            "gradient check failed for {}: relative error {:.3e}",
            bad.architecture.label(),
            bad.max_relative_error
        )));
    }
    Ok(text)
}
