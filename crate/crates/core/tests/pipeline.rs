//! Public-API round trips: corpus → vocabulary → model → checkpoint →
//! responses → metrics → perturbation report.

use dialoglab::corpus::{Corpus, LoadOptions, Vocabulary};
use dialoglab::metrics::{evaluate, EmbeddingTable, IdfTable};
use dialoglab::models::{load_checkpoint, save_checkpoint, Architecture, Model, ModelConfig, ModelResponder, Responder};
use dialoglab::perturb::{perturbation_suite, PerturbationKind};
use dialoglab::training::{train, TrainConfig};

const CORPUS: &str = r#"{"context": ["hello there", "hi how are you"], "response": "fine thanks"}
{"context": ["what is your name"], "response": "my name is bot"}
{"context": ["do you like tea", "yes i do", "green or black"], "response": "green tea"}
{"context": ["good morning", "morning to you"], "response": "how did you sleep"}
"#;

fn setup() -> (Corpus, Vocabulary) {
    let corpus = Corpus::parse_jsonl(CORPUS, LoadOptions::default()).unwrap();
    let vocab = Vocabulary::build(&corpus, 100, 1).unwrap();
    (corpus, vocab)
}

fn small_config(arch: Architecture, vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::new(arch, vocab).with_sizes(8, 6);
    c.heads = 2;
    c.transformer_layers = 1;
    c.latent_dim = 4;
    c.max_decode_len = 5;
    c
}

#[test]
fn checkpoint_round_trip_preserves_generation() {
    let (corpus, vocab) = setup();
    let dir = tempfile::tempdir().unwrap();
    for arch in Architecture::ALL {
        let model = Model::new(small_config(arch, vocab.len()), 4).unwrap();
        let path = dir.path().join(format!("{}.ckpt", arch.name()));
        save_checkpoint(&path, &model, Some(&vocab)).unwrap();
        let (loaded, loaded_vocab) = load_checkpoint(&path).unwrap();
        let loaded_vocab = loaded_vocab.expect("vocabulary stored");
        assert_eq!(loaded_vocab.tokens(), vocab.tokens());
        for d in &corpus.dialogs {
            let a = ModelResponder::new(&model, &vocab).respond(d).unwrap();
            let b = ModelResponder::new(&loaded, &loaded_vocab).respond(d).unwrap();
            assert_eq!(a, b, "{}", arch.label());
        }
    }
}

#[test]
fn trained_model_feeds_metrics_and_perturbations() {
    let (corpus, vocab) = setup();
    let encoded: Vec<_> = corpus.dialogs.iter().map(|d| vocab.encode_dialog(d)).collect();
    let mut model = Model::new(small_config(Architecture::HredWa, vocab.len()), 4).unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        epochs: 5,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &encoded, &encoded, &cfg).unwrap();
    assert_eq!(out.log.epochs.len(), 5);

    let refs: Vec<Vec<String>> = corpus.dialogs.iter().map(|d| d.response.tokens.clone()).collect();
    let provider = EmbeddingTable::random(vocab.tokens(), 8, 1)
        .unwrap()
        .with_idf(IdfTable::from_documents(&refs));
    let responder = ModelResponder::new(&model, &vocab);
    let outputs: Vec<Vec<String>> = corpus.dialogs.iter().map(|d| responder.respond(d).unwrap()).collect();
    let contexts: Vec<Vec<Vec<String>>> = corpus
        .dialogs
        .iter()
        .map(|d| d.context.iter().map(|u| u.tokens.clone()).collect())
        .collect();
    let report = evaluate(&outputs, &refs, &contexts, &provider, None).unwrap();
    assert_eq!(report.samples, corpus.len());
    assert!(report.learned_score.is_none());

    let kinds: Vec<_> = PerturbationKind::ALL.into_iter().filter(|k| !k.needs_pos_tags()).collect();
    let suite = perturbation_suite("HRED+WA", &responder, &corpus.dialogs, &provider, None, &kinds, 7).unwrap();
    assert_eq!(suite.perturbations.len(), kinds.len());
    assert!(suite.to_text().contains("baseline"));
}
