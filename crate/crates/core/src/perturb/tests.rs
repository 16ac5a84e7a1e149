use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::metrics::{EmbeddingTable, IdfTable};
use crate::models::ConstantResponder;

fn utt(s: &str) -> Utterance {
    Utterance::parse(s, false).unwrap()
}

fn dialog(ctx: &[&str], resp: &str) -> Dialog {
    Dialog::from_texts(ctx, resp).unwrap()
}

fn random_dialog(seed: u64, tagged: bool) -> Dialog {
    let mut rng = rng_for(seed, "perturb-dialog");
    let turns = rng.random_range(1..=6);
    let context = (0..turns)
        .map(|_| {
            let len = rng.random_range(1..=15);
            let tokens: Vec<String> = (0..len).map(|_| format!("t{}", rng.random_range(0..30))).collect();
            if tagged {
                let tags = (0..len)
                    .map(|_| [PosTag::Noun, PosTag::Verb, PosTag::Other][rng.random_range(0..3)])
                    .collect();
                Utterance::with_tags(tokens, tags).unwrap()
            } else {
                Utterance::new(tokens).unwrap()
            }
        })
        .collect();
    let mut d = Dialog::new(context, utt("the reply")).unwrap();
    d.persona_turns = rng.random_range(0..=turns.min(2));
    d
}

fn sorted<T: Ord + Clone>(v: &[T]) -> Vec<T> {
    let mut v = v.to_vec();
    v.sort();
    v
}

#[test]
fn there_are_ten_kinds_with_round_trip_names() {
    assert_eq!(PerturbationKind::ALL.len(), 10);
    for k in PerturbationKind::ALL {
        assert_eq!(k.name().parse::<PerturbationKind>().unwrap(), k);
        assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
    }
    assert_eq!("Word-Drop".parse::<PerturbationKind>().unwrap(), PerturbationKind::WordDrop);
    assert_eq!(PerturbationKind::parse_list("all").unwrap().len(), 10);
    assert_eq!(PerturbationKind::parse_list("truncate,reverse").unwrap(), [PerturbationKind::Truncate, PerturbationKind::Reverse]);
    let err = "jumble".parse::<PerturbationKind>().unwrap_err();
    assert!(err.to_string().contains("word_shuffle"));
}

#[test]
fn utterance_level_examples() {
    let one = dialog(&["only one"], "r");
    assert_eq!(perturb(&one, PerturbationKind::Shuffle, 3).unwrap(), one);
    assert_eq!(perturb(&one, PerturbationKind::DropFirst, 3).unwrap(), one);
    assert_eq!(perturb(&one, PerturbationKind::DropLast, 3).unwrap(), one);

    let d = dialog(&["u1 a", "u2 b", "u3 c"], "r");
    let rev = perturb(&d, PerturbationKind::Reverse, 0).unwrap();
    assert_eq!(rev.context, vec![utt("u3 c"), utt("u2 b"), utt("u1 a")]);
    assert_eq!(perturb(&d, PerturbationKind::DropFirst, 0).unwrap().context, vec![utt("u2 b"), utt("u3 c")]);
    assert_eq!(perturb(&d, PerturbationKind::DropLast, 0).unwrap().context, vec![utt("u1 a"), utt("u2 b")]);
    assert_eq!(perturb(&d, PerturbationKind::Truncate, 0).unwrap().context, vec![utt("u3 c")]);
    assert_eq!(truncate(&d, 2).context, vec![utt("u2 b"), utt("u3 c")]);
    assert_eq!(truncate(&d, 0).context.len(), 1);
}

#[test]
fn word_level_examples() {
    let d = dialog(&["a b c d e f g h i j"], "r");
    let dropped = perturb(&d, PerturbationKind::WordDrop, 11).unwrap();
    assert_eq!(dropped.context[0].tokens.len(), 7);
    // Survivors keep their relative order.
    let pos: Vec<usize> = dropped.context[0]
        .tokens
        .iter()
        .map(|t| d.context[0].tokens.iter().position(|x| x == t).unwrap())
        .collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(perturb(&d, PerturbationKind::WordReverse, 0).unwrap().context[0], utt("j i h g f e d c b a"));
    assert_eq!(word_drop_survivors(1), 1);
    assert_eq!(word_drop_survivors(3), 3);
    assert_eq!(word_drop_survivors(4), 3);
    assert_eq!(word_drop_survivors(10), 7);
}

#[test]
fn noun_and_verb_drop_scan_tags() {
    let tokens: Vec<String> = ["dogs", "chase", "red", "cats", "run"].iter().map(|s| s.to_string()).collect();
    let tags = vec![PosTag::Noun, PosTag::Verb, PosTag::Other, PosTag::Noun, PosTag::Verb];
    let d = Dialog::new(vec![Utterance::with_tags(tokens.clone(), tags.clone()).unwrap()], utt("ok")).unwrap();
    for (kind, tag) in [(PerturbationKind::NounDrop, PosTag::Noun), (PerturbationKind::VerbDrop, PosTag::Verb)] {
        let out = perturb(&d, kind, 0).unwrap();
        let expect: Vec<String> = tokens.iter().zip(&tags).filter(|(_, t)| **t != tag).map(|(w, _)| w.clone()).collect();
        assert_eq!(out.context[0].tokens, expect);
        assert!(out.context[0].pos_tags.as_ref().unwrap().iter().all(|t| *t != tag));
    }
    // All tokens would vanish: the first survives.
    let all_nouns = Dialog::new(
        vec![Utterance::with_tags(vec!["x".into(), "y".into()], vec![PosTag::Noun; 2]).unwrap()],
        utt("ok"),
    )
    .unwrap();
    assert_eq!(perturb(&all_nouns, PerturbationKind::NounDrop, 0).unwrap().context[0].tokens, ["x"]);
    let untagged = dialog(&["a b"], "r");
    assert!(matches!(perturb(&untagged, PerturbationKind::VerbDrop, 0), Err(Error::MissingAnnotation(_))));
}

#[test]
fn persona_count_follows_surviving_prefix() {
    let mut d = dialog(&["p1", "p2", "u1", "u2"], "r");
    d.persona_turns = 2;
    assert_eq!(perturb(&d, PerturbationKind::DropFirst, 0).unwrap().persona_turns, 1);
    assert_eq!(perturb(&d, PerturbationKind::DropLast, 0).unwrap().persona_turns, 2);
    assert_eq!(perturb(&d, PerturbationKind::Truncate, 0).unwrap().persona_turns, 0);
    assert_eq!(perturb(&d, PerturbationKind::Reverse, 0).unwrap().persona_turns, 0);
    assert_eq!(perturb(&d, PerturbationKind::WordReverse, 0).unwrap().persona_turns, 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn perturbation_properties(seed in any::<u64>(), pseed in any::<u64>()) {
        let d = random_dialog(seed, true);
        for kind in PerturbationKind::ALL {
            let out = perturb(&d, kind, pseed).unwrap();
            prop_assert_eq!(&out.response, &d.response);
            prop_assert_eq!(&out, &perturb(&d, kind, pseed).unwrap());
            prop_assert!(out.context.iter().all(|u| !u.tokens.is_empty()));
            prop_assert!(out.persona_turns <= out.context.len());
        }
        let shuffled = perturb(&d, PerturbationKind::Shuffle, pseed).unwrap();
        prop_assert_eq!(sorted(&shuffled.context.iter().map(|u| u.tokens.clone()).collect::<Vec<_>>()),
                        sorted(&d.context.iter().map(|u| u.tokens.clone()).collect::<Vec<_>>()));
        let rev = perturb(&d, PerturbationKind::Reverse, pseed).unwrap();
        prop_assert_eq!(&perturb(&rev, PerturbationKind::Reverse, pseed).unwrap().context, &d.context);
        let wrev = perturb(&d, PerturbationKind::WordReverse, pseed).unwrap();
        prop_assert_eq!(&perturb(&wrev, PerturbationKind::WordReverse, pseed).unwrap().context, &d.context);
        prop_assert_eq!(perturb(&d, PerturbationKind::Truncate, pseed).unwrap().context.len(), 1);
        let ws = perturb(&d, PerturbationKind::WordShuffle, pseed).unwrap();
        let wd = perturb(&d, PerturbationKind::WordDrop, pseed).unwrap();
        for ((orig, s), w) in d.context.iter().zip(&ws.context).zip(&wd.context) {
            prop_assert_eq!(sorted(&orig.tokens), sorted(&s.tokens));
            let l = orig.tokens.len();
            prop_assert_eq!(w.tokens.len(), 1.max(l - (0.3 * l as f64).floor() as usize));
        }
    }
}

fn provider() -> EmbeddingTable {
    let toks: Vec<String> = (0..30).map(|i| format!("t{i}")).chain(["the".into(), "reply".into()]).collect();
    EmbeddingTable::random(&toks, 12, 1).unwrap().with_idf(IdfTable::from_documents(&[vec!["the", "reply"]]))
}

#[test]
fn context_free_stub_has_zero_deltas() {
    let dialogs: Vec<_> = (0..20).map(|s| random_dialog(s, true)).collect();
    let stub = ConstantResponder(vec!["t1".into(), "t2".into()]);
    let p = provider();
    let report = perturbation_suite("stub", &stub, &dialogs, &p, None, &PerturbationKind::ALL, 30).unwrap();
    assert_eq!(report.perturbations.len(), 10);
    for r in &report.perturbations {
        assert!(r.delta.values().all(|&d| d == 0.0), "{r:?}");
    }
    assert!(report.average_delta.values().all(|&d| d == 0.0));
    assert!(!report.average_delta.contains_key("learned"));
}

/// Echoes the first token of the first context utterance.
struct EchoFirst;

impl Responder for EchoFirst {
    fn respond(&self, d: &Dialog) -> Result<Vec<String>> {
        Ok(vec![d.context[0].tokens[0].clone()])
    }
}

#[test]
fn average_delta_is_the_mean_and_identity_is_a_null_control() {
    let dialogs: Vec<_> = (0..15).map(|s| random_dialog(s + 100, true)).collect();
    let p = provider();
    let report = perturbation_suite("echo", &EchoFirst, &dialogs, &p, None, &PerturbationKind::ALL, 30).unwrap();
    for (metric, avg) in &report.average_delta {
        let mean: f64 = report.perturbations.iter().map(|r| r.delta[metric]).sum::<f64>() / 10.0;
        assert!((avg - mean).abs() < 1e-12);
        let base = metric_values(&report.baseline)[metric];
        for r in &report.perturbations {
            assert!((r.delta[metric] - (metric_values(&r.scores)[metric] - base)).abs() < 1e-15);
        }
    }
    let identity = |_: usize, d: &Dialog| Ok(d.clone());
    let control = custom_suite("echo", &EchoFirst, &dialogs, &p, None, &[("identity".to_string(), &identity as Transform<'_>)], 30).unwrap();
    assert!(control.average_delta.values().all(|d| d.abs() < 1e-9));
    let text = report.to_text();
    assert!(text.contains("Δ average") && text.contains("Δ word_drop"));
    let back: PerturbationReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn pos_drops_need_a_tagged_corpus() {
    let dialogs = vec![random_dialog(1, false)];
    let err = perturbation_suite("stub", &ConstantResponder(vec!["x".into()]), &dialogs, &provider(), None, &[PerturbationKind::NounDrop], 1);
    assert!(matches!(err, Err(Error::MissingAnnotation(_))));
    let ok = perturbation_suite("stub", &ConstantResponder(vec!["x".into()]), &dialogs, &provider(), None, &[PerturbationKind::Truncate], 1).unwrap();
    assert_eq!(ok.perturbations.len(), 1);
}

#[test]
fn sensitivity_matrix_markers() {
    let mk = |model: &str, avg: f64| PerturbationReport {
        model: model.into(),
        seed: 30,
        baseline: MetricReport { samples: 1, dist1: 0.0, dist2: 0.0, average: 0.0, extrema: 0.0, greedy: 0.0, greedy_idf_f1: 0.0, learned_score: Some(0.5) },
        perturbations: vec![],
        average_delta: [("learned".to_string(), avg)].into_iter().collect(),
    };
    let mut m = SensitivityMatrix::new("learned");
    m.insert("toy", &mk("HRED", -0.02)).unwrap();
    m.insert("toy", &mk("HRED+WA", -0.0664)).unwrap();
    m.insert("toy", &mk("WSeq+WA", -0.01)).unwrap();
    m.insert("other", &mk("HRED", -0.05)).unwrap();
    m.insert("other", &mk("HRED+WA", -0.01)).unwrap();
    assert_eq!(m.marker("HRED+WA", "toy"), "↑");
    assert_eq!(m.marker("HRED+WA", "other"), "↓");
    assert_eq!(m.marker("HRED", "toy"), "");
    assert_eq!(m.marker("WSeq+WA", "toy"), "");
    let text = m.render();
    assert!(text.contains("-6.64↑"), "{text}");
    assert!(text.lines().nth(3).unwrap().trim_end().ends_with('-'));
    assert!(m.insert("toy", &mk("x", 0.0)).is_ok());
    let mut missing = mk("HRED", 0.0);
    missing.average_delta.clear();
    assert!(m.insert("toy", &missing).is_err());
}
