//! Dialog corpora: JSON-lines ingestion, vocabulary, flattening and statistics.
//!
//! Each line of a corpus file is one dialog:
//!
//! ```json
//! {"context": ["hi there", "how are you"], "response": "fine thanks",
//!  "persona": ["i like tea"], "pos": [["O","O"], ["O","V","O"], ["O","N"]]}
//! ```
//!
//! Utterances are pre-tokenized on whitespace. `pos` is optional and holds one
//! tag list per context utterance followed by one for the response; it may
//! also cover the persona sentences when it starts with them.

mod stats;
mod vocab;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::rng_for;

pub use stats::{stats, CorpusStats};
pub use vocab::{EncodedDialog, Vocabulary, EOS, PAD, RESERVED, SEP, SOS, UNK};

/// Coarse part-of-speech label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PosTag {
    #[serde(rename = "N")]
    Noun,
    #[serde(rename = "V")]
    Verb,
    #[serde(rename = "O")]
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_tags: Option<Vec<PosTag>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
}

impl Utterance {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Validation("utterance has no tokens".into()));
        }
        Ok(Utterance {
            tokens,
            pos_tags: None,
            speaker: None,
        })
    }

    pub fn with_tags(tokens: Vec<String>, tags: Vec<PosTag>) -> Result<Self> {
        if tags.len() != tokens.len() {
            return Err(Error::Validation(format!(
                "{} POS tags for {} tokens",
                tags.len(),
                tokens.len()
            )));
        }
        let mut u = Utterance::new(tokens)?;
        u.pos_tags = Some(tags);
        Ok(u)
    }

    /// Splits on whitespace.
    pub fn parse(text: &str, lowercase: bool) -> Result<Self> {
        let tokens = text
            .split_whitespace()
            .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
            .collect();
        Utterance::new(tokens)
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    fn truncate(&mut self, max_len: usize) {
        self.tokens.truncate(max_len);
        if let Some(tags) = &mut self.pos_tags {
            tags.truncate(max_len);
        }
    }
}

/// A context (persona sentences first, when present) and the response to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub context: Vec<Utterance>,
    pub response: Utterance,
    /// How many leading context utterances came from a persona.
    #[serde(default)]
    pub persona_turns: usize,
}

impl Dialog {
    pub fn new(context: Vec<Utterance>, response: Utterance) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::Validation("dialog context is empty".into()));
        }
        Ok(Dialog {
            context,
            response,
            persona_turns: 0,
        })
    }

    /// Builds a dialog from whitespace-tokenized strings.
    pub fn from_texts(context: &[&str], response: &str) -> Result<Self> {
        let context = context
            .iter()
            .map(|t| Utterance::parse(t, false))
            .collect::<Result<Vec<_>>>()?;
        Dialog::new(context, Utterance::parse(response, false)?)
    }

    pub fn is_tagged(&self) -> bool {
        self.context.iter().all(|u| u.pos_tags.is_some())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub dialogs: Vec<Dialog>,
}

/// Normalization applied while loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub lowercase: bool,
    /// Keep only the most recent turns.
    pub max_turns: Option<usize>,
    /// Keep only the first tokens of every utterance.
    pub max_len: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            lowercase: true,
            max_turns: None,
            max_len: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    context: Vec<String>,
    response: String,
    #[serde(default)]
    persona: Option<Vec<String>>,
    #[serde(default)]
    pos: Option<Vec<Vec<PosTag>>>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    context: Vec<String>,
    response: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pos: Option<Vec<&'a [PosTag]>>,
}

impl Corpus {
    pub fn new(dialogs: Vec<Dialog>) -> Self {
        Corpus { dialogs }
    }

    pub fn len(&self) -> usize {
        self.dialogs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogs.is_empty()
    }

    pub fn load(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Corpus::parse_jsonl(&text, opts)
    }

    /// Parses JSON-lines text. Blank lines are skipped; line numbers are 1-based.
    pub fn parse_jsonl(text: &str, opts: LoadOptions) -> Result<Self> {
        let mut dialogs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let line_no = i + 1;
            let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let d = build_dialog(rec, opts).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("line {line_no}: {m}")),
                other => other,
            })?;
            dialogs.push(d);
        }
        Ok(Corpus { dialogs })
    }

    /// Serializes back to the JSON-lines format. Persona sentences are written
    /// as ordinary context utterances.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.dialogs {
            let pos = if d.is_tagged() && d.response.pos_tags.is_some() {
                Some(
                    d.context
                        .iter()
                        .chain(std::iter::once(&d.response))
                        .map(|u| u.pos_tags.as_deref().unwrap())
                        .collect(),
                )
            } else {
                None
            };
            let rec = RecordOut {
                context: d.context.iter().map(Utterance::text).collect(),
                response: d.response.text(),
                pos,
            };
            out.push_str(&serde_json::to_string(&rec).expect("corpus records serialize"));
            out.push('\n');
        }
        out
    }

    /// Seeded shuffle into (train, validation) with `valid_fraction` of the
    /// dialogs (at least one) held out.
    pub fn split(&self, valid_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
        if self.dialogs.len() < 2 {
            return Err(Error::Validation("need at least two dialogs to split".into()));
        }
        let mut order: Vec<usize> = (0..self.dialogs.len()).collect();
        order.shuffle(&mut rng_for(seed, "split"));
        let n_valid = ((self.dialogs.len() as f64 * valid_fraction).round() as usize)
            .clamp(1, self.dialogs.len() - 1);
        let valid = order[..n_valid].iter().map(|&i| self.dialogs[i].clone()).collect();
        let train = order[n_valid..].iter().map(|&i| self.dialogs[i].clone()).collect();
        Ok((Corpus::new(train), Corpus::new(valid)))
    }
}

fn build_dialog(rec: Record, opts: LoadOptions) -> Result<Dialog> {
    let persona = rec.persona.unwrap_or_default();
    let mut context = Vec::with_capacity(persona.len() + rec.context.len());
    for text in persona.iter().chain(&rec.context) {
        context.push(Utterance::parse(text, opts.lowercase)?);
    }
    if context.is_empty() {
        return Err(Error::Validation("dialog context is empty".into()));
    }
    let mut response = Utterance::parse(&rec.response, opts.lowercase)?;

    if let Some(pos) = rec.pos {
        let covered = context.len() + 1;
        let skip = if pos.len() == covered {
            0
        } else if pos.len() == rec.context.len() + 1 {
            persona.len()
        } else {
            return Err(Error::Validation(format!(
                "pos has {} tag lists, expected {}",
                pos.len(),
                rec.context.len() + 1
            )));
        };
        let (ctx_tags, resp_tags) = pos.split_at(pos.len() - 1);
        for (u, tags) in context[skip..].iter_mut().zip(ctx_tags) {
            *u = Utterance::with_tags(std::mem::take(&mut u.tokens), tags.clone())?;
        }
        response = Utterance::with_tags(response.tokens, resp_tags[0].clone())?;
    }

    if let Some(max_turns) = opts.max_turns {
        let max_turns = max_turns.max(1);
        if context.len() > max_turns {
            let cut = context.len() - max_turns;
            context.drain(..cut);
        }
    }
    let dropped = persona.len() + rec.context.len() - context.len();
    let persona_turns = persona.len().saturating_sub(dropped);
    if let Some(max_len) = opts.max_len {
        let max_len = max_len.max(1);
        context.iter_mut().for_each(|u| u.truncate(max_len));
        response.truncate(max_len);
    }
    Ok(Dialog {
        context,
        response,
        persona_turns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opts() -> LoadOptions {
        LoadOptions::default()
    }

    #[test]
    fn loads_two_line_file() {
        let text = r#"{"context": ["hi there", "how are you"], "response": "fine"}
{"context": ["Hello"], "response": "hey you"}
"#;
        let c = Corpus::parse_jsonl(text, opts()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.dialogs[1].context[0].tokens, vec!["hello"]);
        let raw = Corpus::parse_jsonl(text, LoadOptions { lowercase: false, ..opts() }).unwrap();
        assert_eq!(raw.dialogs[1].context[0].tokens, vec!["Hello"]);
    }

    #[test]
    fn missing_response_reports_line() {
        let text = "{\"context\": [\"a\"], \"response\": \"b\"}\n{\"context\": [\"a\"]}\n";
        match Corpus::parse_jsonl(text, opts()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("response"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_utterance_is_a_validation_error() {
        let text = "{\"context\": [\"  \"], \"response\": \"b\"}\n";
        assert!(matches!(Corpus::parse_jsonl(text, opts()), Err(Error::Validation(_))));
    }

    #[test]
    fn persona_is_prepended() {
        let text = r#"{"persona": ["i love cats", "i am tall"], "context": ["hi", "hello there", "how are you"], "response": "good"}"#;
        let c = Corpus::parse_jsonl(text, opts()).unwrap();
        let d = &c.dialogs[0];
        assert_eq!(d.context.len(), 2 + 3);
        assert_eq!(d.persona_turns, 2);
        assert_eq!(d.context[0].text(), "i love cats");
        assert_eq!(d.context[2].text(), "hi");
    }

    #[test]
    fn pos_tags_attach_with_and_without_persona() {
        let text = r#"{"persona": ["i am"], "context": ["dogs run"], "response": "cats sleep", "pos": [["N","V"],["N","V"]]}"#;
        let d = &Corpus::parse_jsonl(text, opts()).unwrap().dialogs[0];
        assert!(d.context[0].pos_tags.is_none());
        assert_eq!(d.context[1].pos_tags.as_deref(), Some(&[PosTag::Noun, PosTag::Verb][..]));
        let bad = r#"{"context": ["dogs run"], "response": "ok", "pos": [["N"],["O"]]}"#;
        assert!(Corpus::parse_jsonl(bad, opts()).is_err());
    }

    #[test]
    fn truncation_keeps_recent_turns_and_leading_tokens() {
        let text = r#"{"context": ["a b c d", "e f", "g h i"], "response": "x y z w"}"#;
        let o = LoadOptions { max_turns: Some(2), max_len: Some(2), ..opts() };
        let d = &Corpus::parse_jsonl(text, o).unwrap().dialogs[0];
        assert_eq!(d.context.len(), 2);
        assert_eq!(d.context[0].text(), "e f");
        assert_eq!(d.context[1].text(), "g h");
        assert_eq!(d.response.text(), "x y");
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographically() {
        let c = Corpus::new(vec![Dialog::from_texts(&["a a b"], "d c").unwrap()]);
        let v = Vocabulary::build(&c, 10, 1).unwrap();
        assert!(v.id("a") < v.id("b"));
        // b, c, d all have frequency 1.
        assert!(v.id("b") < v.id("c") && v.id("c") < v.id("d"));
        assert_eq!(v.id("a"), 5);
        let v2 = Vocabulary::build(&c, 10, 2).unwrap();
        assert_eq!(v2.id("b"), UNK);
        assert_eq!(v2.len(), 6);
        let v3 = Vocabulary::build(&c, 7, 1).unwrap();
        assert_eq!(v3.len(), 7);
        assert!(v3.contains("<sep>"));
        assert!(Vocabulary::build(&c, 5, 1).is_err());
    }

    #[test]
    fn flatten_places_separators() {
        let c = Corpus::new(vec![
            Dialog::from_texts(&["a b c"], "z").unwrap(),
            Dialog::from_texts(&["a b c", "d e"], "z").unwrap(),
            Dialog::from_texts(&["a", "b c", "d e f"], "z").unwrap(),
        ]);
        let v = Vocabulary::build(&c, 50, 1).unwrap();
        assert!(!v.flatten(&c.dialogs[0]).contains(&SEP));
        assert_eq!(v.flatten(&c.dialogs[1]).len(), 6);
        let f = v.flatten(&c.dialogs[2]);
        let seps: Vec<usize> = f.iter().enumerate().filter(|(_, &t)| t == SEP).map(|(i, _)| i).collect();
        // a | SEP | b c | SEP | d e f
        assert_eq!(seps, vec![1, 4]);
        assert_eq!(f.len(), 8);
        assert_eq!(v.encode_dialog(&c.dialogs[2]).flattened(), f);
    }

    #[test]
    fn stats_examples() {
        let one = Corpus::new(vec![Dialog::from_texts(&["a b c"], "x y z").unwrap()]);
        let s = stats(&one).unwrap();
        assert_eq!((s.turns_max, s.turns_avg, s.turns_min), (1, 1.0, 1));
        assert_eq!((s.length_max, s.length_avg, s.length_min), (3, 3.0, 3));

        let three = Corpus::new(vec![
            Dialog::from_texts(&["a b", "c"], "d e f").unwrap(),
            Dialog::from_texts(&["a"], "b").unwrap(),
            Dialog::from_texts(&["a b c d", "e", "f g"], "h i").unwrap(),
        ]);
        let s = stats(&three).unwrap();
        // Turns 2, 1, 3. Lengths 2,1,3 | 1,1 | 4,1,2,2 (9 utterances, 17 tokens).
        assert_eq!((s.turns_max, s.turns_min), (3, 1));
        assert!((s.turns_avg - 2.0).abs() < 1e-12);
        assert_eq!((s.length_max, s.length_min), (4, 1));
        assert!((s.length_avg - 17.0 / 9.0).abs() < 1e-12);
        assert_eq!(s.vocab, 9);
        assert!(stats(&Corpus::default()).is_err());
    }

    #[test]
    fn jsonl_round_trip_preserves_dialogs() {
        let text = r#"{"context": ["dogs run", "fast"], "response": "cats sleep", "pos": [["N","V"],["O"],["N","V"]]}"#;
        let c = Corpus::parse_jsonl(text, opts()).unwrap();
        let again = Corpus::parse_jsonl(&c.to_jsonl(), opts()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn split_is_seeded() {
        let c = Corpus::new((0..20).map(|i| Dialog::from_texts(&[&format!("t{i}")], "r").unwrap()).collect());
        let (t1, v1) = c.split(0.1, 30).unwrap();
        let (t2, v2) = c.split(0.1, 30).unwrap();
        assert_eq!((t1.len(), v1.len()), (18, 2));
        assert_eq!(v1, v2);
        assert_eq!(t1, t2);
    }

    fn arb_corpus() -> impl Strategy<Value = Corpus> {
        let utt = prop::collection::vec("[a-e]{1,2}", 1..5).prop_map(|t| t.join(" "));
        let dialog = (prop::collection::vec(utt.clone(), 1..5), utt)
            .prop_map(|(ctx, r)| {
                let refs: Vec<&str> = ctx.iter().map(String::as_str).collect();
                Dialog::from_texts(&refs, &r).unwrap()
            });
        prop::collection::vec(dialog, 1..8).prop_map(Corpus::new)
    }

    proptest! {
        #[test]
        fn separator_count_is_turns_minus_one(c in arb_corpus()) {
            let v = Vocabulary::build(&c, 100, 1).unwrap();
            for d in &c.dialogs {
                let n = v.flatten(d).iter().filter(|&&t| t == SEP).count();
                prop_assert_eq!(n, d.context.len() - 1);
            }
        }

        #[test]
        fn vocab_round_trip(c in arb_corpus()) {
            let v = Vocabulary::build(&c, 1000, 1).unwrap();
            for d in &c.dialogs {
                for u in &d.context {
                    prop_assert_eq!(&v.decode(&v.encode(&u.tokens)), &u.tokens);
                }
            }
        }

        #[test]
        fn stats_ignore_dialog_order(c in arb_corpus(), rot in 0usize..8) {
            let mut r = c.clone();
            let k = rot % r.dialogs.len();
            r.dialogs.rotate_left(k);
            let (a, b) = (stats(&c).unwrap(), stats(&r).unwrap());
            prop_assert_eq!(a.turns_max, b.turns_max);
            prop_assert!((a.turns_avg - b.turns_avg).abs() < 1e-12);
            prop_assert!((a.length_avg - b.length_avg).abs() < 1e-12);
            prop_assert_eq!(a.vocab, b.vocab);
            prop_assert!(a.turns_min as f64 <= a.turns_avg && a.turns_avg <= a.turns_max as f64);
            prop_assert!(a.length_min as f64 <= a.length_avg && a.length_avg <= a.length_max as f64);
        }
    }
}
