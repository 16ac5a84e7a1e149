use super::Model;
use crate::corpus::{Dialog, Vocabulary};
use crate::error::Result;

/// Anything that maps a dialog context to a response.
pub trait Responder {
    fn respond(&self, dialog: &Dialog) -> Result<Vec<String>>;
}

/// Greedy decoding through a trained model and its vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct ModelResponder<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocabulary,
    pub max_len: usize,
}

impl<'a> ModelResponder<'a> {
    /// Uses the model's configured decoding limit.
    pub fn new(model: &'a Model, vocab: &'a Vocabulary) -> Self {
        ModelResponder {
            model,
            vocab,
            max_len: model.config().max_decode_len,
        }
    }
}

impl Responder for ModelResponder<'_> {
    fn respond(&self, dialog: &Dialog) -> Result<Vec<String>> {
        let trace = self.model.generate(&self.vocab.encode_dialog(dialog), self.max_len)?;
        Ok(self.vocab.decode(trace.response()))
    }
}

/// Ignores the context and always answers with the same tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstantResponder(pub Vec<String>);

impl Responder for ConstantResponder {
    fn respond(&self, _dialog: &Dialog) -> Result<Vec<String>> {
        Ok(self.0.clone())
    }
}
