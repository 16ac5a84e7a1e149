//! The dialog architectures and their shared recurrent decoder.
//!
//! Every model encodes the context once, then decodes with a stacked GRU whose
//! input at step `i` is `[embed(t_i); c_i]`. The context vector `c_i` is
//! produced by the architecture-specific attention using the top decoder
//! state `s_i` as the query. Word-attention variants recompute per-utterance
//! vectors `c_ij` at every step and re-run their context aggregator on them.

mod checkpoint;
mod config;
mod responder;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{Architecture, BaseKind, ModelConfig};
pub use responder::{ConstantResponder, ModelResponder, Responder};

use crate::attention::{
    additive_attend, attend_prepared, dshred_context, hierarchical_context, prepare_keys, wseq_weights, AdditiveParams,
    DshredParams, PreparedKeys, SequenceEncoder,
};
use crate::corpus::{EncodedDialog, EOS, PAD, SOS};
use crate::encoders::{gru_step, ContextEncoder, GruParams, SelfAttentionEncoder, UtteranceEncoder};
use crate::error::{Error, Result};
use crate::numerics::{grad_check_params, GradCheckReport, Graph, ParamBuilder, ParamId, ParamStore, Var};

/// Which attention produced a recorded weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionLevel {
    /// Over the tokens of the flattened context.
    Token,
    /// Over the tokens of one context utterance.
    Word,
    /// Over the context utterances.
    Utterance,
    /// DSHRED's attention queried by the last utterance.
    Static,
    /// WSeq's cosine relevance of each utterance to the query.
    Relevance,
}

/// One attention weight vector recorded during decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub level: AttentionLevel,
    /// Utterance index for word-level records.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub utterance: Option<usize>,
    pub weights: Vec<f64>,
}

/// Attention weights on the tape for one decoding step.
#[derive(Debug, Clone, Default)]
pub struct StepAttention {
    pub records: Vec<(AttentionLevel, Option<usize>, Var)>,
}

impl StepAttention {
    fn push(&mut self, level: AttentionLevel, utterance: Option<usize>, weights: Var) {
        self.records.push((level, utterance, weights));
    }

    pub fn values(&self, g: &Graph) -> Vec<AttentionRecord> {
        self.records
            .iter()
            .map(|&(level, utterance, w)| AttentionRecord {
                level,
                utterance,
                weights: g.tape.value(w).to_vec(),
            })
            .collect()
    }
}

/// Teacher-forced outputs of a model.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[T × |V|]`.
    pub logits: Var,
    /// KL divergence of the latent posterior from the prior (VHRED only).
    pub kl: Option<Var>,
    pub steps: Vec<StepAttention>,
}

/// Greedy decoding result with its full attention trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    /// Generated ids, including a final `EOS` if one was produced.
    pub tokens: Vec<usize>,
    pub attention: Vec<Vec<AttentionRecord>>,
    pub log_probs: Vec<f64>,
}

impl DecodeTrace {
    /// Generated tokens without the terminating `EOS`.
    pub fn response(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Cross-entropy and KL parts of a loss value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub cross_entropy: f64,
    pub kl: f64,
    pub total: f64,
}

/// Mean token cross-entropy over non-`pad` targets plus `kl_weight · kl`.
pub fn loss(g: &mut Graph, logits: Var, targets: &[usize], pad: usize, kl: Option<Var>, kl_weight: f64) -> Result<Var> {
    let ce = g.tape.cross_entropy(logits, targets, pad)?;
    match kl {
        Some(kl) if kl_weight != 0.0 => {
            let weighted = g.tape.scale(kl, kl_weight);
            g.tape.add(ce, weighted)
        }
        _ => Ok(ce),
    }
}

#[derive(Debug, Clone)]
enum Aggregator {
    Flat {
        self_attention: Option<SelfAttentionEncoder>,
        attention: AdditiveParams,
    },
    Recurrent {
        encoder: ContextEncoder,
        attention: AdditiveParams,
    },
    Dshred {
        encoder: ContextEncoder,
        params: DshredParams,
    },
    SelfAttention {
        encoder: SelfAttentionEncoder,
        attention: AdditiveParams,
    },
}

#[derive(Debug, Clone)]
struct LatentParams {
    w: ParamId,
    b: ParamId,
    dim: usize,
}

#[derive(Debug, Clone)]
struct Decoder {
    layers: Vec<GruParams>,
    init_w: Vec<ParamId>,
    init_b: Vec<ParamId>,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: ParamId,
    word_encoder: UtteranceEncoder,
    aggregator: Aggregator,
    latent: Option<LatentParams>,
    decoder: Decoder,
    word_attention: Option<AdditiveParams>,
}

/// Per-dialog encoder results reused across decoding steps.
struct Memory {
    kind: MemoryKind,
    /// Latent sample appended to every context vector (VHRED).
    z: Option<Var>,
    /// Decoder initialization source.
    init: Var,
    kl: Option<Var>,
    relevance: Option<Var>,
}

enum MemoryKind {
    Keys {
        keys: PreparedKeys,
        level: AttentionLevel,
    },
    Dshred {
        dynamic: PreparedKeys,
        static_: PreparedKeys,
        last: Var,
    },
    Words {
        words: Vec<PreparedKeys>,
        /// WSeq relevance weights `[m]` applied to the per-utterance vectors.
        scale: Option<Var>,
        last: Var,
    },
}

/// A dialog model: configuration, parameters and their layout.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Builds a freshly initialized model. Parameters are created base-first so a
    /// word-attention variant shares every base parameter with its base model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut ParamBuilder::new(&mut params, seed))?;
        Ok(Model { config, params, layout })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, mut params: ParamStore) -> Result<Self> {
        let fresh = Model::new(config, 0)?;
        params.reindex();
        if params.len() != fresh.params.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint holds {} parameters, the configuration needs {}",
                params.len(),
                fresh.params.len()
            )));
        }
        for (i, ((name, t), (want, wt))) in params.iter().zip(fresh.params.iter()).enumerate() {
            if name != want || t.shape() != wt.shape() {
                return Err(Error::Compatibility(format!(
                    "parameter {i} is {name} {:?}, expected {want} {:?}",
                    t.shape(),
                    wt.shape()
                )));
            }
        }
        Ok(Model {
            config: fresh.config,
            params,
            layout: fresh.layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Copies every parameter of `other` whose name and shape match one of ours.
    /// Returns the number of tensors copied.
    pub fn transfer_from(&mut self, other: &Model) -> usize {
        let mut copied = 0;
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            if let Some(src) = other.params.id(&name) {
                let t = other.params.get(src);
                if t.shape() == self.params.get(id).shape() {
                    *self.params.get_mut(id) = t.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Teacher-forced logits for decoder `inputs` (normally `SOS` + response).
    ///
    /// The response is also used by VHRED's posterior: sampled in training,
    /// its mean in evaluation.
    pub fn forward(&self, g: &mut Graph, dialog: &EncodedDialog, inputs: &[usize]) -> Result<ForwardOutput> {
        if inputs.is_empty() {
            return Err(Error::Validation("decoder inputs are empty".into()));
        }
        let memory = self.encode(g, dialog, Some(&dialog.response))?;
        let mut states = self.init_states(g, &memory)?;
        let table = g.param(self.layout.embedding);
        let emb = g.tape.embedding(table, inputs)?;
        let emb = g.dropout(emb, self.config.dropout)?;
        let mut tops = Vec::with_capacity(inputs.len());
        let mut steps = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let x = g.tape.row(emb, t)?;
            let attn = self.decoder_step(g, &memory, x, &mut states)?;
            tops.push(*states.last().unwrap());
            steps.push(attn);
        }
        let top = g.tape.stack_rows(&tops)?;
        let logits = self.project(g, top)?;
        Ok(ForwardOutput {
            logits,
            kl: memory.kl,
            steps,
        })
    }

    /// Loss of the teacher-forced response of `dialog`.
    pub fn teacher_loss(&self, g: &mut Graph, dialog: &EncodedDialog, kl_weight: f64) -> Result<(Var, LossParts)> {
        let (inputs, targets) = dialog.teacher_pair();
        let out = self.forward(g, dialog, &inputs)?;
        let total = loss(g, out.logits, &targets, PAD, out.kl, kl_weight)?;
        let kl = out.kl.map(|k| g.tape.scalar(k)).unwrap_or(0.0);
        let total_value = g.tape.scalar(total);
        let cross_entropy = if kl_weight != 0.0 { total_value - kl_weight * kl } else { total_value };
        Ok((
            total,
            LossParts {
                cross_entropy,
                kl,
                total: total_value,
            },
        ))
    }

    /// Central finite-difference check of every parameter gradient of the
    /// teacher-forced loss on `dialog`, in evaluation mode.
    ///
    /// The checked scalar is the loss offset by its value at the current
    /// parameters (see [`crate::numerics::Tape::cross_entropy_offset`]); it has
    /// the same gradient as the loss but is not quantized by the f64 spacing
    /// near the loss value.
    pub fn check_gradients(&self, dialog: &EncodedDialog, kl_weight: f64, h: f64) -> Result<GradCheckReport> {
        let (inputs, targets) = dialog.teacher_pair();
        let reference = {
            let mut g = Graph::new(&self.params, false, 0);
            let out = self.forward(&mut g, dialog, &inputs)?;
            g.tape.value(out.logits).to_vec()
        };
        grad_check_params(&self.params, h, 0, |g| {
            let out = self.forward(g, dialog, &inputs)?;
            let ce = g.tape.cross_entropy_offset(out.logits, &targets, PAD, &reference)?;
            match out.kl {
                Some(kl) if kl_weight != 0.0 => {
                    let weighted = g.tape.scale(kl, kl_weight);
                    g.tape.add(ce, weighted)
                }
                _ => Ok(ce),
            }
        })
    }

    /// Teacher-forced next-token predictions in evaluation mode: (correct, total).
    pub fn next_token_accuracy(&self, dialog: &EncodedDialog) -> Result<(usize, usize)> {
        let (inputs, targets) = dialog.teacher_pair();
        let mut g = Graph::new(&self.params, false, 0);
        let out = self.forward(&mut g, dialog, &inputs)?;
        let v = self.config.vocab_size;
        let logits = g.tape.value(out.logits);
        let correct = targets
            .iter()
            .enumerate()
            .filter(|&(t, &target)| argmax(&logits[t * v..(t + 1) * v]) == target)
            .count();
        Ok((correct, targets.len()))
    }

    /// Greedy decoding from `SOS` until `EOS` or `max_len` tokens.
    pub fn generate(&self, dialog: &EncodedDialog, max_len: usize) -> Result<DecodeTrace> {
        if max_len < 1 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        let mut g = Graph::new(&self.params, false, 0);
        let memory = self.encode(&mut g, dialog, None)?;
        let mut states = self.init_states(&mut g, &memory)?;
        let table = g.param(self.layout.embedding);
        let mut trace = DecodeTrace {
            tokens: Vec::new(),
            attention: Vec::new(),
            log_probs: Vec::new(),
        };
        let mut prev = SOS;
        for _ in 0..max_len {
            let x = g.tape.embedding(table, &[prev])?;
            let x = g.tape.reshape(x, &[self.config.embed])?;
            let attn = self.decoder_step(&mut g, &memory, x, &mut states)?;
            let logits = self.project(&mut g, *states.last().unwrap())?;
            let values = g.tape.value(logits);
            let next = argmax(values);
            trace.log_probs.push(log_softmax_at(values, next));
            trace.attention.push(attn.values(&g));
            trace.tokens.push(next);
            if next == EOS {
                break;
            }
            prev = next;
        }
        Ok(trace)
    }

    fn project(&self, g: &mut Graph, top: Var) -> Result<Var> {
        let w = g.param(self.layout.decoder.out_w);
        let b = g.param(self.layout.decoder.out_b);
        let logits = g.tape.matmul(top, w)?;
        g.tape.add(logits, b)
    }

    fn init_states(&self, g: &mut Graph, memory: &Memory) -> Result<Vec<Var>> {
        let dec = &self.layout.decoder;
        let mut states = Vec::with_capacity(dec.layers.len());
        for (w, b) in dec.init_w.iter().zip(&dec.init_b) {
            let (w, b) = (g.param(*w), g.param(*b));
            let h = g.tape.matmul(memory.init, w)?;
            let h = g.tape.add(h, b)?;
            states.push(g.tape.tanh(h));
        }
        Ok(states)
    }

    /// Advances every decoder layer by one step on embedded input `x`.
    fn decoder_step(&self, g: &mut Graph, memory: &Memory, x: Var, states: &mut [Var]) -> Result<StepAttention> {
        let query = *states.last().unwrap();
        let (context, attn) = self.context_vector(g, memory, query)?;
        let mut input = g.tape.concat(&[x, context])?;
        let last = states.len() - 1;
        for (l, layer) in self.layout.decoder.layers.iter().enumerate() {
            states[l] = gru_step(g, input, states[l], layer)?;
            if l < last {
                input = g.dropout(states[l], self.config.dropout)?;
            }
        }
        Ok(attn)
    }

    /// The per-step context vector `c_i` for query `s` and its attention records.
    fn context_vector(&self, g: &mut Graph, memory: &Memory, s: Var) -> Result<(Var, StepAttention)> {
        let mut attn = StepAttention::default();
        if let Some(r) = memory.relevance {
            attn.push(AttentionLevel::Relevance, None, r);
        }
        let context = match (&memory.kind, &self.layout.aggregator) {
            (MemoryKind::Keys { keys, level }, agg) => {
                let params = match agg {
                    Aggregator::Flat { attention, .. }
                    | Aggregator::Recurrent { attention, .. }
                    | Aggregator::SelfAttention { attention, .. } => attention,
                    Aggregator::Dshred { .. } => unreachable!("DSHRED memory uses two key sets"),
                };
                let out = attend_prepared(g, s, keys, params)?;
                attn.push(*level, None, out.weights);
                out.context
            }
            (MemoryKind::Dshred { dynamic, static_, last }, Aggregator::Dshred { params, .. }) => {
                let out = dshred_context(g, s, dynamic, static_, *last, params)?;
                attn.push(AttentionLevel::Utterance, None, out.dynamic.weights);
                attn.push(AttentionLevel::Static, None, out.static_.weights);
                out.context
            }
            (MemoryKind::Words { words, scale, last }, agg) => {
                let wa = self.layout.word_attention.as_ref().expect("word attention parameters");
                if self.config.architecture == Architecture::Hran {
                    let Aggregator::Recurrent { encoder, attention } = agg else {
                        unreachable!("HRAN aggregates recurrently")
                    };
                    let out = hierarchical_context(g, s, words, encoder, wa, attention)?;
                    for (j, w) in out.word.iter().enumerate() {
                        attn.push(AttentionLevel::Word, Some(j), w.weights);
                    }
                    attn.push(AttentionLevel::Utterance, None, out.utterance.weights);
                    out.utterance.context
                } else {
                    let mut vectors = Vec::with_capacity(words.len());
                    for (j, keys) in words.iter().enumerate() {
                        let out = attend_prepared(g, s, keys, wa)?;
                        attn.push(AttentionLevel::Word, Some(j), out.weights);
                        vectors.push(out.context);
                    }
                    if let Some(w) = scale {
                        vectors = scale_rows(g, &vectors, *w)?;
                    }
                    self.aggregate(g, s, &vectors, *last, &mut attn)?
                }
            }
            _ => unreachable!("memory kind matches the aggregator"),
        };
        let context = match memory.z {
            Some(z) => g.tape.concat(&[context, z])?,
            None => context,
        };
        Ok((context, attn))
    }

    /// Re-runs the base aggregator over per-step utterance vectors.
    fn aggregate(&self, g: &mut Graph, s: Var, vectors: &[Var], last: Var, attn: &mut StepAttention) -> Result<Var> {
        match &self.layout.aggregator {
            Aggregator::Recurrent { encoder, attention } => {
                let states = encoder.encode_sequence(g, vectors)?;
                let out = additive_attend(g, s, states, states, attention)?;
                attn.push(AttentionLevel::Utterance, None, out.weights);
                Ok(out.context)
            }
            Aggregator::Dshred { encoder, params } => {
                let states = encoder.encode_sequence(g, vectors)?;
                let dynamic = prepare_keys(g, states, states, &params.dynamic)?;
                let static_ = prepare_keys(g, states, states, &params.static_)?;
                let out = dshred_context(g, s, &dynamic, &static_, last, params)?;
                attn.push(AttentionLevel::Utterance, None, out.dynamic.weights);
                attn.push(AttentionLevel::Static, None, out.static_.weights);
                Ok(out.context)
            }
            Aggregator::SelfAttention { encoder, attention } => {
                let states = encoder.encode_sequence(g, vectors)?;
                let out = additive_attend(g, s, states, states, attention)?;
                attn.push(AttentionLevel::Utterance, None, out.weights);
                Ok(out.context)
            }
            Aggregator::Flat { .. } => unreachable!("flat models have no word attention"),
        }
    }

    /// Encodes the context. `response` feeds VHRED's posterior when present.
    fn encode(&self, g: &mut Graph, dialog: &EncodedDialog, response: Option<&[usize]>) -> Result<Memory> {
        if dialog.context.is_empty() || dialog.context.iter().any(Vec::is_empty) {
            return Err(Error::Validation("dialog context must hold non-empty utterances".into()));
        }
        let table = self.layout.embedding;
        let enc = &self.layout.word_encoder;
        if let Aggregator::Flat { self_attention, attention } = &self.layout.aggregator {
            let out = enc.encode_tokens(g, table, &dialog.flattened())?;
            let states = match self_attention {
                Some(sa) => sa.encode(g, out.states)?,
                None => out.states,
            };
            return Ok(Memory {
                kind: MemoryKind::Keys {
                    keys: prepare_keys(g, states, states, attention)?,
                    level: AttentionLevel::Token,
                },
                z: None,
                init: out.final_state,
                kl: None,
                relevance: None,
            });
        }

        let utterances = dialog
            .context
            .iter()
            .map(|u| enc.encode_tokens(g, table, u))
            .collect::<Result<Vec<_>>>()?;
        let mut reprs: Vec<Var> = utterances.iter().map(|u| u.final_state).collect();
        let last = *reprs.last().unwrap();

        let mut relevance = None;
        if self.config.architecture.base() == BaseKind::Wseq {
            let others = if reprs.len() > 1 {
                Some(g.tape.stack_rows(&reprs[..reprs.len() - 1])?)
            } else {
                None
            };
            let w = wseq_weights(&mut g.tape, last, others)?;
            reprs = scale_rows(g, &reprs, w)?;
            relevance = Some(w);
        }

        let (base_kind, init) = match &self.layout.aggregator {
            Aggregator::Recurrent { encoder, attention } => {
                let out = encoder.encode(g, &reprs)?;
                let keys = prepare_keys(g, out.states, out.states, attention)?;
                (
                    MemoryKind::Keys {
                        keys,
                        level: AttentionLevel::Utterance,
                    },
                    out.final_state,
                )
            }
            Aggregator::Dshred { encoder, params } => {
                let out = encoder.encode(g, &reprs)?;
                let dynamic = prepare_keys(g, out.states, out.states, &params.dynamic)?;
                let static_ = prepare_keys(g, out.states, out.states, &params.static_)?;
                (MemoryKind::Dshred { dynamic, static_, last }, out.final_state)
            }
            Aggregator::SelfAttention { encoder, attention } => {
                let states = encoder.encode_sequence(g, &reprs)?;
                let keys = prepare_keys(g, states, states, attention)?;
                let final_state = g.tape.row(states, reprs.len() - 1)?;
                (
                    MemoryKind::Keys {
                        keys,
                        level: AttentionLevel::Utterance,
                    },
                    final_state,
                )
            }
            Aggregator::Flat { .. } => unreachable!(),
        };

        let kind = match &self.layout.word_attention {
            Some(wa) => {
                let words = utterances
                    .iter()
                    .map(|u| prepare_keys(g, u.states, u.states, wa))
                    .collect::<Result<Vec<_>>>()?;
                MemoryKind::Words {
                    words,
                    scale: relevance,
                    last,
                }
            }
            None => base_kind,
        };

        let (init, z, kl) = match &self.layout.latent {
            Some(latent) => {
                let (z, kl) = self.sample_latent(g, latent, init, response)?;
                (g.tape.concat(&[init, z])?, Some(z), kl)
            }
            None => (init, None, None),
        };
        Ok(Memory {
            kind,
            z,
            init,
            kl,
            relevance,
        })
    }

    /// Posterior `q(z | context, response)` against the prior `N(0, I)`.
    ///
    /// Training draws `z = μ + σ ⊙ ε`; evaluation with a response uses `μ`;
    /// generation without a response uses the prior mean.
    fn sample_latent(
        &self,
        g: &mut Graph,
        latent: &LatentParams,
        context_final: Var,
        response: Option<&[usize]>,
    ) -> Result<(Var, Option<Var>)> {
        let d = latent.dim;
        let Some(response) = response.filter(|r| !r.is_empty()) else {
            return Ok((g.tape.constant(&[d], vec![0.0; d])?, None));
        };
        let r = self.layout.word_encoder.encode_tokens(g, self.layout.embedding, response)?;
        let joint = g.tape.concat(&[context_final, r.final_state])?;
        let (w, b) = (g.param(latent.w), g.param(latent.b));
        let stats = g.tape.matmul(joint, w)?;
        let stats = g.tape.add(stats, b)?;
        let mu = g.tape.slice(stats, 0, d)?;
        let logvar = g.tape.slice(stats, d, d)?;
        let kl = kl_standard_normal(g, mu, logvar)?;
        let z = if g.training() {
            let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(g.rng())).collect();
            let eps = g.tape.constant(&[d], eps)?;
            let half = g.tape.scale(logvar, 0.5);
            let sigma = g.tape.exp(half);
            let noise = g.tape.mul(sigma, eps)?;
            g.tape.add(mu, noise)?
        } else {
            mu
        };
        Ok((z, Some(kl)))
    }
}

/// `0.5 · Σ (μ² + exp(logvar) − logvar − 1)`.
pub fn kl_standard_normal(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = g.tape.mul(mu, mu)?;
    let var = g.tape.exp(logvar);
    let a = g.tape.add(mu2, var)?;
    let a = g.tape.sub(a, logvar)?;
    let a = g.tape.affine(a, 0.5, -0.5);
    Ok(g.tape.sum(a))
}

/// Multiplies vector `rows[j]` by the scalar `weights[j]`.
fn scale_rows(g: &mut Graph, rows: &[Var], weights: Var) -> Result<Vec<Var>> {
    let m = g.tape.stack_rows(rows)?;
    let t = g.tape.transpose(m)?;
    let t = g.tape.mul(t, weights)?;
    let m = g.tape.transpose(t)?;
    (0..rows.len()).map(|j| g.tape.row(m, j)).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_at(values: &[f64], index: usize) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + values.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    values[index] - lse
}

fn build_layout(c: &ModelConfig, b: &mut ParamBuilder) -> Result<Layout> {
    let arch = c.architecture;
    let h = c.hidden;
    let embedding = b.uniform("embedding", &[c.vocab_size, c.embed], 1.0)?;
    let word_encoder = UtteranceEncoder::new(b, "word_encoder", c.embed, h, c.utterance_layers, c.bidirectional, c.dropout)?;
    let self_attention = |b: &mut ParamBuilder| SelfAttentionEncoder::new(b, "self_attention", c.d_model, c.heads, c.transformer_layers);
    let context_encoder = |b: &mut ParamBuilder| ContextEncoder::new(b, "context_encoder", h, h, c.context_layers, c.dropout);
    let aggregator = match arch.base() {
        BaseKind::Flat { self_attention: sa } => Aggregator::Flat {
            self_attention: if sa { Some(self_attention(b)?) } else { None },
            attention: AdditiveParams::new(b, "token_attention", h, h, h)?,
        },
        BaseKind::Hred | BaseKind::Wseq | BaseKind::Vhred => Aggregator::Recurrent {
            encoder: context_encoder(b)?,
            attention: AdditiveParams::new(b, "utterance_attention", h, h, h)?,
        },
        BaseKind::Dshred => Aggregator::Dshred {
            encoder: context_encoder(b)?,
            params: DshredParams::new(b, "dshred", h, h)?,
        },
        BaseKind::Recosa => Aggregator::SelfAttention {
            encoder: self_attention(b)?,
            attention: AdditiveParams::new(b, "utterance_attention", h, h, h)?,
        },
    };
    let latent = if arch == Architecture::Vhred {
        Some(b.scoped("latent", |b| {
            Ok(LatentParams {
                w: b.weight("w", &[2 * h, 2 * c.latent_dim])?,
                b: b.zeros("b", &[2 * c.latent_dim])?,
                dim: c.latent_dim,
            })
        })?)
    } else {
        None
    };
    let extra = latent.as_ref().map_or(0, |l| l.dim);
    let decoder = b.scoped("decoder", |b| {
        let mut layers = Vec::new();
        let (mut init_w, mut init_b) = (Vec::new(), Vec::new());
        for l in 0..c.decoder_layers {
            let d_in = if l == 0 { c.embed + h + extra } else { h };
            layers.push(GruParams::new(b, &format!("l{l}"), d_in, h)?);
            init_w.push(b.weight(&format!("init{l}_w"), &[h + extra, h])?);
            init_b.push(b.zeros(&format!("init{l}_b"), &[h])?);
        }
        Ok(Decoder {
            layers,
            init_w,
            init_b,
            out_w: b.weight("out_w", &[h, c.vocab_size])?,
            out_b: b.zeros("out_b", &[c.vocab_size])?,
        })
    })?;
    let word_attention = if c.word_attention {
        Some(AdditiveParams::new(b, "word_attention", h, h, h)?)
    } else {
        None
    };
    Ok(Layout {
        embedding,
        word_encoder,
        aggregator,
        latent,
        decoder,
        word_attention,
    })
}
