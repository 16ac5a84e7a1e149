//! Attention mechanisms.
//!
//! * additive (one-layer) attention of a query over key/value rows,
//! * the two-level hierarchical context: word-level attention inside every
//!   utterance, a recurrent pass over the per-utterance vectors, then
//!   utterance-level attention over the recurrent states,
//! * cosine relevance weights of the WSeq model,
//! * the dynamic/static attention pair of DSHRED,
//! * scaled multi-head self-attention with sinusoidal positions.

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamBuilder, ParamId, Tape, Var};

/// Normalized attention weights over the keys and the context vector they produce.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// Probability vector `[k]`.
    pub weights: Var,
    /// Weighted sum of the values `[d_v]`.
    pub context: Var,
}

impl AttentionOutput {
    pub fn weight_values(&self, tape: &Tape) -> Vec<f64> {
        tape.value(self.weights).to_vec()
    }
}

/// Parameters of `e_j = v · tanh(W_q q + W_k k_j)`.
#[derive(Debug, Clone)]
pub struct AdditiveParams {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub v: ParamId,
}

impl AdditiveParams {
    pub fn new(b: &mut ParamBuilder, name: &str, d_query: usize, d_key: usize, d_attn: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(AdditiveParams {
                w_query: b.uniform("w_query", &[d_query, d_attn], 1.0)?,
                w_key: b.uniform("w_key", &[d_key, d_attn], 1.0)?,
                v: b.weight("v", &[d_attn, 1])?,
            })
        })
    }
}

/// Keys with their projection precomputed, reusable across decoding steps.
#[derive(Debug, Clone, Copy)]
pub struct PreparedKeys {
    pub keys: Var,
    pub projected: Var,
    pub values: Var,
}

pub fn prepare_keys(g: &mut Graph, keys: Var, values: Var, params: &AdditiveParams) -> Result<PreparedKeys> {
    let (ks, vs) = (g.tape.shape(keys).to_vec(), g.tape.shape(values).to_vec());
    if ks.len() != 2 || vs.len() != 2 || ks[0] != vs[0] {
        return Err(Error::dim("additive_attend", &ks, &vs));
    }
    let wk = g.param(params.w_key);
    let projected = g.tape.matmul(keys, wk)?;
    Ok(PreparedKeys { keys, projected, values })
}

pub fn attend_prepared(g: &mut Graph, query: Var, prepared: &PreparedKeys, params: &AdditiveParams) -> Result<AttentionOutput> {
    let wq = g.param(params.w_query);
    let v = g.param(params.v);
    let k = g.tape.shape(prepared.keys)[0];
    let qp = g.tape.matmul(query, wq)?;
    let hidden = g.tape.add(prepared.projected, qp)?;
    let hidden = g.tape.tanh(hidden);
    let scores = g.tape.matmul(hidden, v)?;
    let scores = g.tape.reshape(scores, &[k])?;
    let weights = g.tape.softmax(scores)?;
    let context = g.tape.matmul(weights, prepared.values)?;
    Ok(AttentionOutput { weights, context })
}

/// Additive attention of `query` (`[d_q]`) over `keys` (`[k × d_k]`) and `values` (`[k × d_v]`).
pub fn additive_attend(g: &mut Graph, query: Var, keys: Var, values: Var, params: &AdditiveParams) -> Result<AttentionOutput> {
    if g.tape.shape(keys).first() == Some(&0) {
        return Err(Error::EmptyKeys);
    }
    let prepared = prepare_keys(g, keys, values, params)?;
    attend_prepared(g, query, &prepared, params)
}

/// A recurrent encoder run over a sequence of vectors, returning per-step states `[m × d]`.
pub trait SequenceEncoder {
    fn encode_sequence(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var>;
}

/// Both attention levels of the hierarchical context computation.
#[derive(Debug, Clone)]
pub struct HierarchicalOutput {
    /// One word-level attention per utterance.
    pub word: Vec<AttentionOutput>,
    /// Context-encoder states over the word-level vectors `[m × d]`.
    pub context_states: Var,
    /// Utterance-level attention; its context is the final vector `c_i`.
    pub utterance: AttentionOutput,
}

/// Word-level attention in each utterance, a context-encoder sweep over the
/// resulting vectors in order, then utterance-level attention over the sweep.
/// The decoder state is the query at both levels.
pub fn hierarchical_context(
    g: &mut Graph,
    decoder_state: Var,
    word_states: &[PreparedKeys],
    context_encoder: &dyn SequenceEncoder,
    word_params: &AdditiveParams,
    utterance_params: &AdditiveParams,
) -> Result<HierarchicalOutput> {
    if word_states.is_empty() {
        return Err(Error::EmptyKeys);
    }
    let mut word = Vec::with_capacity(word_states.len());
    for keys in word_states {
        word.push(attend_prepared(g, decoder_state, keys, word_params)?);
    }
    let inputs: Vec<Var> = word.iter().map(|w| w.context).collect();
    let context_states = context_encoder.encode_sequence(g, &inputs)?;
    let utterance = additive_attend(g, decoder_state, context_states, context_states, utterance_params)?;
    Ok(HierarchicalOutput {
        word,
        context_states,
        utterance,
    })
}

/// Cosine relevance weights over the context utterances followed by the query.
///
/// The query's own raw weight is 1, context weights are clamped at 0 and the
/// vector is normalized by its sum. Returns `[m + 1]`.
pub fn wseq_weights(tape: &mut Tape, query_repr: Var, utterance_reprs: Option<Var>) -> Result<Var> {
    let one = tape.constant(&[1], vec![1.0])?;
    let Some(reprs) = utterance_reprs else {
        return Ok(one);
    };
    let cos = tape.cosine_rows(query_repr, reprs)?;
    let raw = tape.relu(cos);
    let raw = tape.concat(&[raw, one])?;
    let total = tape.sum(raw);
    tape.div_scalar(raw, total)
}

#[derive(Debug, Clone)]
pub struct DshredParams {
    pub dynamic: AdditiveParams,
    pub static_: AdditiveParams,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
}

impl DshredParams {
    pub fn new(b: &mut ParamBuilder, name: &str, d_query: usize, d: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(DshredParams {
                dynamic: AdditiveParams::new(b, "dynamic", d_query, d, d)?,
                static_: AdditiveParams::new(b, "static", d, d, d)?,
                fuse_w: b.weight("fuse_w", &[2 * d, d])?,
                fuse_b: b.zeros("fuse_b", &[d])?,
            })
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DshredOutput {
    pub dynamic: AttentionOutput,
    pub static_: AttentionOutput,
    pub context: Var,
}

/// Dynamic attention (decoder-state query) and static attention (last-utterance
/// query) over the context states, fused by a linear map of their concatenation.
pub fn dshred_context(
    g: &mut Graph,
    decoder_state: Var,
    context_states: &PreparedKeys,
    static_keys: &PreparedKeys,
    last_utterance_state: Var,
    params: &DshredParams,
) -> Result<DshredOutput> {
    let dynamic = attend_prepared(g, decoder_state, context_states, &params.dynamic)?;
    let static_ = attend_prepared(g, last_utterance_state, static_keys, &params.static_)?;
    let both = g.tape.concat(&[dynamic.context, static_.context])?;
    let w = g.param(params.fuse_w);
    let b = g.param(params.fuse_b);
    let proj = g.tape.matmul(both, w)?;
    let context = g.tape.add(proj, b)?;
    Ok(DshredOutput {
        dynamic,
        static_,
        context,
    })
}

/// Sinusoidal position encodings `[n × d]`.
pub fn positional_encoding(n: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[derive(Debug, Clone)]
pub struct SelfAttentionParams {
    pub heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl SelfAttentionParams {
    pub fn new(b: &mut ParamBuilder, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        b.scoped(name, |b| {
            Ok(SelfAttentionParams {
                heads,
                w_q: b.weight("w_q", &[d_model, d_model])?,
                w_k: b.weight("w_k", &[d_model, d_model])?,
                w_v: b.weight("w_v", &[d_model, d_model])?,
                w_o: b.weight("w_o", &[d_model, d_model])?,
                ln_gain: b.constant("ln_gain", &[d_model], 1.0)?,
                ln_bias: b.zeros("ln_bias", &[d_model])?,
            })
        })
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttentionOutput {
    pub output: Var,
    /// Row-stochastic `[n × n]` weights, one matrix per head.
    pub head_weights: Vec<Var>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One multi-head self-attention block: optional sinusoidal positions, scaled
/// dot-product attention per head, output projection, residual, layer norm.
pub fn multi_head_self_attend(g: &mut Graph, x: Var, params: &SelfAttentionParams, add_positions: bool) -> Result<SelfAttentionOutput> {
    let shape = g.tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("multi_head_self_attend", &shape, &[]));
    }
    let (n, d) = (shape[0], shape[1]);
    let heads = params.heads;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("d_model {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let x = if add_positions {
        let pe = g.tape.constant(&[n, d], positional_encoding(n, d))?;
        g.tape.add(x, pe)?
    } else {
        x
    };
    let (wq, wk, wv, wo) = (g.param(params.w_q), g.param(params.w_k), g.param(params.w_v), g.param(params.w_o));
    let q = g.tape.matmul(x, wq)?;
    let k = g.tape.matmul(x, wk)?;
    let v = g.tape.matmul(x, wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.tape.slice(q, h * dh, dh)?;
        let kh = g.tape.slice(k, h * dh, dh)?;
        let vh = g.tape.slice(v, h * dh, dh)?;
        let kt = g.tape.transpose(kh)?;
        let scores = g.tape.matmul(qh, kt)?;
        let scores = g.tape.scale(scores, scale);
        let w = g.tape.softmax(scores)?;
        head_weights.push(w);
        outs.push(g.tape.matmul(w, vh)?);
    }
    let joined = if outs.len() == 1 { outs[0] } else { g.tape.concat(&outs)? };
    let proj = g.tape.matmul(joined, wo)?;
    let res = g.tape.add(x, proj)?;
    let normed = g.tape.layer_norm(res, LAYER_NORM_EPS);
    let gain = g.param(params.ln_gain);
    let bias = g.param(params.ln_bias);
    let scaled = g.tape.mul(normed, gain)?;
    let output = g.tape.add(scaled, bias)?;
    Ok(SelfAttentionOutput { output, head_weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_params, ParamStore, Tensor};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::numerics::rng::rng_for(seed, "attn-test");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn additive_setup(d_q: usize, d_k: usize, a: usize) -> (ParamStore, AdditiveParams) {
        let mut store = ParamStore::new();
        let p = AdditiveParams::new(&mut ParamBuilder::new(&mut store, 7), "attn", d_q, d_k, a).unwrap();
        (store, p)
    }

    /// Plain-f64 recomputation of the additive score, softmax and weighted sum.
    fn additive_oracle(store: &ParamStore, p: &AdditiveParams, q: &[f64], keys: &Tensor, values: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let wq = store.get(p.w_query);
        let wk = store.get(p.w_key);
        let v = store.get(p.v);
        let a = wq.cols();
        let mut e = Vec::new();
        for j in 0..keys.rows() {
            let kj = keys.row(j);
            let mut s = 0.0;
            for t in 0..a {
                let mut pre = 0.0;
                for (i, qi) in q.iter().enumerate() {
                    pre += qi * wq.data()[i * a + t];
                }
                for (i, ki) in kj.iter().enumerate() {
                    pre += ki * wk.data()[i * a + t];
                }
                s += v.data()[t] * pre.tanh();
            }
            e.push(s);
        }
        let z: f64 = e.iter().map(|x| x.exp()).sum();
        let w: Vec<f64> = e.iter().map(|x| x.exp() / z).collect();
        let mut c = vec![0.0; values.cols()];
        for (j, wj) in w.iter().enumerate() {
            for (ci, vi) in c.iter_mut().zip(values.row(j)) {
                *ci += wj * vi;
            }
        }
        (w, c)
    }

    #[test]
    fn single_key_gets_all_weight() {
        let (store, p) = additive_setup(3, 4, 5);
        let mut g = Graph::new(&store, false, 0);
        let q = g.tape.leaf(&rand_tensor(&[3], 1));
        let k = g.tape.leaf(&rand_tensor(&[1, 4], 2));
        let v = g.tape.leaf(&rand_tensor(&[1, 2], 3));
        let out = additive_attend(&mut g, q, k, v, &p).unwrap();
        assert_eq!(out.weight_values(&g.tape), vec![1.0]);
        assert_eq!(g.tape.value(out.context), g.tape.value(v));
    }

    #[test]
    fn identical_keys_give_uniform_weights_and_mean_value() {
        let (store, p) = additive_setup(3, 4, 5);
        let mut g = Graph::new(&store, false, 0);
        let q = g.tape.leaf(&rand_tensor(&[3], 1));
        let row = rand_tensor(&[4], 2);
        let keys = Tensor::matrix(3, 4, [row.data(), row.data(), row.data()].concat()).unwrap();
        let k = g.tape.leaf(&keys);
        let vals = rand_tensor(&[3, 2], 3);
        let v = g.tape.leaf(&vals);
        let out = additive_attend(&mut g, q, k, v, &p).unwrap();
        for w in out.weight_values(&g.tape) {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        for c in 0..2 {
            let mean = (0..3).map(|r| vals.row(r)[c]).sum::<f64>() / 3.0;
            assert!((g.tape.value(out.context)[c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn random_case_matches_direct_formula() {
        let (store, p) = additive_setup(3, 4, 5);
        let mut g = Graph::new(&store, false, 0);
        let qt = rand_tensor(&[3], 11);
        let kt = rand_tensor(&[3, 4], 12);
        let vt = rand_tensor(&[3, 6], 13);
        let q = g.tape.leaf(&qt);
        let k = g.tape.leaf(&kt);
        let v = g.tape.leaf(&vt);
        let out = additive_attend(&mut g, q, k, v, &p).unwrap();
        let (w, c) = additive_oracle(&store, &p, qt.data(), &kt, &vt);
        for (a, b) in out.weight_values(&g.tape).iter().zip(&w) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.tape.value(out.context).iter().zip(&c) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_keys_is_an_error() {
        let (store, p) = additive_setup(2, 2, 2);
        let mut g = Graph::new(&store, false, 0);
        let q = g.tape.leaf(&rand_tensor(&[2], 1));
        let bad = hierarchical_context(&mut g, q, &[], &NoEncoder, &p, &p);
        assert!(matches!(bad, Err(Error::EmptyKeys)));
    }

    struct NoEncoder;
    impl SequenceEncoder for NoEncoder {
        fn encode_sequence(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
            g.tape.stack_rows(inputs)
        }
    }

    /// Hand-rolled one-layer tanh recurrence standing in for the context encoder.
    struct TanhRnn {
        w: ParamId,
    }
    impl SequenceEncoder for TanhRnn {
        fn encode_sequence(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
            let w = g.param(self.w);
            let mut h = inputs[0];
            let mut states = Vec::new();
            for (i, &x) in inputs.iter().enumerate() {
                let pre = if i == 0 { x } else {
                    let hw = g.tape.matmul(h, w)?;
                    g.tape.add(x, hw)?
                };
                h = g.tape.tanh(pre);
                states.push(h);
            }
            g.tape.stack_rows(&states)
        }
    }

    #[test]
    fn hierarchical_single_word_single_utterance() {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 5);
        let wp = AdditiveParams::new(&mut b, "word", 3, 3, 4).unwrap();
        let up = AdditiveParams::new(&mut b, "utt", 3, 3, 4).unwrap();
        let w = b.weight("rnn", &[3, 3]).unwrap();
        let enc = TanhRnn { w };
        let mut g = Graph::new(&store, false, 0);
        let s = g.tape.leaf(&rand_tensor(&[3], 1));
        let word = rand_tensor(&[1, 3], 2);
        let k = g.tape.leaf(&word);
        let pk = prepare_keys(&mut g, k, k, &wp).unwrap();
        let out = hierarchical_context(&mut g, s, &[pk], &enc, &wp, &up).unwrap();
        assert_eq!(out.word[0].weight_values(&g.tape), vec![1.0]);
        assert_eq!(out.utterance.weight_values(&g.tape), vec![1.0]);
        // c_i = encoder(single word state) = tanh(word).
        let expect: Vec<f64> = word.data().iter().map(|x| x.tanh()).collect();
        assert_eq!(g.tape.value(out.utterance.context), &expect[..]);
    }

    #[test]
    fn hierarchical_matches_step_by_step_composition() {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 5);
        let wp = AdditiveParams::new(&mut b, "word", 3, 3, 4).unwrap();
        let up = AdditiveParams::new(&mut b, "utt", 3, 3, 4).unwrap();
        let w = b.weight("rnn", &[3, 3]).unwrap();
        let enc = TanhRnn { w };
        let s = rand_tensor(&[3], 1);
        let utts = [rand_tensor(&[2, 3], 2), rand_tensor(&[4, 3], 3), rand_tensor(&[1, 3], 4)];

        let mut g = Graph::new(&store, false, 0);
        let sv = g.tape.leaf(&s);
        let prepared: Vec<PreparedKeys> = utts
            .iter()
            .map(|u| {
                let k = g.tape.leaf(u);
                prepare_keys(&mut g, k, k, &wp).unwrap()
            })
            .collect();
        let out = hierarchical_context(&mut g, sv, &prepared, &enc, &wp, &up).unwrap();

        // Oracle: word-level additive oracle, plain tanh recurrence, utterance-level oracle.
        let cij: Vec<Vec<f64>> = utts.iter().map(|u| additive_oracle(&store, &wp, s.data(), u, u).1).collect();
        let wm = store.get(w);
        let mut h = vec![0.0; 3];
        let mut states = Vec::new();
        for (i, c) in cij.iter().enumerate() {
            let mut pre = c.clone();
            if i > 0 {
                for t in 0..3 {
                    pre[t] += (0..3).map(|r| h[r] * wm.data()[r * 3 + t]).sum::<f64>();
                }
            }
            h = pre.iter().map(|x| x.tanh()).collect();
            states.extend(h.clone());
        }
        let st = Tensor::matrix(3, 3, states).unwrap();
        let (uw, c) = additive_oracle(&store, &up, s.data(), &st, &st);
        for (a, b) in out.utterance.weight_values(&g.tape).iter().zip(&uw) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.tape.value(out.utterance.context).iter().zip(&c) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hierarchical_identical_utterances_have_uniform_utterance_weights() {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 5);
        let wp = AdditiveParams::new(&mut b, "word", 3, 3, 4).unwrap();
        let up = AdditiveParams::new(&mut b, "utt", 3, 3, 4).unwrap();
        let mut g = Graph::new(&store, false, 0);
        let s = g.tape.leaf(&rand_tensor(&[3], 1));
        let u = rand_tensor(&[2, 3], 2);
        let k1 = g.tape.leaf(&u);
        let k2 = g.tape.leaf(&u);
        let p1 = prepare_keys(&mut g, k1, k1, &wp).unwrap();
        let p2 = prepare_keys(&mut g, k2, k2, &wp).unwrap();
        // A position-independent encoder leaves identical inputs identical.
        let out = hierarchical_context(&mut g, s, &[p1, p2], &NoEncoder, &wp, &up).unwrap();
        assert_eq!(out.utterance.weight_values(&g.tape), vec![0.5, 0.5]);
    }

    #[test]
    fn wseq_weight_examples() {
        let mut t = Tape::new();
        let q = t.leaf(&Tensor::vector(vec![1.0, 2.0, 0.0]).unwrap());
        // Equal to query, orthogonal to query.
        let u = t.leaf(&Tensor::matrix(2, 3, vec![1.0, 2.0, 0.0, -2.0, 1.0, 5.0]).unwrap());
        let cos = t.cosine_rows(q, u).unwrap();
        assert!((t.value(cos)[0] - 1.0).abs() < 1e-15);
        assert_eq!(t.value(cos)[1], 0.0);
        let w = wseq_weights(&mut t, q, Some(u)).unwrap();
        for (a, b) in t.value(w).iter().zip([0.5, 0.0, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }

        // Mixed case: cosines 0.6 and -0.8 -> raw [0.6, 0, 1].
        let q = t.leaf(&Tensor::vector(vec![1.0, 0.0]).unwrap());
        let u = t.leaf(&Tensor::matrix(2, 2, vec![3.0, 4.0, -4.0, 3.0]).unwrap());
        let w = wseq_weights(&mut t, q, Some(u)).unwrap();
        let expect = [0.6 / 1.6, 0.0, 1.0 / 1.6];
        for (a, b) in t.value(w).iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let w = wseq_weights(&mut t, q, None).unwrap();
        assert_eq!(t.value(w), &[1.0]);
        let zero = t.leaf(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let w = wseq_weights(&mut t, q, Some(zero)).unwrap();
        assert_eq!(t.value(w), &[0.0, 1.0]);
    }

    fn dshred_setup(d: usize) -> (ParamStore, DshredParams) {
        let mut store = ParamStore::new();
        let p = DshredParams::new(&mut ParamBuilder::new(&mut store, 9), "ds", d, d).unwrap();
        (store, p)
    }

    fn run_dshred(store: &ParamStore, p: &DshredParams, s: &Tensor, ctx: &Tensor, last: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new(store, false, 0);
        let sv = g.tape.leaf(s);
        let c = g.tape.leaf(ctx);
        let l = g.tape.leaf(last);
        let dk = prepare_keys(&mut g, c, c, &p.dynamic).unwrap();
        let sk = prepare_keys(&mut g, c, c, &p.static_).unwrap();
        let out = dshred_context(&mut g, sv, &dk, &sk, l, p).unwrap();
        (
            out.dynamic.weight_values(&g.tape),
            out.static_.weight_values(&g.tape),
            g.tape.value(out.context).to_vec(),
        )
    }

    #[test]
    fn dshred_single_state_projects_its_duplication() {
        let (store, p) = dshred_setup(3);
        let ctx = rand_tensor(&[1, 3], 1);
        let (dw, sw, out) = run_dshred(&store, &p, &rand_tensor(&[3], 2), &ctx, &rand_tensor(&[3], 3));
        assert_eq!((dw, sw), (vec![1.0], vec![1.0]));
        let w = store.get(p.fuse_w);
        let both = [ctx.data(), ctx.data()].concat();
        for (t, o) in out.iter().enumerate() {
            let e: f64 = (0..6).map(|r| both[r] * w.data()[r * 3 + t]).sum();
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn dshred_identical_queries_share_weights() {
        let (mut store, p) = dshred_setup(3);
        // Tie the two attention parameter sets so identical queries must agree.
        for (a, b) in [(p.dynamic.w_query, p.static_.w_query), (p.dynamic.w_key, p.static_.w_key), (p.dynamic.v, p.static_.v)] {
            let t = store.get(a).clone();
            *store.get_mut(b) = t;
        }
        let s = rand_tensor(&[3], 2);
        let (dw, sw, _) = run_dshred(&store, &p, &s, &rand_tensor(&[3, 3], 1), &s);
        assert_eq!(dw, sw);
    }

    #[test]
    fn dshred_matches_two_oracle_composition() {
        let (store, p) = dshred_setup(3);
        let s = rand_tensor(&[3], 2);
        let ctx = rand_tensor(&[3, 3], 1);
        let last = rand_tensor(&[3], 4);
        let (dw, sw, out) = run_dshred(&store, &p, &s, &ctx, &last);
        let (odw, odc) = additive_oracle(&store, &p.dynamic, s.data(), &ctx, &ctx);
        let (osw, osc) = additive_oracle(&store, &p.static_, last.data(), &ctx, &ctx);
        for (a, b) in dw.iter().chain(&sw).zip(odw.iter().chain(&osw)) {
            assert!((a - b).abs() < 1e-12);
        }
        let both = [odc, osc].concat();
        let w = store.get(p.fuse_w);
        for (t, o) in out.iter().enumerate() {
            let e: f64 = (0..6).map(|r| both[r] * w.data()[r * 3 + t]).sum();
            assert!((o - e).abs() < 1e-12);
        }
    }

    fn mhsa_setup(d: usize, heads: usize) -> (ParamStore, SelfAttentionParams) {
        let mut store = ParamStore::new();
        let p = SelfAttentionParams::new(&mut ParamBuilder::new(&mut store, 3), "mhsa", d, heads).unwrap();
        (store, p)
    }

    #[test]
    fn mhsa_single_position() {
        let (store, p) = mhsa_setup(4, 2);
        let mut g = Graph::new(&store, false, 0);
        let x = g.tape.leaf(&rand_tensor(&[1, 4], 1));
        let out = multi_head_self_attend(&mut g, x, &p, true).unwrap();
        for w in &out.head_weights {
            assert_eq!(g.tape.value(*w), &[1.0]);
        }
        assert_eq!(g.tape.shape(out.output), &[1, 4]);
    }

    #[test]
    fn mhsa_rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        assert!(matches!(
            SelfAttentionParams::new(&mut ParamBuilder::new(&mut store, 3), "m", 6, 4),
            Err(Error::Config(_))
        ));
    }

    /// Dense per-head oracle in plain f64.
    fn mhsa_oracle(store: &ParamStore, p: &SelfAttentionParams, x: &Tensor) -> Vec<f64> {
        let (n, d) = (x.rows(), x.cols());
        let pe = positional_encoding(n, d);
        let xin: Vec<f64> = x.data().iter().zip(&pe).map(|(a, b)| a + b).collect();
        let mm = |a: &[f64], w: &[f64], r: usize, k: usize, c: usize| {
            let mut o = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    o[i * c + j] = (0..k).map(|t| a[i * k + t] * w[t * c + j]).sum();
                }
            }
            o
        };
        let q = mm(&xin, store.get(p.w_q).data(), n, d, d);
        let k = mm(&xin, store.get(p.w_k).data(), n, d, d);
        let v = mm(&xin, store.get(p.w_v).data(), n, d, d);
        let dh = d / p.heads;
        let mut joined = vec![0.0; n * d];
        for h in 0..p.heads {
            for i in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|t| q[i * d + h * dh + t] * k[j * d + h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                for t in 0..dh {
                    joined[i * d + h * dh + t] = (0..n).map(|j| s[j].exp() / z * v[j * d + h * dh + t]).sum();
                }
            }
        }
        let proj = mm(&joined, store.get(p.w_o).data(), n, d, d);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let r: Vec<f64> = (0..d).map(|j| xin[i * d + j] + proj[i * d + j]).collect();
            let mu = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                out[i * d + j] = (r[j] - mu) / (var + LAYER_NORM_EPS).sqrt();
            }
        }
        out
    }

    #[test]
    fn mhsa_matches_dense_oracle() {
        let (store, p) = mhsa_setup(4, 2);
        let xt = rand_tensor(&[3, 4], 5);
        let mut g = Graph::new(&store, false, 0);
        let x = g.tape.leaf(&xt);
        let out = multi_head_self_attend(&mut g, x, &p, true).unwrap();
        for (a, b) in g.tape.value(out.output).iter().zip(mhsa_oracle(&store, &p, &xt)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for w in &out.head_weights {
            for row in g.tape.value(*w).chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_mechanism_passes_grad_check() {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 21);
        let wp = AdditiveParams::new(&mut b, "word", 3, 3, 4).unwrap();
        let up = AdditiveParams::new(&mut b, "utt", 3, 3, 4).unwrap();
        let dp = DshredParams::new(&mut b, "ds", 3, 3).unwrap();
        let sp = SelfAttentionParams::new(&mut b, "sa", 4, 2).unwrap();
        let rnn = b.weight("rnn", &[3, 3]).unwrap();
        let enc = TanhRnn { w: rnn };
        let query = b.uniform("query", &[3], 1.0).unwrap();
        let u1 = b.uniform("u1", &[2, 3], 1.0).unwrap();
        let u2 = b.uniform("u2", &[3, 3], 1.0).unwrap();
        let xs = b.uniform("xs", &[3, 4], 1.0).unwrap();
        let report = grad_check_params(&store, 1e-5, 0, |g| {
            let q = g.param(query);
            let a = g.param(u1);
            let c = g.param(u2);
            let pa = prepare_keys(g, a, a, &wp)?;
            let pc = prepare_keys(g, c, c, &wp)?;
            let h = hierarchical_context(g, q, &[pa, pc], &enc, &wp, &up)?;
            let ctx = h.context_states;
            let dk = prepare_keys(g, ctx, ctx, &dp.dynamic)?;
            let sk = prepare_keys(g, ctx, ctx, &dp.static_)?;
            let last = g.tape.row(c, 2)?;
            let ds = dshred_context(g, q, &dk, &sk, last, &dp)?;
            let w = wseq_weights(&mut g.tape, q, Some(a))?;
            let x = g.param(xs);
            let sa = multi_head_self_attend(g, x, &sp, true)?;
            let t1 = g.tape.mul(h.utterance.context, ds.context)?;
            let t1 = g.tape.sum(t1);
            let t2 = g.tape.mul(w, w)?;
            let t2 = g.tape.sum(t2);
            let t3 = g.tape.tanh(sa.output);
            let t3 = g.tape.sum(t3);
            let s = g.tape.add(t1, t2)?;
            g.tape.add(s, t3)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    proptest! {
        #[test]
        fn additive_attention_is_permutation_equivariant(seed in 0u64..200, rot in 1usize..4) {
            let (store, p) = additive_setup(3, 3, 4);
            let kt = rand_tensor(&[4, 3], seed);
            let vt = rand_tensor(&[4, 2], seed + 1000);
            let qt = rand_tensor(&[3], seed + 2000);
            let rotate = |t: &Tensor| {
                let mut rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
                rows.rotate_left(rot);
                Tensor::matrix(t.rows(), t.cols(), rows.concat()).unwrap()
            };
            let mut g = Graph::new(&store, false, 0);
            let q = g.tape.leaf(&qt);
            let (k, v) = (g.tape.leaf(&kt), g.tape.leaf(&vt));
            let a = additive_attend(&mut g, q, k, v, &p).unwrap();
            let (k2, v2) = (g.tape.leaf(&rotate(&kt)), g.tape.leaf(&rotate(&vt)));
            let b = additive_attend(&mut g, q, k2, v2, &p).unwrap();
            let mut wa = a.weight_values(&g.tape);
            wa.rotate_left(rot);
            let wb = b.weight_values(&g.tape);
            prop_assert!((wb.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(wb.iter().all(|&w| w >= 0.0));
            for (x, y) in wa.iter().zip(&wb) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in g.tape.value(a.context).iter().zip(g.tape.value(b.context)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn wseq_weights_are_scale_invariant_distributions(
            seed in 0u64..500,
            m in 1usize..5,
            scale in 0.01f64..100.0,
        ) {
            let q = rand_tensor(&[4], seed);
            let u = rand_tensor(&[m, 4], seed + 7);
            let scaled = Tensor::matrix(m, 4, u.data().iter().map(|x| x * scale).collect()).unwrap();
            let mut t = Tape::new();
            let qv = t.leaf(&q);
            let uv = t.leaf(&u);
            let sv = t.leaf(&scaled);
            let a = wseq_weights(&mut t, qv, Some(uv)).unwrap();
            let b = wseq_weights(&mut t, qv, Some(sv)).unwrap();
            let wa = t.value(a).to_vec();
            prop_assert_eq!(wa.len(), m + 1);
            prop_assert!((wa.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(wa.iter().all(|&w| w >= 0.0));
            for (x, y) in wa.iter().zip(t.value(b)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
