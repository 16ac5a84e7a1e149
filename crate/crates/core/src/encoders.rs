//! Recurrent and self-attention encoders.
//!
//! The GRU follows `h' = (1 - z) ⊙ h + z ⊙ ĥ` with
//! `z = σ(x W_z + h U_z + b_z)`, `r = σ(x W_r + h U_r + b_r)` and
//! `ĥ = tanh(x W_c + (r ⊙ h) U_c + b_c)`. All initial states are zero.

use crate::attention::{multi_head_self_attend, SelfAttentionParams, SequenceEncoder};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamBuilder, ParamId, Var};

/// Gate weights of one GRU cell.
///
/// `w_x` is `[d_in × 3·d_h]` with column blocks `[z | r | c]`, `w_h` is
/// `[d_h × 2·d_h]` with blocks `[z | r]`, `u_c` is `[d_h × d_h]` and `bias`
/// is `[3·d_h]`.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub d_in: usize,
    pub d_h: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub u_c: ParamId,
    pub bias: ParamId,
}

impl GruParams {
    pub fn new(b: &mut ParamBuilder, name: &str, d_in: usize, d_h: usize) -> Result<Self> {
        let bound = 1.0 / (d_h as f64).sqrt();
        b.scoped(name, |b| {
            Ok(GruParams {
                d_in,
                d_h,
                w_x: b.uniform("w_x", &[d_in, 3 * d_h], bound)?,
                w_h: b.uniform("w_h", &[d_h, 2 * d_h], bound)?,
                u_c: b.uniform("u_c", &[d_h, d_h], bound)?,
                bias: b.uniform("bias", &[3 * d_h], bound)?,
            })
        })
    }
}

/// One GRU update of state `h` (`[d_h]`) on input `x` (`[d_in]`).
pub fn gru_step(g: &mut Graph, x: Var, h: Var, p: &GruParams) -> Result<Var> {
    let (xs, hs) = (g.tape.shape(x).to_vec(), g.tape.shape(h).to_vec());
    if xs != [p.d_in] || hs != [p.d_h] {
        return Err(Error::dim("gru_step", &xs, &hs));
    }
    let d = p.d_h;
    let (w_x, w_h, u_c, bias) = (g.param(p.w_x), g.param(p.w_h), g.param(p.u_c), g.param(p.bias));
    let xw = g.tape.matmul(x, w_x)?;
    let xw = g.tape.add(xw, bias)?;
    let hw = g.tape.matmul(h, w_h)?;
    let xzr = g.tape.slice(xw, 0, 2 * d)?;
    let gates = g.tape.add(xzr, hw)?;
    let gates = g.tape.sigmoid(gates);
    let z = g.tape.slice(gates, 0, d)?;
    let r = g.tape.slice(gates, d, d)?;
    let rh = g.tape.mul(r, h)?;
    let rhu = g.tape.matmul(rh, u_c)?;
    let xc = g.tape.slice(xw, 2 * d, d)?;
    let cand = g.tape.add(xc, rhu)?;
    let cand = g.tape.tanh(cand);
    // (1 - z) ⊙ h + z ⊙ ĥ
    let keep = g.tape.affine(z, -1.0, 1.0);
    let kept = g.tape.mul(keep, h)?;
    let fresh = g.tape.mul(z, cand)?;
    g.tape.add(kept, fresh)
}

/// Runs a GRU over `inputs` from a zero state. States come back in input
/// order even when `reverse` sweeps from the end.
pub fn gru_sweep(g: &mut Graph, inputs: &[Var], p: &GruParams, reverse: bool) -> Result<Vec<Var>> {
    let mut h = g.tape.constant(&[p.d_h], vec![0.0; p.d_h])?;
    let mut states = vec![h; inputs.len()];
    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for i in order {
        h = gru_step(g, inputs[i], h, p)?;
        states[i] = h;
    }
    Ok(states)
}

/// Per-step states `[L × d]` and a single summary vector `[d]`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub states: Var,
    pub final_state: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub forward: GruParams,
    pub backward: Option<GruParams>,
    /// `[2·d_h × d_h]` and `[d_h]`, present for bidirectional layers.
    pub proj_w: Option<ParamId>,
    pub proj_b: Option<ParamId>,
}

/// Stacked, optionally bidirectional GRU over the embedded tokens of one utterance.
#[derive(Debug, Clone)]
pub struct UtteranceEncoder {
    pub layers: Vec<EncoderLayer>,
    pub hidden: usize,
    pub dropout: f64,
}

impl UtteranceEncoder {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        d_in: usize,
        hidden: usize,
        layers: usize,
        bidirectional: bool,
        dropout: f64,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        b.scoped(name, |b| {
            let mut out = Vec::with_capacity(layers);
            for l in 0..layers {
                let input = if l == 0 { d_in } else { hidden };
                out.push(b.scoped(&format!("l{l}"), |b| {
                    let forward = GruParams::new(b, "fwd", input, hidden)?;
                    if bidirectional {
                        Ok(EncoderLayer {
                            forward,
                            backward: Some(GruParams::new(b, "bwd", input, hidden)?),
                            proj_w: Some(b.weight("proj_w", &[2 * hidden, hidden])?),
                            proj_b: Some(b.zeros("proj_b", &[hidden])?),
                        })
                    } else {
                        Ok(EncoderLayer {
                            forward,
                            backward: None,
                            proj_w: None,
                            proj_b: None,
                        })
                    }
                })?);
            }
            Ok(UtteranceEncoder {
                layers: out,
                hidden,
                dropout,
            })
        })
    }

    /// Embeds `tokens` with `table` (dropout applied in training) and encodes them.
    pub fn encode_tokens(&self, g: &mut Graph, table: ParamId, tokens: &[usize]) -> Result<EncoderOutput> {
        if tokens.is_empty() {
            return Err(Error::Validation("cannot encode an empty utterance".into()));
        }
        let t = g.param(table);
        let emb = g.tape.embedding(t, tokens)?;
        let emb = g.dropout(emb, self.dropout)?;
        self.encode(g, emb)
    }

    /// Encodes an already embedded sequence `[L × d_in]`.
    pub fn encode(&self, g: &mut Graph, embedded: Var) -> Result<EncoderOutput> {
        let len = g.tape.shape(embedded)[0];
        let mut x = embedded;
        let mut final_state = None;
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                x = g.dropout(x, self.dropout)?;
            }
            let rows = (0..len).map(|i| g.tape.row(x, i)).collect::<Result<Vec<_>>>()?;
            let fwd = gru_sweep(g, &rows, &layer.forward, false)?;
            match (&layer.backward, layer.proj_w, layer.proj_b) {
                (Some(bp), Some(pw), Some(pb)) => {
                    let bwd = gru_sweep(g, &rows, bp, true)?;
                    let f = g.tape.stack_rows(&fwd)?;
                    let bk = g.tape.stack_rows(&bwd)?;
                    let both = g.tape.concat(&[f, bk])?;
                    let (w, bias) = (g.param(pw), g.param(pb));
                    let proj = g.tape.matmul(both, w)?;
                    x = g.tape.add(proj, bias)?;
                    let ends = g.tape.concat(&[fwd[len - 1], bwd[0]])?;
                    let fin = g.tape.matmul(ends, w)?;
                    final_state = Some(g.tape.add(fin, bias)?);
                }
                _ => {
                    x = g.tape.stack_rows(&fwd)?;
                    final_state = Some(fwd[len - 1]);
                }
            }
        }
        Ok(EncoderOutput {
            states: x,
            final_state: final_state.expect("at least one layer"),
        })
    }
}

/// Unidirectional GRU stack over utterance representations in chronological order.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub layers: Vec<GruParams>,
    pub dropout: f64,
}

impl ContextEncoder {
    pub fn new(b: &mut ParamBuilder, name: &str, d_in: usize, hidden: usize, layers: usize, dropout: f64) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("context encoder needs at least one layer".into()));
        }
        b.scoped(name, |b| {
            let layers = (0..layers)
                .map(|l| GruParams::new(b, &format!("l{l}"), if l == 0 { d_in } else { hidden }, hidden))
                .collect::<Result<Vec<_>>>()?;
            Ok(ContextEncoder { layers, dropout })
        })
    }

    pub fn encode(&self, g: &mut Graph, reprs: &[Var]) -> Result<EncoderOutput> {
        if reprs.is_empty() {
            return Err(Error::Validation("context encoder needs at least one utterance".into()));
        }
        let mut xs = reprs.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                xs = xs.into_iter().map(|x| g.dropout(x, self.dropout)).collect::<Result<_>>()?;
            }
            xs = gru_sweep(g, &xs, layer, false)?;
        }
        let states = g.tape.stack_rows(&xs)?;
        Ok(EncoderOutput {
            states,
            final_state: *xs.last().unwrap(),
        })
    }
}

impl SequenceEncoder for ContextEncoder {
    fn encode_sequence(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
        Ok(self.encode(g, inputs)?.states)
    }
}

/// Stack of multi-head self-attention blocks; positions are added at the input.
#[derive(Debug, Clone)]
pub struct SelfAttentionEncoder {
    pub blocks: Vec<SelfAttentionParams>,
}

impl SelfAttentionEncoder {
    pub fn new(b: &mut ParamBuilder, name: &str, d_model: usize, heads: usize, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("self-attention encoder needs at least one layer".into()));
        }
        b.scoped(name, |b| {
            let blocks = (0..layers)
                .map(|l| SelfAttentionParams::new(b, &format!("l{l}"), d_model, heads))
                .collect::<Result<Vec<_>>>()?;
            Ok(SelfAttentionEncoder { blocks })
        })
    }

    /// `x` is `[m × d_model]`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            h = multi_head_self_attend(g, h, block, i == 0)?.output;
        }
        Ok(h)
    }
}

impl SequenceEncoder for SelfAttentionEncoder {
    fn encode_sequence(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
        let x = g.tape.stack_rows(inputs)?;
        self.encode(g, x)
    }
}
