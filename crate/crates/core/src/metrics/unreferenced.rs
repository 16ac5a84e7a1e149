use rand::Rng as _;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::EmbeddingProvider;
use crate::corpus::Dialog;
use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed, rng_for};
use crate::numerics::{dot, norm, sigmoid, Graph, ParamBuilder, ParamId, ParamStore, Tensor, Var};
use crate::training::{optimizer_step, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            hidden: 8,
            epochs: 60,
            batch_size: 32,
            lr: 1e-3,
            margin: 0.5,
            seed: 30,
        }
    }
}

/// Reference-free (context, response) scorer: mean-pooled, unit-normalized
/// context and response vectors plus their inner product feed a
/// one-hidden-layer network whose output is squashed to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnreferencedScorer {
    pub config: ScorerConfig,
    pub dim: usize,
    pub params: ParamStore,
}

fn pooled<'a>(tokens: impl Iterator<Item = &'a String>, p: &dyn EmbeddingProvider) -> Vec<f64> {
    let mut out = vec![0.0; p.dim()];
    let mut n = 0usize;
    for t in tokens {
        out.iter_mut().zip(p.vector(t)).for_each(|(o, v)| *o += v);
        n += 1;
    }
    let len = norm(&out);
    if n > 0 && len > 0.0 {
        out.iter_mut().for_each(|o| *o /= len);
    }
    out
}

/// Feature vector `[c; r; c·r]` of a context and a response.
fn features(context: &[Vec<String>], response: &[String], p: &dyn EmbeddingProvider) -> Vec<f64> {
    let c = pooled(context.iter().flatten(), p);
    let r = pooled(response.iter(), p);
    let sim = dot(&c, &r);
    [c, r, vec![sim]].concat()
}

fn feature_width(dim: usize) -> usize {
    2 * dim + 1
}

fn dialog_parts(d: &Dialog) -> (Vec<Vec<String>>, Vec<String>) {
    (d.context.iter().map(|u| u.tokens.clone()).collect(), d.response.tokens.clone())
}

impl UnreferencedScorer {
    /// Freshly initialized, untrained scorer.
    pub fn new(dim: usize, config: ScorerConfig) -> Result<Self> {
        if dim == 0 || config.hidden == 0 || config.batch_size == 0 {
            return Err(Error::Config("scorer sizes must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut b = ParamBuilder::new(&mut params, derive_seed(config.seed, "unreferenced"));
        b.weight("w1", &[feature_width(dim), config.hidden])?;
        b.zeros("b1", &[config.hidden])?;
        b.weight("w2", &[config.hidden, 1])?;
        b.zeros("b2", &[1])?;
        Ok(UnreferencedScorer { config, dim, params })
    }

    fn id(&self, name: &str) -> ParamId {
        self.params.id(name).expect("scorer parameter exists")
    }

    /// Raw (pre-squash) scores of the feature rows in `x`.
    fn raw(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w1, b1) = (g.param(self.id("w1")), g.param(self.id("b1")));
        let (w2, b2) = (g.param(self.id("w2")), g.param(self.id("b2")));
        let h = g.tape.matmul(x, w1)?;
        let h = g.tape.add(h, b1)?;
        let h = g.tape.tanh(h);
        let s = g.tape.matmul(h, w2)?;
        g.tape.add(s, b2)
    }

    /// Score of `response` given `context`, in `[0, 1]`.
    pub fn score(&self, context: &[Vec<String>], response: &[String], p: &dyn EmbeddingProvider) -> f64 {
        let f = features(context, response, p);
        let mut g = Graph::new(&self.params, false, 0);
        let x = g.tape.leaf(&Tensor::matrix(1, f.len(), f).expect("feature row"));
        let s = self.raw(&mut g, x).expect("scorer shapes are fixed at construction");
        sigmoid(g.tape.value(s)[0])
    }

    pub fn score_dialog(&self, dialog: &Dialog, p: &dyn EmbeddingProvider) -> f64 {
        let (c, r) = dialog_parts(dialog);
        self.score(&c, &r, p)
    }

    /// Trains on true pairs against negatives that pair each context with a
    /// uniformly drawn response of another dialog (one negative per
    /// positive, redrawn every epoch), minimizing a margin ranking loss.
    pub fn train(dialogs: &[Dialog], p: &dyn EmbeddingProvider, config: ScorerConfig) -> Result<Self> {
        if dialogs.len() < 2 {
            return Err(Error::Validation("negative sampling needs at least two dialogs".into()));
        }
        let mut scorer = UnreferencedScorer::new(p.dim(), config.clone())?;
        let parts: Vec<_> = dialogs.iter().map(dialog_parts).collect();
        let positives: Vec<Vec<f64>> = parts.iter().map(|(c, r)| features(c, r, p)).collect();
        let width = feature_width(p.dim());
        let mut adam = AdamState::default();
        let mut rng = rng_for(config.seed, "unreferenced/negatives");
        let mut order: Vec<usize> = (0..dialogs.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let mut pos = Vec::with_capacity(chunk.len() * width);
                let mut neg = Vec::with_capacity(chunk.len() * width);
                for &i in chunk {
                    let mut j = rng.random_range(0..dialogs.len() - 1);
                    if j >= i {
                        j += 1;
                    }
                    pos.extend_from_slice(&positives[i]);
                    neg.extend(features(&parts[i].0, &parts[j].1, p));
                }
                let grads = {
                    let mut g = Graph::new(&scorer.params, true, 0);
                    let xp = g.tape.leaf(&Tensor::matrix(chunk.len(), width, pos)?);
                    let xn = g.tape.leaf(&Tensor::matrix(chunk.len(), width, neg)?);
                    let sp = scorer.raw(&mut g, xp)?;
                    let sn = scorer.raw(&mut g, xn)?;
                    let gap = g.tape.sub(sn, sp)?;
                    let hinge = g.tape.affine(gap, 1.0, config.margin);
                    let hinge = g.tape.relu(hinge);
                    let loss = g.tape.mean(hinge);
                    g.backward(loss)?;
                    g.param_grads()
                };
                scorer.params.zero_grads();
                for id in scorer.params.ids().collect::<Vec<_>>() {
                    let n = scorer.params.get(id).numel();
                    scorer.params.get_mut(id).accumulate_grad(&vec![0.0; n])?;
                }
                scorer.params.accumulate(&grads)?;
                optimizer_step(&mut scorer.params, &mut adam, config.lr, 0.0)?;
            }
        }
        scorer.params.zero_grads();
        Ok(scorer)
    }
}

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half.
pub fn auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Validation("AUC needs positive and negative scores".into()));
    }
    let mut wins = 0.0;
    for &a in positives {
        for &b in negatives {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (positives.len() * negatives.len()) as f64)
}
