//! Additive attention over the buffer and the copy-augmented terminal
//! distribution.
//!
//! One attention is computed per parser state. Its weights give the context
//! vector fed to the feed-forward layer, and its raw scores are appended to
//! the generation logits so that a single softmax covers both vocabulary
//! entries and input positions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Tensor};

/// `score_i = v . tanh(Wq q + Wb b_i + bias)`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wb: ParamId,
    pub bias: ParamId,
    pub v: ParamId,
}

impl AttentionParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        query_dim: usize,
        buffer_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AttentionParams {
            wq: store.add(
                format!("{prefix}.wq"),
                Tensor::xavier(hidden, query_dim, rng),
            )?,
            wb: store.add(
                format!("{prefix}.wb"),
                Tensor::xavier(hidden, buffer_dim, rng),
            )?,
            bias: store.add(format!("{prefix}.b"), Tensor::zeros(&[hidden]))?,
            v: store.add(
                format!("{prefix}.v"),
                Tensor::xavier(1, hidden, rng).into_vector(),
            )?,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.wq, self.wb, self.bias, self.v]
    }

    /// Buffer-side half of the scores; depends only on the sentence, so it is
    /// computed once per parse.
    pub fn keys(&self, g: &mut Graph<'_>, buffer: &[NodeId]) -> Result<Vec<NodeId>> {
        let wb = g.param(self.wb);
        let b = g.param(self.bias);
        buffer.iter().map(|&x| g.affine(x, wb, b)).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionResult {
    pub scores: NodeId,
    pub weights: NodeId,
    pub context: NodeId,
}

/// Attends from `query` over `buffer`; `keys` come from
/// [`AttentionParams::keys`] on the same buffer.
pub fn attend(
    g: &mut Graph<'_>,
    p: &AttentionParams,
    query: NodeId,
    keys: &[NodeId],
    buffer: &[NodeId],
) -> Result<AttentionResult> {
    if buffer.is_empty() {
        return Err(Error::Empty("attention buffer"));
    }
    if keys.len() != buffer.len() {
        return Err(Error::shape(
            "attend",
            format!("{} keys for {} buffer states", keys.len(), buffer.len()),
        ));
    }
    let wq = g.param(p.wq);
    let q = g.matvec(wq, query)?;
    let v = g.param(p.v);
    let scores = g.additive_scores(q, keys, v)?;
    let weights = g.softmax(scores)?;
    let context = g.weighted_sum(weights, buffer)?;
    Ok(AttentionResult {
        scores,
        weights,
        context,
    })
}

/// Log-probabilities over `terminals ++ positions`. Without copy scores the
/// result covers the generation block only.
pub fn ter_log_distribution(
    g: &mut Graph<'_>,
    gen_logits: NodeId,
    copy_scores: Option<NodeId>,
) -> Result<NodeId> {
    match copy_scores {
        Some(s) if g.value(gen_logits).is_empty() => g.log_softmax(s),
        Some(s) => {
            let joint = g.concat(&[gen_logits, s])?;
            g.log_softmax(joint)
        }
        None => g.log_softmax(gen_logits),
    }
}

/// Probability vector of length `n_terminals + sentence_len`; the position
/// block is exactly zero when copy is disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct TerDistribution {
    pub probs: Vec<f64>,
    pub n_terminals: usize,
}

impl TerDistribution {
    pub fn from_log(log_probs: &[f64], n_terminals: usize, sentence_len: usize) -> Result<Self> {
        let copy = log_probs.len() == n_terminals + sentence_len;
        if !copy && log_probs.len() != n_terminals {
            return Err(Error::shape(
                "ter_distribution",
                format!(
                    "{} log-probs for {n_terminals} terminals and {sentence_len} positions",
                    log_probs.len()
                ),
            ));
        }
        let mut probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        probs.resize(n_terminals + sentence_len, 0.0);
        Ok(TerDistribution { probs, n_terminals })
    }

    pub fn generation(&self) -> &[f64] {
        &self.probs[..self.n_terminals]
    }

    pub fn positions(&self) -> &[f64] {
        &self.probs[self.n_terminals..]
    }
}

/// Entries of the joint vector that produce `leaf`: its vocabulary index
/// (when generatable) and every matching input position (when copying).
pub fn ter_targets(
    leaf: &str,
    terminal_index: Option<usize>,
    n_terminals: usize,
    sentence: &[String],
    copy: bool,
) -> Vec<usize> {
    let mut idx: Vec<usize> = terminal_index.into_iter().collect();
    if copy {
        idx.extend(
            sentence
                .iter()
                .enumerate()
                .filter(|(_, w)| *w == leaf)
                .map(|(i, _)| n_terminals + i),
        );
    }
    idx
}

/// `-log(p_gen(leaf) + sum_i p_copy(i))`, marginalising over every way of
/// producing `leaf`.
pub fn ter_nll(
    g: &mut Graph<'_>,
    log_dist: NodeId,
    leaf: &str,
    terminal_index: Option<usize>,
    n_terminals: usize,
    sentence: &[String],
) -> Result<NodeId> {
    let copy = g.value(log_dist).len() > n_terminals;
    let idx = ter_targets(leaf, terminal_index, n_terminals, sentence, copy);
    if idx.is_empty() {
        return Err(Error::Uncopyable(leaf.to_string()));
    }
    let lse = g.log_sum_exp_at(log_dist, &idx)?;
    Ok(g.scale(lse, -1.0))
}
