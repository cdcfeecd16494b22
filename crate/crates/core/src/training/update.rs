//! One chunk of composite training: forward over a batch with sampled
//! activations, then either the likelihood loss (θ) or the policy-gradient
//! loss (ζ), followed by an Adam step on that partition only.

use std::sync::Arc;

use rand::Rng;

use super::chunk::ChunkBatch;
use super::teacher::{sample_activations, SentenceCache};
use crate::components::{Component, ComponentState};
use crate::composite::{CompositeModel, NetState};
use crate::error::{Error, Result};
use crate::neural::{Gradients, Graph, NodeId, OptimizerState, Partition, Tensor};
use crate::vocab::{TokenId, TokenSeq, BOS_ID, EOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Likelihood of the data, trains θ.
    Likelihood,
    /// REINFORCE on the activation policy, trains ζ.
    Reinforce,
}

impl LossKind {
    pub fn partition(self) -> Partition {
        match self {
            LossKind::Likelihood => Partition::Theta,
            LossKind::Reinforce => Partition::Zeta,
        }
    }
}

/// Recurrent state of every batch slot, carried across chunks.
#[derive(Debug, Clone)]
pub struct BatchState {
    pub net: NetState,
    /// Entity component states `[slot][i - 1]`.
    pub components: Vec<Vec<ComponentState>>,
}

impl BatchState {
    pub fn new(model: &CompositeModel, rows: usize) -> Self {
        BatchState { net: model.start_net_state(rows), components: (0..rows).map(|_| entity_starts(model)).collect() }
    }
}

fn entity_starts(model: &CompositeModel) -> Vec<ComponentState> {
    model.components()[1..].iter().map(Component::start_state).collect()
}

/// Statistics of one chunk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChunkStats {
    /// Value of the differentiated loss.
    pub loss: f64,
    /// Mean negative log-likelihood over the chunk's tokens.
    pub nll: f64,
    /// Mean reward `log p − log p^0` per token.
    pub reward: f64,
    pub tokens: usize,
    /// Activations sampled, and boundary decisions made.
    pub activations: usize,
    pub decisions: usize,
}

/// Rewards `R` and chunk-local returns `G_t = Σ_{τ ≥ t} R_τ` for one row.
pub fn chunk_returns(rewards: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        g[t] = acc;
    }
    g
}

struct PolicyRecord {
    pi: NodeId,
    acts: Vec<bool>,
    /// Per row: valid token at a word boundary.
    live: Vec<bool>,
}

/// Forward pass over one chunk and the loss gradient for `kind`'s partition.
/// Updates `state` to the end of the chunk.
#[allow(clippy::too_many_arguments)]
pub fn chunk_gradients<R: Rng>(
    model: &CompositeModel,
    corpus: &[TokenSeq],
    caches: &[SentenceCache],
    batch: &ChunkBatch,
    state: &mut BatchState,
    lambda: f64,
    kind: LossKind,
    rng: &mut R,
) -> Result<(Gradients, ChunkStats)> {
    let rows = state.net.rows();
    if batch.slots.len() != rows {
        return Err(Error::shape("batch width differs from state rows"));
    }
    let n = model.num_entity_components();
    let fresh: Vec<usize> = (0..rows).filter(|&r| batch.slots[r].is_none_or(|s| s.fresh)).collect();
    state.net.reset_rows(&fresh, n);
    for &r in &fresh {
        state.components[r] = entity_starts(model);
    }

    let part = kind.partition();
    let params = model.params();
    let g = Graph::with_trainable(params, |id| params.partition(id) == part);
    let mut u = model.unroll(g, &state.net);
    let steps = batch.steps();
    let total = batch.slots.iter().flatten().map(|s| s.len()).sum::<usize>();
    let mut stats = ChunkStats { tokens: total, ..ChunkStats::default() };
    let mut ll_terms: Vec<NodeId> = Vec::new();
    let mut rewards = vec![vec![0.0; steps]; rows];
    let mut policies: Vec<Option<PolicyRecord>> = Vec::with_capacity(steps);

    for t in 0..steps {
        let mut prev = vec![BOS_ID; rows];
        let mut target: Vec<Option<(usize, usize, TokenId)>> = vec![None; rows];
        for (r, slot) in batch.slots.iter().enumerate() {
            if let Some(s) = slot.filter(|s| t < s.len()) {
                let p = s.start + t;
                prev[r] = if p == 0 { BOS_ID } else { corpus[s.seq].ids()[p - 1] };
                target[r] = Some((s.seq, p, corpus[s.seq].ids()[p]));
            }
        }
        let policy = u.policy(&prev, true, rng)?;
        let mut acts = vec![false; rows * n];
        let mut live = vec![false; rows];
        for r in 0..rows {
            if let Some((seq, p, _)) = target[r] {
                let b = &caches[seq].teacher[p];
                let on_boundary = policy.boundary[r];
                let bits = sample_activations(&policy.pi[r * n..(r + 1) * n], b, lambda, on_boundary, rng);
                acts[r * n..(r + 1) * n].copy_from_slice(&bits);
                live[r] = on_boundary && n > 0;
                if live[r] {
                    stats.decisions += n;
                    stats.activations += bits.iter().filter(|&&a| a).count();
                }
            }
        }
        let mut lp = vec![0.0; rows * (n + 1)];
        let mut eos = vec![0.0; rows * (n + 1)];
        for r in 0..rows {
            let Some((seq, p, tok)) = target[r] else { continue };
            let base = r * (n + 1);
            lp[base] = caches[seq].default_lp[p];
            eos[base] = caches[seq].default_eos[p];
            for i in 0..n {
                let c = &model.components()[i + 1];
                let s = &state.components[r][i];
                let next = c.advance(s, prev[r], acts[r * n + i])?;
                lp[base + 1 + i] = c.log_prob(&next, tok)?;
                eos[base + 1 + i] = c.log_prob(&next, EOS_ID)?;
                state.components[r][i] = next;
            }
        }
        let att = u.attention(&acts, &eos, true, rng)?;
        let mixed = u.mix(att.log_alpha, &lp)?;
        let mut weights = vec![0.0; rows];
        for r in 0..rows {
            if let Some((seq, p, _)) = target[r] {
                let v = u.g.value(mixed).get(r, 0);
                stats.nll -= v;
                rewards[r][t] = v - caches[seq].default_lp[p];
                stats.reward += rewards[r][t];
                weights[r] = -1.0 / total as f64;
            }
        }
        if kind == LossKind::Likelihood {
            ll_terms.push(u.g.dot_const(mixed, Arc::new(Tensor::column(weights)))?);
        }
        policies.push(policy.pi_node.map(|pi| PolicyRecord { pi, acts, live }));
    }
    if total > 0 {
        stats.nll /= total as f64;
        stats.reward /= total as f64;
    }
    if !stats.nll.is_finite() {
        return Err(Error::NonFinite(format!("chunk negative log-likelihood {}", stats.nll)));
    }

    let terms = match kind {
        LossKind::Likelihood => ll_terms,
        LossKind::Reinforce => {
            let returns: Vec<Vec<f64>> = rewards.iter().map(|r| chunk_returns(r)).collect();
            let mut terms = Vec::new();
            for (t, rec) in policies.iter().enumerate() {
                let Some(rec) = rec else { continue };
                // loss = −Σ G_t log π(act): minimizing it raises the
                // probability of decisions followed by higher reward
                let mut on = vec![0.0; rows * n];
                let mut off = vec![0.0; rows * n];
                for r in 0..rows {
                    if !rec.live[r] {
                        continue;
                    }
                    let coef = -returns[r][t] / total as f64;
                    for i in 0..n {
                        let k = r * n + i;
                        if rec.acts[k] {
                            on[k] = coef;
                        } else {
                            off[k] = coef;
                        }
                    }
                }
                let log_pi = u.g.log(rec.pi);
                let q = u.g.scale(rec.pi, -1.0);
                let q = u.g.add_scalar(q, 1.0);
                let log_q = u.g.log(q);
                terms.push(u.g.dot_const(log_pi, Arc::new(Tensor::column(on)))?);
                terms.push(u.g.dot_const(log_q, Arc::new(Tensor::column(off)))?);
            }
            terms
        }
    };
    let loss = match terms.split_first() {
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = u.g.add(acc, t)?;
            }
            acc
        }
        None => u.g.constant(Tensor::scalar(0.0)),
    };
    stats.loss = u.g.value(loss).item();
    let grads = u.g.backward(loss, params)?;
    state.net = u.state();
    Ok((grads, stats))
}

/// Likelihood step: Adam on θ only. Returns the chunk statistics (mean NLL).
#[allow(clippy::too_many_arguments)]
pub fn ll_update<R: Rng>(
    model: &mut CompositeModel,
    opt: &mut OptimizerState,
    corpus: &[TokenSeq],
    caches: &[SentenceCache],
    batch: &ChunkBatch,
    state: &mut BatchState,
    lambda: f64,
    clip: f64,
    rng: &mut R,
) -> Result<ChunkStats> {
    apply(model, opt, corpus, caches, batch, state, lambda, clip, LossKind::Likelihood, rng)
}

/// Policy-gradient step: Adam on ζ only.
#[allow(clippy::too_many_arguments)]
pub fn rl_update<R: Rng>(
    model: &mut CompositeModel,
    opt: &mut OptimizerState,
    corpus: &[TokenSeq],
    caches: &[SentenceCache],
    batch: &ChunkBatch,
    state: &mut BatchState,
    lambda: f64,
    clip: f64,
    rng: &mut R,
) -> Result<ChunkStats> {
    apply(model, opt, corpus, caches, batch, state, lambda, clip, LossKind::Reinforce, rng)
}

#[allow(clippy::too_many_arguments)]
fn apply<R: Rng>(
    model: &mut CompositeModel,
    opt: &mut OptimizerState,
    corpus: &[TokenSeq],
    caches: &[SentenceCache],
    batch: &ChunkBatch,
    state: &mut BatchState,
    lambda: f64,
    clip: f64,
    kind: LossKind,
    rng: &mut R,
) -> Result<ChunkStats> {
    let (mut grads, stats) = chunk_gradients(model, corpus, caches, batch, state, lambda, kind, rng)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!("{kind:?} gradient")));
    }
    grads.clip_global_norm(clip);
    opt.update(model.params_mut(), &grads)?;
    Ok(stats)
}
