//! The lookahead teacher: at a word boundary, compare how well a freshly
//! activated component and the default model explain the next word.

use rand::Rng;
use rayon::prelude::*;

use crate::components::{Component, LstmLm};
use crate::composite::CompositeModel;
use crate::error::{Error, Result};
use crate::neural::graph::sigmoid;
use crate::vocab::{TokenSeq, Vocabulary, EOS_ID};

/// `log r^i_t` for one component: the summed log-likelihood ratio of the next
/// word's subwords, with the component activated at `t`. `default_lp[k]` is
/// the default model's log-probability of token `k` of `seq`.
pub fn teacher_log_ratio(
    component: &Component,
    vocab: &Vocabulary,
    seq: &TokenSeq,
    default_lp: &[f64],
    t: usize,
) -> Result<f64> {
    let ids = seq.ids();
    if t >= ids.len() || default_lp.len() != ids.len() {
        return Err(Error::invalid(format!("position {t} outside sequence")));
    }
    let prev = seq.inputs().nth(t).expect("t < len");
    if !vocab.is_word_boundary(prev) {
        return Err(Error::invalid(format!("position {t} is not at a word boundary")));
    }
    let mut state = component.advance(&component.start_state(), prev, true)?;
    let mut log_r = 0.0;
    for k in t..ids.len() {
        log_r += component.log_prob(&state, ids[k])? - default_lp[k];
        if vocab.is_word_boundary(ids[k]) {
            break;
        }
        state = component.advance(&state, ids[k], false)?;
    }
    Ok(log_r)
}

/// Teacher activation probability `b = r / (1 + r)` for every entity
/// component at boundary position `t`.
pub fn teacher_policy(
    components: &[Component],
    vocab: &Vocabulary,
    seq: &TokenSeq,
    default_lp: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    components.iter().map(|c| teacher_log_ratio(c, vocab, seq, default_lp, t).map(sigmoid)).collect()
}

/// Independent Bernoulli draws from `λ b + (1 − λ) π`. Off word boundaries
/// every bit is 0 and no randomness is consumed.
pub fn sample_activations<R: Rng>(pi: &[f64], b: &[f64], lambda: f64, boundary: bool, rng: &mut R) -> Vec<bool> {
    if !boundary {
        return vec![false; pi.len()];
    }
    pi.iter()
        .zip(b)
        .map(|(&p, &q)| {
            let mixed = lambda * q + (1.0 - lambda) * p;
            rng.random::<f64>() < mixed
        })
        .collect()
}

/// Per-sentence quantities that do not depend on sampled activations.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceCache {
    /// Default model `log p^0(w_t)`.
    pub default_lp: Vec<f64>,
    /// Default model `log p^0(</s>)` at each step.
    pub default_eos: Vec<f64>,
    /// Teacher probabilities `[t][i]` for entity components; 0 off boundaries.
    pub teacher: Vec<Vec<f64>>,
}

pub fn default_scores(lm: &LstmLm, seq: &TokenSeq) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut state = lm.start_state();
    let mut lp = Vec::with_capacity(seq.len());
    let mut eos = Vec::with_capacity(seq.len());
    for (prev, &target) in seq.inputs().zip(seq.ids()) {
        state = lm.advance(&state, prev, false)?;
        let d = state.log_probs().expect("stepped");
        lp.push(d[target as usize]);
        eos.push(d[EOS_ID as usize]);
    }
    Ok((lp, eos))
}

/// Computes caches for a corpus in parallel; order follows the input.
pub fn precompute(model: &CompositeModel, corpus: &[TokenSeq]) -> Result<Vec<SentenceCache>> {
    let vocab = model.vocab();
    let entities = &model.components()[1..];
    corpus
        .par_iter()
        .map(|seq| {
            let (default_lp, default_eos) = default_scores(model.default_model(), seq)?;
            let teacher = seq
                .inputs()
                .enumerate()
                .map(|(t, prev)| {
                    if vocab.is_word_boundary(prev) {
                        teacher_policy(entities, vocab, seq, &default_lp, t)
                    } else {
                        Ok(vec![0.0; entities.len()])
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SentenceCache { default_lp, default_eos, teacher })
        })
        .collect()
}
