use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::{Component, LstmLm};
use crate::composite::{ActivationMode, CompositeModel};
use crate::error::{Error, Result};
use crate::vocab::{TokenSeq, Vocabulary};

/// Anything that assigns per-token log-probabilities to a sentence.
pub trait Scorer: Sync {
    /// `log p(w_t | w_<t)` for every token of `seq`, `</s>` included.
    fn token_log_probs(&self, seq: &TokenSeq) -> Result<Vec<f64>>;

    fn sentence_log_prob(&self, seq: &TokenSeq) -> Result<f64> {
        Ok(self.token_log_probs(seq)?.iter().sum())
    }
}

impl Scorer for LstmLm {
    fn token_log_probs(&self, seq: &TokenSeq) -> Result<Vec<f64>> {
        LstmLm::token_log_probs(self, seq)
    }
}

/// A component scored from its start state without activations.
impl Scorer for Component {
    fn token_log_probs(&self, seq: &TokenSeq) -> Result<Vec<f64>> {
        let mut state = self.start_state();
        let mut out = Vec::with_capacity(seq.len());
        for (prev, &target) in seq.inputs().zip(seq.ids()) {
            state = self.advance(&state, prev, false)?;
            out.push(self.log_prob(&state, target)?);
        }
        Ok(out)
    }
}

/// Inference mode: activations thresholded at 0.5.
impl Scorer for CompositeModel {
    fn token_log_probs(&self, seq: &TokenSeq) -> Result<Vec<f64>> {
        let (_, traces) = self.score_sequence(seq, &ActivationMode::Threshold(0.5))?;
        Ok(traces.iter().map(|t| t.log_p).collect())
    }
}

/// Sentence log-likelihoods in input order, computed in parallel.
pub fn sentence_log_probs<S: Scorer + ?Sized>(scorer: &S, corpus: &[TokenSeq]) -> Result<Vec<f64>> {
    corpus.par_iter().map(|s| scorer.sentence_log_prob(s)).collect()
}

/// `exp(−Σ log p / tokens)`, counting `</s>` but not `<s>`.
pub fn perplexity<S: Scorer + ?Sized>(scorer: &S, corpus: &[TokenSeq]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid("perplexity of an empty corpus"));
    }
    let lls = sentence_log_probs(scorer, corpus)?;
    let tokens: usize = corpus.iter().map(TokenSeq::len).sum();
    Ok(perplexity_from(lls.iter().sum(), tokens))
}

pub fn perplexity_from(total_log_prob: f64, tokens: usize) -> f64 {
    (-total_log_prob / tokens as f64).exp()
}

pub fn composite_perplexity(model: &CompositeModel, corpus: &[TokenSeq]) -> Result<f64> {
    perplexity(model, corpus)
}

/// One row of the composite-vs-default sentence comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub index: usize,
    pub sentence: String,
    pub ll_composite: f64,
    pub ll_default: f64,
}

impl ScatterRow {
    pub fn gap(&self) -> f64 {
        self.ll_composite - self.ll_default
    }
}

/// Per-sentence totals under both models. Rows with `|gap| < min_gap` are
/// dropped; with `max_len`, sentences longer than that many tokens are too.
pub fn loglik_compare<A: Scorer + ?Sized, B: Scorer + ?Sized>(
    composite: &A,
    default: &B,
    vocab: &Vocabulary,
    corpus: &[TokenSeq],
    min_gap: f64,
    max_len: Option<usize>,
) -> Result<Vec<ScatterRow>> {
    let keep: Vec<usize> = (0..corpus.len()).filter(|&i| max_len.is_none_or(|m| corpus[i].len() <= m)).collect();
    let rows = keep
        .par_iter()
        .map(|&i| {
            let seq = &corpus[i];
            Ok(ScatterRow {
                index: i,
                sentence: vocab.decode(seq)?,
                ll_composite: composite.sentence_log_prob(seq)?,
                ll_default: default.sentence_log_prob(seq)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().filter(|r| r.gap().abs() >= min_gap).collect())
}

pub fn write_scatter_tsv<W: Write>(mut w: W, rows: &[ScatterRow]) -> Result<()> {
    writeln!(w, "sentence\tll_composite\tll_default")?;
    for r in rows {
        writeln!(w, "{}\t{}\t{}", r.sentence, r.ll_composite, r.ll_default)?;
    }
    Ok(())
}
