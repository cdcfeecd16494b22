//! Components: stateful next-token distributions over the shared
//! vocabulary. Activating a component resets it to its start state and
//! replaces the previous token by `<s>`, so it begins a fresh span.

pub mod lstm;
pub mod wfst;

use std::path::Path;

pub use lstm::{train_lstm_lm, LmTrainConfig, LstmLm, LstmLmConfig, LstmState};
pub use wfst::{fst_build, FstBuildOptions, WfstComponent, WfstState};

use crate::error::{Error, Result};
use crate::neural::Checkpoint;
use crate::vocab::{TokenId, BOS_ID};

#[derive(Debug, Clone)]
pub enum Component {
    Wfst(WfstComponent),
    Lstm(LstmLm),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ComponentState {
    Wfst(WfstState),
    Lstm(LstmState),
}

impl Component {
    pub fn vocab_size(&self) -> usize {
        match self {
            Component::Wfst(w) => w.vocab_size(),
            Component::Lstm(m) => m.vocab_size(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Component::Wfst(_) => "wfst",
            Component::Lstm(_) => "lstm",
        }
    }

    pub fn start_state(&self) -> ComponentState {
        match self {
            Component::Wfst(w) => ComponentState::Wfst(w.start_state()),
            Component::Lstm(m) => ComponentState::Lstm(m.start_state()),
        }
    }

    /// Consumes `prev` (after a reset when `activate` is set).
    pub fn advance(&self, state: &ComponentState, prev: TokenId, activate: bool) -> Result<ComponentState> {
        if prev as usize >= self.vocab_size() {
            return Err(Error::TokenOutOfRange { id: prev as usize, size: self.vocab_size() });
        }
        match (self, state) {
            (Component::Wfst(w), ComponentState::Wfst(s)) => Ok(ComponentState::Wfst(if activate {
                w.advance(&w.start_state(), BOS_ID)
            } else {
                w.advance(s, prev)
            })),
            (Component::Lstm(m), ComponentState::Lstm(s)) => Ok(ComponentState::Lstm(m.advance(s, prev, activate)?)),
            _ => Err(Error::invalid("component state belongs to a different component kind")),
        }
    }

    /// `log p(token)` from a state that has consumed at least one input.
    pub fn log_prob(&self, state: &ComponentState, token: TokenId) -> Result<f64> {
        if token as usize >= self.vocab_size() {
            return Err(Error::TokenOutOfRange { id: token as usize, size: self.vocab_size() });
        }
        match (self, state) {
            (Component::Wfst(w), ComponentState::Wfst(s)) => Ok(w.log_prob(s, token)),
            (Component::Lstm(_), ComponentState::Lstm(s)) => s
                .log_probs()
                .map(|lp| lp[token as usize])
                .ok_or_else(|| Error::invalid("LSTM state has not consumed an input yet")),
            _ => Err(Error::invalid("component state belongs to a different component kind")),
        }
    }

    pub fn log_distribution(&self, state: &ComponentState) -> Result<Vec<f64>> {
        match (self, state) {
            (Component::Wfst(w), ComponentState::Wfst(s)) => Ok(w.log_distribution(s)),
            (Component::Lstm(_), ComponentState::Lstm(s)) => s
                .log_probs()
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::invalid("LSTM state has not consumed an input yet")),
            _ => Err(Error::invalid("component state belongs to a different component kind")),
        }
    }

    /// Advance and read the next-token log-distribution.
    pub fn step(&self, state: &ComponentState, prev: TokenId, activate: bool) -> Result<(ComponentState, Vec<f64>)> {
        let next = self.advance(state, prev, activate)?;
        let dist = self.log_distribution(&next)?;
        Ok((next, dist))
    }

    /// Serialized form used inside composite checkpoints.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match self {
            Component::Wfst(w) => Ok(w.to_bytes()),
            Component::Lstm(m) => {
                let mut bytes = Vec::new();
                m.to_checkpoint()?.write_to(&mut bytes)?;
                Ok(bytes)
            }
        }
    }

    /// Reads either a WFST file or an LSTM checkpoint, by magic bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(wfst::WFST_MAGIC) {
            Ok(Component::Wfst(WfstComponent::from_bytes(bytes)?))
        } else if bytes.starts_with(crate::neural::checkpoint::MAGIC) {
            Ok(Component::Lstm(LstmLm::from_checkpoint(&Checkpoint::read_from(bytes)?)?))
        } else {
            Err(Error::format("unrecognized component file"))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::graph::log_sum_exp;
    use crate::vocab::{Vocabulary, EOS_ID};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::from_subwords(["san_", "jose_", "fran", "cisco_", "x_"]).unwrap()
    }

    #[test]
    fn wfst_reset_and_step() {
        let v = vocab();
        let w = fst_build(&[("san jose".to_string(), 1.0)], &v, &FstBuildOptions::default()).unwrap();
        let c = Component::Wfst(w);
        let san = v.id("san_").unwrap();
        let jose = v.id("jose_").unwrap();
        let (s, d) = c.step(&c.start_state(), v.id("x_").unwrap(), true).unwrap();
        assert_eq!(d[san as usize], 0.0);
        let (_, d) = c.step(&s, san, false).unwrap();
        assert_eq!(d[jose as usize], 0.0);
        assert!(log_sum_exp(&d).abs() < 1e-9);
        // unmatched input: dead
        let (_, d) = c.step(&s, jose, false).unwrap();
        assert_eq!(d[EOS_ID as usize], 0.0);
        assert!(c.step(&s, 99, false).is_err());
    }

    #[test]
    fn activation_ignores_history() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m =
            LstmLm::new(LstmLmConfig { vocab_size: v.len(), width: 6, ..LstmLmConfig::default() }, &mut rng).unwrap();
        let w = fst_build(&[("san jose".to_string(), 1.0)], &v, &FstBuildOptions::default()).unwrap();
        for c in [Component::Lstm(m), Component::Wfst(w)] {
            let s = c.advance(&c.start_state(), 3, false).unwrap();
            let s = c.advance(&s, 4, false).unwrap();
            let a = c.step(&s, 5, true).unwrap().1;
            let b = c.step(&c.start_state(), 6, true).unwrap().1;
            assert_eq!(a, b);
            let back = Component::from_bytes(&c.to_bytes().unwrap()).unwrap();
            assert_eq!(back.step(&back.start_state(), 3, true).unwrap().1, a);
        }
    }

    #[test]
    fn mismatched_state_kind_is_an_error() {
        let v = vocab();
        let w = fst_build(&[("x".to_string(), 1.0)], &v, &FstBuildOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m =
            LstmLm::new(LstmLmConfig { vocab_size: v.len(), width: 4, ..LstmLmConfig::default() }, &mut rng).unwrap();
        let c = Component::Wfst(w);
        let s = Component::Lstm(m).start_state();
        assert!(c.advance(&s, 3, false).is_err());
    }
}
