//! LSTM language model: the default model, and also the family used for
//! neural entity components.
//!
//! Architecture: embedding table, a stack of LSTM layers of the same width,
//! a skip connection adding the input embedding to the top layer output, and
//! a softmax projection over the vocabulary.

use std::path::Path;
use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::layers::{dropout, Affine, LstmLayer, INIT_SCALE};
use crate::neural::{AdamConfig, Checkpoint, Graph, NodeId, OptimizerState, ParamId, ParameterSet, Partition, Tensor};
use crate::training::chunk::ChunkStream;
use crate::vocab::{TokenId, TokenSeq, Vocabulary, BOS_ID, EOS_ID, UNK_ID};

pub const LM_CHECKPOINT_KIND: &str = "lstm_lm";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmLmConfig {
    pub vocab_size: usize,
    /// Embedding width and LSTM width (equal, so the skip connection adds).
    pub width: usize,
    pub layers: usize,
    pub dropout: f64,
    pub skip: bool,
}

impl Default for LstmLmConfig {
    fn default() -> Self {
        LstmLmConfig { vocab_size: 0, width: 300, layers: 2, dropout: 0.2, skip: true }
    }
}

#[derive(Debug, Clone)]
pub struct LstmLm {
    config: LstmLmConfig,
    params: ParameterSet,
    embedding: ParamId,
    layers: Vec<LstmLayer>,
    output: Affine,
}

/// Per-layer recurrent state inside a graph.
#[derive(Debug, Clone)]
pub struct LstmGraphState {
    pub h: Vec<NodeId>,
    pub c: Vec<NodeId>,
}

/// Inference state for one sequence: per-layer `h`, `c` (each `1 x width`)
/// and the distribution produced by the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Arc<Tensor>>,
    pub c: Vec<Arc<Tensor>>,
    log_probs: Option<Arc<Vec<f64>>>,
}

impl LstmState {
    /// Next-token log-distribution, once at least one input has been consumed.
    pub fn log_probs(&self) -> Option<&[f64]> {
        self.log_probs.as_deref().map(Vec::as_slice)
    }
}

impl LstmLm {
    pub fn new<R: Rng>(config: LstmLmConfig, rng: &mut R) -> Result<Self> {
        if config.vocab_size <= UNK_ID as usize || config.width == 0 || config.layers == 0 {
            return Err(Error::invalid(format!("bad LM config {config:?}")));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::invalid(format!("dropout {} not in [0, 1)", config.dropout)));
        }
        let mut params = ParameterSet::new();
        let p = Partition::Theta;
        let embedding = params.add_uniform("embedding", config.vocab_size, config.width, INIT_SCALE, p, rng);
        let layers = (0..config.layers)
            .map(|l| LstmLayer::new(&mut params, &format!("lstm{l}"), config.width, config.width, p, rng))
            .collect();
        let output = Affine::new(&mut params, "output", config.width, config.vocab_size, p, rng);
        Ok(LstmLm { config, params, embedding, layers, output })
    }

    fn bind(config: LstmLmConfig, params: ParameterSet) -> Result<Self> {
        let embedding = params.id("embedding").ok_or_else(|| Error::format("missing parameter embedding"))?;
        let e = params.get(embedding);
        if e.rows() != config.vocab_size || e.cols() != config.width {
            return Err(Error::format("embedding shape does not match config"));
        }
        let layers =
            (0..config.layers).map(|l| LstmLayer::bind(&params, &format!("lstm{l}"))).collect::<Result<Vec<_>>>()?;
        if layers.iter().any(|l| l.input != config.width || l.hidden != config.width) {
            return Err(Error::format("LSTM layer shape does not match config"));
        }
        let output = Affine::bind(&params, "output")?;
        Ok(LstmLm { config, params, embedding, layers, output })
    }

    pub fn config(&self) -> &LstmLmConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// The input embedding table `[V, width]`.
    pub fn embedding(&self) -> Arc<Tensor> {
        self.params.shared(self.embedding)
    }

    pub fn zero_graph_state(&self, g: &mut Graph, rows: usize) -> LstmGraphState {
        let z = Arc::new(Tensor::zeros(rows, self.config.width));
        let h = (0..self.config.layers).map(|_| g.constant_shared(Arc::clone(&z))).collect();
        let c = (0..self.config.layers).map(|_| g.constant_shared(Arc::clone(&z))).collect();
        LstmGraphState { h, c }
    }

    /// One step over a batch of input tokens; returns the new state and the
    /// `[B, V]` next-token log-probabilities.
    pub fn forward_step<R: Rng>(
        &self,
        g: &mut Graph,
        inputs: &[TokenId],
        state: &LstmGraphState,
        training: bool,
        rng: &mut R,
    ) -> Result<(LstmGraphState, NodeId)> {
        for &t in inputs {
            if t as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange { id: t as usize, size: self.config.vocab_size });
            }
        }
        let rate = self.config.dropout;
        let table = g.param(&self.params, self.embedding);
        let emb = g.gather_rows(table, inputs.iter().map(|&t| t as usize).collect())?;
        let mut x = emb;
        let mut next =
            LstmGraphState { h: Vec::with_capacity(self.layers.len()), c: Vec::with_capacity(self.layers.len()) };
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                x = dropout(g, x, rate, training, rng)?;
            }
            let (h, c) = layer.step(g, &self.params, x, state.h[l], state.c[l])?;
            next.h.push(h);
            next.c.push(c);
            x = h;
        }
        let mut out = dropout(g, x, rate, training, rng)?;
        if self.config.skip {
            out = g.add(out, emb)?;
        }
        let logits = self.output.forward(g, &self.params, out)?;
        Ok((next, g.log_softmax(logits)))
    }

    pub fn start_state(&self) -> LstmState {
        let z = Arc::new(Tensor::zeros(1, self.config.width));
        LstmState { h: vec![Arc::clone(&z); self.config.layers], c: vec![z; self.config.layers], log_probs: None }
    }

    /// Consumes `prev`; with `activate`, first resets to the start state and
    /// replaces `prev` by `<s>`.
    pub fn advance(&self, state: &LstmState, prev: TokenId, activate: bool) -> Result<LstmState> {
        let start;
        let (state, prev) = if activate {
            start = self.start_state();
            (&start, BOS_ID)
        } else {
            (state, prev)
        };
        let mut g = Graph::new();
        let gs = LstmGraphState {
            h: state.h.iter().map(|t| g.constant_shared(Arc::clone(t))).collect(),
            c: state.c.iter().map(|t| g.constant_shared(Arc::clone(t))).collect(),
        };
        // inference never draws from the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (next, logp) = self.forward_step(&mut g, &[prev], &gs, false, &mut rng)?;
        Ok(LstmState {
            h: next.h.iter().map(|&n| g.shared_value(n)).collect(),
            c: next.c.iter().map(|&n| g.shared_value(n)).collect(),
            log_probs: Some(Arc::new(g.value(logp).data().to_vec())),
        })
    }

    /// Per-token `log p(w_t | w_<t)` over a whole sequence, `</s>` included.
    pub fn token_log_probs(&self, seq: &TokenSeq) -> Result<Vec<f64>> {
        let mut state = self.start_state();
        let mut out = Vec::with_capacity(seq.len());
        for (prev, &target) in seq.inputs().zip(seq.ids()) {
            state = self.advance(&state, prev, false)?;
            out.push(state.log_probs().expect("stepped")[target as usize]);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": LM_CHECKPOINT_KIND,
            "config": self.config,
        }))?;
        ck.push_params("", &self.params);
        Ok(ck)
    }

    /// Reads the model from tensors named `<prefix><param>` with the given
    /// configuration.
    pub fn from_tensors<'a>(
        config: LstmLmConfig,
        tensors: impl Iterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = LstmLm::new(config, &mut rng)?;
        let mut found = 0;
        let mut params = model.params.clone();
        for (name, t) in tensors {
            let id = params.id(name).ok_or_else(|| Error::format(format!("unexpected tensor {name}")))?;
            if !params.get(id).same_shape(t) {
                return Err(Error::format(format!("tensor {name} has wrong shape")));
            }
            *params.get_mut(id) = t.clone();
            found += 1;
        }
        if found != params.len() {
            return Err(Error::format(format!("checkpoint has {found} of {} LM tensors", params.len())));
        }
        model = LstmLm::bind(config, params)?;
        Ok(model)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some(LM_CHECKPOINT_KIND) {
            return Err(Error::format("not an LSTM LM checkpoint"));
        }
        let config: LstmLmConfig = serde_json::from_value(ck.meta["config"].clone())?;
        Self::from_tensors(config, ck.tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmTrainConfig {
    /// Full passes over the corpus.
    pub epochs: usize,
    pub batch_size: usize,
    pub chunk_size: usize,
    pub adam: AdamConfig,
    pub clip: f64,
    pub seed: u64,
    /// Train as an entity component: mix in random-token sequences labelled
    /// `</s>` so the model learns to end spans it cannot explain.
    pub component_mode: bool,
    /// Fraction of batches replaced by random-sequence batches.
    pub augment_ratio: f64,
    pub augment_max_len: usize,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            epochs: 10,
            batch_size: 32,
            chunk_size: 16,
            adam: AdamConfig::default(),
            clip: 5.0,
            seed: 1,
            component_mode: false,
            augment_ratio: 0.05,
            augment_max_len: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LmTrainReport {
    pub updates: u64,
    /// Mean per-token training NLL for each epoch (corpus batches only).
    pub epoch_nll: Vec<f64>,
}

/// One row of a training chunk: input token, target token, loss weight.
type Position = (TokenId, TokenId, f64);

/// Cross-entropy training with truncated backpropagation over chunks.
pub fn train_lstm_lm(
    corpus: &[TokenSeq],
    vocab: &Vocabulary,
    model_config: LstmLmConfig,
    config: &LmTrainConfig,
) -> Result<(LstmLm, LmTrainReport)> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }
    let model_config = LstmLmConfig { vocab_size: vocab.len(), ..model_config };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = LstmLm::new(model_config, &mut rng)?;
    let report = continue_training(&mut model, corpus, config, &mut rng)?;
    Ok((model, report))
}

/// Continues training an existing model in place.
pub fn continue_training(
    model: &mut LstmLm,
    corpus: &[TokenSeq],
    config: &LmTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LmTrainReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }
    let v = model.vocab_size();
    if corpus.iter().flat_map(|s| s.ids()).any(|&t| t as usize >= v) {
        return Err(Error::invalid("corpus token outside model vocabulary"));
    }
    let inputs: Vec<Vec<TokenId>> = corpus.iter().map(|s| s.inputs().collect()).collect();
    let b = config.batch_size;
    let mut opt = OptimizerState::new(config.adam, &model.params);
    let mut report = LmTrainReport::default();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(rng);
        let mut stream = ChunkStream::new(corpus.iter().map(TokenSeq::len).collect(), b, config.chunk_size);
        stream.enqueue(order);
        let mut state: Option<(Vec<Tensor>, Vec<Tensor>)> = None;
        let (mut nll, mut count) = (0.0, 0.0);
        while let Some(batch) = stream.next_batch() {
            if config.component_mode && rng.random::<f64>() < config.augment_ratio {
                let rows = random_batch(b, config.augment_max_len, v, rng);
                train_chunk(model, &mut opt, &rows, None, config.clip, rng)?;
            }
            let steps = batch.steps();
            let mut rows = Vec::with_capacity(b);
            let mut fresh = Vec::with_capacity(b);
            for slot in &batch.slots {
                let mut row: Vec<Position> = Vec::with_capacity(steps);
                if let Some(s) = slot {
                    for p in s.start..s.end {
                        row.push((inputs[s.seq][p], corpus[s.seq].ids()[p], 1.0));
                    }
                }
                row.resize(steps, (BOS_ID, EOS_ID, 0.0));
                rows.push(row);
                fresh.push(slot.is_none_or(|s| s.fresh));
            }
            let carried = state.take().map(|(mut h, mut c)| {
                for t in h.iter_mut().chain(c.iter_mut()) {
                    for (r, &f) in fresh.iter().enumerate() {
                        if f {
                            t.row_mut(r).fill(0.0);
                        }
                    }
                }
                (h, c)
            });
            let (loss, tokens, next) = train_chunk(model, &mut opt, &rows, carried, config.clip, rng)?;
            nll += loss * tokens;
            count += tokens;
            state = Some(next);
        }
        let mean = if count > 0.0 { nll / count } else { 0.0 };
        info!(
            "lm epoch {} updates {} lr {:.6} train_nll {:.4} train_ppl {:.3}",
            epoch + 1,
            opt.step,
            opt.lr(),
            mean,
            mean.exp()
        );
        report.epoch_nll.push(mean);
    }
    report.updates = opt.step;
    Ok(report)
}

/// Random-token rows: `<s> r1 .. rk` with the first target masked and every
/// later target `</s>`.
fn random_batch<R: Rng>(rows: usize, max_len: usize, vocab_size: usize, rng: &mut R) -> Vec<Vec<Position>> {
    let max_len = max_len.max(1);
    let first = UNK_ID + 1;
    (0..rows)
        .map(|_| {
            let k = rng.random_range(1..=max_len);
            let toks: Vec<TokenId> = (0..k).map(|_| rng.random_range(first..vocab_size as TokenId)).collect();
            let mut row = vec![(BOS_ID, toks[0], 0.0)];
            row.extend(toks.iter().map(|&t| (t, EOS_ID, 1.0)));
            row.resize(max_len + 1, (BOS_ID, EOS_ID, 0.0));
            row
        })
        .collect()
}

/// Forward, backward and one Adam step over a chunk. Returns the mean NLL,
/// the number of weighted targets and the final recurrent state.
fn train_chunk<R: Rng>(
    model: &mut LstmLm,
    opt: &mut OptimizerState,
    rows: &[Vec<Position>],
    state: Option<(Vec<Tensor>, Vec<Tensor>)>,
    clip: f64,
    rng: &mut R,
) -> Result<(f64, f64, (Vec<Tensor>, Vec<Tensor>))> {
    let b = rows.len();
    let steps = rows[0].len();
    let total: f64 = rows.iter().flatten().map(|p| p.2).sum();
    let mut g = Graph::with_trainable(&model.params, |_| true);
    let mut gs = match state {
        Some((h, c)) => LstmGraphState {
            h: h.into_iter().map(|t| g.constant(t)).collect(),
            c: c.into_iter().map(|t| g.constant(t)).collect(),
        },
        None => model.zero_graph_state(&mut g, b),
    };
    let mut loss: Option<NodeId> = None;
    for t in 0..steps {
        let inp: Vec<TokenId> = rows.iter().map(|r| r[t].0).collect();
        let (next, logp) = model.forward_step(&mut g, &inp, &gs, true, rng)?;
        gs = next;
        if total > 0.0 {
            let picked = g.pick(logp, rows.iter().map(|r| r[t].1 as usize).collect())?;
            let w = Tensor::column(rows.iter().map(|r| -r[t].2 / total).collect());
            let term = g.dot_const(picked, Arc::new(w))?;
            loss = Some(match loss {
                Some(l) => g.add(l, term)?,
                None => term,
            });
        }
    }
    let h = gs.h.iter().map(|&n| g.value(n).clone()).collect();
    let c = gs.c.iter().map(|&n| g.value(n).clone()).collect();
    let Some(loss) = loss else {
        return Ok((0.0, 0.0, (h, c)));
    };
    let value = g.value(loss).item();
    let mut grads = g.backward(loss, &model.params)?;
    grads.clip_global_norm(clip);
    opt.update(&mut model.params, &grads)?;
    Ok((value, total, (h, c)))
}
