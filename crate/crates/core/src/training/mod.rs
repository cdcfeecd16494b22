//! Composite-model training: teacher policy, interpolated activation
//! sampling, likelihood and policy-gradient updates, schedules.
//!
//! Training runs in two phases. Pretraining samples activations from the
//! teacher only and optimizes the likelihood loss. The main phase samples
//! from the mixture of teacher and learned policy, with the teacher weight
//! decaying per update, and alternates likelihood and policy-gradient
//! updates in runs of randomly drawn length, starting with likelihood.
//!
//! All randomness comes from one generator seeded by the config, consumed
//! in this order per update: corpus reshuffles when the queue runs low, the
//! run length when a new run starts, then per step dropout masks
//! (context, activation, attention) and activation draws in slot order.

pub mod chunk;
pub mod config;
pub mod schedule;
pub mod teacher;
pub mod update;

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use chunk::{chunk_sequences, ChunkBatch, ChunkSlot, ChunkStream};
pub use config::TrainingConfig;
pub use schedule::{lambda_at, lambda_schedule};
pub use teacher::{precompute, sample_activations, teacher_log_ratio, teacher_policy, SentenceCache};
pub use update::{chunk_gradients, chunk_returns, ll_update, rl_update, BatchState, ChunkStats, LossKind};

use crate::composite::CompositeModel;
use crate::error::{Error, Result};
use crate::eval::composite_perplexity;
use crate::neural::{Checkpoint, OptimizerState};
use crate::vocab::TokenSeq;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Main,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub updates: u64,
    /// Teacher weight at the last update of the epoch.
    pub lambda: f64,
    pub lr: f64,
    /// Mean NLL over the epoch's likelihood updates.
    pub train_nll: f64,
    /// Fraction of boundary decisions that activated a component.
    pub activation_rate: f64,
    pub dev_ppl: f64,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch {} ({:?}) updates {} lambda {:.4} lr {:.6} train_nll {:.4} act_rate {:.4} dev_ppl {:.4}",
            self.epoch,
            self.phase,
            self.updates,
            self.lambda,
            self.lr,
            self.train_nll,
            self.activation_rate,
            self.dev_ppl
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the best dev perplexity.
    pub best: CompositeModel,
    pub best_epoch: usize,
    /// Model after the last update.
    pub last: CompositeModel,
    pub log: Vec<EpochLog>,
}

/// Trains `model` (default component frozen) on `train`, selecting by
/// perplexity on `dev`. With `checkpoint_dir`, writes `epoch-<k>.ckpt`
/// after each epoch and keeps `best.ckpt` current.
pub fn train_composite(
    mut model: CompositeModel,
    train: &[TokenSeq],
    dev: &[TokenSeq],
    config: &TrainingConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid("training and dev corpora must be non-empty"));
    }
    let v = model.vocab().len();
    if train.iter().chain(dev).flat_map(|s| s.ids()).any(|&t| t as usize >= v) {
        return Err(Error::invalid("corpus token outside the model vocabulary"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let caches = precompute(&model, train)?;
    let b = config.batch_size;
    let mut stream = ChunkStream::new(train.iter().map(TokenSeq::len).collect(), b, config.chunk_size);
    let mut state = BatchState::new(&model, b);
    let mut opt = OptimizerState::new(config.adam(), model.params());

    let pretrain = config.pretrain_epochs;
    let teacher_weight = if config.no_teacher { 0.0 } else { 1.0 };
    let mut main_index: u64 = 0;
    let mut run_left = 0usize;
    let mut kind = LossKind::Reinforce;
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, CompositeModel)> = None;

    for epoch in 0..pretrain + config.main_epochs {
        let phase = if epoch < pretrain { Phase::Pretrain } else { Phase::Main };
        let (mut nll, mut ll_batches, mut acts, mut decisions) = (0.0, 0usize, 0usize, 0usize);
        let mut lambda = 1.0;
        for _ in 0..config.epoch_updates {
            if stream.queued() < b {
                let mut order: Vec<usize> = (0..train.len()).collect();
                order.shuffle(&mut rng);
                stream.enqueue(order);
            }
            let batch = stream.next_batch().expect("queue refilled");
            let this = match phase {
                Phase::Pretrain => {
                    lambda = teacher_weight;
                    LossKind::Likelihood
                }
                Phase::Main => {
                    if run_left == 0 {
                        kind = match kind {
                            LossKind::Likelihood => LossKind::Reinforce,
                            LossKind::Reinforce => LossKind::Likelihood,
                        };
                        run_left = rng.random_range(config.min_run..=config.max_run);
                    }
                    run_left -= 1;
                    lambda = if config.no_teacher {
                        0.0
                    } else {
                        lambda_at(main_index, config.lambda_decay, config.lambda_decay_every, config.lambda_floor)
                    };
                    main_index += 1;
                    kind
                }
            };
            let stats = match this {
                LossKind::Likelihood => {
                    ll_update(&mut model, &mut opt, train, &caches, &batch, &mut state, lambda, config.clip, &mut rng)?
                }
                LossKind::Reinforce => {
                    rl_update(&mut model, &mut opt, train, &caches, &batch, &mut state, lambda, config.clip, &mut rng)?
                }
            };
            if this == LossKind::Likelihood {
                nll += stats.nll;
                ll_batches += 1;
            }
            acts += stats.activations;
            decisions += stats.decisions;
        }
        let dev_ppl = composite_perplexity(&model, dev)?;
        let entry = EpochLog {
            phase,
            epoch: epoch + 1,
            updates: opt.step,
            lambda,
            lr: opt.lr(),
            train_nll: if ll_batches > 0 { nll / ll_batches as f64 } else { f64::NAN },
            activation_rate: if decisions > 0 { acts as f64 / decisions as f64 } else { 0.0 },
            dev_ppl,
        };
        info!("{entry}");
        let improved = best.as_ref().is_none_or(|(p, _, _)| dev_ppl < *p);
        if improved {
            best = Some((dev_ppl, epoch + 1, model.clone()));
        }
        if let Some(dir) = checkpoint_dir {
            let ck = training_checkpoint(&model, &opt, config, &entry)?;
            ck.save(dir.join(format!("epoch-{}.ckpt", epoch + 1)))?;
            if improved {
                ck.save(dir.join("best.ckpt"))?;
            }
        }
        log.push(entry);
    }
    let (_, best_epoch, best_model) = match best {
        Some(b) => b,
        None => (composite_perplexity(&model, dev)?, 0, model.clone()),
    };
    Ok(TrainOutcome { best: best_model, best_epoch, last: model, log })
}

/// Composite checkpoint plus optimizer moments, step counter, config and seed.
pub fn training_checkpoint(
    model: &CompositeModel,
    opt: &OptimizerState,
    config: &TrainingConfig,
    entry: &EpochLog,
) -> Result<Checkpoint> {
    let mut ck = model.to_checkpoint()?;
    ck.push_optimizer("opt.", model.params(), opt);
    ck.meta["training"] = serde_json::json!({
        "step": opt.step,
        "seed": config.seed,
        "config": config,
        "epoch": entry,
    });
    Ok(ck)
}
