//! Shared desk-scale pipeline: synthetic data, default LM, entity automata,
//! composite training with and without the teacher.

#![allow(dead_code)]

use std::sync::OnceLock;
use std::time::Instant;

use complm::components::{fst_build, train_lstm_lm, Component, FstBuildOptions, LmTrainConfig, LstmLm, LstmLmConfig};
use complm::composite::{CompositeConfig, CompositeModel};
use complm::eval::{synth_corpus, EntityType, SlotGrammar, SynthConfig, SynthCorpus, SynthSentence};
use complm::training::{train_composite, TrainOutcome, TrainingConfig};
use complm::vocab::{build_vocab, TokenSeq, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Pipeline {
    pub data: SynthCorpus,
    pub vocab: Vocabulary,
    pub default: LstmLm,
    pub composite: TrainOutcome,
    pub no_teacher: TrainOutcome,
    pub seconds: f64,
}

pub fn encode(v: &Vocabulary, sents: &[SynthSentence]) -> Vec<TokenSeq> {
    sents.iter().map(|s| v.encode(&s.text)).collect()
}

pub fn lm_config(v: &Vocabulary) -> LstmLmConfig {
    LstmLmConfig { vocab_size: v.len(), width: 64, layers: 1, dropout: 0.1, skip: true }
}

pub fn composite_config() -> CompositeConfig {
    CompositeConfig {
        ctx_width: 48,
        embed_width: 16,
        act_width: 32,
        act_layers: 1,
        att_width: 32,
        att_layers: 1,
        dropout: 0.1,
        log_eos_floor: -20.0,
    }
}

/// Criterion-scale training: one pretraining epoch and four main epochs of
/// 200 updates each. The teacher-decay clock shrinks by the same factor as
/// the update budget (1000 instead of 20000 updates), so the teacher weight
/// still reaches zero before the end of training.
pub fn training_config(no_teacher: bool) -> TrainingConfig {
    TrainingConfig {
        epoch_updates: 200,
        batch_size: 32,
        pretrain_epochs: 1,
        main_epochs: 4,
        lambda_decay_every: 50.0,
        no_teacher,
        ..TrainingConfig::default()
    }
}

fn build() -> Pipeline {
    let t0 = Instant::now();
    let data = synth_corpus(&SlotGrammar::builtin(), &SynthConfig::default()).unwrap();
    let vocab =
        build_vocab(data.default_train.iter().chain(&data.composite_train).map(|s| s.text.as_str()), 500).unwrap();
    let train0 = encode(&vocab, &data.default_train);
    let lm_cfg = LmTrainConfig { epochs: 4, ..LmTrainConfig::default() };
    let (default, _) = train_lstm_lm(&train0, &vocab, lm_config(&vocab), &lm_cfg).unwrap();
    eprintln!("default LM trained after {:.0}s", t0.elapsed().as_secs_f64());
    let mut comps = vec![Component::Lstm(default.clone())];
    for ty in EntityType::ALL {
        let list: Vec<(String, f64)> = data.entities[&ty].iter().map(|r| (r.text.clone(), r.count)).collect();
        comps.push(Component::Wfst(fst_build(&list, &vocab, &FstBuildOptions::default()).unwrap()));
    }
    let model =
        CompositeModel::new(vocab.clone(), comps, composite_config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let train = encode(&vocab, &data.composite_train);
    let dev = encode(&vocab, &data.dev);
    let composite = train_composite(model.clone(), &train, &dev, &training_config(false), None).unwrap();
    eprintln!("composite trained after {:.0}s", t0.elapsed().as_secs_f64());
    let no_teacher = train_composite(model, &train, &dev, &training_config(true), None).unwrap();
    let seconds = t0.elapsed().as_secs_f64();
    eprintln!("pipeline finished after {seconds:.0}s");
    Pipeline { data, vocab, default, composite, no_teacher, seconds }
}

pub fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(build)
}
