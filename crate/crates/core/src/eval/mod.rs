//! Evaluation: perplexity, sentence-level likelihood comparison, n-best
//! rescoring with word error rates, and a synthetic entity corpus.

pub mod perplexity;
pub mod rescore;
pub mod synth;
pub mod wer;

pub use perplexity::{
    composite_perplexity, loglik_compare, perplexity, perplexity_from, sentence_log_probs, write_scatter_tsv,
    ScatterRow, Scorer,
};
pub use rescore::{
    choose, oracle_by_subset, read_nbest, read_references, rescore_nbest, rescore_nbest_personal, tune_weight,
    wer_by_subset, write_nbest, write_references, Choice, NBestEntry, NBestList, PersonalComponents, Reference,
    WerReport, WerRow,
};
pub use synth::{
    synth_corpus, EntityRecord, EntitySpan, EntityType, SlotGrammar, SynthConfig, SynthCorpus, SynthSentence,
};
pub use wer::{oracle_wer, wer, WerStats};
