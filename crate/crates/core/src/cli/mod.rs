//! Command-line pipeline. Logs go to stderr; data goes to files or stdout.

mod manifest;

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use complm::components::wfst::read_entity_list;
use complm::components::{fst_build, train_lstm_lm, Component, FstBuildOptions, LmTrainConfig, LstmLm, LstmLmConfig};
use complm::composite::{
    write_traces_json, write_traces_tsv, ActivationMode, CompositeConfig, CompositeModel, COMPOSITE_CHECKPOINT_KIND,
};
use complm::eval::{
    loglik_compare, oracle_by_subset, perplexity, read_nbest, read_references, rescore_nbest, rescore_nbest_personal,
    synth_corpus, tune_weight, wer_by_subset, write_scatter_tsv, Choice, PersonalComponents, Scorer, SlotGrammar,
    SynthConfig, WerReport,
};
use complm::neural::Checkpoint;
use complm::training::{train_composite, TrainingConfig};
use complm::vocab::{build_vocab, TokenSeq, Vocabulary};
use complm::Error;

pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "complm", version, about = "Compositional language model toolkit")]
pub struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// TOML file with [lm], [lm_train], [composite], [training], [synth] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for evaluation commands (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a subword vocabulary from a text corpus.
    BuildVocab {
        #[arg(long)]
        corpus: Vec<PathBuf>,
        #[arg(long, default_value_t = 500)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compile an entity list into a weighted automaton component.
    FstBuild {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop phrases longer than this many tokens.
        #[arg(long, default_value_t = 16)]
        max_tokens: usize,
    },
    /// Train an LSTM LM (the default model, or an entity component).
    TrainLm {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train as an entity component that ends spans it cannot explain.
        #[arg(long)]
        component_mode: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the activation and attention networks over frozen components.
    TrainComposite {
        /// Default LM checkpoint.
        #[arg(long = "default")]
        default_lm: PathBuf,
        /// Entity components (automata or LSTM checkpoints), in order.
        #[arg(long = "component")]
        components: Vec<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Output directory for checkpoints, log and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Ablation: teacher weight 0 throughout.
        #[arg(long)]
        no_teacher: bool,
    },
    /// Per-token perplexity of a corpus; prints one number.
    EvalPpl {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Per-token activation, attention and probability traces.
    Trace {
        /// Composite checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "corpus", required_unless_present = "corpus")]
        sentence: Option<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = TraceFormat::Tsv)]
        format: TraceFormat,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sentence log-likelihoods under the composite and the default model.
    Scatter {
        /// Composite checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Default LM checkpoint (default: the composite's own default component).
        #[arg(long = "default")]
        default_lm: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        min_gap: f64,
        /// Skip sentences longer than this many tokens.
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rescore n-best lists and report word error rates.
    Rescore {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        /// LM weight in `w * lm + (1 - w) * first_pass`.
        #[arg(long, default_value_t = 0.5)]
        weight: f64,
        /// Tune the weight on this n-best set instead (needs --dev-refs).
        #[arg(long, requires = "dev_refs")]
        dev_nbest: Option<PathBuf>,
        #[arg(long, requires = "dev_nbest")]
        dev_refs: Option<PathBuf>,
        /// Directory of `<user>.tsv` entity lists swapped in per utterance.
        #[arg(long)]
        personal_entities: Option<PathBuf>,
        /// Component index the personal lists replace (default: the last).
        #[arg(long, requires = "personal_entities")]
        personal_slot: Option<usize>,
        /// Write the chosen hypotheses here as TSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic entity dataset.
    Synth {
        /// Template file (default: the built-in grammar).
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Composite or LSTM LM checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Vocabulary, required for LSTM LM checkpoints.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraceFormat {
    Tsv,
    Json,
}

/// Sections of the `--config` file; missing sections take defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub lm: LstmLmConfig,
    pub lm_train: LmTrainConfig,
    pub composite: CompositeConfig,
    pub training: TrainingConfig,
    pub synth: SynthConfig,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or unreadable inputs.
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// One line: `error: <kind>: <message>`.
    pub fn line(&self) -> String {
        match self {
            CliError::Usage(m) => format!("error: usage: {m}"),
            CliError::Runtime(e) => format!("error: {}: {e}", e.kind()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Loading an input is a usage failure, whatever went wrong.
fn input<T>(path: &Path, r: complm::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn require(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{}: no such file", path.display())))
    }
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    require(path)?;
    let f = input(path, File::open(path).map_err(Error::from))?;
    let lines = BufReader::new(f).lines().collect::<io::Result<Vec<_>>>();
    input(path, lines.map_err(Error::from))
}

fn read_corpus(path: &Path, vocab: &Vocabulary) -> CliResult<Vec<TokenSeq>> {
    Ok(read_lines(path)?.iter().map(|l| vocab.encode(l)).collect())
}

fn load_vocab(path: &Path) -> CliResult<Vocabulary> {
    require(path)?;
    input(path, Vocabulary::load(path))
}

fn load_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    require(path)?;
    let text = input(path, fs::read_to_string(path).map_err(Error::from))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// A checkpoint of either kind, scored the same way.
pub enum AnyModel {
    Lm(LstmLm, Vocabulary),
    Composite(CompositeModel),
}

impl AnyModel {
    pub fn load(path: &Path, vocab: Option<&Path>) -> CliResult<Self> {
        require(path)?;
        let ck = input(path, Checkpoint::load(path))?;
        let kind = ck.meta.get("kind").and_then(|k| k.as_str()).unwrap_or_default();
        if kind == COMPOSITE_CHECKPOINT_KIND {
            return Ok(AnyModel::Composite(input(path, CompositeModel::from_checkpoint(&ck))?));
        }
        let lm = input(path, LstmLm::from_checkpoint(&ck))?;
        let vocab = vocab.ok_or_else(|| CliError::Usage("--vocab is required for an LSTM LM checkpoint".into()))?;
        let v = load_vocab(vocab)?;
        if v.len() != lm.config().vocab_size {
            return Err(CliError::Usage(format!(
                "vocabulary has {} entries, model expects {}",
                v.len(),
                lm.config().vocab_size
            )));
        }
        Ok(AnyModel::Lm(lm, v))
    }

    pub fn vocab(&self) -> &Vocabulary {
        match self {
            AnyModel::Lm(_, v) => v,
            AnyModel::Composite(m) => m.vocab(),
        }
    }
}

impl Scorer for AnyModel {
    fn token_log_probs(&self, seq: &TokenSeq) -> complm::Result<Vec<f64>> {
        match self {
            AnyModel::Lm(m, _) => Scorer::token_log_probs(m, seq),
            AnyModel::Composite(m) => Scorer::token_log_probs(m, seq),
        }
    }
}

fn load_composite(path: &Path) -> CliResult<CompositeModel> {
    match AnyModel::load(path, None)? {
        AnyModel::Composite(m) => Ok(m),
        AnyModel::Lm(..) => Err(CliError::Usage(format!("{}: not a composite checkpoint", path.display()))),
    }
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut cfg = load_config(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::BuildVocab { corpus, size, out } => {
            if corpus.is_empty() {
                return Err(CliError::Usage("at least one --corpus is required".into()));
            }
            let mut lines = Vec::new();
            for c in &corpus {
                lines.extend(read_lines(c)?);
            }
            let vocab = build_vocab(&lines, size)?;
            vocab.save(&out)?;
            info!("vocabulary of {} subwords written to {}", vocab.len(), out.display());
        }
        Command::FstBuild { entities, vocab, out, max_tokens } => {
            let v = load_vocab(&vocab)?;
            require(&entities)?;
            let list = input(&entities, File::open(&entities).map_err(Error::from).and_then(read_entity_list))?;
            let fst = fst_build(&list, &v, &FstBuildOptions { max_tokens: Some(max_tokens) })?;
            fst.save(&out)?;
            info!("{} states, {} arcs written to {}", fst.num_states(), fst.num_arcs(), out.display());
        }
        Command::TrainLm { corpus, vocab, out, component_mode, epochs } => {
            let v = load_vocab(&vocab)?;
            let data = read_corpus(&corpus, &v)?;
            let mut model_cfg = cfg.lm;
            model_cfg.vocab_size = v.len();
            let mut train_cfg = cfg.lm_train;
            train_cfg.seed = seed;
            train_cfg.component_mode |= component_mode;
            if let Some(e) = epochs {
                train_cfg.epochs = e;
            }
            let snapshot = serde_json::json!({ "lm": model_cfg, "lm_train": train_cfg });
            RunManifest::new("train-lm", seed, snapshot, &[&corpus, &vocab], &[&out])?.save(&sidecar(&out))?;
            let (lm, report) = train_lstm_lm(&data, &v, model_cfg, &train_cfg)?;
            for (e, nll) in report.epoch_nll.iter().enumerate() {
                info!("epoch {} train_nll {nll:.4}", e + 1);
            }
            lm.save(&out)?;
        }
        Command::TrainComposite { default_lm, components, vocab, corpus, dev, out, no_teacher } => {
            let v = load_vocab(&vocab)?;
            require(&default_lm)?;
            let lm = input(&default_lm, LstmLm::load(&default_lm))?;
            let mut comps = vec![Component::Lstm(lm)];
            for c in &components {
                require(c)?;
                comps.push(input(c, Component::load(c))?);
            }
            let train = read_corpus(&corpus, &v)?;
            let dev_set = read_corpus(&dev, &v)?;
            cfg.training.seed = seed;
            cfg.training.no_teacher |= no_teacher;
            cfg.training.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            fs::create_dir_all(&out)?;
            let mut inputs: Vec<&Path> = vec![&default_lm, &vocab, &corpus, &dev];
            inputs.extend(components.iter().map(PathBuf::as_path));
            let snapshot = serde_json::json!({ "composite": cfg.composite, "training": cfg.training });
            let artifacts = [out.join("best.ckpt"), out.join("train.log.jsonl")];
            let artifact_refs: Vec<&Path> = artifacts.iter().map(PathBuf::as_path).collect();
            RunManifest::new("train-composite", seed, snapshot, &inputs, &artifact_refs)?
                .save(&out.join("manifest.json"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = CompositeModel::new(v, comps, cfg.composite, &mut rng)?;
            let outcome = train_composite(model, &train, &dev_set, &cfg.training, Some(&out))?;
            let mut log = BufWriter::new(File::create(out.join("train.log.jsonl"))?);
            for e in &outcome.log {
                serde_json::to_writer(&mut log, e).map_err(Error::from)?;
                writeln!(log)?;
            }
            log.flush()?;
            info!("best epoch {}", outcome.best_epoch);
        }
        Command::EvalPpl { model, corpus } => {
            let m = AnyModel::load(&model.model, model.vocab.as_deref())?;
            let data = read_corpus(&corpus, m.vocab())?;
            if data.is_empty() {
                return Err(CliError::Usage(format!("{}: empty corpus", corpus.display())));
            }
            println!("{}", perplexity(&m, &data)?);
        }
        Command::Trace { model, sentence, corpus, format, out } => {
            let m = load_composite(&model)?;
            let sentences = match (sentence, corpus) {
                (Some(s), _) => vec![s],
                (None, Some(c)) => read_lines(&c)?,
                (None, None) => unreachable!("clap requires one"),
            };
            let traces = sentences
                .iter()
                .map(|s| m.score_sequence(&m.vocab().encode(s), &ActivationMode::Threshold(0.5)).map(|r| r.1))
                .collect::<complm::Result<Vec<_>>>()?;
            let mut w = output(out.as_deref())?;
            match format {
                TraceFormat::Tsv => write_traces_tsv(&mut w, m.vocab(), &traces)?,
                TraceFormat::Json => write_traces_json(&mut w, &traces)?,
            }
            w.flush()?;
        }
        Command::Scatter { model, default_lm, corpus, min_gap, max_len, out } => {
            let m = load_composite(&model)?;
            let default = match &default_lm {
                Some(p) => {
                    require(p)?;
                    input(p, LstmLm::load(p))?
                }
                None => m.default_model().clone(),
            };
            let data = read_corpus(&corpus, m.vocab())?;
            let rows = loglik_compare(&m, &default, m.vocab(), &data, min_gap, max_len)?;
            let mut w = output(out.as_deref())?;
            write_scatter_tsv(&mut w, &rows)?;
            w.flush()?;
        }
        Command::Rescore { model, nbest, refs, weight, dev_nbest, dev_refs, personal_entities, personal_slot, out } => {
            let m = AnyModel::load(&model.model, model.vocab.as_deref())?;
            let lists = load_nbest(&nbest)?;
            let references = load_refs(&refs)?;
            let weight = match (&dev_nbest, &dev_refs) {
                (Some(n), Some(r)) => {
                    let grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
                    let (w, s) = tune_weight(&m, m.vocab(), &load_nbest(n)?, &load_refs(r)?, &grid)?;
                    info!("tuned weight {w} (dev WER {:.4})", s.wer());
                    w
                }
                _ => weight,
            };
            if !(0.0..=1.0).contains(&weight) {
                return Err(CliError::Usage(format!("--weight {weight} not in [0, 1]")));
            }
            let chosen: Vec<Choice> = match (&personal_entities, &m) {
                (Some(dir), AnyModel::Composite(c)) => {
                    let personal = load_personal(dir, c, personal_slot)?;
                    rescore_nbest_personal(c, &lists, weight, &personal)?
                }
                (Some(_), AnyModel::Lm(..)) => {
                    return Err(CliError::Usage("--personal-entities needs a composite checkpoint".into()))
                }
                (None, _) => rescore_nbest(&m, m.vocab(), &lists, weight)?,
            };
            let first = rescore_nbest(&m, m.vocab(), &lists, 0.0)?;
            let report = WerReport::new(vec![
                ("first-pass".into(), wer_by_subset(&first, &references)?),
                (format!("rescored(w={weight})"), wer_by_subset(&chosen, &references)?),
                ("oracle".into(), oracle_by_subset(&lists, &references)?),
            ]);
            print!("{report}");
            if let Some(p) = out {
                let mut w = BufWriter::new(File::create(p)?);
                for c in &chosen {
                    writeln!(w, "{}\t{}\t{}\t{}", c.utt_id, c.rank, c.score, c.text)?;
                }
                w.flush()?;
            }
        }
        Command::Synth { grammar, out } => {
            let g = match &grammar {
                Some(p) => {
                    require(p)?;
                    input(p, SlotGrammar::load(p))?
                }
                None => SlotGrammar::builtin(),
            };
            cfg.synth.seed = seed;
            let inputs: Vec<&Path> = grammar.iter().map(PathBuf::as_path).collect();
            fs::create_dir_all(&out)?;
            let snapshot = serde_json::json!({ "synth": cfg.synth });
            RunManifest::new("synth", seed, snapshot, &inputs, &[&out])?.save(&out.join("manifest.json"))?;
            let corpus = synth_corpus(&g, &cfg.synth).map_err(|e| CliError::Usage(e.to_string()))?;
            corpus.write_to(&out)?;
            info!("dataset written to {}", out.display());
        }
    }
    Ok(())
}

fn load_nbest(path: &Path) -> CliResult<Vec<complm::eval::NBestList>> {
    require(path)?;
    input(path, File::open(path).map_err(Error::from).and_then(|f| read_nbest(BufReader::new(f))))
}

fn load_refs(path: &Path) -> CliResult<Vec<complm::eval::Reference>> {
    require(path)?;
    input(path, File::open(path).map_err(Error::from).and_then(|f| read_references(BufReader::new(f))))
}

fn load_personal(dir: &Path, model: &CompositeModel, slot: Option<usize>) -> CliResult<PersonalComponents> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{}: not a directory", dir.display())));
    }
    let n = model.num_entity_components();
    let slot = slot.unwrap_or(n);
    if slot == 0 || slot > n {
        return Err(CliError::Usage(format!("--personal-slot must be in 1..={n}")));
    }
    let mut by_user = HashMap::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.extension().and_then(|e| e.to_str()) != Some("tsv") {
            continue;
        }
        let user = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let list = input(&p, File::open(&p).map_err(Error::from).and_then(read_entity_list))?;
        let fst = input(&p, fst_build(&list, model.vocab(), &FstBuildOptions::default()))?;
        by_user.insert(user, Component::Wfst(fst));
    }
    Ok(PersonalComponents { slot, by_user })
}
