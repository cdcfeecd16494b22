//! Synthetic entity corpus. Sentences come from slot templates filled with
//! invented names; each entity list is split into a small "seen" part, the
//! only entities the default model's training split contains, and a
//! held-out remainder that only the entity components know.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rescore::{write_nbest, write_references, NBestEntry, NBestList, Reference};
use crate::components::wfst::write_entity_list;
use crate::error::{Error, Result};

const BUILTIN_GRAMMAR: &str = include_str!("../../data/grammar.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityType {
    Location,
    Person,
    Contact,
}

impl EntityType {
    pub const ALL: [EntityType; 3] = [EntityType::Location, EntityType::Person, EntityType::Contact];

    pub fn name(self) -> &'static str {
        match self {
            EntityType::Location => "location",
            EntityType::Person => "person",
            EntityType::Contact => "contact",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EntityType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown entity type {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    Slot(EntityType),
}

/// Templates of carrier words and entity slots.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotGrammar {
    pub templates: Vec<Vec<Piece>>,
}

impl SlotGrammar {
    /// One template per line; `{type}` marks a slot; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut templates = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut t = Vec::new();
            for w in line.split_whitespace() {
                if let Some(inner) = w.strip_prefix('{') {
                    let name = inner
                        .strip_suffix('}')
                        .ok_or_else(|| Error::format(format!("grammar line {}: unclosed slot {w:?}", n + 1)))?;
                    let ty = name
                        .parse()
                        .map_err(|_| Error::format(format!("grammar line {}: unresolvable slot {w:?}", n + 1)))?;
                    t.push(Piece::Slot(ty));
                } else if w.contains(['{', '}']) {
                    return Err(Error::format(format!("grammar line {}: malformed slot {w:?}", n + 1)));
                } else {
                    t.push(Piece::Word(w.to_lowercase()));
                }
            }
            templates.push(t);
        }
        if templates.is_empty() {
            return Err(Error::format("grammar has no templates"));
        }
        Ok(SlotGrammar { templates })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// The grammar shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_GRAMMAR).expect("built-in grammar parses")
    }

    /// Distinct carrier words, sorted.
    pub fn carrier_words(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .templates
            .iter()
            .flatten()
            .filter_map(|p| match p {
                Piece::Word(w) => Some(w),
                Piece::Slot(_) => None,
            })
            .collect();
        set.into_iter().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub default_train: usize,
    pub composite_train: usize,
    pub dev: usize,
    pub test: usize,
    pub nbest_dev: usize,
    pub nbest_test: usize,
    pub nbest_size: usize,
    pub locations: usize,
    pub persons: usize,
    pub contacts: usize,
    /// Fraction of each entity list the default training split may use.
    pub seen_fraction: f64,
    /// Zipf exponent of entity frequencies.
    pub zipf: f64,
    pub users: usize,
    pub contacts_per_user: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            default_train: 10_000,
            composite_train: 4_000,
            dev: 400,
            test: 800,
            nbest_dev: 100,
            nbest_test: 300,
            nbest_size: 20,
            locations: 240,
            persons: 240,
            contacts: 160,
            seen_fraction: 0.15,
            zipf: 0.8,
            users: 12,
            contacts_per_user: 12,
        }
    }
}

/// Entity occurrence in a sentence, in words: `words[start..end]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    #[serde(rename = "type")]
    pub kind: EntityType,
    pub entity: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSentence {
    pub text: String,
    pub spans: Vec<EntitySpan>,
}

impl SynthSentence {
    pub fn has_entity(&self) -> bool {
        !self.spans.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub text: String,
    pub count: f64,
    pub seen: bool,
}

/// A generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub default_train: Vec<SynthSentence>,
    pub composite_train: Vec<SynthSentence>,
    pub dev: Vec<SynthSentence>,
    pub test: Vec<SynthSentence>,
    pub entities: BTreeMap<EntityType, Vec<EntityRecord>>,
    pub nbest_dev: (Vec<NBestList>, Vec<Reference>),
    pub nbest_test: (Vec<NBestList>, Vec<Reference>),
    /// Contact lists per user id.
    pub personal: BTreeMap<String, Vec<(String, f64)>>,
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 3] = ["n", "r", "l"];

fn syllable<R: Rng>(rng: &mut R) -> String {
    format!("{}{}", ONSETS.choose(rng).expect("non-empty"), VOWELS.choose(rng).expect("non-empty"))
}

fn name_word<R: Rng>(rng: &mut R) -> String {
    let n = rng.random_range(2..=3);
    let mut w: String = (0..n).map(|_| syllable(rng)).collect();
    if rng.random_bool(0.3) {
        w.push_str(CODAS.choose(rng).expect("non-empty"));
    }
    w
}

/// Changes one syllable of one word of `entity`.
fn perturb<R: Rng>(entity: &str, rng: &mut R) -> String {
    let mut words: Vec<String> = entity.split(' ').map(str::to_string).collect();
    let i = rng.random_range(0..words.len());
    let chars: Vec<char> = words[i].chars().collect();
    let syl = rng.random_range(0..chars.len() / 2);
    let mut out: String = chars[..2 * syl].iter().collect();
    out.push_str(&syllable(rng));
    out.extend(&chars[2 * syl + 2..]);
    words[i] = out;
    words.join(" ")
}

struct EntityPool {
    names: Vec<String>,
    weights: Vec<f64>,
    seen: Vec<bool>,
    all: WeightedIndex<f64>,
    seen_only: (Vec<usize>, WeightedIndex<f64>),
}

impl EntityPool {
    fn new<R: Rng>(names: Vec<String>, config: &SynthConfig, rng: &mut R) -> Result<Self> {
        let weights: Vec<f64> = (0..names.len()).map(|k| 1.0 / ((k + 1) as f64).powf(config.zipf)).collect();
        let mut order: Vec<usize> = (0..names.len()).collect();
        order.shuffle(rng);
        let n_seen = ((names.len() as f64 * config.seen_fraction).ceil() as usize).clamp(1, names.len());
        let mut seen = vec![false; names.len()];
        for &k in &order[..n_seen] {
            seen[k] = true;
        }
        let seen_idx: Vec<usize> = (0..names.len()).filter(|&k| seen[k]).collect();
        let seen_w =
            WeightedIndex::new(seen_idx.iter().map(|&k| weights[k])).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(EntityPool {
            all: WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?,
            names,
            weights,
            seen,
            seen_only: (seen_idx, seen_w),
        })
    }

    fn sample<R: Rng>(&self, seen_only: bool, rng: &mut R) -> &str {
        let k = if seen_only { self.seen_only.0[self.seen_only.1.sample(rng)] } else { self.all.sample(rng) };
        &self.names[k]
    }

    fn records(&self) -> Vec<EntityRecord> {
        self.names
            .iter()
            .zip(&self.weights)
            .zip(&self.seen)
            .map(|((n, w), &s)| EntityRecord { text: n.clone(), count: (1000.0 * w).round().max(1.0), seen: s })
            .collect()
    }
}

struct Generator<'a> {
    grammar: &'a SlotGrammar,
    pools: BTreeMap<EntityType, EntityPool>,
}

impl Generator<'_> {
    fn sentence<R: Rng>(&self, seen_only: bool, rng: &mut R) -> SynthSentence {
        let t = self.grammar.templates.choose(rng).expect("grammar is non-empty");
        let mut words: Vec<String> = Vec::new();
        let mut spans = Vec::new();
        for p in t {
            match p {
                Piece::Word(w) => words.push(w.clone()),
                Piece::Slot(ty) => {
                    let e = self.pools[ty].sample(seen_only, rng);
                    let start = words.len();
                    words.extend(e.split(' ').map(str::to_string));
                    spans.push(EntitySpan { kind: *ty, entity: e.to_string(), start, end: words.len() });
                }
            }
        }
        SynthSentence { text: words.join(" "), spans }
    }
}

/// Invents `n` distinct names, each of `words` name words, avoiding `taken`.
fn invent<R: Rng>(n: usize, words: impl Fn(&mut R) -> usize, taken: &mut HashSet<String>, rng: &mut R) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = words(rng);
        let name = (0..k).map(|_| name_word(rng)).collect::<Vec<_>>().join(" ");
        if name.split(' ').all(|w| !taken.contains(w)) && taken.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

/// Generates the whole dataset deterministically from `config.seed`.
pub fn synth_corpus(grammar: &SlotGrammar, config: &SynthConfig) -> Result<SynthCorpus> {
    if !(0.0..=1.0).contains(&config.seen_fraction) {
        return Err(Error::invalid("seen_fraction must lie in [0, 1]"));
    }
    if config.locations == 0 || config.persons == 0 || config.contacts == 0 {
        return Err(Error::invalid("entity lists must be non-empty"));
    }
    if config.nbest_size == 0 {
        return Err(Error::invalid("n-best size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // carrier words are never reused as name words
    let mut taken: HashSet<String> = grammar.carrier_words().into_iter().collect();
    let locations =
        invent(config.locations, |r: &mut ChaCha8Rng| if r.random_bool(0.3) { 2 } else { 1 }, &mut taken, &mut rng);
    let firsts = invent(config.persons.div_ceil(4).max(2), |_| 1, &mut taken, &mut rng);
    let lasts = invent(config.persons.div_ceil(3).max(2), |_| 1, &mut taken, &mut rng);
    let mut persons = Vec::with_capacity(config.persons);
    let mut used = HashSet::new();
    if firsts.len() * lasts.len() < config.persons {
        return Err(Error::invalid("too many persons requested"));
    }
    while persons.len() < config.persons {
        let p =
            format!("{} {}", firsts.choose(&mut rng).expect("non-empty"), lasts.choose(&mut rng).expect("non-empty"));
        if used.insert(p.clone()) {
            persons.push(p);
        }
    }
    let contacts = invent(config.contacts, |_| 1, &mut taken, &mut rng);
    let mut pools = BTreeMap::new();
    pools.insert(EntityType::Location, EntityPool::new(locations, config, &mut rng)?);
    pools.insert(EntityType::Person, EntityPool::new(persons, config, &mut rng)?);
    pools.insert(EntityType::Contact, EntityPool::new(contacts, config, &mut rng)?);
    let gen = Generator { grammar, pools };

    let mut split = |n: usize, seen_only: bool| (0..n).map(|_| gen.sentence(seen_only, &mut rng)).collect::<Vec<_>>();
    let default_train = split(config.default_train, true);
    let composite_train = split(config.composite_train, false);
    let dev = split(config.dev, false);
    let test = split(config.test, false);

    let mut personal: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let contact_names = &gen.pools[&EntityType::Contact].names;
    for u in 0..config.users {
        let mut list: BTreeSet<String> = BTreeSet::new();
        for c in contact_names.choose_multiple(&mut rng, config.contacts_per_user.min(contact_names.len())) {
            list.insert(c.clone());
        }
        personal.insert(format!("user{u:02}"), list);
    }
    let carriers = grammar.carrier_words();
    let nbest_dev = nbest_set(&gen, "dev", config, &carriers, &mut personal, &mut rng);
    let nbest_test = nbest_set(&gen, "test", config, &carriers, &mut personal, &mut rng);

    let entities = gen.pools.iter().map(|(t, p)| (*t, p.records())).collect();
    let counts: BTreeMap<String, f64> =
        gen.pools[&EntityType::Contact].records().into_iter().map(|r| (r.text, r.count)).collect();
    let personal = personal
        .into_iter()
        .map(|(u, list)| (u, list.into_iter().map(|c| (c.clone(), counts[&c])).collect()))
        .collect();
    Ok(SynthCorpus { default_train, composite_train, dev, test, entities, nbest_dev, nbest_test, personal })
}

/// Simulated first-pass lists: the reference plus distractors with one
/// entity name perturbed and/or a carrier word substituted or dropped.
/// First-pass scores penalize carrier errors more than entity confusions,
/// plus uniform noise, so the 1-best is often wrong.
fn nbest_set<R: Rng>(
    gen: &Generator<'_>,
    prefix: &str,
    config: &SynthConfig,
    carriers: &[String],
    personal: &mut BTreeMap<String, BTreeSet<String>>,
    rng: &mut R,
) -> (Vec<NBestList>, Vec<Reference>) {
    let users: Vec<String> = personal.keys().cloned().collect();
    let mut lists = Vec::new();
    let mut refs = Vec::new();
    let n = if prefix == "dev" { config.nbest_dev } else { config.nbest_test };
    for k in 0..n {
        let s = gen.sentence(false, rng);
        let utt_id = format!("{prefix}{k:04}");
        let contact = s.spans.iter().find(|sp| sp.kind == EntityType::Contact);
        let user = match contact {
            Some(sp) if !users.is_empty() => {
                let u = users.choose(rng).expect("non-empty").clone();
                personal.get_mut(&u).expect("known user").insert(sp.entity.clone());
                Some(u)
            }
            _ => None,
        };
        let words: Vec<&str> = s.text.split(' ').collect();
        let in_entity = |i: usize| s.spans.iter().any(|sp| (sp.start..sp.end).contains(&i));
        let carrier_pos: Vec<usize> = (0..words.len()).filter(|&i| !in_entity(i)).collect();
        let mut seen: HashSet<String> = HashSet::from([s.text.clone()]);
        let mut hyps: Vec<(String, f64)> = vec![(s.text.clone(), 0.0)];
        let mut tries = 0;
        while hyps.len() < config.nbest_size && tries < 50 * config.nbest_size {
            tries += 1;
            let mut w: Vec<String> = Vec::new();
            let mut penalty = 0.0;
            let corrupt_entity = s.has_entity() && rng.random_bool(0.6);
            let corrupt_carrier = !corrupt_entity || rng.random_bool(0.3);
            let target = if corrupt_entity { s.spans.choose(rng) } else { None };
            let carrier = if corrupt_carrier { carrier_pos.choose(rng).copied() } else { None };
            let drop = rng.random_bool(0.3);
            let mut i = 0;
            while i < words.len() {
                if let Some(sp) = target.filter(|sp| sp.start == i) {
                    w.extend(perturb(&sp.entity, rng).split(' ').map(str::to_string));
                    penalty += 0.4;
                    i = sp.end;
                    continue;
                }
                if carrier == Some(i) {
                    penalty += 1.0;
                    if !drop {
                        w.push(carriers.choose(rng).expect("non-empty").clone());
                    }
                } else {
                    w.push(words[i].to_string());
                }
                i += 1;
            }
            let text = w.join(" ");
            if !text.is_empty() && seen.insert(text.clone()) {
                hyps.push((text, -penalty));
            }
        }
        for h in &mut hyps {
            h.1 += rng.random_range(-0.9..0.9);
        }
        // stable order: by score, then generation order
        let mut order: Vec<usize> = (0..hyps.len()).collect();
        order.sort_by(|&a, &b| hyps[b].1.total_cmp(&hyps[a].1).then(a.cmp(&b)));
        let entries = order
            .iter()
            .enumerate()
            .map(|(r, &i)| NBestEntry {
                utt_id: utt_id.clone(),
                rank: r + 1,
                first_pass: hyps[i].1,
                text: hyps[i].0.clone(),
                user: user.clone(),
            })
            .collect();
        lists.push(NBestList { utt_id: utt_id.clone(), user, hyps: entries });
        refs.push(Reference { utt_id, text: s.text.clone(), subset: s.has_entity().then(|| "entity".to_string()) });
    }
    (lists, refs)
}

impl SynthCorpus {
    pub fn splits(&self) -> [(&'static str, &[SynthSentence]); 4] {
        [
            ("default-train", &self.default_train),
            ("composite-train", &self.composite_train),
            ("dev", &self.dev),
            ("test", &self.test),
        ]
    }

    /// Writes the dataset tree:
    /// `<split>.txt` and `<split>.meta.jsonl` per split,
    /// `entities/<type>.tsv` (phrase, count), `entities/<type>.heldout.txt`,
    /// `nbest.<dev|test>.tsv`, `nbest.<dev|test>.refs.tsv`, and
    /// `personal/<user>.tsv`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("entities"))?;
        fs::create_dir_all(dir.join("personal"))?;
        for (name, sents) in self.splits() {
            let mut txt = BufWriter::new(File::create(dir.join(format!("{name}.txt")))?);
            let mut meta = BufWriter::new(File::create(dir.join(format!("{name}.meta.jsonl")))?);
            for s in sents {
                writeln!(txt, "{}", s.text)?;
                serde_json::to_writer(&mut meta, s)?;
                writeln!(meta)?;
            }
            txt.flush()?;
            meta.flush()?;
        }
        for (ty, recs) in &self.entities {
            let list: Vec<(String, f64)> = recs.iter().map(|r| (r.text.clone(), r.count)).collect();
            write_entity_list(File::create(dir.join(format!("entities/{ty}.tsv")))?, &list)?;
            let mut held = BufWriter::new(File::create(dir.join(format!("entities/{ty}.heldout.txt")))?);
            for r in recs.iter().filter(|r| !r.seen) {
                writeln!(held, "{}", r.text)?;
            }
            held.flush()?;
        }
        for (name, (lists, refs)) in [("dev", &self.nbest_dev), ("test", &self.nbest_test)] {
            write_nbest(BufWriter::new(File::create(dir.join(format!("nbest.{name}.tsv")))?), lists)?;
            write_references(BufWriter::new(File::create(dir.join(format!("nbest.{name}.refs.tsv")))?), refs)?;
        }
        for (user, list) in &self.personal {
            write_entity_list(File::create(dir.join(format!("personal/{user}.tsv")))?, list)?;
        }
        Ok(())
    }
}
