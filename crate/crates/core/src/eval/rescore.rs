use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::perplexity::Scorer;
use super::wer::{oracle_wer, wer, WerStats};
use crate::components::Component;
use crate::composite::CompositeModel;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// One first-pass hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestEntry {
    pub utt_id: String,
    /// 1-based rank in the first pass.
    pub rank: usize,
    /// First-pass score, log domain.
    pub first_pass: f64,
    pub text: String,
    pub user: Option<String>,
}

/// All hypotheses of one utterance, ordered by rank.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestList {
    pub utt_id: String,
    pub user: Option<String>,
    pub hyps: Vec<NBestEntry>,
}

/// Reads `utt_id \t rank \t first_pass_score \t text [\t user_id]`. Lines of
/// one utterance must be contiguous; ranks must be dense from 1.
pub fn read_nbest<R: BufRead>(r: R) -> Result<Vec<NBestList>> {
    let mut lists: Vec<NBestList> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if !(4..=5).contains(&f.len()) {
            return Err(Error::format(format!("n-best line {}: expected 4 or 5 fields", n + 1)));
        }
        let rank = f[1].parse::<usize>().map_err(|e| Error::format(format!("n-best line {}: rank: {e}", n + 1)))?;
        let first_pass =
            f[2].parse::<f64>().map_err(|e| Error::format(format!("n-best line {}: score: {e}", n + 1)))?;
        let user = f.get(4).map(|u| u.trim()).filter(|u| !u.is_empty()).map(str::to_string);
        let entry =
            NBestEntry { utt_id: f[0].to_string(), rank, first_pass, text: f[3].to_string(), user: user.clone() };
        match lists.last_mut() {
            Some(l) if l.utt_id == entry.utt_id => l.hyps.push(entry),
            _ => {
                if lists.iter().any(|l| l.utt_id == entry.utt_id) {
                    return Err(Error::format(format!("utterance {} is not contiguous", entry.utt_id)));
                }
                lists.push(NBestList { utt_id: entry.utt_id.clone(), user, hyps: vec![entry] });
            }
        }
    }
    for l in &mut lists {
        l.hyps.sort_by_key(|h| h.rank);
        if l.hyps.iter().enumerate().any(|(i, h)| h.rank != i + 1) {
            return Err(Error::format(format!("utterance {}: ranks are not dense from 1", l.utt_id)));
        }
        if l.hyps.iter().any(|h| h.user != l.user) {
            return Err(Error::format(format!("utterance {}: inconsistent user id", l.utt_id)));
        }
    }
    Ok(lists)
}

pub fn write_nbest<W: Write>(mut w: W, lists: &[NBestList]) -> Result<()> {
    for l in lists {
        for h in &l.hyps {
            write!(w, "{}\t{}\t{}\t{}", h.utt_id, h.rank, h.first_pass, h.text)?;
            if let Some(u) = &h.user {
                write!(w, "\t{u}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// The hypothesis picked for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub utt_id: String,
    pub rank: usize,
    pub text: String,
    pub score: f64,
}

/// `argmax_h w·lm(h) + (1 − w)·first_pass(h)`, ties to the lower rank. With
/// `w = 0` the LM is not consulted.
pub fn choose<S: Scorer + ?Sized>(scorer: &S, vocab: &Vocabulary, list: &NBestList, weight: f64) -> Result<Choice> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::invalid(format!("interpolation weight {weight} not in [0, 1]")));
    }
    let mut best: Option<Choice> = None;
    for h in &list.hyps {
        let score = if weight == 0.0 {
            h.first_pass
        } else {
            let lm = scorer.sentence_log_prob(&vocab.encode(&h.text))?;
            weight * lm + (1.0 - weight) * h.first_pass
        };
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(Choice { utt_id: list.utt_id.clone(), rank: h.rank, text: h.text.clone(), score });
        }
    }
    best.ok_or_else(|| Error::invalid(format!("utterance {} has no hypotheses", list.utt_id)))
}

/// Rescores every list in parallel; output follows input order.
pub fn rescore_nbest<S: Scorer + ?Sized>(
    scorer: &S,
    vocab: &Vocabulary,
    lists: &[NBestList],
    weight: f64,
) -> Result<Vec<Choice>> {
    lists.par_iter().map(|l| choose(scorer, vocab, l, weight)).collect()
}

/// Per-user replacements for one entity component slot of a composite model.
#[derive(Debug, Clone, Default)]
pub struct PersonalComponents {
    /// Component index (≥ 1) that a user's component replaces.
    pub slot: usize,
    pub by_user: HashMap<String, Component>,
}

/// Like [`rescore_nbest`], but utterances with a user id are scored by a
/// copy of `model` whose component `personal.slot` is that user's. Unknown
/// users fall back to `model` with a warning.
pub fn rescore_nbest_personal(
    model: &CompositeModel,
    lists: &[NBestList],
    weight: f64,
    personal: &PersonalComponents,
) -> Result<Vec<Choice>> {
    let mut models: HashMap<&str, CompositeModel> = HashMap::new();
    let mut users: Vec<&str> = lists.iter().filter_map(|l| l.user.as_deref()).collect();
    users.sort_unstable();
    users.dedup();
    for u in users {
        match personal.by_user.get(u) {
            Some(c) => {
                let mut m = model.clone();
                m.replace_component(personal.slot, c.clone())?;
                models.insert(u, m);
            }
            None => warn!("no personal entities for user {u}; using the unified component"),
        }
    }
    lists
        .par_iter()
        .map(|l| {
            let m = l.user.as_deref().and_then(|u| models.get(u)).unwrap_or(model);
            choose(m, model.vocab(), l, weight)
        })
        .collect()
}

/// Reference transcript, optionally tagged with a subset name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub utt_id: String,
    pub text: String,
    pub subset: Option<String>,
}

/// Reads `utt_id \t reference [\t subset]`.
pub fn read_references<R: BufRead>(r: R) -> Result<Vec<Reference>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&f.len()) {
            return Err(Error::format(format!("reference line {}: expected 2 or 3 fields", n + 1)));
        }
        out.push(Reference {
            utt_id: f[0].to_string(),
            text: f[1].to_string(),
            subset: f.get(2).map(|s| s.trim()).filter(|s| !s.is_empty()).map(str::to_string),
        });
    }
    Ok(out)
}

pub fn write_references<W: Write>(mut w: W, refs: &[Reference]) -> Result<()> {
    for r in refs {
        match &r.subset {
            Some(s) => writeln!(w, "{}\t{}\t{s}", r.utt_id, r.text)?,
            None => writeln!(w, "{}\t{}", r.utt_id, r.text)?,
        }
    }
    Ok(())
}

fn reference_map(refs: &[Reference]) -> HashMap<&str, &Reference> {
    refs.iter().map(|r| (r.utt_id.as_str(), r)).collect()
}

/// Accumulated statistics under "all" and under each reference subset.
pub fn wer_by_subset(choices: &[Choice], refs: &[Reference]) -> Result<BTreeMap<String, WerStats>> {
    let map = reference_map(refs);
    let mut out: BTreeMap<String, WerStats> = BTreeMap::new();
    for c in choices {
        let r = map
            .get(c.utt_id.as_str())
            .ok_or_else(|| Error::invalid(format!("no reference for utterance {}", c.utt_id)))?;
        let s = wer(&r.text, &c.text)?;
        *out.entry("all".to_string()).or_default() += s;
        if let Some(sub) = &r.subset {
            *out.entry(sub.clone()).or_default() += s;
        }
    }
    Ok(out)
}

/// Oracle statistics per subset: the best hypothesis of every list.
pub fn oracle_by_subset(lists: &[NBestList], refs: &[Reference]) -> Result<BTreeMap<String, WerStats>> {
    let map = reference_map(refs);
    let mut out: BTreeMap<String, WerStats> = BTreeMap::new();
    for l in lists {
        let r = map
            .get(l.utt_id.as_str())
            .ok_or_else(|| Error::invalid(format!("no reference for utterance {}", l.utt_id)))?;
        let hyps: Vec<&str> = l.hyps.iter().map(|h| h.text.as_str()).collect();
        let s = oracle_wer(&r.text, &hyps)?;
        *out.entry("all".to_string()).or_default() += s;
        if let Some(sub) = &r.subset {
            *out.entry(sub.clone()).or_default() += s;
        }
    }
    Ok(out)
}

/// Interpolation weight with the lowest WER over `grid` (first on ties).
pub fn tune_weight<S: Scorer + ?Sized>(
    scorer: &S,
    vocab: &Vocabulary,
    lists: &[NBestList],
    refs: &[Reference],
    grid: &[f64],
) -> Result<(f64, WerStats)> {
    let mut best: Option<(f64, WerStats)> = None;
    for &w in grid {
        let choices = rescore_nbest(scorer, vocab, lists, w)?;
        let s = wer_by_subset(&choices, refs)?.remove("all").unwrap_or_default();
        if best.is_none_or(|(_, b)| s.errors() < b.errors()) {
            best = Some((w, s));
        }
    }
    best.ok_or_else(|| Error::invalid("empty weight grid"))
}

/// WER per system and subset, with the relative change against the first
/// system (the baseline) on the same subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub rows: Vec<WerRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerRow {
    pub system: String,
    pub subset: String,
    pub stats: WerStats,
    pub wer: f64,
    /// `(wer − baseline) / baseline`; 0 when the baseline WER is 0.
    pub rel_delta: f64,
}

impl WerReport {
    pub fn new(systems: Vec<(String, BTreeMap<String, WerStats>)>) -> Self {
        let baseline = systems.first().map(|(_, s)| s.clone()).unwrap_or_default();
        let mut rows = Vec::new();
        for (name, subsets) in systems {
            for (subset, stats) in subsets {
                let base = baseline.get(&subset).map_or(0.0, WerStats::wer);
                let wer = stats.wer();
                rows.push(WerRow {
                    system: name.clone(),
                    subset,
                    stats,
                    wer,
                    rel_delta: if base > 0.0 { (wer - base) / base } else { 0.0 },
                });
            }
        }
        WerReport { rows }
    }

    pub fn get(&self, system: &str, subset: &str) -> Option<&WerRow> {
        self.rows.iter().find(|r| r.system == system && r.subset == subset)
    }
}

impl fmt::Display for WerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "system\tsubset\tref_words\tsub\tins\tdel\twer\trel_delta")?;
        for r in &self.rows {
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{:+.4}",
                r.system,
                r.subset,
                r.stats.ref_words,
                r.stats.substitutions,
                r.stats.insertions,
                r.stats.deletions,
                r.wer,
                r.rel_delta
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::TokenSeq;

    /// Scores a sentence by how many times it contains "good_".
    struct Likes(Vocabulary);

    impl Scorer for Likes {
        fn token_log_probs(&self, seq: &TokenSeq) -> Result<Vec<f64>> {
            let good = self.0.id("good_").unwrap();
            Ok(seq.ids().iter().map(|&t| if t == good { 0.0 } else { -1.0 }).collect())
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_subwords(["good_", "bad_", "a_"]).unwrap()
    }

    const NBEST: &str = "u1\t1\t-1.0\ta bad\n\
                         u1\t2\t-1.5\ta good\n\
                         u1\t3\t-9.0\tgood good\tbob\n";

    #[test]
    fn parse_validates_structure() {
        assert!(read_nbest(NBEST.as_bytes()).is_err(), "user id differs within an utterance");
        let text = "u1\t2\t-1.5\ta good\nu1\t1\t-1.0\ta bad\nu2\t1\t0\ta\n";
        let lists = read_nbest(text.as_bytes()).unwrap();
        assert_eq!(lists.len(), 2);
        assert_eq!(lists[0].hyps[0].text, "a bad");
        let mut out = Vec::new();
        write_nbest(&mut out, &lists).unwrap();
        assert_eq!(read_nbest(&out[..]).unwrap(), lists);
        assert!(read_nbest("u1\t2\t0\ta\n".as_bytes()).is_err());
        assert!(read_nbest("u1\t1\t0\ta\nu2\t1\t0\ta\nu1\t2\t0\ta\n".as_bytes()).is_err());
        assert!(read_nbest("u1\tx\t0\ta\n".as_bytes()).is_err());
    }

    #[test]
    fn zero_weight_keeps_first_pass_best() {
        let v = vocab();
        let text = "u1\t1\t-1.0\ta bad\nu1\t2\t-1.5\ta good\nu2\t1\t-3\tbad\n";
        let lists = read_nbest(text.as_bytes()).unwrap();
        let c = rescore_nbest(&Likes(v.clone()), &v, &lists, 0.0).unwrap();
        assert_eq!(c.iter().map(|c| c.rank).collect::<Vec<_>>(), vec![1, 1]);
        let c = rescore_nbest(&Likes(v.clone()), &v, &lists, 0.9).unwrap();
        assert_eq!(c[0].text, "a good");
        // single hypothesis is always chosen
        assert_eq!(c[1].rank, 1);
        assert!(rescore_nbest(&Likes(v.clone()), &v, &lists, 1.5).is_err());
    }

    #[test]
    fn ties_go_to_the_lower_rank() {
        let v = vocab();
        let lists = read_nbest("u\t1\t-2\ta\nu\t2\t-2\ta\n".as_bytes()).unwrap();
        assert_eq!(rescore_nbest(&Likes(v.clone()), &v, &lists, 0.5).unwrap()[0].rank, 1);
    }

    #[test]
    fn report_rows_and_deltas() {
        let refs = read_references("u1\ta good\tentity\nu2\tbad\n".as_bytes()).unwrap();
        let v = vocab();
        let lists = read_nbest("u1\t1\t-1.0\ta bad\nu1\t2\t-1.5\ta good\nu2\t1\t-3\tbad\n".as_bytes()).unwrap();
        let first = wer_by_subset(&rescore_nbest(&Likes(v.clone()), &v, &lists, 0.0).unwrap(), &refs).unwrap();
        let lm = wer_by_subset(&rescore_nbest(&Likes(v.clone()), &v, &lists, 0.9).unwrap(), &refs).unwrap();
        let oracle = oracle_by_subset(&lists, &refs).unwrap();
        assert_eq!(first["all"].errors(), 1);
        assert_eq!(first["entity"].ref_words, 2);
        let report =
            WerReport::new(vec![("first-pass".into(), first), ("rescored".into(), lm), ("oracle".into(), oracle)]);
        assert_eq!(report.rows.len(), 6);
        assert_eq!(report.get("rescored", "all").unwrap().rel_delta, -1.0);
        assert_eq!(report.get("first-pass", "entity").unwrap().rel_delta, 0.0);
        assert_eq!(report.to_string().lines().count(), 7);
        let (w, s) = tune_weight(&Likes(v.clone()), &v, &lists, &refs, &[0.0, 0.5, 0.9]).unwrap();
        assert_eq!((w, s.errors()), (0.5, 0));
    }
}
