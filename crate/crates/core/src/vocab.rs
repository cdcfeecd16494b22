//! Shared subword vocabulary.
//!
//! Subwords are BPE pieces over characters. A piece that closes a word carries
//! a trailing `_` ("sodus_"), inner pieces do not ("sod"). Ids are dense, and
//! the first three are always `<s>`, `</s>` and `<unk>`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

pub const BOS_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
pub const UNK_ID: TokenId = 2;

const WORD_END: char = '_';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    subwords: Vec<String>,
    id_of: HashMap<String, TokenId>,
    max_piece_chars: usize,
}

/// A sentence as token ids, terminated by exactly one `</s>`.
///
/// The leading `<s>` is implicit and never stored.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        for &id in &ids {
            vocab.check(id)?;
        }
        match ids.iter().position(|&id| id == EOS_ID) {
            Some(p) if p + 1 == ids.len() => Ok(TokenSeq { ids }),
            _ => Err(Error::invalid("token sequence must contain exactly one </s>, in final position")),
        }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Previous-token input at each position: `<s>` followed by the sequence
    /// shifted right by one.
    pub fn inputs(&self) -> impl Iterator<Item = TokenId> + '_ {
        std::iter::once(BOS_ID).chain(self.ids[..self.ids.len() - 1].iter().copied())
    }
}

impl Vocabulary {
    /// Builds a vocabulary from pre-segmented subword strings, after the three
    /// reserved symbols.
    pub fn from_subwords<I, S>(pieces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut subwords = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
        subwords.extend(pieces.into_iter().map(Into::into));
        Self::from_full_list(subwords)
    }

    fn from_full_list(subwords: Vec<String>) -> Result<Self> {
        if subwords.len() < 3 || subwords[0] != BOS || subwords[1] != EOS || subwords[2] != UNK {
            return Err(Error::format("vocabulary must start with <s>, </s>, <unk>"));
        }
        let mut id_of = HashMap::with_capacity(subwords.len());
        let mut max_piece_chars = 1;
        for (i, s) in subwords.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::format(format!("empty subword at id {i}")));
            }
            if s.contains(char::is_whitespace) {
                return Err(Error::format(format!("subword {s:?} contains whitespace")));
            }
            if id_of.insert(s.clone(), i as TokenId).is_some() {
                return Err(Error::format(format!("duplicate subword {s:?}")));
            }
            if i >= 3 {
                max_piece_chars = max_piece_chars.max(s.chars().count());
            }
        }
        Ok(Vocabulary { subwords, id_of, max_piece_chars })
    }

    pub fn len(&self) -> usize {
        self.subwords.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn subword(&self, id: TokenId) -> Result<&str> {
        self.check(id)?;
        Ok(&self.subwords[id as usize])
    }

    pub fn id(&self, subword: &str) -> Option<TokenId> {
        self.id_of.get(subword).copied()
    }

    pub fn subwords(&self) -> &[String] {
        &self.subwords
    }

    pub fn check(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.subwords.len() {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange { id: id as usize, size: self.subwords.len() })
        }
    }

    /// True for word-final pieces and for the sentence delimiters.
    pub fn is_word_boundary(&self, id: TokenId) -> bool {
        match id {
            BOS_ID | EOS_ID => true,
            UNK_ID => false,
            _ => self.subwords.get(id as usize).is_some_and(|s| s.ends_with(WORD_END)),
        }
    }

    /// Greedy longest-match segmentation of each whitespace-separated word.
    pub fn encode(&self, text: &str) -> TokenSeq {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            self.encode_word(word, &mut ids);
        }
        ids.push(EOS_ID);
        TokenSeq { ids }
    }

    /// Word pieces only, without the sentence terminator.
    pub fn encode_words(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            self.encode_word(word, &mut ids);
        }
        ids
    }

    fn encode_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let mut chars: Vec<char> = word.chars().collect();
        chars.push(WORD_END);
        let mut pos = 0;
        let mut buf = String::new();
        while pos < chars.len() {
            // the trailing marker always travels with the character before it
            let remaining = chars.len() - pos;
            let mut matched = None;
            for len in (1..=self.max_piece_chars.min(remaining)).rev() {
                if pos + len == chars.len() - 1 {
                    continue;
                }
                buf.clear();
                buf.extend(&chars[pos..pos + len]);
                if let Some(&id) = self.id_of.get(buf.as_str()) {
                    if id > UNK_ID {
                        matched = Some((id, len));
                        break;
                    }
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    pos += len;
                }
                None => {
                    out.push(UNK_ID);
                    pos += if pos + 2 == chars.len() { 2 } else { 1 };
                }
            }
        }
    }

    pub fn decode(&self, seq: &TokenSeq) -> Result<String> {
        self.decode_ids(seq.ids())
    }

    /// Joins pieces back into words; `</s>` and `<s>` are dropped.
    pub fn decode_ids(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        let mut word = String::new();
        for &id in ids {
            self.check(id)?;
            match id {
                BOS_ID | EOS_ID => continue,
                UNK_ID => word.push_str(UNK),
                _ => {
                    let piece = &self.subwords[id as usize];
                    if let Some(stem) = piece.strip_suffix(WORD_END) {
                        word.push_str(stem);
                        if !out.is_empty() {
                            out.push(' ');
                        }
                        out.push_str(&word);
                        word.clear();
                    } else {
                        word.push_str(piece);
                    }
                }
            }
        }
        if !word.is_empty() {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&word);
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut text = String::with_capacity(self.subwords.len() * 6);
        for s in &self.subwords {
            writeln!(text, "{s}").expect("write to string");
        }
        w.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut subwords = Vec::new();
        for line in BufReader::new(r).lines() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            subwords.push(line.to_string());
        }
        Self::from_full_list(subwords)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Deterministic byte-pair-encoding vocabulary.
///
/// Base symbols are every (character, word-final) form seen in the corpus.
/// Merges repeatedly join the most frequent adjacent pair; ties go to the
/// lexicographically smallest pair.
pub fn build_vocab<I, S>(corpus: I, target_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut lines = 0usize;
    for line in corpus {
        lines += 1;
        for word in line.as_ref().split_whitespace() {
            if word.contains(WORD_END) {
                continue;
            }
            *word_counts.entry(word.to_string()).or_default() += 1;
        }
    }
    if lines == 0 || word_counts.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }

    let mut symbols: Vec<String> = Vec::new();
    let mut symbol_id: HashMap<String, usize> = HashMap::new();
    fn intern(s: String, symbols: &mut Vec<String>, ids: &mut HashMap<String, usize>) -> usize {
        *ids.entry(s.clone()).or_insert_with(|| {
            symbols.push(s);
            symbols.len() - 1
        })
    }

    let mut words: Vec<(Vec<usize>, u64)> = Vec::with_capacity(word_counts.len());
    for (word, &count) in &word_counts {
        let chars: Vec<char> = word.chars().collect();
        let seq = chars
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut s = c.to_string();
                if i + 1 == chars.len() {
                    s.push(WORD_END);
                }
                intern(s, &mut symbols, &mut symbol_id)
            })
            .collect();
        words.push((seq, count));
    }

    let base = symbols.len();
    if target_size < base + 3 {
        return Err(Error::invalid(format!(
            "target size {target_size} is below the {} base symbols plus 3 reserved",
            base
        )));
    }

    let mut base_sorted: Vec<String> = symbols.clone();
    base_sorted.sort();
    let mut merged: Vec<String> = Vec::new();
    let reserved = [BOS, EOS, UNK];

    while base + merged.len() + 3 < target_size {
        let mut pair_counts: HashMap<(usize, usize), u64> = HashMap::new();
        for (seq, count) in &words {
            for w in seq.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += count;
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|&((a, b), _)| {
                let joined = format!("{}{}", symbols[a], symbols[b]);
                !reserved.contains(&joined.as_str())
            })
            .max_by(|&((a1, b1), c1), &((a2, b2), c2)| {
                c1.cmp(&c2).then_with(|| (&symbols[a2], &symbols[b2]).cmp(&(&symbols[a1], &symbols[b1])))
            });
        let Some(((a, b), _)) = best else { break };
        let joined = format!("{}{}", symbols[a], symbols[b]);
        let fresh = !symbol_id.contains_key(&joined);
        let new_id = intern(joined.clone(), &mut symbols, &mut symbol_id);
        if fresh {
            merged.push(joined);
        }
        for (seq, _) in &mut words {
            let mut i = 0;
            let mut out = Vec::with_capacity(seq.len());
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(seq[i]);
                    i += 1;
                }
            }
            *seq = out;
        }
    }

    Vocabulary::from_subwords(base_sorted.into_iter().chain(merged))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_character_corpus() {
        let v = build_vocab(["a a"], 10).unwrap();
        assert!(v.id("a_").is_some());
        assert_eq!(&v.subwords()[..3], &[BOS, EOS, UNK]);
    }

    #[test]
    fn empty_corpus_and_small_target_are_errors() {
        assert!(build_vocab(Vec::<String>::new(), 10).is_err());
        assert!(build_vocab(["   "], 10).is_err());
        // 'a', 'b_' base symbols + 3 reserved = 5
        assert!(build_vocab(["ab"], 4).is_err());
        assert!(build_vocab(["ab"], 5).is_ok());
    }

    #[test]
    fn deterministic() {
        let corpus = ["the town contains a village", "named sodus point", "the sodus"];
        let a = build_vocab(corpus, 40).unwrap();
        let b = build_vocab(corpus, 40).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 40);
    }

    #[test]
    fn empty_sentence_encodes_to_terminator() {
        let v = build_vocab(["a"], 10).unwrap();
        let s = v.encode("");
        assert_eq!(s.ids(), &[EOS_ID]);
        assert_eq!(v.decode(&s).unwrap(), "");
    }

    #[test]
    fn whole_word_piece_is_single_token() {
        let v = Vocabulary::from_subwords(["s", "o", "d", "u", "s_", "sod", "sodus_"]).unwrap();
        let s = v.encode("sodus");
        assert_eq!(s.ids(), &[v.id("sodus_").unwrap(), EOS_ID]);
        assert_eq!(v.decode(&s).unwrap(), "sodus");
    }

    #[test]
    fn greedy_longest_match() {
        let v = Vocabulary::from_subwords(["s", "o", "d", "u", "s_", "sod", "us_"]).unwrap();
        let s = v.encode("sodus sods");
        let pieces: Vec<&str> = s.ids().iter().map(|&i| v.subword(i).unwrap()).collect();
        assert_eq!(pieces, ["sod", "us_", "sod", "s_", "</s>"]);
        assert_eq!(v.decode(&s).unwrap(), "sodus sods");
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let v = Vocabulary::from_subwords(["a", "a_"]).unwrap();
        let s = v.encode("axa");
        assert_eq!(s.ids(), &[v.id("a").unwrap(), UNK_ID, v.id("a_").unwrap(), EOS_ID]);
        let s = v.encode("ax");
        assert_eq!(s.ids(), &[v.id("a").unwrap(), UNK_ID, EOS_ID]);
    }

    #[test]
    fn word_boundaries() {
        let v = Vocabulary::from_subwords(["sod", "us_", "sodus_"]).unwrap();
        assert!(v.is_word_boundary(v.id("sodus_").unwrap()));
        assert!(!v.is_word_boundary(v.id("sod").unwrap()));
        assert!(v.is_word_boundary(BOS_ID));
        assert!(v.is_word_boundary(EOS_ID));
        assert!(!v.is_word_boundary(UNK_ID));
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let v = build_vocab(["a"], 10).unwrap();
        assert!(matches!(v.decode_ids(&[99]), Err(Error::TokenOutOfRange { id: 99, .. })));
    }

    #[test]
    fn token_seq_validation() {
        let v = build_vocab(["a b"], 10).unwrap();
        assert!(TokenSeq::new(vec![3, EOS_ID], &v).is_ok());
        assert!(TokenSeq::new(vec![3], &v).is_err());
        assert!(TokenSeq::new(vec![EOS_ID, EOS_ID], &v).is_err());
        assert!(TokenSeq::new(vec![100, EOS_ID], &v).is_err());
    }

    #[test]
    fn file_round_trip() {
        let v = build_vocab(["the town contains a village named sodus"], 30).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("<s>\n</s>\n<unk>\n"));
        assert_eq!(Vocabulary::read_from(&buf[..]).unwrap(), v);
    }
}
