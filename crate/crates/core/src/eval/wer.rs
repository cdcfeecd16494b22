use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
}

impl WerStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            0.0
        } else {
            self.errors() as f64 / self.ref_words as f64
        }
    }
}

impl AddAssign for WerStats {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
        self.ref_words += o.ref_words;
    }
}

/// Unit-cost Levenshtein alignment over whitespace-separated words. Among
/// minimal-cost alignments, the backtrace prefers a diagonal step, then a
/// deletion, then an insertion.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerStats> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::invalid("empty reference"));
    }
    let (n, m) = (r.len(), h.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut s = WerStats { ref_words: n, ..WerStats::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            s.substitutions += usize::from(r[i - 1] != h[j - 1]);
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            s.deletions += 1;
            i -= 1;
        } else {
            s.insertions += 1;
            j -= 1;
        }
    }
    debug_assert_eq!(s.errors(), d[n][m]);
    Ok(s)
}

/// Statistics of the lowest-error hypothesis (first on ties).
pub fn oracle_wer(reference: &str, hypotheses: &[&str]) -> Result<WerStats> {
    let mut best: Option<WerStats> = None;
    for h in hypotheses {
        let s = wer(reference, h)?;
        if best.is_none_or(|b| s.errors() < b.errors()) {
            best = Some(s);
        }
    }
    best.ok_or_else(|| Error::invalid("no hypotheses"))
}
