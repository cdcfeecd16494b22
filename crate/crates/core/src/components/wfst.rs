//! Weighted acceptors over subword tokens in the log semiring.
//!
//! Weights are negative natural-log probabilities: "plus" is log-sum-exp on
//! the negated values and "times" is addition. An entity list becomes a union
//! of weighted token chains, which is then determinized, weight-pushed so
//! every state is stochastic, minimized, and finally given a dead state.
//! Any token without a matching arc leads to the dead state, which only
//! emits `</s>`.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::neural::checkpoint::Cursor;
use crate::vocab::{TokenId, Vocabulary, BOS_ID, EOS_ID, UNK_ID};

pub const WFST_MAGIC: &[u8; 8] = b"CLMWFST\0";
pub const WFST_VERSION: u32 = 1;

/// Weight quantum used when comparing weights for state equivalence.
const QUANTUM: f64 = 1e-12;

pub type StateId = u32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WfstArc {
    pub label: TokenId,
    pub weight: f64,
    pub target: StateId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WfstNode {
    /// `+inf` for non-final states.
    pub final_weight: f64,
    /// Sorted by label; at most one arc per label.
    pub arcs: Vec<WfstArc>,
}

impl WfstNode {
    fn arc(&self, label: TokenId) -> Option<&WfstArc> {
        self.arcs.binary_search_by_key(&label, |a| a.label).ok().map(|i| &self.arcs[i])
    }
}

/// Deterministic, stochastic acceptor with an appended dead state.
#[derive(Debug, Clone, PartialEq)]
pub struct WfstComponent {
    vocab_size: usize,
    start: StateId,
    dead: StateId,
    states: Vec<WfstNode>,
}

/// Posterior over automaton states as `(state, ln weight)` pairs; the
/// weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WfstState {
    pub(crate) set: Vec<(StateId, f64)>,
}

impl WfstState {
    pub fn entries(&self) -> &[(StateId, f64)] {
        &self.set
    }
}

#[derive(Debug, Clone)]
pub struct FstBuildOptions {
    /// Phrases longer than this many tokens are dropped.
    pub max_tokens: Option<usize>,
}

impl Default for FstBuildOptions {
    fn default() -> Self {
        FstBuildOptions { max_tokens: Some(16) }
    }
}

/// Possibly non-deterministic weighted acceptor used during construction.
#[derive(Debug, Clone, Default)]
pub struct RawFst {
    pub start: StateId,
    pub states: Vec<RawState>,
}

#[derive(Debug, Clone, Default)]
pub struct RawState {
    pub final_weight: Option<f64>,
    pub arcs: Vec<WfstArc>,
}

impl RawFst {
    fn add_state(&mut self) -> StateId {
        self.states.push(RawState::default());
        (self.states.len() - 1) as StateId
    }
}

/// `-ln(e^-a + e^-b)`
pub fn log_plus(a: f64, b: f64) -> f64 {
    if a == f64::INFINITY {
        return b;
    }
    if b == f64::INFINITY {
        return a;
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    lo - (-(hi - lo)).exp().ln_1p()
}

fn quantize(w: f64) -> i64 {
    (w / QUANTUM).round() as i64
}

/// Encodes `(phrase, count)` pairs, merges duplicates and normalizes counts
/// into probabilities.
pub fn encode_entities(
    entities: &[(String, f64)],
    vocab: &Vocabulary,
    options: &FstBuildOptions,
) -> Result<Vec<(Vec<TokenId>, f64)>> {
    if entities.is_empty() {
        return Err(Error::invalid("empty entity list"));
    }
    let mut merged: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
    let mut dropped = 0usize;
    for (phrase, count) in entities {
        if !(*count > 0.0 && count.is_finite()) {
            return Err(Error::invalid(format!("entity {phrase:?} has non-positive count {count}")));
        }
        let ids = vocab.encode_words(phrase);
        if ids.is_empty() {
            return Err(Error::invalid(format!("entity {phrase:?} encodes to no tokens")));
        }
        if ids.contains(&UNK_ID) {
            return Err(Error::invalid(format!("entity {phrase:?} contains characters outside the vocabulary")));
        }
        if options.max_tokens.is_some_and(|m| ids.len() > m) {
            dropped += 1;
            continue;
        }
        *merged.entry(ids).or_default() += count;
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} entities longer than the token limit");
    }
    if merged.is_empty() {
        return Err(Error::invalid("no entities left after length filtering"));
    }
    let total: f64 = merged.values().sum();
    Ok(merged.into_iter().map(|(k, c)| (k, c / total)).collect())
}

/// Union of one weighted chain per phrase. The phrase probability sits on the
/// first arc.
pub fn union_of_chains(phrases: &[(Vec<TokenId>, f64)]) -> RawFst {
    let mut fst = RawFst::default();
    fst.start = fst.add_state();
    for (ids, p) in phrases {
        let mut cur = fst.start;
        for (k, &label) in ids.iter().enumerate() {
            let next = fst.add_state();
            let weight = if k == 0 { -p.ln() } else { 0.0 };
            fst.states[cur as usize].arcs.push(WfstArc { label, weight, target: next });
            cur = next;
        }
        fst.states[cur as usize].final_weight = Some(0.0);
    }
    fst
}

/// Weighted subset construction in the log semiring. Input must be acyclic.
pub fn determinize(fst: &RawFst) -> RawFst {
    type Subset = Vec<(StateId, f64)>;
    let key = |s: &Subset| -> Vec<(StateId, i64)> { s.iter().map(|&(q, r)| (q, quantize(r))).collect() };

    let mut out = RawFst::default();
    let mut index: HashMap<Vec<(StateId, i64)>, StateId> = HashMap::new();
    let mut queue: Vec<Subset> = Vec::new();

    let init: Subset = vec![(fst.start, 0.0)];
    out.start = out.add_state();
    index.insert(key(&init), out.start);
    queue.push(init);
    let mut next_in_queue = 0;

    while next_in_queue < queue.len() {
        let subset = queue[next_in_queue].clone();
        let src = next_in_queue as StateId;
        next_in_queue += 1;

        let mut final_w = f64::INFINITY;
        let mut by_label: BTreeMap<TokenId, BTreeMap<StateId, f64>> = BTreeMap::new();
        for &(q, r) in &subset {
            let st = &fst.states[q as usize];
            if let Some(f) = st.final_weight {
                final_w = log_plus(final_w, r + f);
            }
            for arc in &st.arcs {
                let e = by_label.entry(arc.label).or_default();
                let w = e.entry(arc.target).or_insert(f64::INFINITY);
                *w = log_plus(*w, r + arc.weight);
            }
        }
        if final_w.is_finite() {
            out.states[src as usize].final_weight = Some(final_w);
        }
        for (label, targets) in by_label {
            let total = targets.values().fold(f64::INFINITY, |acc, &w| log_plus(acc, w));
            let next: Subset = targets.into_iter().map(|(q, w)| (q, w - total)).collect();
            let k = key(&next);
            let target = match index.get(&k) {
                Some(&t) => t,
                None => {
                    let t = out.add_state();
                    index.insert(k, t);
                    queue.push(next);
                    t
                }
            };
            out.states[src as usize].arcs.push(WfstArc { label, weight: total, target });
        }
    }
    out
}

/// States in an order where every arc goes forward.
fn topo_order(fst: &RawFst) -> Result<Vec<StateId>> {
    let n = fst.states.len();
    let mut indeg = vec![0usize; n];
    for s in &fst.states {
        for a in &s.arcs {
            indeg[a.target as usize] += 1;
        }
    }
    let mut stack: Vec<StateId> = (0..n as StateId).filter(|&q| indeg[q as usize] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(q) = stack.pop() {
        order.push(q);
        for a in &fst.states[q as usize].arcs {
            indeg[a.target as usize] -= 1;
            if indeg[a.target as usize] == 0 {
                stack.push(a.target);
            }
        }
    }
    if order.len() != n {
        return Err(Error::invalid("automaton has a cycle"));
    }
    Ok(order)
}

/// Pushes weights toward the start so each state's outgoing mass is one.
/// Returns the total weight of the automaton that was divided out.
pub fn push_weights(fst: &mut RawFst) -> Result<f64> {
    let order = topo_order(fst)?;
    let mut dist = vec![f64::INFINITY; fst.states.len()];
    for &q in order.iter().rev() {
        let st = &fst.states[q as usize];
        let mut d = st.final_weight.unwrap_or(f64::INFINITY);
        for a in &st.arcs {
            d = log_plus(d, a.weight + dist[a.target as usize]);
        }
        dist[q as usize] = d;
    }
    for (q, st) in fst.states.iter_mut().enumerate() {
        let dq = dist[q];
        if !dq.is_finite() {
            continue;
        }
        if let Some(f) = st.final_weight.as_mut() {
            *f -= dq;
        }
        for a in &mut st.arcs {
            a.weight += dist[a.target as usize] - dq;
        }
    }
    Ok(dist[fst.start as usize])
}

/// Merges equivalent states of an acyclic deterministic acceptor. Two states
/// are equivalent when their final weights and their (label, weight,
/// target class) arc lists coincide.
pub fn minimize(fst: &RawFst) -> Result<RawFst> {
    type Sig = (Option<i64>, Vec<(TokenId, i64, usize)>);
    let order = topo_order(fst)?;
    let mut class = vec![usize::MAX; fst.states.len()];
    let mut classes: HashMap<Sig, usize> = HashMap::new();
    let mut reps: Vec<StateId> = Vec::new();
    for &q in order.iter().rev() {
        let st = &fst.states[q as usize];
        let mut arcs: Vec<(TokenId, i64, usize)> =
            st.arcs.iter().map(|a| (a.label, quantize(a.weight), class[a.target as usize])).collect();
        arcs.sort_unstable();
        let sig = (st.final_weight.map(quantize), arcs);
        let next = classes.len();
        let c = *classes.entry(sig).or_insert(next);
        if c == reps.len() {
            reps.push(q);
        }
        class[q as usize] = c;
    }

    // renumber breadth-first from the start for a canonical layout
    let mut new_id = vec![u32::MAX; reps.len()];
    let mut out = RawFst::default();
    let mut queue = vec![class[fst.start as usize]];
    new_id[queue[0]] = out.add_state();
    out.start = 0;
    let mut head = 0;
    while head < queue.len() {
        let c = queue[head];
        head += 1;
        let rep = &fst.states[reps[c] as usize];
        let src = new_id[c];
        let mut arcs = Vec::with_capacity(rep.arcs.len());
        for a in &rep.arcs {
            let tc = class[a.target as usize];
            if new_id[tc] == u32::MAX {
                new_id[tc] = out.add_state();
                queue.push(tc);
            }
            arcs.push(WfstArc { label: a.label, weight: a.weight, target: new_id[tc] });
        }
        arcs.sort_by_key(|a| a.label);
        let s = &mut out.states[src as usize];
        s.final_weight = rep.final_weight;
        s.arcs = arcs;
    }
    Ok(out)
}

/// Builds the entity component: union, determinize, push, minimize, then
/// append the dead state.
pub fn fst_build(entities: &[(String, f64)], vocab: &Vocabulary, options: &FstBuildOptions) -> Result<WfstComponent> {
    let phrases = encode_entities(entities, vocab, options)?;
    let raw = union_of_chains(&phrases);
    let mut det = determinize(&raw);
    push_weights(&mut det)?;
    let min = minimize(&det)?;
    WfstComponent::from_raw(min, vocab.len())
}

impl WfstComponent {
    /// Takes a deterministic stochastic acceptor and appends the dead state.
    pub fn from_raw(raw: RawFst, vocab_size: usize) -> Result<Self> {
        let mut states: Vec<WfstNode> = raw
            .states
            .into_iter()
            .map(|s| {
                let mut arcs = s.arcs;
                arcs.sort_by_key(|a| a.label);
                WfstNode { final_weight: s.final_weight.unwrap_or(f64::INFINITY), arcs }
            })
            .collect();
        let dead = states.len() as StateId;
        states.push(WfstNode { final_weight: 0.0, arcs: Vec::new() });
        let c = WfstComponent { vocab_size, start: raw.start, dead, states };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len() as StateId;
        if self.start >= n || self.dead >= n {
            return Err(Error::format("start or dead state out of range"));
        }
        let dead = &self.states[self.dead as usize];
        if !dead.arcs.is_empty() || dead.final_weight != 0.0 {
            return Err(Error::format("dead state must be final with weight 0 and no arcs"));
        }
        for (q, st) in self.states.iter().enumerate() {
            let mut mass = if st.final_weight.is_finite() { (-st.final_weight).exp() } else { 0.0 };
            for w in st.arcs.windows(2) {
                if w[0].label >= w[1].label {
                    return Err(Error::format(format!("state {q} is not deterministic")));
                }
            }
            for a in &st.arcs {
                if a.target >= n || a.target == self.dead {
                    return Err(Error::format(format!("state {q} has an invalid arc target")));
                }
                if a.label as usize >= self.vocab_size || a.label <= UNK_ID {
                    return Err(Error::format(format!("state {q} has an invalid arc label")));
                }
                mass += (-a.weight).exp();
            }
            if (mass - 1.0).abs() > 1e-9 {
                return Err(Error::format(format!("state {q} is not stochastic (mass {mass})")));
            }
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.states.iter().map(|s| s.arcs.len()).sum()
    }

    pub fn start(&self) -> StateId {
        self.start
    }

    pub fn dead(&self) -> StateId {
        self.dead
    }

    pub fn node(&self, q: StateId) -> &WfstNode {
        &self.states[q as usize]
    }

    pub fn start_state(&self) -> WfstState {
        WfstState { set: vec![(self.start, 0.0)] }
    }

    pub fn dead_state(&self) -> WfstState {
        WfstState { set: vec![(self.dead, 0.0)] }
    }

    /// Consumes `token`. `<s>` leaves the state unchanged. The new posterior
    /// keeps the states reachable by `token`; when none is, all mass moves to
    /// the dead state, which absorbs every token.
    pub fn advance(&self, state: &WfstState, token: TokenId) -> WfstState {
        if token == BOS_ID {
            return state.clone();
        }
        let mut next: BTreeMap<StateId, f64> = BTreeMap::new();
        for &(q, lw) in &state.set {
            // the dead state emits only </s>, so it has no likelihood here
            if q == self.dead {
                continue;
            }
            if let Some(a) = self.states[q as usize].arc(token) {
                let e = next.entry(a.target).or_insert(f64::NEG_INFINITY);
                *e = ln_add(*e, lw - a.weight);
            }
        }
        if next.is_empty() {
            return self.dead_state();
        }
        let z = next.values().fold(f64::NEG_INFINITY, |acc, &v| ln_add(acc, v));
        WfstState { set: next.into_iter().map(|(q, v)| (q, v - z)).collect() }
    }

    /// Natural-log probability of emitting `token` next.
    pub fn log_prob(&self, state: &WfstState, token: TokenId) -> f64 {
        let mut acc = f64::NEG_INFINITY;
        for &(q, lw) in &state.set {
            let st = &self.states[q as usize];
            let w = if token == EOS_ID { st.final_weight } else { st.arc(token).map_or(f64::INFINITY, |a| a.weight) };
            if w.is_finite() {
                acc = ln_add(acc, lw - w);
            }
        }
        acc
    }

    pub fn log_distribution(&self, state: &WfstState) -> Vec<f64> {
        let mut probs = vec![0.0f64; self.vocab_size];
        for &(q, lw) in &state.set {
            let p = lw.exp();
            let st = &self.states[q as usize];
            if st.final_weight.is_finite() {
                probs[EOS_ID as usize] += p * (-st.final_weight).exp();
            }
            for a in &st.arcs {
                probs[a.label as usize] += p * (-a.weight).exp();
            }
        }
        probs.into_iter().map(f64::ln).collect()
    }

    /// Total probability of the token sequence followed by `</s>`, following
    /// arcs from the start state (no dead-state continuation).
    pub fn phrase_log_prob(&self, ids: &[TokenId]) -> f64 {
        let mut q = self.start;
        let mut total = 0.0;
        for &t in ids {
            match self.states[q as usize].arc(t) {
                Some(a) => {
                    total -= a.weight;
                    q = a.target;
                }
                None => return f64::NEG_INFINITY,
            }
        }
        total - self.states[q as usize].final_weight
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(WFST_MAGIC);
        buf.extend_from_slice(&WFST_VERSION.to_le_bytes());
        for v in [self.vocab_size as u32, self.states.len() as u32, self.start, self.dead] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for st in &self.states {
            buf.extend_from_slice(&st.final_weight.to_le_bytes());
            buf.extend_from_slice(&(st.arcs.len() as u32).to_le_bytes());
            for a in &st.arcs {
                buf.extend_from_slice(&a.label.to_le_bytes());
                buf.extend_from_slice(&a.weight.to_le_bytes());
                buf.extend_from_slice(&a.target.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("write to vec");
        v
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take(8)? != WFST_MAGIC {
            return Err(Error::format("not a WFST file (bad magic)"));
        }
        let version = cur.u32()?;
        if version != WFST_VERSION {
            return Err(Error::format(format!("unsupported WFST version {version}")));
        }
        let vocab_size = cur.u32()? as usize;
        let n = cur.u32()? as usize;
        let start = cur.u32()?;
        let dead = cur.u32()?;
        let mut states = Vec::with_capacity(n);
        for _ in 0..n {
            let final_weight = cur.f64()?;
            let na = cur.u32()? as usize;
            let mut arcs = Vec::with_capacity(na);
            for _ in 0..na {
                let label = cur.u32()?;
                let weight = cur.f64()?;
                let target = cur.u32()?;
                arcs.push(WfstArc { label, weight, target });
            }
            states.push(WfstNode { final_weight, arcs });
        }
        if !cur.is_done() {
            return Err(Error::format("trailing bytes in WFST file"));
        }
        let c = WfstComponent { vocab_size, start, dead, states };
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn ln_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Reads an entity list: one phrase per line, optionally followed by a TAB
/// and a positive count (default 1).
pub fn read_entity_list<R: Read>(r: R) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (phrase, count) = match line.split_once('\t') {
            Some((p, c)) => {
                let c: f64 = c.trim().parse().map_err(|_| Error::format(format!("line {}: bad count {c:?}", n + 1)))?;
                (p, c)
            }
            None => (line, 1.0),
        };
        out.push((phrase.trim().to_string(), count));
    }
    Ok(out)
}

pub fn write_entity_list<W: Write>(mut w: W, entities: &[(String, f64)]) -> Result<()> {
    let mut s = String::new();
    for (p, c) in entities {
        s.push_str(p);
        s.push('\t');
        s.push_str(&format!("{c}"));
        s.push('\n');
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}
