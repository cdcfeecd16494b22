//! The compositional model: a context encoder over the (frozen) default
//! embeddings, one learnable embedding per component, an activation network
//! deciding when each entity component starts a span, and an attention
//! network interpolating every component's next-token distribution.
//!
//! Activation and attention networks are single parameter sets applied per
//! component; rows of a batch are laid out sequence-major, component-minor.

mod trace;

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use trace::{write_traces_json, write_traces_tsv, StepTrace};

use crate::components::{Component, ComponentState, LstmLm};
use crate::error::{Error, Result};
use crate::neural::graph::log_sum_exp;
use crate::neural::layers::{dropout, Affine, LstmLayer, INIT_SCALE};
use crate::neural::{Checkpoint, Graph, NodeId, ParamId, ParameterSet, Partition, Tensor};
use crate::vocab::{TokenId, TokenSeq, Vocabulary, EOS_ID};

pub const COMPOSITE_CHECKPOINT_KIND: &str = "composite";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositeConfig {
    pub ctx_width: usize,
    pub embed_width: usize,
    pub act_width: usize,
    pub act_layers: usize,
    pub att_width: usize,
    pub att_layers: usize,
    pub dropout: f64,
    /// Lower clamp for log p(</s>) network inputs, which can be -inf for
    /// automaton states that cannot end a phrase.
    pub log_eos_floor: f64,
}

impl Default for CompositeConfig {
    fn default() -> Self {
        CompositeConfig {
            ctx_width: 256,
            embed_width: 256,
            act_width: 128,
            act_layers: 2,
            att_width: 128,
            att_layers: 1,
            dropout: 0.2,
            log_eos_floor: -20.0,
        }
    }
}

impl CompositeConfig {
    /// Width of the activation and attention network inputs:
    /// context, component embedding, activation flag, log p(</s>).
    pub fn input_width(&self) -> usize {
        self.ctx_width + self.embed_width + 2
    }
}

#[derive(Debug, Clone)]
pub struct CompositeModel {
    config: CompositeConfig,
    vocab: Vocabulary,
    components: Vec<Component>,
    embeddings: Arc<Tensor>,
    params: ParameterSet,
    ctx: LstmLayer,
    comp_emb: ParamId,
    act: Vec<LstmLayer>,
    act_proj: Affine,
    att: Vec<LstmLayer>,
    att_proj: Affine,
}

/// Recurrent network state for a batch of sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState {
    rows: usize,
    ctx: (Arc<Tensor>, Arc<Tensor>),
    act: Vec<(Arc<Tensor>, Arc<Tensor>)>,
    att: Vec<(Arc<Tensor>, Arc<Tensor>)>,
    /// `act^i_{t-1}` for entity components, `[rows * N]`.
    prev_act: Vec<bool>,
    /// Clamped `log p^i(w_{t-1} = </s>)` for entity components, `[rows * N]`.
    prev_log_eos: Vec<f64>,
    /// Tokens consumed so far per sequence.
    pos: Vec<usize>,
}

impl NetState {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn positions(&self) -> &[usize] {
        &self.pos
    }

    /// Resets the given sequences to the start of a sentence.
    pub fn reset_rows(&mut self, rows: &[usize], n: usize) {
        if rows.is_empty() {
            return;
        }
        let clear = |t: &mut Arc<Tensor>, per: usize| {
            let t = Arc::make_mut(t);
            for &r in rows {
                for k in 0..per {
                    t.row_mut(r * per + k).fill(0.0);
                }
            }
        };
        clear(&mut self.ctx.0, 1);
        clear(&mut self.ctx.1, 1);
        for (h, c) in &mut self.act {
            clear(h, n);
            clear(c, n);
        }
        for (h, c) in &mut self.att {
            clear(h, n + 1);
            clear(c, n + 1);
        }
        for &r in rows {
            self.pos[r] = 0;
            for k in 0..n {
                self.prev_act[r * n + k] = false;
                self.prev_log_eos[r * n + k] = 0.0;
            }
        }
    }
}

/// Inference state for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeState {
    pub net: NetState,
    pub components: Vec<ComponentState>,
}

/// Result of the activation network for one step.
#[derive(Debug, Clone)]
pub struct PolicyStep {
    /// Per sequence: whether the previous token ends a word.
    pub boundary: Vec<bool>,
    /// `[rows * N, 1]` activation probabilities, when any row is at a boundary.
    pub pi_node: Option<NodeId>,
    /// Reported π per `(row, component)`; 0 where not at a boundary.
    pub pi: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionStep {
    /// `[rows * (N + 1), 1]`
    pub logits: NodeId,
    /// `[rows, N + 1]` log attention weights.
    pub log_alpha: NodeId,
}

/// Everything a single inference step produces.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub boundary: bool,
    pub pi: Vec<f64>,
    pub act: Vec<bool>,
    pub att_logit: Vec<f64>,
    pub alpha: Vec<f64>,
    pub log_dist: Vec<f64>,
    pub component_log_dists: Vec<Vec<f64>>,
}

impl StepOutput {
    pub fn trace(&self, position: usize, prev: TokenId, token: TokenId) -> StepTrace {
        StepTrace {
            position,
            prev,
            token,
            pi: self.pi.clone(),
            act: self.act.clone(),
            att_logit: self.att_logit.clone(),
            alpha: self.alpha.clone(),
            log_p_components: self.component_log_dists.iter().map(|d| d[token as usize]).collect(),
            log_p: self.log_dist[token as usize],
            log_p_default: self.component_log_dists[0][token as usize],
        }
    }
}

/// How activations are chosen while scoring.
#[derive(Debug, Clone, PartialEq)]
pub enum ActivationMode {
    /// `act = [π >= threshold]` at word boundaries.
    Threshold(f64),
    /// Fixed bits per position, `N` per step.
    Given(Vec<Vec<bool>>),
}

impl CompositeModel {
    /// `components[0]` is the default model and must be an LSTM LM.
    pub fn new<R: Rng>(
        vocab: Vocabulary,
        components: Vec<Component>,
        config: CompositeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let embeddings = check_components(&vocab, &components)?;
        if config.ctx_width == 0 || config.embed_width == 0 || config.act_width == 0 || config.att_width == 0 {
            return Err(Error::invalid("network widths must be positive"));
        }
        if config.act_layers == 0 || config.att_layers == 0 {
            return Err(Error::invalid("networks need at least one layer"));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::invalid(format!("dropout {} not in [0, 1)", config.dropout)));
        }
        let (th, ze) = (Partition::Theta, Partition::Zeta);
        let input = config.input_width();
        let mut params = ParameterSet::new();
        let ctx = LstmLayer::new(&mut params, "ctx", embeddings.cols(), config.ctx_width, th, rng);
        let comp_emb =
            params.add_uniform("component_embedding", components.len(), config.embed_width, INIT_SCALE, th, rng);
        let act = (0..config.act_layers)
            .map(|l| {
                let w = if l == 0 { input } else { config.act_width };
                LstmLayer::new(&mut params, &format!("act{l}"), w, config.act_width, ze, rng)
            })
            .collect();
        let act_proj = Affine::zeroed(&mut params, "act_proj", config.act_width, 1, ze);
        let att = (0..config.att_layers)
            .map(|l| {
                let w = if l == 0 { input } else { config.att_width };
                LstmLayer::new(&mut params, &format!("att{l}"), w, config.att_width, th, rng)
            })
            .collect();
        let att_proj = Affine::zeroed(&mut params, "att_proj", config.att_width, 1, th);
        Ok(CompositeModel {
            config,
            vocab,
            components,
            embeddings,
            params,
            ctx,
            comp_emb,
            act,
            act_proj,
            att,
            att_proj,
        })
    }

    fn bind(
        vocab: Vocabulary,
        components: Vec<Component>,
        config: CompositeConfig,
        params: ParameterSet,
    ) -> Result<Self> {
        let embeddings = check_components(&vocab, &components)?;
        let lookup = |n: &str| params.id(n).ok_or_else(|| Error::format(format!("missing parameter {n}")));
        let ctx = LstmLayer::bind(&params, "ctx")?;
        let comp_emb = lookup("component_embedding")?;
        if params.get(comp_emb).rows() != components.len() || params.get(comp_emb).cols() != config.embed_width {
            return Err(Error::format("component embedding shape does not match components"));
        }
        if ctx.input != embeddings.cols() || ctx.hidden != config.ctx_width {
            return Err(Error::format("context encoder shape does not match config"));
        }
        let act =
            (0..config.act_layers).map(|l| LstmLayer::bind(&params, &format!("act{l}"))).collect::<Result<Vec<_>>>()?;
        let att =
            (0..config.att_layers).map(|l| LstmLayer::bind(&params, &format!("att{l}"))).collect::<Result<Vec<_>>>()?;
        let input = config.input_width();
        if act[0].input != input || att[0].input != input {
            return Err(Error::format("network input width does not match config"));
        }
        Ok(CompositeModel {
            act_proj: Affine::bind(&params, "act_proj")?,
            att_proj: Affine::bind(&params, "att_proj")?,
            config,
            vocab,
            components,
            embeddings,
            params,
            ctx,
            comp_emb,
            act,
            att,
        })
    }

    pub fn config(&self) -> &CompositeConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// All components, default first.
    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Number of entity components (excluding the default).
    pub fn num_entity_components(&self) -> usize {
        self.components.len() - 1
    }

    pub fn default_model(&self) -> &LstmLm {
        match &self.components[0] {
            Component::Lstm(m) => m,
            Component::Wfst(_) => unreachable!("checked at construction"),
        }
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Swaps entity component `i` (1-based) for another over the same vocabulary.
    pub fn replace_component(&mut self, i: usize, component: Component) -> Result<()> {
        if i == 0 || i >= self.components.len() {
            return Err(Error::invalid(format!("no entity component {i}")));
        }
        if component.vocab_size() != self.vocab.len() {
            return Err(Error::invalid("component vocabulary size differs from model"));
        }
        self.components[i] = component;
        Ok(())
    }

    pub fn start_net_state(&self, rows: usize) -> NetState {
        let n = self.num_entity_components();
        let z = |r: usize, w: usize| Arc::new(Tensor::zeros(r, w));
        NetState {
            rows,
            ctx: (z(rows, self.config.ctx_width), z(rows, self.config.ctx_width)),
            act: (0..self.config.act_layers)
                .map(|_| (z(rows * n, self.config.act_width), z(rows * n, self.config.act_width)))
                .collect(),
            att: (0..self.config.att_layers)
                .map(|_| (z(rows * (n + 1), self.config.att_width), z(rows * (n + 1), self.config.att_width)))
                .collect(),
            prev_act: vec![false; rows * n],
            prev_log_eos: vec![0.0; rows * n],
            pos: vec![0; rows],
        }
    }

    pub fn start_state(&self) -> CompositeState {
        CompositeState {
            net: self.start_net_state(1),
            components: self.components.iter().map(Component::start_state).collect(),
        }
    }

    /// Starts recording a batched unroll from `state` into `g`.
    pub fn unroll<'m>(&'m self, g: Graph, state: &NetState) -> Unroll<'m> {
        Unroll::new(self, g, state)
    }

    /// One inference step with externally supplied activation bits (`N` of
    /// them). Setting a bit where the previous token does not end a word is
    /// an error.
    pub fn composite_step(
        &self,
        state: &CompositeState,
        prev: TokenId,
        activations: &[bool],
    ) -> Result<(CompositeState, StepOutput)> {
        if activations.len() != self.num_entity_components() {
            return Err(Error::invalid(format!(
                "expected {} activation bits, got {}",
                self.num_entity_components(),
                activations.len()
            )));
        }
        self.step_with(state, prev, |_| Ok(activations.to_vec()))
    }

    fn step_with(
        &self,
        state: &CompositeState,
        prev: TokenId,
        decide: impl FnOnce(&PolicyStep) -> Result<Vec<bool>>,
    ) -> Result<(CompositeState, StepOutput)> {
        self.vocab.check(prev)?;
        if state.net.rows != 1 || state.components.len() != self.components.len() {
            return Err(Error::invalid("state does not belong to this model"));
        }
        let n = self.num_entity_components();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut u = self.unroll(Graph::new(), &state.net);
        let policy = u.policy(&[prev], false, &mut rng)?;
        let act = decide(&policy)?;
        if !policy.boundary[0] && act.iter().any(|&a| a) {
            return Err(Error::invalid("activation requested where the previous token does not end a word"));
        }
        let mut components = Vec::with_capacity(n + 1);
        let mut dists = Vec::with_capacity(n + 1);
        for (i, (c, s)) in self.components.iter().zip(&state.components).enumerate() {
            let a = i > 0 && act[i - 1];
            let (s, d) = c.step(s, prev, a)?;
            components.push(s);
            dists.push(d);
        }
        let log_eos: Vec<f64> = dists.iter().map(|d| d[EOS_ID as usize]).collect();
        let att = u.attention(&act, &log_eos, false, &mut rng)?;
        let log_alpha = u.g.value(att.log_alpha).row(0).to_vec();
        let att_logit = u.g.value(att.logits).data().to_vec();
        let log_dist = mix_distributions(&log_alpha, &dists);
        let out = StepOutput {
            boundary: policy.boundary[0],
            pi: policy.pi,
            act,
            att_logit,
            alpha: log_alpha.iter().map(|l| l.exp()).collect(),
            log_dist,
            component_log_dists: dists,
        };
        Ok((CompositeState { net: u.state(), components }, out))
    }

    /// Total log-likelihood of `seq` and one trace row per token.
    pub fn score_sequence(&self, seq: &TokenSeq, mode: &ActivationMode) -> Result<(f64, Vec<StepTrace>)> {
        let n = self.num_entity_components();
        if let ActivationMode::Given(bits) = mode {
            if bits.len() != seq.len() || bits.iter().any(|b| b.len() != n) {
                return Err(Error::invalid("given activations do not match sequence and components"));
            }
        }
        let mut state = self.start_state();
        let mut traces = Vec::with_capacity(seq.len());
        let mut total = 0.0;
        for (t, (prev, &target)) in seq.inputs().zip(seq.ids()).enumerate() {
            let (next, out) = self.step_with(&state, prev, |p| match mode {
                ActivationMode::Threshold(th) => Ok(p.pi.iter().map(|&pi| p.boundary[0] && pi >= *th).collect()),
                ActivationMode::Given(bits) => Ok(bits[t].clone()),
            })?;
            let tr = out.trace(t, prev, target);
            total += tr.log_p;
            traces.push(tr);
            state = next;
        }
        Ok((total, traces))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": COMPOSITE_CHECKPOINT_KIND,
            "config": self.config,
            "components": self.components.iter().map(Component::kind).collect::<Vec<_>>(),
        }))?;
        ck.push_params("composite.", &self.params);
        let mut vocab = Vec::new();
        self.vocab.write_to(&mut vocab)?;
        ck.blobs.push(("vocab".into(), vocab));
        for (i, c) in self.components.iter().enumerate() {
            ck.blobs.push((format!("component.{i}"), c.to_bytes()?));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some(COMPOSITE_CHECKPOINT_KIND) {
            return Err(Error::format("not a composite checkpoint"));
        }
        let config: CompositeConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let vocab = Vocabulary::read_from(ck.blob("vocab").ok_or_else(|| Error::format("missing vocabulary"))?)?;
        let mut components = Vec::new();
        while let Some(b) = ck.blob(&format!("component.{}", components.len())) {
            components.push(Component::from_bytes(b)?);
        }
        let mut params = ParameterSet::new();
        for (name, t) in ck.with_prefix("composite.") {
            let part = if name.starts_with("act") { Partition::Zeta } else { Partition::Theta };
            params.add(name, t.clone(), part);
        }
        Self::bind(vocab, components, config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn check_components(vocab: &Vocabulary, components: &[Component]) -> Result<Arc<Tensor>> {
    let Some(Component::Lstm(default)) = components.first() else {
        return Err(Error::invalid("component 0 must be the default LSTM language model"));
    };
    for (i, c) in components.iter().enumerate() {
        if c.vocab_size() != vocab.len() {
            return Err(Error::invalid(format!(
                "component {i} has vocabulary size {}, expected {}",
                c.vocab_size(),
                vocab.len()
            )));
        }
    }
    Ok(default.embedding())
}

/// `log Σ_i α_i p_i(w)` for every `w`.
pub fn mix_distributions(log_alpha: &[f64], dists: &[Vec<f64>]) -> Vec<f64> {
    let v = dists[0].len();
    let mut terms = vec![0.0; dists.len()];
    (0..v)
        .map(|w| {
            for (t, (la, d)) in terms.iter_mut().zip(log_alpha.iter().zip(dists)) {
                *t = la + d[w];
            }
            log_sum_exp(&terms)
        })
        .collect()
}

/// Records composite-network steps for a batch of sequences into a graph.
///
/// Per step, call [`Unroll::policy`] with the previous tokens, choose
/// activation bits and step the components, then call
/// [`Unroll::attention`] with the components' log p(</s>) values.
pub struct Unroll<'m> {
    model: &'m CompositeModel,
    pub g: Graph,
    rows: usize,
    ctx: (NodeId, NodeId),
    act: Vec<(NodeId, NodeId)>,
    att: Vec<(NodeId, NodeId)>,
    prev_act: Vec<bool>,
    prev_log_eos: Vec<f64>,
    pos: Vec<usize>,
    pending: Option<(NodeId, Vec<bool>)>,
}

impl<'m> Unroll<'m> {
    fn new(model: &'m CompositeModel, mut g: Graph, state: &NetState) -> Self {
        let mut pair =
            |p: &(Arc<Tensor>, Arc<Tensor>)| (g.constant_shared(Arc::clone(&p.0)), g.constant_shared(Arc::clone(&p.1)));
        let ctx = pair(&state.ctx);
        let act = state.act.iter().map(&mut pair).collect();
        let att = state.att.iter().map(&mut pair).collect();
        Unroll {
            model,
            g,
            rows: state.rows,
            ctx,
            act,
            att,
            prev_act: state.prev_act.clone(),
            prev_log_eos: state.prev_log_eos.clone(),
            pos: state.pos.clone(),
            pending: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Advances the context encoder on `prev` and runs the activation network
    /// for rows whose previous token ends a word; other rows keep their
    /// activation state.
    pub fn policy<R: Rng>(&mut self, prev: &[TokenId], training: bool, rng: &mut R) -> Result<PolicyStep> {
        let m = self.model;
        let n = m.num_entity_components();
        if prev.len() != self.rows {
            return Err(Error::shape(format!("{} previous tokens for {} rows", prev.len(), self.rows)));
        }
        if self.pending.is_some() {
            return Err(Error::invalid("policy called twice without attention"));
        }
        for &p in prev {
            m.vocab.check(p)?;
        }
        let rate = m.config.dropout;
        let table = self.g.constant_shared(Arc::clone(&m.embeddings));
        let x = self.g.gather_rows(table, prev.iter().map(|&t| t as usize).collect())?;
        let (h, c) = m.ctx.step(&mut self.g, &m.params, x, self.ctx.0, self.ctx.1)?;
        self.ctx = (h, c);
        let ctx_out = dropout(&mut self.g, h, rate, training, rng)?;
        let boundary: Vec<bool> = prev.iter().map(|&p| m.vocab.is_word_boundary(p)).collect();

        let mut pi = vec![0.0; self.rows * n];
        let mut pi_node = None;
        if n > 0 && boundary.iter().any(|&b| b) {
            let extra: Vec<f64> =
                self.prev_act.iter().zip(&self.prev_log_eos).flat_map(|(&a, &e)| [f64::from(u8::from(a)), e]).collect();
            let extra = self.g.constant(Tensor::from_vec(self.rows * n, 2, extra)?);
            let mut x = self.network_input(ctx_out, 1, extra)?;
            let mask: Vec<f64> = (0..self.rows * n).map(|r| f64::from(u8::from(boundary[r / n]))).collect();
            let all = boundary.iter().all(|&b| b);
            let keep = Arc::new(Tensor::column(mask.clone()));
            let hold = Arc::new(Tensor::column(mask.iter().map(|v| 1.0 - v).collect()));
            for (l, layer) in m.act.iter().enumerate() {
                if l > 0 {
                    x = dropout(&mut self.g, x, rate, training, rng)?;
                }
                let (h0, c0) = self.act[l];
                let (h, c) = layer.step(&mut self.g, &m.params, x, h0, c0)?;
                self.act[l] =
                    if all { (h, c) } else { (self.blend(h, h0, &keep, &hold)?, self.blend(c, c0, &keep, &hold)?) };
                x = h;
            }
            let logit = m.act_proj.forward(&mut self.g, &m.params, x)?;
            let p = self.g.sigmoid(logit);
            for (r, v) in pi.iter_mut().enumerate() {
                if boundary[r / n] {
                    *v = self.g.value(p).get(r, 0);
                }
            }
            pi_node = Some(p);
        }
        self.pending = Some((ctx_out, boundary.clone()));
        Ok(PolicyStep { boundary, pi_node, pi })
    }

    /// Runs the attention network. `acts` holds `N` bits per row, `log_eos`
    /// holds `N + 1` values per row (default first).
    pub fn attention<R: Rng>(
        &mut self,
        acts: &[bool],
        log_eos: &[f64],
        training: bool,
        rng: &mut R,
    ) -> Result<AttentionStep> {
        let m = self.model;
        let n = m.num_entity_components();
        let Some((ctx_out, boundary)) = self.pending.take() else {
            return Err(Error::invalid("attention called before policy"));
        };
        if acts.len() != self.rows * n || log_eos.len() != self.rows * (n + 1) {
            return Err(Error::shape("activation or log p(</s>) count mismatch"));
        }
        if acts.iter().enumerate().any(|(r, &a)| a && !boundary[r / n.max(1)]) {
            return Err(Error::invalid("activation requested where the previous token does not end a word"));
        }
        let floor = m.config.log_eos_floor;
        let clamp = |e: f64| e.max(floor).min(0.0);
        let mut extra = Vec::with_capacity(self.rows * (n + 1) * 2);
        for b in 0..self.rows {
            extra.push(if self.pos[b] == 0 { 1.0 } else { 0.0 });
            extra.push(clamp(log_eos[b * (n + 1)]));
            for i in 0..n {
                extra.push(f64::from(u8::from(acts[b * n + i])));
                extra.push(clamp(log_eos[b * (n + 1) + 1 + i]));
            }
        }
        let extra = self.g.constant(Tensor::from_vec(self.rows * (n + 1), 2, extra)?);
        let rate = m.config.dropout;
        let mut x = self.network_input(ctx_out, 0, extra)?;
        x = dropout(&mut self.g, x, rate, training, rng)?;
        for (l, layer) in m.att.iter().enumerate() {
            if l > 0 {
                x = dropout(&mut self.g, x, rate, training, rng)?;
            }
            let (h0, c0) = self.att[l];
            let (h, c) = layer.step(&mut self.g, &m.params, x, h0, c0)?;
            self.att[l] = (h, c);
            x = h;
        }
        x = dropout(&mut self.g, x, rate, training, rng)?;
        let logits = m.att_proj.forward(&mut self.g, &m.params, x)?;
        let grid = self.g.reshape(logits, self.rows, n + 1)?;
        let log_alpha = self.g.log_softmax(grid);

        self.prev_act = acts.to_vec();
        for b in 0..self.rows {
            for i in 0..n {
                self.prev_log_eos[b * n + i] = clamp(log_eos[b * (n + 1) + 1 + i]);
            }
            self.pos[b] += 1;
        }
        Ok(AttentionStep { logits, log_alpha })
    }

    /// `[rows, 1]` composite log-probabilities of the targets, given each
    /// component's target log-probability (`N + 1` per row).
    pub fn mix(&mut self, log_alpha: NodeId, log_p: &[f64]) -> Result<NodeId> {
        let cols = self.model.components.len();
        let lp = Tensor::from_vec(self.rows, cols, log_p.to_vec())?;
        let joint = self.g.add_const(log_alpha, &lp)?;
        Ok(self.g.log_sum_exp(joint))
    }

    /// Current recurrent state as values (gradients stop here).
    pub fn state(&self) -> NetState {
        let pair = |p: &(NodeId, NodeId)| (self.g.shared_value(p.0), self.g.shared_value(p.1));
        NetState {
            rows: self.rows,
            ctx: pair(&self.ctx),
            act: self.act.iter().map(pair).collect(),
            att: self.att.iter().map(pair).collect(),
            prev_act: self.prev_act.clone(),
            prev_log_eos: self.prev_log_eos.clone(),
            pos: self.pos.clone(),
        }
    }

    /// Stacks `[ctx, c^i, extra]` for components `first..=N` of every row.
    fn network_input(&mut self, ctx_out: NodeId, first: usize, extra: NodeId) -> Result<NodeId> {
        let total = self.model.components.len();
        let per = total - first;
        let ctx_rows = (0..self.rows * per).map(|r| r / per).collect();
        let emb_rows = (0..self.rows * per).map(|r| first + r % per).collect();
        let ctx = self.g.gather_rows(ctx_out, ctx_rows)?;
        let table = self.g.param(&self.model.params, self.model.comp_emb);
        let emb = self.g.gather_rows(table, emb_rows)?;
        self.g.concat(&[ctx, emb, extra])
    }

    fn blend(&mut self, new: NodeId, old: NodeId, keep: &Arc<Tensor>, hold: &Arc<Tensor>) -> Result<NodeId> {
        let w = self.g.value(new).cols();
        let expand = |m: &Arc<Tensor>| {
            let mut t = Tensor::zeros(m.rows(), w);
            for r in 0..m.rows() {
                t.row_mut(r).fill(m.get(r, 0));
            }
            Arc::new(t)
        };
        let a = self.g.mul_const(new, expand(keep))?;
        let b = self.g.mul_const(old, expand(hold))?;
        self.g.add(a, b)
    }
}
