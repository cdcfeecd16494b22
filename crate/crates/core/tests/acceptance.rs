//! Exit criteria. Each test prints one `criterion N: PASS|FAIL` line.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use complm::components::{fst_build, Component, FstBuildOptions, LstmLm, LstmLmConfig, WfstComponent};
use complm::composite::{CompositeConfig, CompositeModel};
use complm::eval::{oracle_by_subset, perplexity, rescore_nbest, tune_weight, wer, wer_by_subset, Scorer, WerStats};
use complm::neural::{AdamConfig, Gradients, Graph, OptimizerState, ParamId, Partition, Tensor};
use complm::training::{
    chunk_gradients, chunk_sequences, lambda_schedule, precompute, rl_update, BatchState, LossKind,
};
use complm::vocab::{TokenId, TokenSeq, Vocabulary, BOS_ID, EOS_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Prints the verdict straight to stdout so it shows without `--nocapture`,
/// then fails the test on a red verdict.
fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!("\ncriterion {n}: {} ({name}) {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------- toys

fn toy_vocab() -> Vocabulary {
    Vocabulary::from_subwords([
        "call_", "play_", "to_", "the_", "mum_", "dad_", "san_", "jose_", "fran", "cisco_", "music_", "now_", "on_",
        "ka", "lo_", "mi_", "ra", "ve_",
    ])
    .unwrap()
}

fn toy_lm(v: &Vocabulary, seed: u64, width: usize) -> LstmLm {
    let cfg = LstmLmConfig { vocab_size: v.len(), width, layers: 2, dropout: 0.0, skip: true };
    LstmLm::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn toy_config() -> CompositeConfig {
    CompositeConfig {
        ctx_width: 8,
        embed_width: 6,
        act_width: 5,
        act_layers: 2,
        att_width: 5,
        att_layers: 1,
        dropout: 0.0,
        log_eos_floor: -20.0,
    }
}

fn place_fst(v: &Vocabulary) -> Component {
    let ents = vec![("san jose".to_string(), 3.0), ("san francisco".to_string(), 2.0), ("kalo".to_string(), 1.0)];
    Component::Wfst(fst_build(&ents, v, &FstBuildOptions::default()).unwrap())
}

fn randomize(m: &mut CompositeModel, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = m.params().ids().collect();
    for id in ids {
        for x in m.params_mut().get_mut(id).data_mut() {
            *x = rng.random_range(-scale..scale);
        }
    }
}

/// Default LSTM, a place automaton and an entity LSTM, all heads random.
fn toy_model() -> CompositeModel {
    let v = toy_vocab();
    let comps = vec![Component::Lstm(toy_lm(&v, 1, 8)), place_fst(&v), Component::Lstm(toy_lm(&v, 2, 6))];
    let mut m = CompositeModel::new(v, comps, toy_config(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    randomize(&mut m, 0.4, 6);
    m
}

fn toy_corpus(v: &Vocabulary) -> Vec<TokenSeq> {
    ["call mum now", "play music on san jose", "to san francisco", "call kalo", "the kalo mi ve dad"]
        .iter()
        .map(|s| v.encode(s))
        .collect()
}

// ---------------------------------------------------------------- 1

/// Central differences over a sample of entries of every parameter in
/// `part`; returns the worst relative error.
fn fd_max_rel_error(
    model: &CompositeModel,
    part: Option<Partition>,
    loss: &dyn Fn(&CompositeModel) -> (f64, Gradients),
    seed: u64,
) -> f64 {
    let eps = 1e-5;
    let (_, grads) = loss(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> =
        model.params().ids().filter(|&id| part.is_none_or(|p| model.params().partition(id) == p)).collect();
    assert!(!ids.is_empty());
    for id in ids {
        let n = model.params().get(id).len();
        for _ in 0..4 {
            let k = rng.random_range(0..n);
            let mut plus = model.clone();
            plus.params_mut().get_mut(id).data_mut()[k] += eps;
            let mut minus = model.clone();
            minus.params_mut().get_mut(id).data_mut()[k] -= eps;
            let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * eps);
            let an = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Two rows stepped over fixed prefixes with fixed activations; `which`
/// selects the scalar: mixed log-likelihood, activation probabilities, or
/// log attention weights, each against fixed random weights.
fn unrolled_loss(m: &CompositeModel, which: usize) -> (f64, Gradients) {
    let v = m.vocab();
    let seqs = [v.encode("call san jose now"), v.encode("play the kalo mi")];
    let n = m.num_entity_components();
    let params = m.params();
    let g = Graph::with_trainable(params, |_| true);
    let mut u = m.unroll(g, &m.start_net_state(2));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut wrng = ChaCha8Rng::seed_from_u64(99);
    let mut comp_states: Vec<Vec<_>> =
        (0..2).map(|_| m.components()[1..].iter().map(Component::start_state).collect()).collect();
    let mut default_states: Vec<_> = (0..2).map(|_| m.components()[0].start_state()).collect();
    let mut terms = Vec::new();
    for t in 0..4 {
        let prev: Vec<TokenId> = seqs.iter().map(|s| s.inputs().nth(t).unwrap()).collect();
        let target: Vec<TokenId> = seqs.iter().map(|s| s.ids()[t]).collect();
        let pol = u.policy(&prev, false, &mut rng).unwrap();
        let acts: Vec<bool> = (0..2 * n).map(|k| pol.boundary[k / n] && (k + t) % 2 == 0).collect();
        let mut lp = Vec::new();
        let mut eos = Vec::new();
        for r in 0..2 {
            default_states[r] = m.components()[0].advance(&default_states[r], prev[r], false).unwrap();
            lp.push(m.components()[0].log_prob(&default_states[r], target[r]).unwrap());
            eos.push(m.components()[0].log_prob(&default_states[r], EOS_ID).unwrap());
            for i in 0..n {
                let c = &m.components()[i + 1];
                comp_states[r][i] = c.advance(&comp_states[r][i], prev[r], acts[r * n + i]).unwrap();
                // keep every component term finite
                lp.push(c.log_prob(&comp_states[r][i], target[r]).unwrap().max(-30.0));
                eos.push(c.log_prob(&comp_states[r][i], EOS_ID).unwrap());
            }
        }
        let att = u.attention(&acts, &eos, false, &mut rng).unwrap();
        match which {
            0 => {
                let mixed = u.mix(att.log_alpha, &lp).unwrap();
                terms.push(u.g.sum(mixed));
            }
            1 => {
                if let Some(pi) = pol.pi_node {
                    let w: Vec<f64> = (0..2 * n).map(|_| wrng.random_range(-1.0..1.0)).collect();
                    terms.push(u.g.dot_const(pi, Arc::new(Tensor::column(w))).unwrap());
                }
            }
            _ => {
                let w: Vec<f64> = (0..2 * (n + 1)).map(|_| wrng.random_range(-1.0..1.0)).collect();
                let w = Tensor::from_vec(2, n + 1, w).unwrap();
                terms.push(u.g.dot_const(att.log_alpha, Arc::new(w)).unwrap());
            }
        }
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = u.g.add(loss, t).unwrap();
    }
    let value = u.g.value(loss).item();
    (value, u.g.backward(loss, params).unwrap())
}

/// Likelihood or policy-gradient loss of one full-batch chunk, activations
/// drawn from the teacher alone so that they do not depend on parameters.
fn chunk_loss(m: &CompositeModel, kind: LossKind) -> (f64, Gradients) {
    let data = toy_corpus(m.vocab());
    let caches = precompute(m, &data).unwrap();
    let batch = &chunk_sequences(&data, data.len(), 64)[0];
    let mut state = BatchState::new(m, data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (g, stats) = chunk_gradients(m, &data, &caches, batch, &mut state, 1.0, kind, &mut rng).unwrap();
    (stats.loss, g)
}

#[test]
fn criterion_1_gradient_integrity() {
    let t0 = Instant::now();
    let m = toy_model();
    assert!(m.vocab().len() <= 30);
    let checks: [(&str, Option<Partition>, Box<dyn Fn(&CompositeModel) -> (f64, Gradients)>); 5] = [
        ("composite_step", None, Box::new(|m| unrolled_loss(m, 0))),
        ("activation_forward", Some(Partition::Zeta), Box::new(|m| unrolled_loss(m, 1))),
        ("attention_forward", Some(Partition::Theta), Box::new(|m| unrolled_loss(m, 2))),
        ("ll_update", Some(Partition::Theta), Box::new(|m| chunk_loss(m, LossKind::Likelihood))),
        ("rl_update", Some(Partition::Zeta), Box::new(|m| chunk_loss(m, LossKind::Reinforce))),
    ];
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (k, (name, part, f)) in checks.iter().enumerate() {
        let (value, _) = f(&m);
        assert!(value.is_finite() && value != 0.0, "{name} loss {value}");
        let e = fd_max_rel_error(&m, *part, f.as_ref(), k as u64);
        detail.push(format!("{name}={e:.1e}"));
        worst = worst.max(e);
    }
    let secs = t0.elapsed().as_secs_f64();
    report(1, "gradient integrity", worst < 1e-4 && secs < 60.0, &format!("{} ({secs:.1}s)", detail.join(" ")));
}

// ---------------------------------------------------------------- 2

fn mass(log_dist: &[f64]) -> f64 {
    log_dist.iter().map(|l| l.exp()).sum()
}

#[test]
fn criterion_2_distribution_sanity() {
    let m = toy_model();
    let v = m.vocab().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = m.num_entity_components();
    let mut worst: f64 = 0.0;
    let mut worst_alpha: f64 = 0.0;
    let mut state = m.start_state();
    let mut prev = BOS_ID;
    for step in 0..10_000 {
        if step % 12 == 0 {
            state = m.start_state();
            prev = BOS_ID;
        }
        let acts: Vec<bool> = (0..n).map(|_| v.is_word_boundary(prev) && rng.random_bool(0.3)).collect();
        let (next, out) = m.composite_step(&state, prev, &acts).unwrap();
        worst = worst.max((mass(&out.log_dist) - 1.0).abs());
        for d in &out.component_log_dists {
            worst = worst.max((mass(d) - 1.0).abs());
        }
        assert!(out.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
        worst_alpha = worst_alpha.max((out.alpha.iter().sum::<f64>() - 1.0).abs());
        state = next;
        prev = rng.random_range(3..v.len() as TokenId);
    }
    report(
        2,
        "distribution sanity",
        worst < 1e-6 && worst_alpha < 1e-6,
        &format!("max |sum p - 1| = {worst:.1e}, max |sum alpha - 1| = {worst_alpha:.1e}"),
    );
}

// ---------------------------------------------------------------- 3

/// Every accepted token sequence and its probability, by depth-first
/// enumeration of arcs from the start state.
fn enumerate_paths(fst: &WfstComponent, max_len: usize) -> BTreeMap<Vec<TokenId>, f64> {
    let mut out = BTreeMap::new();
    let mut stack = vec![(fst.start(), Vec::new(), 0.0)];
    while let Some((q, path, cost)) = stack.pop() {
        let node = fst.node(q);
        if node.final_weight.is_finite() {
            *out.entry(path.clone()).or_insert(0.0) += (-(cost + node.final_weight)).exp();
        }
        if path.len() == max_len {
            continue;
        }
        for a in &node.arcs {
            if a.target == fst.dead() {
                continue;
            }
            let mut p = path.clone();
            p.push(a.label);
            stack.push((a.target, p, cost + a.weight));
        }
    }
    out
}

#[test]
fn criterion_3_wfst_oracle_equivalence() {
    let letters = ["a", "b", "c", "d", "e"];
    let mut pieces: Vec<String> = letters.iter().map(|l| format!("{l}_")).collect();
    pieces.extend(letters.iter().map(|l| l.to_string()));
    let v = Vocabulary::from_subwords(&pieces).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut absorbing = true;
    for _ in 0..100 {
        let n_phrases = rng.random_range(1..=100);
        let mut ents: Vec<(String, f64)> = Vec::new();
        while ents.len() < n_phrases {
            let words = rng.random_range(1..=3);
            let text: Vec<String> = (0..words)
                .map(|_| (0..rng.random_range(1..=2)).map(|_| letters[rng.random_range(0..5)]).collect())
                .collect();
            let text = text.join(" ");
            if v.encode_words(&text).len() <= 5 {
                ents.push((text, rng.random_range(1..=20) as f64));
            }
        }
        let fst = fst_build(&ents, &v, &FstBuildOptions::default()).unwrap();
        let mut expected: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
        for (t, c) in &ents {
            *expected.entry(v.encode_words(t)).or_insert(0.0) += c;
        }
        let total: f64 = expected.values().sum();
        let paths = enumerate_paths(&fst, 6);
        assert_eq!(paths.keys().collect::<Vec<_>>(), expected.keys().collect::<Vec<_>>());
        for (k, c) in &expected {
            worst = worst.max((paths[k] - c / total).abs());
        }
        // unmatched inputs fall into the dead state and stay there
        let prefixes: HashSet<Vec<TokenId>> =
            expected.keys().flat_map(|k| (0..=k.len()).map(|i| k[..i].to_vec())).collect();
        for _ in 0..20 {
            let len = rng.random_range(1..=6);
            let seq: Vec<TokenId> = (0..len).map(|_| rng.random_range(3..v.len() as TokenId)).collect();
            let mut s = fst.start_state();
            let mut dead = false;
            for i in 0..seq.len() {
                s = fst.advance(&s, seq[i]);
                let now_dead = !prefixes.contains(&seq[..=i]);
                absorbing &= now_dead == (s == fst.dead_state());
                absorbing &= !dead || now_dead;
                dead = now_dead;
                if dead {
                    absorbing &= fst.log_prob(&s, EOS_ID) == 0.0;
                    absorbing &= (3..v.len() as TokenId).all(|t| fst.log_prob(&s, t) == f64::NEG_INFINITY);
                }
            }
        }
    }
    report(
        3,
        "WFST oracle equivalence",
        worst < 1e-9 && absorbing,
        &format!("max |path weight - normalized count| = {worst:.1e}, dead state absorbing = {absorbing}"),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_degenerate_identity() {
    let v = toy_vocab();
    let lm = toy_lm(&v, 8, 12);
    let m = CompositeModel::new(
        v.clone(),
        vec![Component::Lstm(lm.clone())],
        toy_config(),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut identical = true;
    let mut tokens = 0;
    for _ in 0..200 {
        let len = rng.random_range(0..12);
        let mut ids: Vec<TokenId> = (0..len).map(|_| rng.random_range(3..v.len() as TokenId)).collect();
        ids.push(EOS_ID);
        let seq = TokenSeq::new(ids, &v).unwrap();
        let a = Scorer::token_log_probs(&m, &seq).unwrap();
        let b = lm.token_log_probs(&seq).unwrap();
        identical &= a.iter().map(|x| x.to_bits()).eq(b.iter().map(|x| x.to_bits()));
        tokens += seq.len();
    }
    let corpus = toy_corpus(&v);
    identical &= perplexity(&m, &corpus).unwrap().to_bits() == perplexity(&lm, &corpus).unwrap().to_bits();
    report(4, "degenerate identity", identical, &format!("{tokens} tokens compared bitwise"));
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_schedules() {
    let mut ok = lambda_schedule(0) == 1.0 && lambda_schedule(1000) == 0.8;
    // first index where 0.8^(i/1000) < 0.05, found by scanning the closed form
    let first = (0u64..).find(|&i| 0.8f64.powf(i as f64 / 1000.0) < 0.05).unwrap();
    ok &= lambda_schedule(first) == 0.0 && lambda_schedule(first - 1) > 0.05;
    ok &= (first..first + 5000).all(|i| lambda_schedule(i) == 0.0);
    ok &= lambda_schedule(500) == 0.8f64.powf(0.5);
    let adam = AdamConfig::default();
    let lr = adam.lr_at(1000);
    ok &= lr == 0.001 * 0.7 && (lr - 0.0007).abs() < 1e-18;
    ok &= adam.lr_at(0) == 0.001 && adam.lr_at(2000) == 0.001 * 0.7f64.powf(2.0);
    report(5, "schedules", ok, &format!("lambda first zero at update {first}, lr(1000) = {lr}"));
}

// ---------------------------------------------------------------- 6

/// "call mum" only; activating the automaton after "call" makes "mum" certain.
fn bandit_pi(seed: u64) -> Option<usize> {
    let v = Vocabulary::from_subwords(["call_", "mum_", "dad_", "now_", "the_"]).unwrap();
    let fst = Component::Wfst(fst_build(&[("mum".to_string(), 1.0)], &v, &FstBuildOptions::default()).unwrap());
    let comps = vec![Component::Lstm(toy_lm(&v, seed, 8)), fst];
    let mut m =
        CompositeModel::new(v.clone(), comps, toy_config(), &mut ChaCha8Rng::seed_from_u64(seed + 100)).unwrap();
    let data = vec![v.encode("call mum"); 8];
    let caches = precompute(&m, &data).unwrap();
    let mut opt = OptimizerState::new(AdamConfig::default(), m.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let batches = chunk_sequences(&data, 8, 16);
    let slot_pi = |m: &CompositeModel| {
        let s = m.start_state();
        let (s, _) = m.composite_step(&s, BOS_ID, &[false]).unwrap();
        let (_, out) = m.composite_step(&s, v.id("call_").unwrap(), &[false]).unwrap();
        out.pi[0]
    };
    for update in 1..=2000 {
        let mut state = BatchState::new(&m, 8);
        rl_update(&mut m, &mut opt, &data, &caches, &batches[0], &mut state, 0.0, 5.0, &mut rng).unwrap();
        if slot_pi(&m) > 0.9 {
            return Some(update);
        }
    }
    None
}

#[test]
fn criterion_6_reinforce_convergence() {
    let t0 = Instant::now();
    let results: Vec<Option<usize>> = (1..=3).map(bandit_pi).collect();
    let secs = t0.elapsed().as_secs_f64();
    let pass = results.iter().all(Option::is_some) && secs < 300.0;
    report(6, "REINFORCE convergence", pass, &format!("updates to pi > 0.9 per seed: {results:?} ({secs:.1}s)"));
}

// ---------------------------------------------------------------- 7-9

struct EntityEval {
    default_all: f64,
    composite_all: f64,
    default_entity: f64,
    composite_entity: f64,
    positive_gap: f64,
}

fn entity_eval(model: &CompositeModel) -> EntityEval {
    let p = common::pipeline();
    let test = common::encode(&p.vocab, &p.data.test);
    let entity: Vec<TokenSeq> =
        p.data.test.iter().zip(&test).filter(|(s, _)| s.has_entity()).map(|(_, t)| t.clone()).collect();
    let comp = complm::eval::sentence_log_probs(model, &entity).unwrap();
    let def = complm::eval::sentence_log_probs(&p.default, &entity).unwrap();
    let positive = comp.iter().zip(&def).filter(|(c, d)| c > d).count();
    EntityEval {
        default_all: perplexity(&p.default, &test).unwrap(),
        composite_all: perplexity(model, &test).unwrap(),
        default_entity: perplexity(&p.default, &entity).unwrap(),
        composite_entity: perplexity(model, &entity).unwrap(),
        positive_gap: positive as f64 / entity.len() as f64,
    }
}

#[test]
fn criterion_7_end_to_end() {
    let p = common::pipeline();
    let e = entity_eval(&p.composite.best);
    let rel = 1.0 - e.composite_entity / e.default_entity;
    let pass = e.composite_all <= e.default_all && rel >= 0.05 && e.positive_gap >= 0.8 && p.seconds < 1800.0;
    report(
        7,
        "end-to-end reproduction",
        pass,
        &format!(
            "ppl all {:.3} -> {:.3}, entity {:.3} -> {:.3} ({:.1}% lower), positive gap {:.1}%, {:.0}s",
            e.default_all,
            e.composite_all,
            e.default_entity,
            e.composite_entity,
            100.0 * rel,
            100.0 * e.positive_gap,
            p.seconds
        ),
    );
}

#[test]
fn criterion_8_bootstrap_failure() {
    let p = common::pipeline();
    let with = entity_eval(&p.composite.best);
    let without = entity_eval(&p.no_teacher.best);
    let gain_with = 1.0 - with.composite_entity / with.default_entity;
    let drift = (without.composite_entity / without.default_entity - 1.0).abs();
    report(
        8,
        "bootstrap failure without teacher",
        drift <= 0.005 && gain_with >= 0.05,
        &format!(
            "entity ppl default {:.3}, with teacher {:.3}, without teacher {:.3} ({:.1}% from default)",
            with.default_entity,
            with.composite_entity,
            without.composite_entity,
            100.0 * drift
        ),
    );
}

/// Exhaustive minimal edit cost.
fn brute_edits(r: &[&str], h: &[&str]) -> usize {
    match (r.split_first(), h.split_first()) {
        (None, _) => h.len(),
        (_, None) => r.len(),
        (Some((a, rr)), Some((b, hh))) => {
            (brute_edits(rr, hh) + usize::from(a != b)).min(brute_edits(rr, h) + 1).min(brute_edits(r, hh) + 1)
        }
    }
}

#[test]
fn criterion_9_rescoring() {
    // dynamic program against exhaustive alignment
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let words = ["a", "b", "c", "d", "e"];
    let mut dp_ok = true;
    for _ in 0..2000 {
        let r: Vec<&str> = (0..rng.random_range(1..=6)).map(|_| words[rng.random_range(0..5)]).collect();
        let h: Vec<&str> = (0..rng.random_range(0..=7)).map(|_| words[rng.random_range(0..5)]).collect();
        dp_ok &= wer(&r.join(" "), &h.join(" ")).unwrap().errors() == brute_edits(&r, &h);
    }

    let p = common::pipeline();
    let (dev_lists, dev_refs) = &p.data.nbest_dev;
    let (lists, refs) = &p.data.nbest_test;
    let grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    let composite = &p.composite.best;
    let (w_default, _) = tune_weight(&p.default, &p.vocab, dev_lists, dev_refs, &grid).unwrap();
    let (w_composite, _) = tune_weight(composite, &p.vocab, dev_lists, dev_refs, &grid).unwrap();
    let all = |s: BTreeMap<String, WerStats>| s["all"];
    let first = all(wer_by_subset(&rescore_nbest(&p.default, &p.vocab, lists, 0.0).unwrap(), refs).unwrap());
    let default = all(wer_by_subset(&rescore_nbest(&p.default, &p.vocab, lists, w_default).unwrap(), refs).unwrap());
    let comp = all(wer_by_subset(&rescore_nbest(composite, &p.vocab, lists, w_composite).unwrap(), refs).unwrap());
    let oracle = all(oracle_by_subset(lists, refs).unwrap());
    let ordered = comp.wer() < default.wer() && default.wer() < first.wer();
    let bounded = oracle.wer() <= comp.wer().min(default.wer()).min(first.wer());
    report(
        9,
        "rescoring",
        dp_ok && ordered && bounded,
        &format!(
            "WER first-pass {:.4}, default {:.4} (w={w_default}), composite {:.4} (w={w_composite}), oracle {:.4}; alignment oracle agrees = {dp_ok}",
            first.wer(),
            default.wer(),
            comp.wer(),
            oracle.wer()
        ),
    );
}
