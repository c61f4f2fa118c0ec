//! Suffix generation strategies.
//!
//! All strategies run on the KV-cached inference path and share one
//! conditioning layout: `[prompt ‖ prefix]`, then generated tokens.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{DecodeState, VictimModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    TopK,
    TopP,
    Beam,
    DiverseBeam,
    SelfConsistency,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Greedy,
        Strategy::TopK,
        Strategy::TopP,
        Strategy::Beam,
        Strategy::DiverseBeam,
        Strategy::SelfConsistency,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Greedy => "Greedy",
            Strategy::TopK => "Top-k",
            Strategy::TopP => "Top-p",
            Strategy::Beam => "Beam Search",
            Strategy::DiverseBeam => "Diverse Beam Search",
            Strategy::SelfConsistency => "Self Consistency",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub beam_size: usize,
    pub groups: usize,
    /// Hamming penalty between groups of diverse beam search.
    pub diversity_penalty: f64,
    pub n_scd: usize,
    pub d_optimal: f64,
    pub max_new_tokens: usize,
    pub eos_id: Option<usize>,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            top_k: 10,
            top_p: 0.7,
            temperature: 0.8,
            beam_size: 10,
            groups: 3,
            diversity_penalty: 0.5,
            n_scd: 3,
            d_optimal: 0.7,
            max_new_tokens: 50,
            eos_id: None,
            seed: 42,
        }
    }
}

impl DecodeConfig {
    /// Defaults with the given strategy; diverse beam uses 9 beams in 3 groups.
    pub fn for_strategy(strategy: Strategy) -> Self {
        let mut c = DecodeConfig {
            strategy,
            ..Default::default()
        };
        if strategy == Strategy::DiverseBeam {
            c.beam_size = 9;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be >= 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be > 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        match self.strategy {
            Strategy::TopK if self.top_k == 0 => bad("top_k must be >= 1"),
            Strategy::Beam if self.beam_size == 0 => bad("beam_size must be >= 1"),
            Strategy::DiverseBeam
                if self.groups == 0
                    || self.beam_size == 0
                    || !self.beam_size.is_multiple_of(self.groups) =>
            {
                bad("groups must divide beam_size")
            }
            Strategy::DiverseBeam if self.diversity_penalty < 0.0 => {
                bad("diversity_penalty must be >= 0")
            }
            Strategy::SelfConsistency if self.n_scd == 0 => bad("n_scd must be >= 1"),
            Strategy::SelfConsistency if !(0.0..=1.0).contains(&self.d_optimal) => {
                bad("d_optimal must be in [0, 1]")
            }
            _ => Ok(()),
        }
    }
}

/// A generated continuation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<usize>,
    /// Sum of the model's (untempered) log-probabilities of `tokens`.
    pub log_prob: f64,
    /// Unique-token ratio of the EOS-truncated sequence.
    pub diversity: f64,
}

impl Candidate {
    fn new(tokens: Vec<usize>, log_prob: f64, eos: Option<usize>) -> Self {
        let diversity = diversity(&tokens, eos);
        Candidate {
            tokens,
            log_prob,
            diversity,
        }
    }
}

fn truncate_at_eos(tokens: &[usize], eos: Option<usize>) -> &[usize] {
    match eos.and_then(|e| tokens.iter().position(|&t| t == e)) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

/// `#unique / #tokens` before the first EOS; 0 for an empty sequence.
pub fn diversity(tokens: &[usize], eos: Option<usize>) -> f64 {
    let t = truncate_at_eos(tokens, eos);
    if t.is_empty() {
        return 0.0;
    }
    let uniq: HashSet<_> = t.iter().collect();
    uniq.len() as f64 / t.len() as f64
}

/// `|diversity − d_optimal|`.
pub fn diversity_score(tokens: &[usize], eos: Option<usize>, d_optimal: f64) -> f64 {
    (diversity(tokens, eos) - d_optimal).abs()
}

/// Index of the candidate with the smallest deviation from `d_optimal`; ties
/// go to the higher log-probability, then the lower index.
pub fn select_consistent(cands: &[Candidate], eos: Option<usize>, d_optimal: f64) -> Option<usize> {
    let dev: Vec<f64> = cands
        .iter()
        .map(|c| diversity_score(&c.tokens, eos, d_optimal))
        .collect();
    (0..cands.len()).min_by(|&a, &b| {
        dev[a]
            .total_cmp(&dev[b])
            .then(cands[b].log_prob.total_cmp(&cands[a].log_prob))
            .then(a.cmp(&b))
    })
}

/// Deterministic random stream for one generation: `seed` picks the
/// generator, `stream` separates e.g. pairs.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates one suffix for `prefix` with the configured strategy.
pub fn decode(
    model: &VictimModel,
    prompt: Option<&Tensor>,
    prefix: &[usize],
    cfg: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Candidate> {
    cfg.validate()?;
    let k = prompt.map_or(0, |z| z.rows());
    model
        .config
        .check_fits(k, prefix.len(), cfg.max_new_tokens.saturating_sub(1))?;
    let start = model.start(prompt, prefix)?;
    match cfg.strategy {
        Strategy::Greedy => sample_with(model, start, cfg, rng, |lp, _| Ok(kernels::argmax(lp))),
        Strategy::TopK => sample_with(model, start, cfg, rng, |lp, rng| {
            sample(&top_k_weights(lp, cfg.top_k, cfg.temperature), rng)
        }),
        Strategy::TopP => top_p(model, start, cfg, rng),
        Strategy::Beam => Ok(beam(model, start, cfg, cfg.beam_size, 1, 0.0)),
        Strategy::DiverseBeam => Ok(beam(
            model,
            start,
            cfg,
            cfg.beam_size,
            cfg.groups,
            cfg.diversity_penalty,
        )),
        Strategy::SelfConsistency => {
            let mut cands = Vec::with_capacity(cfg.n_scd);
            for _ in 0..cfg.n_scd {
                cands.push(top_p(model, start.clone(), cfg, rng)?);
            }
            let i = select_consistent(&cands, cfg.eos_id, cfg.d_optimal)
                .ok_or_else(|| Error::Empty("self-consistency candidates".into()))?;
            Ok(cands.swap_remove(i))
        }
    }
}

fn top_p(
    model: &VictimModel,
    start: DecodeState,
    cfg: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Candidate> {
    sample_with(model, start, cfg, rng, |lp, rng| {
        sample(&top_p_weights(lp, cfg.top_p, cfg.temperature), rng)
    })
}

/// Autoregressive loop choosing each token with `pick(log_probs, rng)`.
fn sample_with(
    model: &VictimModel,
    mut st: DecodeState,
    cfg: &DecodeConfig,
    rng: &mut ChaCha8Rng,
    mut pick: impl FnMut(&[f64], &mut ChaCha8Rng) -> Result<usize>,
) -> Result<Candidate> {
    let mut tokens = Vec::with_capacity(cfg.max_new_tokens);
    let mut log_prob = 0.0;
    for i in 0..cfg.max_new_tokens {
        let lp = st.log_probs();
        let t = pick(&lp, rng)?;
        log_prob += lp[t];
        tokens.push(t);
        if Some(t) == cfg.eos_id {
            break;
        }
        if i + 1 < cfg.max_new_tokens {
            model.step(&mut st, t)?;
        }
    }
    Ok(Candidate::new(tokens, log_prob, cfg.eos_id))
}

/// Token ids sorted by descending score, ties by lower id.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn tempered_probs(log_probs: &[f64], temperature: f64) -> Vec<f64> {
    let mut p: Vec<f64> = log_probs.iter().map(|l| l / temperature).collect();
    kernels::softmax_row(&mut p);
    p
}

/// Sampling weights restricted to the `k` most likely tokens.
pub fn top_k_weights(log_probs: &[f64], k: usize, temperature: f64) -> Vec<f64> {
    let p = tempered_probs(log_probs, temperature);
    let mut w = vec![0.0; p.len()];
    for &i in ranked(&p).iter().take(k) {
        w[i] = p[i];
    }
    w
}

/// Sampling weights on the smallest head of the ranked distribution whose
/// mass reaches `top_p`.
pub fn top_p_weights(log_probs: &[f64], top_p: f64, temperature: f64) -> Vec<f64> {
    let p = tempered_probs(log_probs, temperature);
    let mut w = vec![0.0; p.len()];
    let mut mass = 0.0;
    for i in ranked(&p) {
        w[i] = p[i];
        mass += p[i];
        if mass >= top_p {
            break;
        }
    }
    w
}

fn sample(weights: &[f64], rng: &mut ChaCha8Rng) -> Result<usize> {
    let dist = WeightedIndex::new(weights).map_err(|e| Error::Domain {
        op: "sample",
        detail: e.to_string(),
    })?;
    Ok(dist.sample(rng))
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    log_prob: f64,
    state: DecodeState,
}

fn normalized(log_prob: f64, len: usize) -> f64 {
    log_prob / len.max(1) as f64
}

/// Length-normalized (diverse) beam search.
///
/// With `groups > 1` the beam is split into equal groups expanded in order;
/// a group's candidate scores are reduced by `penalty` times the number of
/// earlier groups that chose the same token at this step.
fn beam(
    model: &VictimModel,
    start: DecodeState,
    cfg: &DecodeConfig,
    beam_size: usize,
    groups: usize,
    penalty: f64,
) -> Candidate {
    let width = beam_size / groups;
    let mut alive: Vec<Vec<Hyp>> = vec![
        vec![Hyp {
            tokens: vec![],
            log_prob: 0.0,
            state: start,
        }];
        groups
    ];
    let mut finished: Vec<Hyp> = Vec::new();
    for step in 0..cfg.max_new_tokens {
        let mut used = vec![0usize; model.vocab_size()];
        for group in alive.iter_mut() {
            if group.is_empty() {
                continue;
            }
            // (score, hyp index, token, log_prob)
            let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
            for (h, hyp) in group.iter().enumerate() {
                let lp = hyp.state.log_probs();
                for (t, &l) in lp.iter().enumerate() {
                    let total = hyp.log_prob + l;
                    let score = normalized(total, hyp.tokens.len() + 1) - penalty * used[t] as f64;
                    cands.push((score, h, t, total));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(width);
            for &(_, h, t, total) in cands.iter().take(width) {
                used[t] += 1;
                let mut hyp = Hyp {
                    tokens: group[h].tokens.clone(),
                    log_prob: total,
                    state: group[h].state.clone(),
                };
                hyp.tokens.push(t);
                if Some(t) == cfg.eos_id || step + 1 == cfg.max_new_tokens {
                    finished.push(hyp);
                } else {
                    // The state only grows; a failure here means overflow,
                    // which `decode` rules out up front.
                    model
                        .step(&mut hyp.state, t)
                        .expect("context checked before decoding");
                    next.push(hyp);
                }
            }
            *group = next;
        }
        if alive.iter().all(|g| g.is_empty()) {
            break;
        }
    }
    let best = finished
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            normalized(a.log_prob, a.tokens.len())
                .total_cmp(&normalized(b.log_prob, b.tokens.len()))
                .then(j.cmp(i))
        })
        .map(|(_, h)| h)
        .expect("beam search always finishes at least one hypothesis");
    Candidate::new(best.tokens.clone(), best.log_prob, cfg.eos_id)
}
