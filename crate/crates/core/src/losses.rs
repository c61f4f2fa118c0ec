//! Token-level attack losses and their combination.
//!
//! Every loss is computed on the tape from the vector of gold-token
//! log-probabilities of one teacher-forced suffix, so gradients flow back to
//! the soft prompt. Selections (which positions count) are made on current
//! values and treated as constants.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to every probability before taking its log.
pub const MIN_PROB: f64 = 1e-12;

/// Slack absorbed before flooring a fractional `k_dy`, so values such as
/// `5 + 5·(0.3 − 0.1)` land on 6 despite binary rounding.
const K_DY_SLACK: f64 = 1e-9;

/// Per-position log-probabilities of one suffix plus the gold and argmax ids.
#[derive(Clone, Debug)]
pub struct TokenLossVector {
    /// `log p_i`, clamped below at `ln(MIN_PROB)`.
    pub log_probs: Var,
    pub gold: Vec<usize>,
    pub predicted: Vec<usize>,
}

impl TokenLossVector {
    pub fn new(
        tape: &mut Tape,
        log_probs: Var,
        gold: Vec<usize>,
        predicted: Vec<usize>,
    ) -> Result<Self> {
        let n = tape.value(log_probs).len();
        if n == 0 {
            return Err(Error::Empty("token loss vector".into()));
        }
        if gold.len() != n || predicted.len() != n {
            return Err(Error::Shape {
                op: "TokenLossVector",
                detail: format!(
                    "{n} log-probs, {} gold, {} predicted",
                    gold.len(),
                    predicted.len()
                ),
            });
        }
        let log_probs = tape.clamp_min(log_probs, MIN_PROB.ln())?;
        Ok(TokenLossVector {
            log_probs,
            gold,
            predicted,
        })
    }

    /// Constant vector built from raw log-probabilities.
    pub fn from_values(tape: &mut Tape, log_probs: &[f64], gold: Vec<usize>) -> Result<Self> {
        let v = tape.constant(Tensor::vector(log_probs.to_vec()));
        let predicted = gold.clone();
        TokenLossVector::new(tape, v, gold, predicted)
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }

    /// Token losses `ℓ_i = −log p_i`.
    pub fn token_losses(&self, tape: &Tape) -> Vec<f64> {
        tape.value(self.log_probs)
            .data()
            .iter()
            .map(|v| -v)
            .collect()
    }
}

pub fn mle_loss(tape: &mut Tape, tlv: &TokenLossVector) -> Result<Var> {
    let m = tape.mean(tlv.log_probs)?;
    tape.neg(m)
}

/// `−(1/|S|) Σ α_t (1 − p_i)^γ log p_i`.
pub fn focal_loss(tape: &mut Tape, tlv: &TokenLossVector, alpha_t: f64, gamma: f64) -> Result<Var> {
    if gamma < 0.0 || !(alpha_t > 0.0 && alpha_t <= 1.0) {
        return Err(Error::Config(format!(
            "focal loss needs gamma >= 0 and 0 < alpha_t <= 1 (got {gamma}, {alpha_t})"
        )));
    }
    let p = tape.exp(tlv.log_probs)?;
    let q = tape.scale(p, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let q = tape.clamp_min(q, 0.0)?;
    let w = tape.powf(q, gamma)?;
    let t = tape.mul(w, tlv.log_probs)?;
    let s = tape.sum(t)?;
    tape.scale(s, -alpha_t / tlv.len() as f64)
}

/// Indices of the `k` highest-loss (lowest log-prob) positions, ties by
/// lower index.
pub fn highest_loss_positions(log_probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..log_probs.len()).collect();
    idx.sort_by(|&a, &b| log_probs[a].total_cmp(&log_probs[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn mean_of_highest(tape: &mut Tape, tlv: &TokenLossVector, k: usize) -> Result<Var> {
    let idx = highest_loss_positions(tape.value(tlv.log_probs).data(), k);
    let sel = tape.select(tlv.log_probs, &idx)?;
    let m = tape.mean(sel)?;
    tape.neg(m)
}

/// Mean token loss over the `n` highest-loss suffix positions.
pub fn smooth_loss(tape: &mut Tape, tlv: &TokenLossVector, n: usize) -> Result<Var> {
    if n == 0 || n > tlv.len() {
        return Err(Error::Config(format!(
            "smooth N must be in [1, {}], got {n}",
            tlv.len()
        )));
    }
    mean_of_highest(tape, tlv, n)
}

/// `k_dy`: `N` while `L_MLE ≤ T_D`, else `N + α(L_MLE − T_D)`; floored and
/// clamped to `[1, len]`.
pub fn dynamic_k(mle: f64, n: usize, threshold: f64, alpha: f64, len: usize) -> usize {
    let raw = if mle <= threshold {
        n as f64
    } else {
        n as f64 + alpha * (mle - threshold)
    };
    let k = (raw + K_DY_SLACK).floor();
    (k.max(1.0) as usize).clamp(1, len.max(1))
}

/// Mean token loss over the `k_dy` highest-loss positions. Returns the loss
/// and the `k_dy` used.
pub fn dynamic_loss(
    tape: &mut Tape,
    tlv: &TokenLossVector,
    n: usize,
    threshold: f64,
    alpha: f64,
) -> Result<(Var, usize)> {
    if n == 0 || threshold <= 0.0 || alpha < 0.0 {
        return Err(Error::Config(format!(
            "dynamic loss needs N >= 1, T_D > 0, alpha >= 0 (got {n}, {threshold}, {alpha})"
        )));
    }
    let lp = tape.value(tlv.log_probs).data();
    let mle = -lp.iter().sum::<f64>() / lp.len() as f64;
    let k = dynamic_k(mle, n, threshold, alpha, tlv.len());
    Ok((mean_of_highest(tape, tlv, k)?, k))
}

/// `−(1/|set|) Σ_{i: gold_i ∈ set} weight · log p_i`; zero when nothing
/// qualifies.
fn membership_loss(
    tape: &mut Tape,
    tlv: &TokenLossVector,
    set: &BTreeSet<usize>,
    weight: f64,
) -> Result<Var> {
    let coef = if set.is_empty() {
        0.0
    } else {
        -weight / set.len() as f64
    };
    let w: Vec<f64> = tlv
        .gold
        .iter()
        .map(|t| if set.contains(t) { coef } else { 0.0 })
        .collect();
    tape.dot_const(tlv.log_probs, &w)
}

pub fn additive_loss(
    tape: &mut Tape,
    tlv: &TokenLossVector,
    eps: &ErrorProneSet,
    alpha: f64,
) -> Result<Var> {
    if alpha < 0.0 {
        return Err(Error::Config(format!(
            "additive alpha must be >= 0, got {alpha}"
        )));
    }
    membership_loss(tape, tlv, &eps.active, alpha)
}

pub fn common_loss(
    tape: &mut Tape,
    tlv: &TokenLossVector,
    cs: &CommonSet,
    beta: f64,
) -> Result<Var> {
    if beta < 0.0 {
        return Err(Error::Config(format!(
            "common beta must be >= 0, got {beta}"
        )));
    }
    membership_loss(tape, tlv, &cs.members, beta)
}

/// Tokens the attack keeps getting wrong.
///
/// Mispredictions are counted per gold token over one window (an epoch);
/// [`ErrorProneSet::refresh`] promotes tokens at or above `threshold` into the
/// active set and starts a new window.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorProneSet {
    pub counts: Vec<u64>,
    pub active: BTreeSet<usize>,
    pub threshold: u64,
}

impl ErrorProneSet {
    pub fn new(vocab_size: usize, threshold: u64) -> Self {
        ErrorProneSet {
            counts: vec![0; vocab_size],
            active: BTreeSet::new(),
            threshold,
        }
    }

    pub fn observe(&mut self, gold: &[usize], predicted: &[usize]) {
        for (&g, &p) in gold.iter().zip(predicted) {
            if g != p && g < self.counts.len() {
                self.counts[g] += 1;
            }
        }
    }

    pub fn refresh(&mut self) {
        self.active = self
            .counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c >= self.threshold.max(1))
            .map(|(t, _)| t)
            .collect();
        self.counts.iter_mut().for_each(|c| *c = 0);
    }
}

/// The top 10% of the vocabulary by corpus frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommonSet {
    /// `rank[t]` is the 1-based frequency rank of token `t`.
    pub rank: Vec<usize>,
    pub members: BTreeSet<usize>,
}

impl CommonSet {
    /// Ranks by descending count, ties by lower id; keeps ranks ≤ `0.1·V`.
    pub fn from_counts(counts: &[u64]) -> Self {
        let v = counts.len();
        let mut order: Vec<usize> = (0..v).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let mut rank = vec![0; v];
        for (r, &t) in order.iter().enumerate() {
            rank[t] = r + 1;
        }
        let limit = v / 10;
        let members = order[..limit].iter().copied().collect();
        CommonSet { rank, members }
    }

    pub fn empty(vocab_size: usize) -> Self {
        CommonSet {
            rank: (1..=vocab_size).collect(),
            members: BTreeSet::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    Mle,
    Focal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Smooth,
    Dynamic,
    Additive,
    Common,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComponentWeights {
    pub smooth: f64,
    pub dynamic: f64,
    pub additive: f64,
    pub common: f64,
}

impl Default for ComponentWeights {
    fn default() -> Self {
        ComponentWeights {
            smooth: 1.0,
            dynamic: 1.0,
            additive: 1.0,
            common: 1.0,
        }
    }
}

impl ComponentWeights {
    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::Smooth => self.smooth,
            Component::Dynamic => self.dynamic,
            Component::Additive => self.additive,
            Component::Common => self.common,
        }
    }
}

/// A base loss plus weighted auxiliary components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossStack {
    pub base: BaseLoss,
    pub components: BTreeSet<Component>,
    pub smooth_n: usize,
    pub dynamic_n: usize,
    pub dynamic_t: f64,
    pub dynamic_alpha: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub additive_alpha: f64,
    pub additive_threshold: u64,
    pub common_beta: f64,
    pub weights: ComponentWeights,
}

impl Default for LossStack {
    fn default() -> Self {
        LossStack {
            base: BaseLoss::Mle,
            components: BTreeSet::new(),
            smooth_n: 5,
            dynamic_n: 5,
            dynamic_t: 0.1,
            dynamic_alpha: 5.0,
            focal_alpha: 0.6,
            focal_gamma: 2.0,
            additive_alpha: 0.7,
            additive_threshold: 5,
            common_beta: 0.2,
            weights: ComponentWeights::default(),
        }
    }
}

impl fmt::Display for LossStack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.base {
            BaseLoss::Mle => "MLE",
            BaseLoss::Focal => "Focal",
        })?;
        for c in &self.components {
            f.write_str(match c {
                Component::Smooth => "+Smooth",
                Component::Dynamic => "+Dynamic",
                Component::Additive => "+Additive",
                Component::Common => "+Common",
            })?;
        }
        Ok(())
    }
}

/// Value of a combined loss and the `k_dy` it used, if any.
#[derive(Clone, Copy, Debug)]
pub struct CombinedLoss {
    pub total: Var,
    pub mle: f64,
    pub k_dy: Option<usize>,
}

impl LossStack {
    pub fn new(base: BaseLoss, components: &[Component]) -> Self {
        LossStack {
            base,
            components: components.iter().copied().collect(),
            ..Default::default()
        }
    }

    pub fn has(&self, c: Component) -> bool {
        self.components.contains(&c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.has(Component::Smooth) && self.has(Component::Dynamic) {
            return Err(Error::Config(
                "smooth and dynamic components are mutually exclusive".into(),
            ));
        }
        let w = &self.weights;
        if [w.smooth, w.dynamic, w.additive, w.common]
            .iter()
            .any(|x| !(x.is_finite() && *x >= 0.0))
        {
            return Err(Error::Config(
                "component weights must be finite and >= 0".into(),
            ));
        }
        if self.smooth_n == 0 || self.dynamic_n == 0 {
            return Err(Error::Config("smooth_n and dynamic_n must be >= 1".into()));
        }
        if self.dynamic_t <= 0.0 || self.dynamic_alpha < 0.0 {
            return Err(Error::Config(
                "dynamic_t must be > 0 and dynamic_alpha >= 0".into(),
            ));
        }
        if self.focal_gamma < 0.0 || !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return Err(Error::Config(
                "focal needs gamma >= 0 and 0 < alpha <= 1".into(),
            ));
        }
        if self.additive_alpha < 0.0 || self.common_beta < 0.0 {
            return Err(Error::Config(
                "additive_alpha and common_beta must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// The sixteen combinations: each base with {smooth | dynamic} and any
    /// subset of {additive, common}.
    pub fn combinations() -> Vec<LossStack> {
        use Component::*;
        let mut out = Vec::with_capacity(16);
        for base in [BaseLoss::Mle, BaseLoss::Focal] {
            for comps in [
                vec![Smooth],
                vec![Dynamic],
                vec![Smooth, Additive],
                vec![Smooth, Common],
                vec![Dynamic, Additive],
                vec![Dynamic, Common],
                vec![Smooth, Additive, Common],
                vec![Dynamic, Additive, Common],
            ] {
                out.push(LossStack::new(base, &comps));
            }
        }
        out
    }

    /// Plain MLE followed by the sixteen combinations.
    pub fn grid() -> Vec<LossStack> {
        let mut out = vec![LossStack::default()];
        out.extend(LossStack::combinations());
        out
    }

    pub fn base_loss(&self, tape: &mut Tape, tlv: &TokenLossVector) -> Result<Var> {
        match self.base {
            BaseLoss::Mle => mle_loss(tape, tlv),
            BaseLoss::Focal => focal_loss(tape, tlv, self.focal_alpha, self.focal_gamma),
        }
    }

    /// `base + Σ weight_c · component_c`.
    pub fn combine(
        &self,
        tape: &mut Tape,
        tlv: &TokenLossVector,
        eps: &ErrorProneSet,
        cs: &CommonSet,
    ) -> Result<CombinedLoss> {
        self.validate()?;
        let lp = tape.value(tlv.log_probs).data();
        let mle = -lp.iter().sum::<f64>() / lp.len() as f64;
        let mut total = self.base_loss(tape, tlv)?;
        let mut k_dy = None;
        for &c in &self.components {
            let w = self.weights.get(c);
            let term = match c {
                Component::Smooth => smooth_loss(tape, tlv, self.smooth_n.min(tlv.len()))?,
                Component::Dynamic => {
                    let (v, k) = dynamic_loss(
                        tape,
                        tlv,
                        self.dynamic_n,
                        self.dynamic_t,
                        self.dynamic_alpha,
                    )?;
                    k_dy = Some(k);
                    v
                }
                Component::Additive => additive_loss(tape, tlv, eps, self.additive_alpha)?,
                Component::Common => common_loss(tape, tlv, cs, self.common_beta)?,
            };
            let term = tape.scale(term, w)?;
            total = tape.add(total, term)?;
        }
        Ok(CombinedLoss { total, mle, k_dy })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn eval(
        f: impl FnOnce(&mut Tape, &TokenLossVector) -> Var,
        lp: &[f64],
        gold: Vec<usize>,
    ) -> f64 {
        let mut tape = Tape::new();
        let tlv = TokenLossVector::from_values(&mut tape, lp, gold).unwrap();
        let v = f(&mut tape, &tlv);
        tape.value(v).item().unwrap()
    }

    fn random_lp(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| -rng.random_range(0.0..4.0)).collect()
    }

    #[test]
    fn mle_examples() {
        assert_eq!(
            eval(|t, v| mle_loss(t, v).unwrap(), &[0.0, 0.0, 0.0], vec![0; 3]),
            0.0
        );
        let l = eval(|t, v| mle_loss(t, v).unwrap(), &[-LN_2, -LN_2], vec![0; 2]);
        assert!((l - LN_2).abs() < 1e-15);
        let mut tape = Tape::new();
        assert!(TokenLossVector::from_values(&mut tape, &[], vec![]).is_err());
    }

    #[test]
    fn focal_examples() {
        let l = eval(
            |t, v| focal_loss(t, v, 0.6, 2.0).unwrap(),
            &[0.5f64.ln()],
            vec![1],
        );
        assert!((l - 0.6 * 0.25 * LN_2).abs() < 1e-15);
        assert!((l - 0.10397).abs() < 1e-5);
        assert_eq!(
            eval(
                |t, v| focal_loss(t, v, 0.6, 2.0).unwrap(),
                &[0.0; 4],
                vec![0; 4]
            ),
            0.0
        );
        let mut tape = Tape::new();
        let tlv = TokenLossVector::from_values(&mut tape, &[-1.0], vec![0]).unwrap();
        assert!(focal_loss(&mut tape, &tlv, 0.0, 2.0).is_err());
        assert!(focal_loss(&mut tape, &tlv, 0.5, -1.0).is_err());
    }

    #[test]
    fn defaults_match_published_hyperparameters() {
        let s = LossStack::default();
        assert_eq!((s.focal_alpha, s.focal_gamma), (0.6, 2.0));
        assert_eq!(s.smooth_n, 5);
        assert_eq!((s.dynamic_n, s.dynamic_t, s.dynamic_alpha), (5, 0.1, 5.0));
        assert_eq!(s.additive_alpha, 0.7);
        assert_eq!(s.common_beta, 0.2);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let l = eval(|t, v| mle_loss(t, v).unwrap(), &[-1e6], vec![0]);
        assert!((l + MIN_PROB.ln()).abs() < 1e-12);
    }

    #[test]
    fn smooth_examples() {
        let lp: Vec<f64> = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
            .iter()
            .map(|x: &f64| -x)
            .collect();
        let l = eval(|t, v| smooth_loss(t, v, 2).unwrap(), &lp, vec![0; 6]);
        assert_eq!(l, 5.5);
        let uniform = [-0.3; 7];
        for n in 1..=7 {
            let l = eval(|t, v| smooth_loss(t, v, n).unwrap(), &uniform, vec![0; 7]);
            assert!((l - 0.3).abs() < 1e-15);
        }
        let mut tape = Tape::new();
        let tlv = TokenLossVector::from_values(&mut tape, &lp, vec![0; 6]).unwrap();
        assert!(smooth_loss(&mut tape, &tlv, 0).is_err());
        assert!(smooth_loss(&mut tape, &tlv, 7).is_err());
    }

    #[test]
    fn smooth_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(1..30);
            let lp = random_lp(&mut rng, n);
            let k = rng.random_range(1..=n);
            let mut losses: Vec<f64> = lp.iter().map(|x| -x).collect();
            losses.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let expect = losses[..k].iter().sum::<f64>() / k as f64;
            let got = eval(|t, v| smooth_loss(t, v, k).unwrap(), &lp, vec![0; n]);
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dynamic_schedule_examples() {
        assert_eq!(dynamic_k(0.05, 5, 0.1, 5.0, 50), 5);
        assert_eq!(dynamic_k(0.3, 5, 0.1, 5.0, 50), 6);
        assert_eq!(dynamic_k(100.0, 5, 0.1, 5.0, 50), 50);
        assert_eq!(dynamic_k(0.0, 0, 0.1, 5.0, 50), 1);
    }

    #[test]
    fn additive_examples() {
        let eps = ErrorProneSet::new(10, 5);
        let l = eval(
            |t, v| additive_loss(t, v, &eps, 0.7).unwrap(),
            &[-1.0, -2.0],
            vec![1, 2],
        );
        assert_eq!(l, 0.0);
        let mut eps = ErrorProneSet::new(10, 1);
        eps.observe(&[3], &[4]);
        eps.refresh();
        assert_eq!(eps.active.iter().copied().collect::<Vec<_>>(), vec![3]);
        let l = eval(
            |t, v| additive_loss(t, v, &eps, 0.7).unwrap(),
            &[0.5f64.ln(), -3.0],
            vec![3, 2],
        );
        assert!((l - 0.7 * LN_2).abs() < 1e-15);
        assert!((l - 0.4852).abs() < 1e-4);
    }

    #[test]
    fn error_prone_window() {
        let mut eps = ErrorProneSet::new(8, 2);
        eps.observe(&[1, 1, 2, 5], &[0, 0, 2, 4]);
        eps.refresh();
        assert_eq!(eps.active.iter().copied().collect::<Vec<_>>(), vec![1]);
        assert!(eps.counts.iter().all(|&c| c == 0));
        eps.refresh();
        assert!(eps.active.is_empty());
    }

    #[test]
    fn common_set_size_and_ranks() {
        let counts: Vec<u64> = (0..60).map(|i| (i * 7 % 13) as u64).collect();
        let cs = CommonSet::from_counts(&counts);
        assert_eq!(cs.members.len(), 6);
        let mut r = cs.rank.clone();
        r.sort();
        assert_eq!(r, (1..=60).collect::<Vec<_>>());
        for &m in &cs.members {
            assert!(cs.rank[m] <= 6);
        }
        let l = eval(
            |t, v| common_loss(t, v, &CommonSet::empty(60), 0.2).unwrap(),
            &[-1.0],
            vec![0],
        );
        assert_eq!(l, 0.0);
    }

    #[test]
    fn common_matches_membership_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let v = 40;
            let counts: Vec<u64> = (0..v).map(|_| rng.random_range(0..20)).collect();
            let cs = CommonSet::from_counts(&counts);
            let n = rng.random_range(1..25);
            let lp = random_lp(&mut rng, n);
            let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
            let beta = rng.random_range(0.0..1.0);
            let mut expect = 0.0;
            for i in 0..n {
                if cs.members.iter().any(|&m| m == gold[i]) {
                    expect -= beta * lp[i];
                }
            }
            expect /= cs.members.len() as f64;
            let got = eval(|t, x| common_loss(t, x, &cs, beta).unwrap(), &lp, gold);
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn combine_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lp = random_lp(&mut rng, 12);
        let gold: Vec<usize> = (0..12).map(|i| i % 5).collect();
        let mut eps = ErrorProneSet::new(5, 1);
        eps.observe(&[1, 3], &[0, 0]);
        eps.refresh();
        let cs = CommonSet::from_counts(&[9, 1, 1, 1, 1, 1, 1, 1, 1, 1]);

        for base in [BaseLoss::Mle, BaseLoss::Focal] {
            let plain = LossStack::new(base, &[]);
            let mut zero = LossStack::new(
                base,
                &[Component::Smooth, Component::Additive, Component::Common],
            );
            zero.weights = ComponentWeights {
                smooth: 0.0,
                dynamic: 0.0,
                additive: 0.0,
                common: 0.0,
            };
            let mut tape = Tape::new();
            let tlv = TokenLossVector::from_values(&mut tape, &lp, gold.clone()).unwrap();
            let b = plain.base_loss(&mut tape, &tlv).unwrap();
            let b = tape.value(b).item().unwrap();
            let c = plain.combine(&mut tape, &tlv, &eps, &cs).unwrap();
            assert_eq!(tape.value(c.total).item().unwrap(), b);
            let c = zero.combine(&mut tape, &tlv, &eps, &cs).unwrap();
            assert_eq!(tape.value(c.total).item().unwrap(), b);
        }

        let stack = LossStack::new(
            BaseLoss::Mle,
            &[Component::Smooth, Component::Additive, Component::Common],
        );
        let mut tape = Tape::new();
        let tlv = TokenLossVector::from_values(&mut tape, &lp, gold.clone()).unwrap();
        let parts = [
            mle_loss(&mut tape, &tlv).unwrap(),
            smooth_loss(&mut tape, &tlv, 5).unwrap(),
            additive_loss(&mut tape, &tlv, &eps, 0.7).unwrap(),
            common_loss(&mut tape, &tlv, &cs, 0.2).unwrap(),
        ];
        let expect: f64 = parts.iter().map(|&p| tape.value(p).item().unwrap()).sum();
        let c = stack.combine(&mut tape, &tlv, &eps, &cs).unwrap();
        assert!((tape.value(c.total).item().unwrap() - expect).abs() < 1e-12);

        let both = LossStack::new(BaseLoss::Mle, &[Component::Smooth, Component::Dynamic]);
        assert!(both.combine(&mut tape, &tlv, &eps, &cs).is_err());
    }

    #[test]
    fn grid_shape() {
        let combos = LossStack::combinations();
        assert_eq!(combos.len(), 16);
        assert!(combos.iter().all(|s| s.validate().is_ok()));
        let names: BTreeSet<String> = combos.iter().map(|s| s.to_string()).collect();
        assert_eq!(names.len(), 16);
        let grid = LossStack::grid();
        assert_eq!(grid.len(), 17);
        assert_eq!(grid[0].to_string(), "MLE");
    }

    #[test]
    fn losses_non_negative_and_zero_at_certainty() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut eps = ErrorProneSet::new(6, 1);
        eps.observe(&[0, 1, 2], &[5, 5, 5]);
        eps.refresh();
        let cs = CommonSet::from_counts(&[5, 4, 3, 2, 1, 0, 0, 0, 0, 0, 0, 0]);
        for stack in LossStack::grid() {
            let lp = random_lp(&mut rng, 10);
            let gold: Vec<usize> = (0..10).map(|_| rng.random_range(0..6)).collect();
            let mut tape = Tape::new();
            let tlv = TokenLossVector::from_values(&mut tape, &lp, gold.clone()).unwrap();
            let c = stack.combine(&mut tape, &tlv, &eps, &cs).unwrap();
            assert!(tape.value(c.total).item().unwrap() >= 0.0);
            let tlv = TokenLossVector::from_values(&mut tape, &[0.0; 10], gold).unwrap();
            let c = stack.combine(&mut tape, &tlv, &eps, &cs).unwrap();
            assert_eq!(tape.value(c.total).item().unwrap(), 0.0);
        }
    }

    #[test]
    fn stack_serializes_with_fixed_names() {
        let s = LossStack::new(BaseLoss::Focal, &[Component::Smooth, Component::Additive]);
        let j = serde_json::to_value(&s).unwrap();
        for key in [
            "base",
            "smooth_n",
            "dynamic_n",
            "dynamic_t",
            "dynamic_alpha",
            "focal_alpha",
            "focal_gamma",
            "additive_alpha",
            "common_beta",
            "weights",
        ] {
            assert!(j.get(key).is_some(), "missing {key}");
        }
        assert_eq!(j["base"], "focal");
        let back: LossStack = serde_json::from_value(j).unwrap();
        assert_eq!(back, s);
        let t: LossStack = toml::from_str("base = \"mle\"\ncomponents = [\"dynamic\"]\n").unwrap();
        assert!(t.has(Component::Dynamic));
        assert_eq!(t.dynamic_n, 5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mle_and_focal_are_permutation_invariant(
                lp in proptest::collection::vec(-6.0f64..0.0, 1..40),
                seed in any::<u64>(),
            ) {
                use rand::seq::SliceRandom;
                let mut shuffled = lp.clone();
                shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let n = lp.len();
                let a = eval(|t, v| mle_loss(t, v).unwrap(), &lp, vec![0; n]);
                let b = eval(|t, v| mle_loss(t, v).unwrap(), &shuffled, vec![0; n]);
                prop_assert!((a - b).abs() < 1e-12);
                let a = eval(|t, v| focal_loss(t, v, 0.6, 2.0).unwrap(), &lp, vec![0; n]);
                let b = eval(|t, v| focal_loss(t, v, 0.6, 2.0).unwrap(), &shuffled, vec![0; n]);
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
