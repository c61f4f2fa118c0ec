//! Rank-one weight editing that suppresses memorized continuations.
//!
//! The edit `W ← W + u·vᵀ` targets one feed-forward output projection. It is
//! fitted by gradient descent on (u, v) to lower the probability of the least
//! likely of each targeted pair's leading suffix tokens, while a KL penalty keeps the
//! next-token distributions on other training pairs close to the original.
//! Fitting stops at the first epoch whose training perplexity crosses the
//! configured multiple of the unedited perplexity.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Tensor};
use crate::corpus::Dataset;
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::linalg::weighted_ridge;
use crate::losses::MIN_PROB;
use crate::metrics::{self, csv_field, ExtractionReport};
use crate::model::{MatrixId, VictimModel};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PplStop {
    Low,
    High,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    /// Layer whose feed-forward output projection is edited; `None` picks
    /// the middle layer.
    pub layer: Option<usize>,
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop multiples of the unedited training perplexity.
    pub ppl_stop_low: f64,
    pub ppl_stop_high: f64,
    /// Which of the two thresholds ends fitting.
    pub stop: PplStop,
    /// Weight of the KL utility penalty.
    pub lambda: f64,
    /// Non-target pairs sampled per epoch for the penalty.
    pub reg_batch: usize,
    pub n_targets: usize,
    /// Leading suffix tokens per target; the objective pushes down the
    /// least likely of them, since one miss breaks the extraction.
    pub target_tokens: usize,
    /// Target probabilities below this floor stop contributing gradient, so
    /// effort moves to targets that are still likely.
    pub target_floor: f64,
    pub init: EditInit,
    /// Non-target pairs whose activations enter the key fit.
    pub key_pairs: usize,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            layer: None,
            lr: 2e-2,
            max_epochs: 150,
            ppl_stop_low: 1.1,
            ppl_stop_high: 1.8,
            stop: PplStop::Low,
            lambda: 10.0,
            reg_batch: 16,
            n_targets: 16,
            target_tokens: 5,
            target_floor: 1e-2,
            init: EditInit::Keys,
            key_pairs: 64,
            seed: 42,
        }
    }
}

impl EditConfig {
    /// Checks against a victim with `layers` blocks.
    pub fn validate(&self, layers: usize) -> Result<()> {
        if let Some(l) = self.layer {
            if l >= layers {
                return Err(Error::Config(format!(
                    "edit layer {l} out of range for {layers} layers"
                )));
            }
        }
        if !(1.0 < self.ppl_stop_low && self.ppl_stop_low < self.ppl_stop_high) {
            return Err(Error::Config(
                "need 1 < ppl_stop_low < ppl_stop_high".into(),
            ));
        }
        if !(MIN_PROB..1.0).contains(&self.target_floor) {
            return Err(Error::Config(format!(
                "target_floor must be in [{MIN_PROB}, 1), got {}",
                self.target_floor
            )));
        }
        if self.lr.is_nan()
            || self.lr <= 0.0
            || self.lambda < 0.0
            || self.n_targets == 0
            || self.target_tokens == 0
        {
            return Err(Error::Config(
                "edit needs lr > 0, lambda >= 0, n_targets >= 1, target_tokens >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn target_layer(&self, model: &VictimModel) -> usize {
        self.layer.unwrap_or(model.config.layers / 2)
    }

    fn threshold(&self) -> f64 {
        match self.stop {
            PplStop::Low => self.ppl_stop_low,
            PplStop::High => self.ppl_stop_high,
        }
    }
}

/// How the input direction `v` starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditInit {
    /// `N(0, 1/ff_dim)` entries.
    Random,
    /// Ridge fit of the layer's feed-forward activations: 1 at each target's
    /// last prefix position, 0 at the suffix positions of other pairs.
    Keys,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    PplThreshold,
    MaxEpochs,
}

/// `W_math += u vᵀ`, where `W_math` maps the `ff_dim` input to the `d`
/// output. The stored matrix is `ff_dim × d`, so it receives `v uᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOneEdit {
    pub matrix: MatrixId,
    /// Output direction (`d`).
    pub u: Vec<f64>,
    /// Input direction (`ff_dim`).
    pub v: Vec<f64>,
    /// Index of the last epoch fitted.
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
    pub fingerprint: String,
}

impl RankOneEdit {
    /// The delta in the stored layout (`ff_dim × d`).
    pub fn delta(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.u.len() * self.v.len());
        for &a in &self.v {
            data.extend(self.u.iter().map(|&b| a * b));
        }
        Tensor::matrix(self.v.len(), self.u.len(), data).expect("sizes agree by construction")
    }

    /// The same edit with `u` negated.
    pub fn negated(&self) -> Self {
        RankOneEdit {
            u: self.u.iter().map(|x| -x).collect(),
            ..self.clone()
        }
    }
}

/// A new model with the edit applied; the original is untouched.
pub fn apply_edit(model: &VictimModel, edit: &RankOneEdit) -> Result<VictimModel> {
    let mut out = model.clone();
    let w = out.matrix_mut(edit.matrix)?;
    if w.rows() != edit.v.len() || w.cols() != edit.u.len() {
        return Err(Error::Shape {
            op: "apply_edit",
            detail: format!(
                "matrix is {}x{}, edit is {}x{}",
                w.rows(),
                w.cols(),
                edit.v.len(),
                edit.u.len()
            ),
        });
    }
    let d = w.cols();
    for (i, &vi) in edit.v.iter().enumerate() {
        for (j, &uj) in edit.u.iter().enumerate() {
            w.data_mut()[i * d + j] += vi * uj;
        }
    }
    if !w.is_finite() {
        return Err(Error::NonFinite { op: "apply_edit" });
    }
    Ok(out)
}

/// Activations of `layer` at the suffix-prediction rows of `pair`.
fn key_rows(
    model: &VictimModel,
    context: Option<&Tensor>,
    prefix: &[usize],
    suffix: &[usize],
    layer: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, false);
    let mut ids = prefix.to_vec();
    ids.extend_from_slice(&suffix[..suffix.len() - 1]);
    let emb = model.embed_on_tape(&mut tape, &w, &ids)?;
    let (x, k) = match context {
        Some(c) if c.rows() > 0 => {
            let c = tape.constant(c.clone());
            (tape.concat_rows(&[c, emb])?, tape.value(c).rows())
        }
        _ => (emb, 0),
    };
    let acts = model.ff_activations_on_tape(&mut tape, &w, x, layer)?;
    let start = k + prefix.len() - 1;
    let rows = tape.slice_rows(acts, start, start + suffix.len())?;
    Ok(tape.value(rows).clone())
}

#[allow(clippy::too_many_arguments)]
fn key_direction(
    model: &VictimModel,
    context: Option<&Tensor>,
    targets: &Dataset,
    train: &Dataset,
    pool: &[usize],
    layer: usize,
    cfg: &EditConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut parts = Vec::new();
    let (mut y, mut wt) = (Vec::new(), Vec::new());
    for p in &targets.pairs {
        parts.push(key_rows(model, context, &p.prefix, &p.suffix[..1], layer)?);
        y.push(1.0);
    }
    let n_t = parts.len();
    for &i in pool.choose_multiple(rng, cfg.key_pairs.min(pool.len())) {
        let p = &train.pairs[i];
        let r = key_rows(model, context, &p.prefix, &p.suffix, layer)?;
        y.extend(std::iter::repeat_n(0.0, r.rows()));
        parts.push(r);
    }
    let n_o = y.len() - n_t;
    // Balance the two groups' total weight.
    let target_w = if n_t > 0 {
        (n_o.max(1) as f64) / n_t as f64
    } else {
        1.0
    };
    wt.extend(std::iter::repeat_n(target_w, n_t));
    wt.extend(std::iter::repeat_n(1.0, n_o));
    let refs: Vec<&Tensor> = parts.iter().collect();
    let x = Tensor::concat_rows(&refs)?;
    let mut v = weighted_ridge(&x, &y, &wt, 1e-3)?;
    // Scale so the mean target response is 1.
    let mean: f64 = (0..n_t)
        .map(|i| x.row(i).iter().zip(&v).map(|(a, b)| a * b).sum::<f64>())
        .sum::<f64>()
        / n_t.max(1) as f64;
    if mean.abs() > 1e-12 {
        v.iter_mut().for_each(|x| *x /= mean);
    }
    Ok(v)
}

/// Training perplexity of the edited model without rerunning the layers
/// below the edit: each pair's residual stream and activations at the edited
/// block are cached once, and `v·uᵀ` enters as the rank-one shift
/// `(act·v)·uᵀ`.
struct EditedPerplexity {
    layer: usize,
    /// (residual after the edited block, its activations, first suffix row,
    /// suffix).
    pairs: Vec<(Tensor, Tensor, usize, Vec<usize>)>,
}

impl EditedPerplexity {
    fn new(
        model: &VictimModel,
        data: &Dataset,
        context: Option<&Tensor>,
        layer: usize,
    ) -> Result<Self> {
        let k = context.map_or(0, |c| c.rows());
        let pairs = data
            .pairs
            .iter()
            .map(|p| {
                model
                    .config
                    .check_fits(k, p.prefix.len(), p.suffix.len() - 1)?;
                let mut ids = p.prefix.clone();
                ids.extend_from_slice(&p.suffix[..p.suffix.len() - 1]);
                let emb = model.embed(&ids)?;
                let x = match context {
                    Some(c) if k > 0 => Tensor::concat_rows(&[c, &emb])?,
                    _ => emb,
                };
                let (h, act) = model.split_at_ff_out(&x, layer)?;
                Ok((h, act, k + p.prefix.len() - 1, p.suffix.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        if pairs.is_empty() {
            return Err(Error::Empty("perplexity dataset".into()));
        }
        Ok(EditedPerplexity { layer, pairs })
    }

    fn eval(&self, model: &VictimModel, u: &[f64], v: &[f64]) -> Result<f64> {
        let floor = MIN_PROB.ln();
        let (mut nll, mut n) = (0.0, 0usize);
        for (h, act, start, suffix) in &self.pairs {
            let mut h = h.clone();
            for r in 0..h.rows() {
                let s: f64 = act.row(r).iter().zip(v).map(|(a, b)| a * b).sum();
                for (x, &uj) in h.row_mut(r).iter_mut().zip(u) {
                    *x += s * uj;
                }
            }
            let logits = model.logits_from_layer(&h, self.layer + 1)?;
            for (i, &gold) in suffix.iter().enumerate() {
                let mut row = logits.row(start + i).to_vec();
                kernels::log_softmax_row(&mut row);
                nll -= row[gold].max(floor);
                n += 1;
            }
        }
        Ok((nll / n as f64).exp())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditEpoch {
    pub epoch: usize,
    /// Mean log-probability of the targets' first suffix tokens.
    pub target_log_prob: f64,
    pub kl: f64,
    pub train_ppl: f64,
    /// Change in the targets' greedy first-token hit rate.
    pub delta_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditTrace {
    pub baseline_ppl: f64,
    pub epochs: Vec<EditEpoch>,
}

/// Fits one shared edit for every pair in `targets`.
///
/// `context` is the defender's conditioning (e.g. the training-time header)
/// placed before each prefix; `train` is the training corpus used for the
/// perplexity stop, and its pairs outside `targets` feed the KL penalty.
pub fn fit_rank_one_edit(
    model: &VictimModel,
    context: Option<&Tensor>,
    targets: &Dataset,
    train: &Dataset,
    cfg: &EditConfig,
    fingerprint: &str,
) -> Result<(RankOneEdit, EditTrace)> {
    cfg.validate(model.config.layers)?;
    if targets.is_empty() {
        return Err(Error::Empty("edit targets".into()));
    }
    let layer = cfg.target_layer(model);
    let matrix = MatrixId::FfOut { layer };
    let (ff, d) = {
        let w = model.matrix(matrix)?;
        (w.rows(), w.cols())
    };
    let target_ids: BTreeSet<u64> = targets.pairs.iter().map(|p| p.id).collect();
    let pool: Vec<usize> = (0..train.len())
        .filter(|&i| !target_ids.contains(&train.pairs[i].id))
        .collect();
    let probes: Vec<(Vec<usize>, usize)> = targets
        .pairs
        .iter()
        .map(|p| (p.prefix.clone(), p.suffix[0]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut u = vec![0.0; d];
    let mut v = match cfg.init {
        EditInit::Random => {
            let normal = Normal::new(0.0, 1.0 / (ff as f64).sqrt()).expect("positive std");
            (0..ff).map(|_| normal.sample(&mut rng)).collect()
        }
        EditInit::Keys => {
            key_direction(model, context, targets, train, &pool, layer, cfg, &mut rng)?
        }
    };
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
        &[d, ff],
    );
    let floor = cfg.target_floor.ln();
    let mut reference: HashMap<usize, Vec<f64>> = HashMap::new();
    let ppl = EditedPerplexity::new(model, train, context, layer)?;
    let baseline_ppl = ppl.eval(model, &vec![0.0; d], &v)?;
    let limit = baseline_ppl * cfg.threshold();
    let hit_before = metrics::first_token_hit_rate(model, context, &probes)?;
    let mut trace = EditTrace {
        baseline_ppl,
        epochs: Vec::new(),
    };
    let mut tape = Tape::new();
    let mut stop = (cfg.max_epochs.saturating_sub(1), StopReason::MaxEpochs);

    for epoch in 0..cfg.max_epochs {
        tape.clear();
        let mut w = model.bind(&mut tape, false);
        let uv = tape.leaf(Tensor::vector(u.clone()), true);
        let vv = tape.leaf(Tensor::vector(v.clone()), true);
        let ctx = context.map(|c| tape.constant(c.clone()));
        let delta = tape.outer(vv, uv)?;
        w.layers[layer].ff_out = tape.add(w.layers[layer].ff_out, delta)?;

        let mut firsts = Vec::with_capacity(targets.len());
        for p in &targets.pairs {
            let m = cfg.target_tokens.min(p.suffix.len());
            let s = model.suffix_scores(&mut tape, &w, ctx, &p.prefix, &p.suffix[..m])?;
            let lp = tape.clamp_min(s.gold_log_probs, floor)?;
            // Soft minimum: −log Σ exp(−lp) ≤ min lp.
            let e = tape.neg(lp)?;
            let e = tape.exp(e)?;
            let e = tape.sum(e)?;
            let e = tape.log(e)?;
            firsts.push(tape.neg(e)?);
        }
        let firsts = tape.stack(&firsts)?;
        let target_term = tape.mean(firsts)?;
        let target_lp = tape.value(target_term).item()?;

        let mut kl_terms = Vec::new();
        let batch: Vec<usize> = pool
            .choose_multiple(&mut rng, cfg.reg_batch.min(pool.len()))
            .copied()
            .collect();
        for &i in &batch {
            let p = &train.pairs[i];
            let orig = match reference.get(&i) {
                Some(r) => r.clone(),
                None => {
                    let mut t = Tape::new();
                    let wo = model.bind(&mut t, false);
                    let c = context.map(|c| t.constant(c.clone()));
                    let lp = model.suffix_log_probs(&mut t, &wo, c, &p.prefix, &p.suffix)?;
                    let r = t.value(lp).data().to_vec();
                    reference.insert(i, r.clone());
                    r
                }
            };
            let lp = model.suffix_log_probs(&mut tape, &w, ctx, &p.prefix, &p.suffix)?;
            // KL(P‖Q) = Σ P (log P − log Q); only −Σ P log Q depends on Q.
            let rows = p.suffix.len() as f64;
            let weights: Vec<f64> = orig.iter().map(|&l| -l.exp() / rows).collect();
            let entropy_part: f64 = orig.iter().map(|&l| l.exp() * l).sum::<f64>() / rows;
            let cross = tape.dot_const(lp, &weights)?;
            kl_terms.push(tape.add_scalar(cross, entropy_part)?);
        }
        let kl = if kl_terms.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let s = tape.stack(&kl_terms)?;
            tape.mean(s)?
        };
        let kl_value = tape.value(kl).item()?;
        let reg = tape.scale(kl, cfg.lambda)?;
        let loss = tape.add(target_term, reg)?;

        let mut grads = tape.backward(loss)?;
        let mut gu = grads
            .take(uv)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; d]);
        let mut gv = grads
            .take(vv)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; ff]);
        if gu.iter().chain(&gv).any(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite edit gradient at epoch {epoch}"
            )));
        }
        clip_global_norm(&mut [gu.as_mut_slice(), gv.as_mut_slice()], 1.0);
        opt.step(
            &mut [u.as_mut_slice(), v.as_mut_slice()],
            &[&gu, &gv],
            cfg.lr,
        );
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: "fit_rank_one_edit",
            });
        }

        let edit = RankOneEdit {
            matrix,
            u: u.clone(),
            v: v.clone(),
            stop_epoch: epoch,
            stop_reason: StopReason::MaxEpochs,
            fingerprint: fingerprint.to_string(),
        };
        let edited = apply_edit(model, &edit)?;
        let train_ppl = ppl.eval(model, &u, &v)?;
        let hit_after = metrics::first_token_hit_rate(&edited, context, &probes)?;
        debug!(
            "edit epoch {epoch}: target log p {target_lp:.3}, kl {kl_value:.5}, ppl {train_ppl:.4}"
        );
        trace.epochs.push(EditEpoch {
            epoch,
            target_log_prob: target_lp,
            kl: kl_value,
            train_ppl,
            delta_accuracy: hit_after - hit_before,
        });
        if train_ppl >= limit {
            stop = (epoch, StopReason::PplThreshold);
            break;
        }
    }
    info!(
        "rank-one edit on layer {layer}: stopped at epoch {} ({:?})",
        stop.0, stop.1
    );
    Ok((
        RankOneEdit {
            matrix,
            u,
            v,
            stop_epoch: stop.0,
            stop_reason: stop.1,
            fingerprint: fingerprint.to_string(),
        },
        trace,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub pre: ExtractionReport,
    pub post: ExtractionReport,
    pub delta_accuracy: f64,
    pub heldout_ppl_before: f64,
    pub heldout_ppl_after: f64,
    pub ppl_ratio: f64,
}

/// Match lengths of the defense table.
pub const DEFENSE_KS: [usize; 5] = [5, 10, 25, 40, 50];

impl DefenseReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for k in DEFENSE_KS {
            let _ = write!(out, ",ER_{k}");
        }
        out.push_str(",delta_acc,heldout_ppl\n");
        for (name, r, da, ppl) in [
            ("Original", &self.pre, 0.0, self.heldout_ppl_before),
            (
                "Edited",
                &self.post,
                self.delta_accuracy,
                self.heldout_ppl_after,
            ),
        ] {
            out.push_str(&csv_field(name));
            for k in DEFENSE_KS {
                let _ = write!(out, ",{:.2}", r.rate(k));
            }
            let _ = writeln!(out, ",{da:.4},{ppl:.4}");
        }
        out
    }
}

/// Attacks both models identically on `targets` and compares utility on
/// `heldout`.
///
/// `attack_prompt` conditions extraction and first-token probes; `context`
/// conditions the held-out perplexity.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_defense(
    original: &VictimModel,
    edited: &VictimModel,
    attack_prompt: Option<&Tensor>,
    decode: &DecodeConfig,
    targets: &Dataset,
    heldout: &Dataset,
    context: Option<&Tensor>,
    fingerprint: &str,
) -> Result<DefenseReport> {
    let pre = ExtractionReport::new(
        "Original",
        fingerprint,
        metrics::run_extraction(original, attack_prompt, targets, decode)?,
    )?;
    let post = ExtractionReport::new(
        "Edited",
        fingerprint,
        metrics::run_extraction(edited, attack_prompt, targets, decode)?,
    )?;
    let probes: Vec<(Vec<usize>, usize)> = targets
        .pairs
        .iter()
        .map(|p| (p.prefix.clone(), p.suffix[0]))
        .collect();
    let delta_accuracy = metrics::delta_accuracy(original, edited, attack_prompt, &probes)?;
    let before = metrics::perplexity(original, heldout, context)?;
    let after = metrics::perplexity(edited, heldout, context)?;
    Ok(DefenseReport {
        pre,
        post,
        delta_accuracy,
        heldout_ppl_before: before,
        heldout_ppl_after: after,
        ppl_ratio: after / before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::linalg::singular_values;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn small() -> VictimModel {
        VictimModel::init(ModelConfig {
            vocab_size: 16,
            model_dim: 8,
            layers: 2,
            heads: 2,
            ff_dim: 12,
            max_context: 24,
            seed: 3,
        })
        .unwrap()
        .freeze()
    }

    fn edit(u: Vec<f64>, v: Vec<f64>) -> RankOneEdit {
        RankOneEdit {
            matrix: MatrixId::FfOut { layer: 1 },
            u,
            v,
            stop_epoch: 0,
            stop_reason: StopReason::MaxEpochs,
            fingerprint: String::new(),
        }
    }

    #[test]
    fn zero_edit_is_identity() {
        let m = small();
        let e = edit(vec![0.0; 8], vec![1.0; 12]);
        assert_eq!(apply_edit(&m, &e).unwrap().digest(), m.digest());
    }

    #[test]
    fn cached_perplexity_matches_a_full_forward() {
        let m = small();
        let data = generate_corpus(&CorpusConfig {
            n_pairs: 6,
            prefix_len: 5,
            suffix_len: 4,
            vocab_size: 16,
            ..Default::default()
        })
        .unwrap();
        let ctx = m.embed(&[3, 1, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for layer in [0, 1] {
            for context in [None, Some(&ctx)] {
                let cache = EditedPerplexity::new(&m, &data, context, layer).unwrap();
                let e = RankOneEdit {
                    matrix: MatrixId::FfOut { layer },
                    ..edit(
                        (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                };
                let full =
                    metrics::perplexity(&apply_edit(&m, &e).unwrap(), &data, context).unwrap();
                let fast = cache.eval(&m, &e.u, &e.v).unwrap();
                assert!(
                    (fast / full - 1.0).abs() < 1e-10,
                    "layer {layer}: {fast} vs {full}"
                );
                let plain = metrics::perplexity(&m, &data, context).unwrap();
                assert!((cache.eval(&m, &[0.0; 8], &e.v).unwrap() / plain - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn edit_then_inverse_restores() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = edit(
            (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let edited = apply_edit(&m, &e).unwrap();
        assert_ne!(edited.digest(), m.digest());
        let back = apply_edit(&edited, &e.negated()).unwrap();
        for ((_, a), (_, b)) in back.weights.named().iter().zip(m.weights.named()) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
        // Only the selected matrix moved.
        for ((name, a), (_, b)) in edited.weights.named().iter().zip(m.weights.named()) {
            if name != "layers.1.ff_out" {
                assert_eq!(a.data(), b.data(), "{name}");
            }
        }
        let s = singular_values(&e.delta()).unwrap();
        assert!(s[0] > 0.1 && s[1] < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = small();
        assert!(apply_edit(&m, &edit(vec![0.0; 7], vec![0.0; 12])).is_err());
        let mut bad = edit(vec![0.0; 8], vec![0.0; 12]);
        bad.matrix = MatrixId::FfOut { layer: 5 };
        assert!(apply_edit(&m, &bad).is_err());
    }

    #[test]
    fn config_validation() {
        let m = small();
        assert!(EditConfig::default().validate(m.config.layers).is_ok());
        assert_eq!(EditConfig::default().target_layer(&m), 1);
        let bad = EditConfig {
            ppl_stop_low: 2.0,
            ..Default::default()
        };
        assert!(bad.validate(m.config.layers).is_err());
        let bad = EditConfig {
            layer: Some(2),
            ..Default::default()
        };
        assert!(bad.validate(m.config.layers).is_err());
    }

    fn toy_data() -> Dataset {
        generate_corpus(&CorpusConfig {
            n_pairs: 8,
            prefix_len: 4,
            suffix_len: 4,
            vocab_size: 16,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn strong_regularizer_keeps_edit_small() {
        let m = small();
        let data = toy_data();
        let targets = Dataset {
            pairs: data.pairs[..2].to_vec(),
        };
        let run = |lambda: f64| {
            let cfg = EditConfig {
                lambda,
                max_epochs: 30,
                ppl_stop_low: 1e6,
                ppl_stop_high: 2e6,
                lr: 5e-2,
                ..Default::default()
            };
            let (e, _) = fit_rank_one_edit(&m, None, &targets, &data, &cfg, "").unwrap();
            e.delta().l2_norm()
        };
        let free = run(0.0);
        let pinned = run(1e6);
        // Adam steps are scale-free, so the pinned edit still jitters at ~lr.
        assert!(pinned < 5e-2 * free, "{pinned} vs {free}");
    }

    #[test]
    fn fitting_lowers_target_probability_and_stops_on_ppl() {
        let m = small();
        let data = toy_data();
        let targets = Dataset {
            pairs: data.pairs[..2].to_vec(),
        };
        let cfg = EditConfig {
            lambda: 0.0,
            max_epochs: 60,
            lr: 5e-2,
            ..Default::default()
        };
        let (e, trace) = fit_rank_one_edit(&m, None, &targets, &data, &cfg, "fp").unwrap();
        let first = trace.epochs.first().unwrap().target_log_prob;
        let last = trace.epochs.last().unwrap().target_log_prob;
        assert!(last < first);
        if e.stop_reason == StopReason::PplThreshold {
            let over: Vec<_> = trace
                .epochs
                .iter()
                .filter(|r| r.train_ppl >= trace.baseline_ppl * cfg.ppl_stop_low)
                .collect();
            assert_eq!(over.len(), 1);
            assert_eq!(over[0].epoch, e.stop_epoch);
        }
        assert_eq!(e.fingerprint, "fp");
    }
}
