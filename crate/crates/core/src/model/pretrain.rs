use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, VictimModel};
use crate::autodiff::{Tape, Tensor};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, warmup_cosine, AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Length of the fixed header that precedes sequences during training.
    pub preamble_len: usize,
    /// Probability that a training occurrence carries the header.
    pub preamble_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 60,
            lr: 3e-3,
            batch_size: 4,
            warmup_steps: 20,
            weight_decay: 0.0,
            clip_norm: 1.0,
            seed: 42,
            preamble_len: 16,
            preamble_rate: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainTrace {
    /// Mean next-token loss of the untrained model on the first batch.
    pub initial_loss: f64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// The header tokens (empty when disabled).
    pub preamble: Vec<usize>,
}

/// Next-token training on every pair's `prefix ‖ suffix`, then freezing.
///
/// Deliberately trained to overfit: the victim must memorize the corpus. Each
/// occurrence is preceded, with probability `preamble_rate`, by one fixed
/// random header, mimicking documents whose memorized span sits after some
/// boilerplate the attacker never sees. Header positions carry no loss.
pub fn pretrain_victim(
    config: ModelConfig,
    corpus: &Dataset,
    cfg: &PretrainConfig,
) -> Result<(VictimModel, PretrainTrace)> {
    if corpus.is_empty() {
        return Err(Error::Empty("pretraining corpus".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.preamble_rate) {
        return Err(Error::Config(format!(
            "preamble_rate must be in [0, 1], got {}",
            cfg.preamble_rate
        )));
    }
    let mut model = VictimModel::init(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let preamble: Vec<usize> = (0..cfg.preamble_len)
        .map(|_| rng.random_range(0..model.config.vocab_size))
        .collect();
    let seqs: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| p.tokens()).collect();
    for s in &seqs {
        if s.len() < 2 {
            return Err(Error::Config(
                "pretraining sequences need at least 2 tokens".into(),
            ));
        }
        if preamble.len() + s.len() - 1 > model.config.max_context {
            return Err(Error::ContextOverflow {
                len: preamble.len() + s.len() - 1,
                max: model.config.max_context,
            });
        }
    }

    let sizes: Vec<usize> = model.weights.named().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &sizes,
    );
    let steps_per_epoch = seqs.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut trace = PretrainTrace {
        preamble: preamble.clone(),
        ..Default::default()
    };
    let mut tape = Tape::new();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            tape.clear();
            let w = model.bind(&mut tape, true);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &seqs[i];
                let h = if !preamble.is_empty() && rng.random_bool(cfg.preamble_rate) {
                    preamble.len()
                } else {
                    0
                };
                let mut ids = preamble[..h].to_vec();
                ids.extend_from_slice(&s[..s.len() - 1]);
                let x = model.embed_on_tape(&mut tape, &w, &ids)?;
                let logits = model.logits_on_tape(&mut tape, &w, x)?;
                let logits = tape.slice_rows(logits, h, ids.len())?;
                let lp = tape.log_softmax(logits)?;
                let gold = tape.pick_per_row(lp, &s[1..])?;
                let nll = tape.mean(gold)?;
                losses.push(tape.neg(nll)?);
            }
            let stacked = tape.stack(&losses)?;
            let loss = tape.mean(stacked)?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Divergence(format!(
                    "pretraining loss {lv} at epoch {epoch}, step {step}"
                )));
            }
            if step == 0 {
                trace.initial_loss = lv;
            }
            epoch_loss += lv * batch.len() as f64;

            let mut grads = tape.backward(loss)?;
            let named = w.named();
            let mut gvecs: Vec<Vec<f64>> = named
                .iter()
                .map(|(_, v)| grads.take(**v).map(Tensor::into_data).unwrap_or_default())
                .collect();
            let mut gslices: Vec<&mut [f64]> = gvecs.iter_mut().map(|g| g.as_mut_slice()).collect();
            clip_global_norm(&mut gslices, cfg.clip_norm);
            let lr = warmup_cosine(step, cfg.lr, cfg.warmup_steps, total_steps);
            let mut params: Vec<&mut [f64]> = model
                .weights
                .all_mut()
                .into_iter()
                .map(|t| t.data_mut())
                .collect();
            let grefs: Vec<&[f64]> = gvecs.iter().map(|g| g.as_slice()).collect();
            opt.step(&mut params, &grefs, lr);
            step += 1;
        }
        let mean = epoch_loss / seqs.len() as f64;
        debug!("pretrain epoch {epoch}: loss {mean:.5}");
        trace.epoch_losses.push(mean);
    }
    info!(
        "pretrained victim: loss {:.4} -> {:.4} over {} epochs",
        trace.initial_loss,
        trace.epoch_losses.last().copied().unwrap_or(f64::NAN),
        cfg.epochs
    );
    Ok((model.freeze(), trace))
}
