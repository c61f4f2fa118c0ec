//! Soft prompt training against a frozen victim.

use std::io::Write as _;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::losses::{CommonSet, ErrorProneSet, LossStack, TokenLossVector};
use crate::model::VictimModel;
use crate::optim::{clip_global_norm, warmup_cosine, AdamW, AdamWConfig};

const PROMPT_FORMAT: &str = "cosped-soft-prompt";
const PROMPT_VERSION: u32 = 1;

/// The trainable `K × d` prompt matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt {
    pub z: Tensor,
    pub seed: u64,
}

impl SoftPrompt {
    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }
}

/// Gaussian init matching the mean/std of the victim's embedding table.
pub fn init_soft_prompt(model: &VictimModel, k: usize, seed: u64) -> Result<SoftPrompt> {
    if k == 0 {
        return Err(Error::Config("soft prompt length must be >= 1".into()));
    }
    let e = model.weights.token_embedding.data();
    let n = e.len() as f64;
    let mean = e.iter().sum::<f64>() / n;
    let std = (e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let dist = Normal::new(mean, std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("embedding statistics: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.model_dim();
    let data = (0..k * d).map(|_| dist.sample(&mut rng)).collect();
    Ok(SoftPrompt {
        z: Tensor::matrix(k, d, data)?,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub prompt_len: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub loss: LossStack,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            prompt_len: 16,
            batch_size: 12,
            lr: 1e-3,
            warmup_steps: 50,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            seed: 42,
            loss: LossStack::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "prompt_len and batch_size must be >= 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid lr {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(Error::Config("invalid optimizer moments".into()));
        }
        if self.clip_norm <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "clip_norm must be > 0, weight_decay >= 0".into(),
            ));
        }
        self.loss.validate()
    }
}

/// One line of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub mle: f64,
    /// Mean `k_dy` over the epoch's sequences (dynamic stacks only).
    pub k_dy: Option<f64>,
    /// Size of the error-prone set used during the epoch.
    pub error_prone: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

impl TrainingTrace {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.epochs {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Fits `prompt` on `d_a` by minimizing the configured loss stack.
///
/// Only the prompt is a trainable leaf; the victim's weights enter the tape as
/// constants. On a non-finite loss or activation the last finite prompt is returned and the
/// trace records the abort.
pub fn train_soft_prompt(
    model: &VictimModel,
    prompt: SoftPrompt,
    d_a: &Dataset,
    cfg: &TrainConfig,
) -> Result<(SoftPrompt, TrainingTrace)> {
    cfg.validate()?;
    if !model.frozen {
        return Err(Error::Config(
            "the victim must be frozen before tuning".into(),
        ));
    }
    if d_a.is_empty() {
        return Err(Error::Empty("attack split".into()));
    }
    if prompt.dim() != model.model_dim() {
        return Err(Error::Shape {
            op: "train_soft_prompt",
            detail: format!(
                "prompt dim {} vs model dim {}",
                prompt.dim(),
                model.model_dim()
            ),
        });
    }
    for p in &d_a.pairs {
        model
            .config
            .check_fits(prompt.len(), p.prefix.len(), p.suffix.len())?;
    }

    let v = model.vocab_size();
    let common = CommonSet::from_counts(&d_a.token_counts(v));
    let mut eps = ErrorProneSet::new(v, cfg.loss.additive_threshold);
    let mut window = ErrorProneSet::new(v, cfg.loss.additive_threshold);

    let mut z = prompt.z.clone();
    let mut opt = AdamW::new(
        AdamWConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        },
        &[z.len()],
    );
    let steps_per_epoch = d_a.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..d_a.len()).collect();
    let mut trace = TrainingTrace::default();
    let mut tape = Tape::new();
    let mut step = 0;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut mle_sum, mut k_sum, mut k_n) = (0.0, 0.0, 0.0, 0usize);
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            tape.clear();
            let w = model.bind(&mut tape, false);
            let zv = tape.leaf(z.clone(), true);
            let mut forward = || -> Result<(Var, f64)> {
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    let pair = &d_a.pairs[i];
                    let s =
                        model.suffix_scores(&mut tape, &w, Some(zv), &pair.prefix, &pair.suffix)?;
                    window.observe(&pair.suffix, &s.predicted);
                    let tlv = TokenLossVector::new(
                        &mut tape,
                        s.gold_log_probs,
                        pair.suffix.clone(),
                        s.predicted,
                    )?;
                    let c = cfg.loss.combine(&mut tape, &tlv, &eps, &common)?;
                    mle_sum += c.mle;
                    if let Some(k) = c.k_dy {
                        k_sum += k as f64;
                        k_n += 1;
                    }
                    losses.push(c.total);
                }
                let stacked = tape.stack(&losses)?;
                let loss = tape.mean(stacked)?;
                Ok((loss, tape.value(loss).item()?))
            };
            let (loss, lv) = match forward() {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => (zv, f64::NAN),
                Err(e) => return Err(e),
            };
            if !lv.is_finite() {
                let msg = format!("non-finite loss at epoch {epoch}, step {step}");
                warn!("{msg}; keeping last finite prompt");
                trace.aborted = Some(msg);
                break 'epochs;
            }
            loss_sum += lv * batch.len() as f64;

            let mut grads = tape.backward(loss)?;
            let mut g = grads
                .take(zv)
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; z.len()]);
            if g.iter().any(|x| !x.is_finite()) {
                let msg = format!("non-finite gradient at epoch {epoch}, step {step}");
                warn!("{msg}; keeping last finite prompt");
                trace.aborted = Some(msg);
                break 'epochs;
            }
            clip_global_norm(&mut [g.as_mut_slice()], cfg.clip_norm);
            lr = warmup_cosine(step, cfg.lr, cfg.warmup_steps, total);
            let before = z.clone();
            opt.step(&mut [z.data_mut()], &[g.as_slice()], lr);
            if !z.is_finite() {
                z = before;
                let msg = format!("non-finite prompt after epoch {epoch}, step {step}");
                warn!("{msg}; keeping last finite prompt");
                trace.aborted = Some(msg);
                break 'epochs;
            }
            step += 1;
        }
        let n = d_a.len() as f64;
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / n,
            mle: mle_sum / n,
            k_dy: (k_n > 0).then(|| k_sum / k_n as f64),
            error_prone: eps.active.len(),
            lr,
        };
        debug!(
            "tune epoch {epoch}: loss {:.5} mle {:.5}",
            rec.loss, rec.mle
        );
        trace.epochs.push(rec);
        window.refresh();
        eps.active = window.active.clone();
    }
    if let (Some(first), Some(last)) = (trace.epochs.first(), trace.epochs.last()) {
        info!(
            "tuned {} prompt: mle {:.4} -> {:.4}",
            cfg.loss, first.mle, last.mle
        );
    }
    Ok((
        SoftPrompt {
            z,
            seed: prompt.seed,
        },
        trace,
    ))
}

#[derive(Serialize, Deserialize)]
struct PromptHeader {
    k: usize,
    d: usize,
    seed: u64,
    loss: LossStack,
}

/// Writes the prompt with the stack that produced it.
pub fn save_soft_prompt(path: &Path, prompt: &SoftPrompt, loss: &LossStack) -> Result<()> {
    let h = PromptHeader {
        k: prompt.len(),
        d: prompt.dim(),
        seed: prompt.seed,
        loss: loss.clone(),
    };
    artifact::write(path, PROMPT_FORMAT, PROMPT_VERSION, &h, &[prompt.z.data()])
}

/// Reads a prompt; `model_dim`, when given, must match its width.
pub fn load_soft_prompt(path: &Path, model_dim: Option<usize>) -> Result<(SoftPrompt, LossStack)> {
    let (h, mut arrays): (PromptHeader, _) = artifact::read(path, PROMPT_FORMAT, PROMPT_VERSION)?;
    let corrupt = |detail: String| Error::Corrupt {
        path: path.display().to_string(),
        detail,
    };
    if arrays.len() != 1 {
        return Err(corrupt(format!("expected 1 array, found {}", arrays.len())));
    }
    let data = arrays.pop().unwrap_or_default();
    if data.len() != h.k * h.d {
        return Err(corrupt(format!(
            "{} values for a {}x{} prompt",
            data.len(),
            h.k,
            h.d
        )));
    }
    if let Some(d) = model_dim {
        if d != h.d {
            return Err(Error::Shape {
                op: "load_soft_prompt",
                detail: format!("prompt dim {} vs model dim {d}", h.d),
            });
        }
    }
    Ok((
        SoftPrompt {
            z: Tensor::matrix(h.k, h.d, data)?,
            seed: h.seed,
        },
        h.loss,
    ))
}
