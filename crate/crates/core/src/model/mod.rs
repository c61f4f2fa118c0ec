//! The victim: a small pre-LN decoder-only transformer over raw token ids.
//!
//! Inputs enter at the embedding level, which is where a soft prompt is
//! spliced in: prompt rows take positions `0..K`, followed by the prefix and
//! the teacher-forced suffix.

mod checkpoint;
mod inference;
mod pretrain;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use inference::DecodeState;
pub use pretrain::{pretrain_victim, PretrainConfig, PretrainTrace};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            model_dim: 64,
            layers: 2,
            heads: 2,
            ff_dim: 256,
            max_context: 256,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            return bad("vocab_size, model_dim and ff_dim must be positive".into());
        }
        if self.layers == 0 || self.max_context == 0 {
            return bad("layers and max_context must be positive".into());
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        Ok(())
    }

    /// Checks `max_context ≥ K + k_P + k_S`.
    pub fn check_fits(
        &self,
        prompt_len: usize,
        prefix_len: usize,
        suffix_len: usize,
    ) -> Result<()> {
        let need = prompt_len + prefix_len + suffix_len;
        if need > self.max_context {
            return Err(Error::ContextOverflow {
                len: need,
                max: self.max_context,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub query: T,
    pub key: T,
    pub value: T,
    pub attn_out: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub ff_in: T,
    pub ff_in_bias: T,
    /// Feed-forward output projection, `ff_dim × model_dim`.
    pub ff_out: T,
    pub ff_out_bias: T,
}

/// All victim parameters, generic over storage so the same layout serves
/// owned tensors and tape handles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub layers: Vec<LayerWeights<T>>,
    pub final_gain: T,
    pub final_bias: T,
    pub unembed: T,
}

impl<T> LayerWeights<T> {
    fn fields(&self) -> [(&'static str, &T); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
            ("attn_out", &self.attn_out),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("ff_in", &self.ff_in),
            ("ff_in_bias", &self.ff_in_bias),
            ("ff_out", &self.ff_out),
            ("ff_out_bias", &self.ff_out_bias),
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.attn_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ff_in,
            &mut self.ff_in_bias,
            &mut self.ff_out,
            &mut self.ff_out_bias,
        ]
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerWeights<U> {
        LayerWeights {
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            query: f(&self.query),
            key: f(&self.key),
            value: f(&self.value),
            attn_out: f(&self.attn_out),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
            ff_in: f(&self.ff_in),
            ff_in_bias: f(&self.ff_in_bias),
            ff_out: f(&self.ff_out),
            ff_out_bias: f(&self.ff_out_bias),
        }
    }
}

impl<T> Weights<T> {
    /// Canonical `(name, value)` order used for digests, checkpoints and
    /// optimizer state.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(
                l.fields()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    pub fn all_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out.push(&mut self.unembed);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        Weights {
            token_embedding: f(&self.token_embedding),
            position_embedding: f(&self.position_embedding),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            final_gain: f(&self.final_gain),
            final_bias: f(&self.final_bias),
            unembed: f(&self.unembed),
        }
    }
}

/// Selects one weight matrix of the victim.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixId {
    FfOut { layer: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct VictimModel {
    pub config: ModelConfig,
    pub weights: Weights<Tensor>,
    pub frozen: bool,
}

/// Gold-token log-probabilities of a teacher-forced suffix.
#[derive(Debug, Clone)]
pub struct SuffixScores {
    /// Length-`k_S` vector: `log P(t_i | Z, P, t_<i)`.
    pub gold_log_probs: Var,
    /// Argmax token at each suffix position.
    pub predicted: Vec<usize>,
}

impl VictimModel {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, f, c) = (
            config.vocab_size,
            config.model_dim,
            config.ff_dim,
            config.max_context,
        );
        let resid_std = INIT_STD / (2.0 * config.layers as f64).sqrt();
        let mut normal = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| dist.sample(&mut rng)).collect(),
            )
            .expect("consistent shape")
        };
        let token_embedding = normal(&[v, d], INIT_STD);
        let position_embedding = normal(&[c, d], INIT_STD);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerWeights {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                query: normal(&[d, d], INIT_STD),
                key: normal(&[d, d], INIT_STD),
                value: normal(&[d, d], INIT_STD),
                attn_out: normal(&[d, d], resid_std),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                ff_in: normal(&[d, f], INIT_STD),
                ff_in_bias: Tensor::zeros(&[f]),
                ff_out: normal(&[f, d], resid_std),
                ff_out_bias: Tensor::zeros(&[d]),
            });
        }
        let unembed = normal(&[d, v], INIT_STD);
        Ok(VictimModel {
            config,
            weights: Weights {
                token_embedding,
                position_embedding,
                layers,
                final_gain: Tensor::full(&[d], 1.0),
                final_bias: Tensor::zeros(&[d]),
                unembed,
            },
            frozen: false,
        })
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    /// SHA-256 over every weight in canonical order (little-endian bytes).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.weights.named() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn matrix(&self, id: MatrixId) -> Result<&Tensor> {
        match id {
            MatrixId::FfOut { layer } => {
                self.weights
                    .layers
                    .get(layer)
                    .map(|l| &l.ff_out)
                    .ok_or(Error::IndexOutOfRange {
                        op: "matrix",
                        index: layer,
                        bound: self.config.layers,
                    })
            }
        }
    }

    pub fn matrix_mut(&mut self, id: MatrixId) -> Result<&mut Tensor> {
        let bound = self.config.layers;
        match id {
            MatrixId::FfOut { layer } => self
                .weights
                .layers
                .get_mut(layer)
                .map(|l| &mut l.ff_out)
                .ok_or(Error::IndexOutOfRange {
                    op: "matrix",
                    index: layer,
                    bound,
                }),
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange {
                op: "embed",
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Rows of the token embedding table, in order (`len × d`).
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        self.check_ids(tokens)?;
        if tokens.is_empty() {
            return Tensor::matrix(0, self.config.model_dim, vec![]);
        }
        self.weights.token_embedding.select_rows(tokens)
    }

    /// Registers every weight as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Weights<Var> {
        self.weights.map(|t| tape.leaf(t.clone(), trainable))
    }

    pub fn embed_on_tape(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        tokens: &[usize],
    ) -> Result<Var> {
        self.check_ids(tokens)?;
        tape.gather_rows(w.token_embedding, tokens)
    }

    /// Final-layer-normed hidden states for `T × d` input embeddings.
    pub fn hidden_on_tape(&self, tape: &mut Tape, w: &Weights<Var>, x: Var) -> Result<Var> {
        let mut h = self.positioned(tape, w, x)?;
        for l in &w.layers {
            h = self.block(tape, l, h)?.0;
        }
        tape.layer_norm(h, w.final_gain, w.final_bias)
    }

    /// Post-activation feed-forward inputs (`T × ff_dim`) of `layer`: the
    /// rows that multiply that layer's output projection.
    pub fn ff_activations_on_tape(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        x: Var,
        layer: usize,
    ) -> Result<Var> {
        if layer >= w.layers.len() {
            return Err(Error::IndexOutOfRange {
                op: "ff_activations",
                index: layer,
                bound: w.layers.len(),
            });
        }
        let mut h = self.positioned(tape, w, x)?;
        for l in &w.layers[..layer] {
            h = self.block(tape, l, h)?.0;
        }
        Ok(self.block(tape, &w.layers[layer], h)?.1)
    }

    /// Runs `T × d` embeddings through block `layer` and returns the residual
    /// stream after it together with its feed-forward activations. Adding
    /// `Δ` to that block's output projection moves the residual by exactly
    /// `act · Δ`; [`VictimModel::logits_from_layer`] resumes from there.
    pub fn split_at_ff_out(&self, embeddings: &Tensor, layer: usize) -> Result<(Tensor, Tensor)> {
        if layer >= self.config.layers {
            return Err(Error::IndexOutOfRange {
                op: "split_at_ff_out",
                index: layer,
                bound: self.config.layers,
            });
        }
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let x = tape.constant(embeddings.clone());
        let mut h = self.positioned(&mut tape, &w, x)?;
        for l in &w.layers[..layer] {
            h = self.block(&mut tape, l, h)?.0;
        }
        let (h, act) = self.block(&mut tape, &w.layers[layer], h)?;
        Ok((tape.value(h).clone(), tape.value(act).clone()))
    }

    /// Logits for a residual stream entering block `start`; with `start`
    /// equal to the layer count only the final norm and unembedding run.
    pub fn logits_from_layer(&self, h: &Tensor, start: usize) -> Result<Tensor> {
        if start > self.config.layers {
            return Err(Error::IndexOutOfRange {
                op: "logits_from_layer",
                index: start,
                bound: self.config.layers + 1,
            });
        }
        let mut tape = Tape::new();
        let mut h = tape.constant(h.clone());
        let w = self.weights.map(|t| tape.constant(t.clone()));
        for l in &w.layers[start..] {
            h = self.block(&mut tape, l, h)?.0;
        }
        let h = tape.layer_norm(h, w.final_gain, w.final_bias)?;
        let out = tape.matmul(h, w.unembed)?;
        Ok(tape.value(out).clone())
    }

    fn positioned(&self, tape: &mut Tape, w: &Weights<Var>, x: Var) -> Result<Var> {
        let t = tape.value(x).rows();
        if t > self.config.max_context {
            return Err(Error::ContextOverflow {
                len: t,
                max: self.config.max_context,
            });
        }
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.gather_rows(w.position_embedding, &positions)?;
        tape.add(x, pos)
    }

    /// One pre-LN block; returns the new residual stream and the
    /// feed-forward activations.
    fn block(&self, tape: &mut Tape, l: &LayerWeights<Var>, h: Var) -> Result<(Var, Var)> {
        let a = tape.layer_norm(h, l.ln1_gain, l.ln1_bias)?;
        let q = tape.matmul(a, l.query)?;
        let k = tape.matmul(a, l.key)?;
        let v = tape.matmul(a, l.value)?;
        let att = tape.causal_attention(q, k, v, self.config.heads)?;
        let o = tape.matmul(att, l.attn_out)?;
        let h = tape.add(h, o)?;
        let b = tape.layer_norm(h, l.ln2_gain, l.ln2_bias)?;
        let f = tape.matmul(b, l.ff_in)?;
        let f = tape.add_row(f, l.ff_in_bias)?;
        let act = tape.gelu(f)?;
        let f = tape.matmul(act, l.ff_out)?;
        let f = tape.add_row(f, l.ff_out_bias)?;
        Ok((tape.add(h, f)?, act))
    }

    pub fn logits_on_tape(&self, tape: &mut Tape, w: &Weights<Var>, x: Var) -> Result<Var> {
        let h = self.hidden_on_tape(tape, w, x)?;
        tape.matmul(h, w.unembed)
    }

    /// Logits (`len × V`) for a block of input embeddings.
    pub fn forward(&self, embeddings: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let x = tape.constant(embeddings.clone());
        let out = self.logits_on_tape(&mut tape, &w, x)?;
        Ok(tape.value(out).clone())
    }

    /// Teacher-forced next-token log-distributions (`k_S × V`) for the
    /// suffix positions.
    ///
    /// The input is `[prompt ‖ embed(prefix) ‖ embed(suffix[..k_S-1])]` and
    /// the prediction for suffix token `i` is read at row `K + k_P - 1 + i`.
    pub fn suffix_log_probs(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        prompt: Option<Var>,
        prefix: &[usize],
        suffix: &[usize],
    ) -> Result<Var> {
        let k = prompt.map_or(0, |p| tape.value(p).rows());
        if let Some(p) = prompt {
            if tape.value(p).cols() != self.config.model_dim {
                return Err(Error::Shape {
                    op: "suffix_scores",
                    detail: format!(
                        "prompt has {} columns, model_dim is {}",
                        tape.value(p).cols(),
                        self.config.model_dim
                    ),
                });
            }
        }
        if suffix.is_empty() {
            return Err(Error::Empty("suffix".into()));
        }
        if k + prefix.len() == 0 {
            return Err(Error::Empty("prompt and prefix are both empty".into()));
        }
        self.config.check_fits(k, prefix.len(), suffix.len() - 1)?;
        let mut ids = prefix.to_vec();
        ids.extend_from_slice(&suffix[..suffix.len() - 1]);
        let emb = self.embed_on_tape(tape, w, &ids)?;
        let x = match prompt {
            Some(p) if k > 0 => tape.concat_rows(&[p, emb])?,
            _ => emb,
        };
        let h = self.hidden_on_tape(tape, w, x)?;
        let start = k + prefix.len() - 1;
        let hs = tape.slice_rows(h, start, start + suffix.len())?;
        let logits = tape.matmul(hs, w.unembed)?;
        tape.log_softmax(logits)
    }

    /// Teacher-forced suffix scoring with an optional soft prompt.
    pub fn suffix_scores(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        prompt: Option<Var>,
        prefix: &[usize],
        suffix: &[usize],
    ) -> Result<SuffixScores> {
        let logp = self.suffix_log_probs(tape, w, prompt, prefix, suffix)?;
        let predicted = (0..suffix.len())
            .map(|i| kernels::argmax(tape.value(logp).row(i)))
            .collect();
        let gold_log_probs = tape.pick_per_row(logp, suffix)?;
        Ok(SuffixScores {
            gold_log_probs,
            predicted,
        })
    }

    /// Per-position `log P(t_i | Z, P, t_<i)` for a frozen victim.
    pub fn forward_with_soft_prompt(
        &self,
        prompt: Option<&Tensor>,
        prefix: &[usize],
        suffix: &[usize],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let p = prompt.map(|z| tape.constant(z.clone()));
        let s = self.suffix_scores(&mut tape, &w, p, prefix, suffix)?;
        Ok(tape.value(s.gold_log_probs).data().to_vec())
    }
}
