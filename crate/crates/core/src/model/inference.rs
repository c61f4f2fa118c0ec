//! Tape-free incremental forward pass with a key/value cache.

use super::VictimModel;
use crate::autodiff::kernels::{self, gemm, gemm_strided};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Cached attention state after consuming some input rows.
#[derive(Clone, Debug)]
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    logits: Vec<f64>,
}

impl DecodeState {
    /// Number of positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Next-token logits after the last consumed position.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let mut row = self.logits.clone();
        kernels::log_softmax_row(&mut row);
        row
    }
}

fn layer_norm_rows(x: &[f64], d: usize, gain: &Tensor, bias: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xi, oi) in x.chunks(d).zip(out.chunks_mut(d)) {
        kernels::layer_norm_row(xi, gain.data(), bias.data(), oi);
    }
    out
}

fn project(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.rows(), w.cols());
    let mut out = vec![0.0; rows * n];
    gemm(rows, k, n, x, k, 1, w.data(), n, 1, &mut out, 0.0);
    out
}

impl VictimModel {
    pub fn empty_state(&self) -> DecodeState {
        DecodeState {
            keys: vec![Vec::new(); self.config.layers],
            values: vec![Vec::new(); self.config.layers],
            len: 0,
            logits: Vec::new(),
        }
    }

    /// State after consuming `[prompt ‖ embed(prefix)]`.
    pub fn start(&self, prompt: Option<&Tensor>, prefix: &[usize]) -> Result<DecodeState> {
        let emb = self.embed(prefix)?;
        let x = match prompt {
            Some(z) if z.rows() > 0 => {
                if z.cols() != self.config.model_dim {
                    return Err(Error::Shape {
                        op: "start",
                        detail: format!("prompt has {} columns", z.cols()),
                    });
                }
                Tensor::concat_rows(&[z, &emb])?
            }
            _ => emb,
        };
        if x.rows() == 0 || x.is_empty() {
            return Err(Error::Empty("decoding needs a prompt or a prefix".into()));
        }
        let mut st = self.empty_state();
        self.extend(&mut st, &x)?;
        Ok(st)
    }

    pub fn step(&self, state: &mut DecodeState, token: usize) -> Result<()> {
        let x = self.embed(&[token])?;
        self.extend(state, &x)
    }

    /// Feeds `n × d` embedding rows at positions `len..len+n`.
    pub fn extend(&self, state: &mut DecodeState, embeddings: &Tensor) -> Result<()> {
        let cfg = &self.config;
        let d = cfg.model_dim;
        let n = embeddings.rows();
        if n == 0 {
            return Ok(());
        }
        if embeddings.cols() != d {
            return Err(Error::Shape {
                op: "extend",
                detail: format!("{} columns, model_dim {d}", embeddings.cols()),
            });
        }
        let p0 = state.len;
        if p0 + n > cfg.max_context {
            return Err(Error::ContextOverflow {
                len: p0 + n,
                max: cfg.max_context,
            });
        }
        let total = p0 + n;
        let heads = cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let w = &self.weights;

        let mut x = embeddings.data().to_vec();
        let pos = w.position_embedding.data();
        for (i, v) in x.iter_mut().enumerate() {
            *v += pos[p0 * d + i];
        }

        for (li, l) in w.layers.iter().enumerate() {
            let a = layer_norm_rows(&x, d, &l.ln1_gain, &l.ln1_bias);
            let q = project(&a, n, &l.query);
            state.keys[li].extend(project(&a, n, &l.key));
            state.values[li].extend(project(&a, n, &l.value));
            let (kc, vc) = (&state.keys[li], &state.values[li]);
            let mut att = vec![0.0; n * d];
            let mut scores = vec![0.0; n * total];
            for h in 0..heads {
                gemm(
                    n,
                    dh,
                    total,
                    &q[h * dh..],
                    d,
                    1,
                    &kc[h * dh..],
                    1,
                    d,
                    &mut scores,
                    0.0,
                );
                for i in 0..n {
                    let visible = p0 + i + 1;
                    let row = &mut scores[i * total..(i + 1) * total];
                    for s in row[..visible].iter_mut() {
                        *s *= scale;
                    }
                    kernels::softmax_row(&mut row[..visible]);
                    for s in row[visible..].iter_mut() {
                        *s = 0.0;
                    }
                }
                gemm_strided(
                    n,
                    total,
                    dh,
                    &scores,
                    total,
                    1,
                    &vc[h * dh..],
                    d,
                    1,
                    &mut att[h * dh..],
                    d,
                    0.0,
                );
            }
            let o = project(&att, n, &l.attn_out);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            let b = layer_norm_rows(&x, d, &l.ln2_gain, &l.ln2_bias);
            let mut f = project(&b, n, &l.ff_in);
            let fb = l.ff_in_bias.data();
            let fd = fb.len();
            for (i, v) in f.iter_mut().enumerate() {
                *v = kernels::gelu(*v + fb[i % fd]);
            }
            let f = project(&f, n, &l.ff_out);
            let ob = l.ff_out_bias.data();
            for (i, v) in x.iter_mut().enumerate() {
                *v += f[i] + ob[i % d];
            }
        }

        let last = &x[(n - 1) * d..];
        let mut hf = vec![0.0; d];
        kernels::layer_norm_row(last, w.final_gain.data(), w.final_bias.data(), &mut hf);
        state.logits = project(&hf, 1, &w.unembed);
        state.len = total;
        if !state.logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "extend" });
        }
        Ok(())
    }
}
