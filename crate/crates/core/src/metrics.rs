//! Extraction rates, perplexity and first-token accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::autodiff::Tensor;
use crate::corpus::Dataset;
use crate::decoding::{decode, stream_rng, DecodeConfig};
use crate::error::{Error, Result};
use crate::losses::MIN_PROB;
use crate::model::VictimModel;

/// Match lengths reported everywhere.
pub const ER_KS: [usize; 6] = [5, 10, 25, 30, 40, 50];

/// Number of leading positions on which `generated` and `gold` agree.
pub fn match_len(generated: &[usize], gold: &[usize]) -> usize {
    generated
        .iter()
        .zip(gold)
        .take_while(|(a, b)| a == b)
        .count()
}

/// Percentage of pairs whose first `k` generated tokens equal the gold ones.
/// A sequence shorter than `k` never matches.
pub fn exact_extraction_rate<G: AsRef<[usize]>, S: AsRef<[usize]>>(
    pairs: &[(G, S)],
    k: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("extraction pairs".into()));
    }
    let hits = pairs
        .iter()
        .filter(|(g, s)| {
            let (g, s) = (g.as_ref(), s.as_ref());
            g.len() >= k && s.len() >= k && g[..k] == s[..k]
        })
        .count();
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub id: u64,
    pub generated: Vec<usize>,
    pub gold: Vec<usize>,
    pub match_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub method: String,
    pub fingerprint: String,
    /// `k → ER_k` in percent.
    pub er: BTreeMap<usize, f64>,
    pub pairs: Vec<PairResult>,
}

impl ExtractionReport {
    pub fn new(method: &str, fingerprint: &str, pairs: Vec<PairResult>) -> Result<Self> {
        Self::with_ks(method, fingerprint, pairs, &[])
    }

    /// Also scores the given `ks` on top of the standard ones.
    pub fn with_ks(
        method: &str,
        fingerprint: &str,
        pairs: Vec<PairResult>,
        ks: &[usize],
    ) -> Result<Self> {
        let view: Vec<(&[usize], &[usize])> = pairs
            .iter()
            .map(|p| (p.generated.as_slice(), p.gold.as_slice()))
            .collect();
        let mut er = BTreeMap::new();
        for &k in ER_KS.iter().chain(ks) {
            er.insert(k, exact_extraction_rate(&view, k)?);
        }
        Ok(ExtractionReport {
            method: method.to_string(),
            fingerprint: fingerprint.to_string(),
            er,
            pairs,
        })
    }

    pub fn rate(&self, k: usize) -> f64 {
        self.er.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// `ER_k` non-increasing in `k`.
    pub fn is_monotone(&self) -> bool {
        self.er
            .values()
            .zip(self.er.values().skip(1))
            .all(|(a, b)| a >= b)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `method,ER_5,...` table, one row per report.
pub fn reports_csv(reports: &[ExtractionReport], ks: &[usize]) -> String {
    let mut out = String::from("method");
    for k in ks {
        let _ = write!(out, ",ER_{k}");
    }
    out.push('\n');
    for r in reports {
        out.push_str(&csv_field(&r.method));
        for &k in ks {
            let _ = write!(out, ",{:.2}", r.rate(k));
        }
        out.push('\n');
    }
    out
}

/// Quotes a CSV field when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Decodes a suffix for every pair; sampling streams are keyed by pair id.
pub fn run_extraction(
    model: &VictimModel,
    prompt: Option<&Tensor>,
    data: &Dataset,
    cfg: &DecodeConfig,
) -> Result<Vec<PairResult>> {
    data.pairs
        .iter()
        .map(|p| {
            let c = decode(
                model,
                prompt,
                &p.prefix,
                cfg,
                &mut stream_rng(cfg.seed, p.id),
            )?;
            Ok(PairResult {
                id: p.id,
                match_len: match_len(&c.tokens, &p.suffix),
                generated: c.tokens,
                gold: p.suffix.clone(),
            })
        })
        .collect()
}

/// `exp` of the mean clamped suffix NLL over all pairs, conditioned on
/// `[prompt ‖ prefix]`.
pub fn perplexity(model: &VictimModel, data: &Dataset, prompt: Option<&Tensor>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("perplexity dataset".into()));
    }
    let floor = MIN_PROB.ln();
    let (mut nll, mut n) = (0.0, 0usize);
    for p in &data.pairs {
        for lp in model.forward_with_soft_prompt(prompt, &p.prefix, &p.suffix)? {
            nll -= lp.max(floor);
            n += 1;
        }
    }
    Ok((nll / n as f64).exp())
}

/// Fraction of probes whose greedy next token after `[prompt ‖ prefix]` is
/// the target.
pub fn first_token_hit_rate(
    model: &VictimModel,
    prompt: Option<&Tensor>,
    probes: &[(Vec<usize>, usize)],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Empty("probes".into()));
    }
    let mut hits = 0;
    for (prefix, target) in probes {
        let st = model.start(prompt, prefix)?;
        if kernels::argmax(st.logits()) == *target {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Hit rate after minus hit rate before, in `[-1, 1]`.
pub fn delta_accuracy(
    before: &VictimModel,
    after: &VictimModel,
    prompt: Option<&Tensor>,
    probes: &[(Vec<usize>, usize)],
) -> Result<f64> {
    Ok(
        first_token_hit_rate(after, prompt, probes)?
            - first_token_hit_rate(before, prompt, probes)?,
    )
}
