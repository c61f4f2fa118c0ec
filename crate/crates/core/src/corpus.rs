//! Synthetic memorization corpus and its disjoint attacker/evaluation splits.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A memorized sequence split into a known prefix and a target suffix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequencePair {
    pub id: u64,
    pub prefix: Vec<usize>,
    pub suffix: Vec<usize>,
}

impl SequencePair {
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.prefix.clone();
        t.extend_from_slice(&self.suffix);
        t
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub pairs: Vec<SequencePair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Uniform,
    Templated,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_pairs: usize,
    pub prefix_len: usize,
    pub suffix_len: usize,
    pub vocab_size: usize,
    pub structure: Structure,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 42,
            n_pairs: 256,
            prefix_len: 50,
            suffix_len: 50,
            vocab_size: 256,
            structure: Structure::Templated,
        }
    }
}

/// Probability that generation emits a motif instead of a free token.
const MOTIF_RATE: f64 = 0.35;
const MOTIF_COUNT: usize = 24;
/// Required share of corpus mass held by the top-10% tokens in templated mode.
pub const TEMPLATED_TOP_DECILE_MASS: f64 = 0.40;
const MAX_ATTEMPTS: u64 = 16;

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs < 2 {
            return Err(Error::Config(format!(
                "n_pairs must be >= 2, got {}",
                self.n_pairs
            )));
        }
        if self.suffix_len == 0 {
            return Err(Error::Config("suffix_len must be positive".into()));
        }
        if self.vocab_size <= self.suffix_len {
            return Err(Error::Config(format!(
                "vocab_size {} must exceed suffix_len {}",
                self.vocab_size, self.suffix_len
            )));
        }
        if self.structure == Structure::Templated && self.vocab_size < 10 {
            return Err(Error::Config(
                "templated corpora need vocab_size >= 10".into(),
            ));
        }
        Ok(())
    }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Dataset> {
    cfg.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let seed = cfg
            .seed
            .wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let ds = generate_once(cfg, seed);
        if cfg.structure == Structure::Uniform
            || top_share(&ds, cfg.vocab_size, 0.1) >= TEMPLATED_TOP_DECILE_MASS
        {
            return Ok(ds);
        }
    }
    Err(Error::Config(
        "templated generation could not reach the top-decile mass gate".into(),
    ))
}

fn generate_once(cfg: &CorpusConfig, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = cfg.vocab_size;
    let len = cfg.prefix_len + cfg.suffix_len;

    let motifs: Vec<Vec<usize>> = match cfg.structure {
        Structure::Uniform => Vec::new(),
        Structure::Templated => {
            let mut ids: Vec<usize> = (0..v).collect();
            ids.shuffle(&mut rng);
            let common = &ids[..(v / 10).max(1)];
            (0..MOTIF_COUNT)
                .map(|_| {
                    let n = rng.random_range(2..=5);
                    (0..n)
                        .map(|_| common[rng.random_range(0..common.len())])
                        .collect()
                })
                .collect()
        }
    };

    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    while pairs.len() < cfg.n_pairs {
        let mut toks = Vec::with_capacity(len);
        while toks.len() < len {
            if !motifs.is_empty() && rng.random_bool(MOTIF_RATE) {
                let m = &motifs[rng.random_range(0..motifs.len())];
                toks.extend(m.iter().take(len - toks.len()));
            } else {
                toks.push(rng.random_range(0..v));
            }
        }
        let prefix = toks[..cfg.prefix_len].to_vec();
        if !seen.insert(prefix.clone()) {
            continue;
        }
        pairs.push(SequencePair {
            id: pairs.len() as u64,
            prefix,
            suffix: toks[cfg.prefix_len..].to_vec(),
        });
    }
    Dataset { pairs }
}

/// Share of all tokens covered by the most frequent `fraction·V` token ids.
pub fn top_share(ds: &Dataset, vocab_size: usize, fraction: f64) -> f64 {
    let mut counts = ds.token_counts(vocab_size);
    let total: u64 = counts.iter().sum();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let k = (fraction * vocab_size as f64).floor() as usize;
    counts[..k].iter().sum::<u64>() as f64 / total.max(1) as f64
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Token occurrence counts over prefixes and suffixes.
    pub fn token_counts(&self, vocab_size: usize) -> Vec<u64> {
        let mut counts = vec![0u64; vocab_size];
        for p in &self.pairs {
            for &t in p.prefix.iter().chain(&p.suffix) {
                if t < vocab_size {
                    counts[t] += 1;
                }
            }
        }
        counts
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for p in &self.pairs {
            serde_json::to_writer(&mut f, p)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = BufReader::new(fs::File::open(path)?);
        let mut pairs = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            pairs.push(serde_json::from_str(&line)?);
        }
        Ok(Dataset { pairs })
    }
}

/// The full corpus and its attacker (`D_a`) and evaluation (`D_p`) splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplits {
    pub all: Dataset,
    pub attack: Dataset,
    pub eval: Dataset,
}

/// Seeded disjoint split; `ratio` is the attacker share. Each side keeps the
/// corpus order.
pub fn split(d: &Dataset, ratio: f64, seed: u64) -> Result<DatasetSplits> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratio must be in (0, 1), got {ratio}"
        )));
    }
    let n = d.len();
    let n_attack = (ratio * n as f64).round() as usize;
    if n_attack == 0 || n_attack == n {
        return Err(Error::Empty(format!(
            "split of {n} pairs at ratio {ratio} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_attack = vec![false; n];
    for &i in &order[..n_attack] {
        in_attack[i] = true;
    }
    let (mut attack, mut eval) = (Vec::new(), Vec::new());
    for (i, p) in d.pairs.iter().enumerate() {
        if in_attack[i] {
            attack.push(p.clone());
        } else {
            eval.push(p.clone());
        }
    }
    Ok(DatasetSplits {
        all: d.clone(),
        attack: Dataset { pairs: attack },
        eval: Dataset { pairs: eval },
    })
}
