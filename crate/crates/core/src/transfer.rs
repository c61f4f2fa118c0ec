//! Moving a tuned prompt to a model with a different embedding width.
//!
//! Two routes: snap every prompt row to its nearest token embedding and
//! re-embed those ids in the target, or push the rows through a linear map
//! fitted between the two embedding tables.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::Dataset;
use crate::decoding::DecodeConfig;
use crate::error::{shape_err, Error, Result};
use crate::linalg::{condition_number, least_squares};
use crate::metrics::{self, csv_field, ExtractionReport};
use crate::model::VictimModel;

/// Condition numbers above this get a warning when fitting a map.
pub const ILL_CONDITIONED: f64 = 1e8;

/// Nearest embedding row (Euclidean) for every prompt row; ties go to the
/// lowest id.
pub fn project_to_hard_tokens(z: &Tensor, table: &Tensor) -> Result<Vec<usize>> {
    if z.cols() != table.cols() {
        return Err(shape_err(
            "project_to_hard_tokens",
            format!("prompt dim {} vs embedding dim {}", z.cols(), table.cols()),
        ));
    }
    if table.rows() == 0 {
        return Err(Error::Empty("embedding table".into()));
    }
    Ok((0..z.rows())
        .map(|i| {
            let row = z.row(i);
            let mut best = (f64::INFINITY, 0);
            for t in 0..table.rows() {
                let d: f64 = row
                    .iter()
                    .zip(table.row(t))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, t);
                }
            }
            best.1
        })
        .collect())
}

/// `x ↦ M x` from the source embedding space to the target's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMap {
    pub d_src: usize,
    pub d_tgt: usize,
    /// `d_tgt × d_src`.
    pub matrix: Tensor,
    pub method: String,
    /// Of the source design matrix; `1` for constructed maps.
    pub condition_number: f64,
}

impl ProjectionMap {
    pub fn identity(d: usize) -> Self {
        ProjectionMap {
            d_src: d,
            d_tgt: d,
            matrix: Tensor::identity(d),
            method: "identity".into(),
            condition_number: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrix.shape() != [self.d_tgt, self.d_src] {
            return Err(shape_err(
                "ProjectionMap",
                format!(
                    "matrix {:?} for {} -> {}",
                    self.matrix.shape(),
                    self.d_src,
                    self.d_tgt
                ),
            ));
        }
        if !self.matrix.is_finite() {
            return Err(Error::NonFinite {
                op: "ProjectionMap",
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: ProjectionMap = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }
}

/// Least-squares map with `tgt[id] ≈ M · src[id]` over the given ids.
pub fn fit_projection(src: &Tensor, tgt: &Tensor, ids: &[usize]) -> Result<ProjectionMap> {
    if ids.is_empty() {
        return Err(Error::Empty("shared token ids".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= src.rows() || i >= tgt.rows()) {
        return Err(Error::Config(format!(
            "token id {bad} missing from one of the tables"
        )));
    }
    let a = src.select_rows(ids)?;
    let b = tgt.select_rows(ids)?;
    let cond = condition_number(&a)?;
    if cond > ILL_CONDITIONED {
        warn!("projection fit is ill-conditioned (condition number {cond:.3e})");
    }
    let x = least_squares(&a, &b)?;
    Ok(ProjectionMap {
        d_src: src.cols(),
        d_tgt: tgt.cols(),
        matrix: x.transpose(),
        method: "least_squares".into(),
        condition_number: cond,
    })
}

/// Fits over every id both vocabularies share.
pub fn fit_between(source: &VictimModel, target: &VictimModel) -> Result<ProjectionMap> {
    let shared: Vec<usize> = (0..source.vocab_size().min(target.vocab_size())).collect();
    fit_projection(
        &source.weights.token_embedding,
        &target.weights.token_embedding,
        &shared,
    )
}

/// Every row of `z` through the map: `Z Mᵀ`.
pub fn scale_soft_prompt(z: &Tensor, map: &ProjectionMap) -> Result<Tensor> {
    map.validate()?;
    if z.cols() != map.d_src {
        return Err(shape_err(
            "scale_soft_prompt",
            format!("prompt dim {} vs map source dim {}", z.cols(), map.d_src),
        ));
    }
    z.matmul(&map.matrix.transpose())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub baseline: ExtractionReport,
    pub transferred: ExtractionReport,
    pub scaled: ExtractionReport,
    pub hard_tokens: Vec<usize>,
    pub map: ProjectionMap,
}

impl TransferReport {
    pub fn rows(&self) -> [&ExtractionReport; 3] {
        [&self.baseline, &self.transferred, &self.scaled]
    }

    /// `method,ER_50,ER_30` with the three rows.
    pub fn to_csv(&self) -> String {
        metrics::reports_csv(&self.rows().map(Clone::clone), &[50, 30])
    }

    /// Whether both transferred rows stay at or below the baseline's ER_50.
    pub fn transfer_hurts(&self) -> bool {
        let b = self.baseline.rate(50);
        self.transferred.rate(50) <= b && self.scaled.rate(50) <= b
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: baseline {:.2}, transferred {:.2}, scaled {:.2} (ER_50)",
            csv_field(&self.baseline.fingerprint),
            self.baseline.rate(50),
            self.transferred.rate(50),
            self.scaled.rate(50)
        )
    }
}

/// Target-model extraction with no prompt, with the source prompt's hard
/// tokens re-embedded, and with the linearly scaled prompt. Token ids are
/// assumed to mean the same thing in both vocabularies.
pub fn evaluate_transfer(
    source: &VictimModel,
    prompt: &Tensor,
    target: &VictimModel,
    data: &Dataset,
    decode: &DecodeConfig,
    map: Option<&ProjectionMap>,
    fingerprint: &str,
) -> Result<TransferReport> {
    let map = match map {
        Some(m) => m.clone(),
        None => fit_between(source, target)?,
    };
    if map.d_src != source.model_dim() || map.d_tgt != target.model_dim() {
        return Err(shape_err(
            "evaluate_transfer",
            format!(
                "map {} -> {} between models {} -> {}",
                map.d_src,
                map.d_tgt,
                source.model_dim(),
                target.model_dim()
            ),
        ));
    }
    let hard = project_to_hard_tokens(prompt, &source.weights.token_embedding)?;
    if let Some(&bad) = hard.iter().find(|&&t| t >= target.vocab_size()) {
        return Err(Error::Config(format!(
            "hard token {bad} is outside the target vocabulary"
        )));
    }
    let re_embedded = target.embed(&hard)?;
    let scaled = scale_soft_prompt(prompt, &map)?;
    let run = |name: &str, p: Option<&Tensor>| -> Result<ExtractionReport> {
        ExtractionReport::new(
            name,
            fingerprint,
            metrics::run_extraction(target, p, data, decode)?,
        )
    };
    Ok(TransferReport {
        baseline: run("Original", None)?,
        transferred: run("Transferred Soft Prompt", Some(&re_embedded))?,
        scaled: run("Scaled Soft Prompt", Some(&scaled))?,
        hard_tokens: hard,
        map,
    })
}
