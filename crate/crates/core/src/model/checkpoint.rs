use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, VictimModel};
use crate::artifact;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "cosped-model";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    frozen: bool,
    weights_digest: String,
    tensors: Vec<(String, Vec<usize>)>,
}

impl VictimModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.weights.named();
        let header = Header {
            config: self.config.clone(),
            frozen: self.frozen,
            weights_digest: self.digest(),
            tensors: named
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
        };
        let arrays: Vec<&[f64]> = named.iter().map(|(_, t)| t.data()).collect();
        artifact::write(path, FORMAT, VERSION, &header, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, arrays): (Header, _) = artifact::read(path, FORMAT, VERSION)?;
        let corrupt = |detail: String| Error::Corrupt {
            path: path.display().to_string(),
            detail,
        };
        let mut model = VictimModel::init(header.config.clone())?;
        let slots = model.weights.all_mut();
        if slots.len() != arrays.len() || slots.len() != header.tensors.len() {
            return Err(corrupt("tensor count does not match config".into()));
        }
        for ((slot, data), (name, shape)) in slots.into_iter().zip(arrays).zip(&header.tensors) {
            if slot.shape() != shape.as_slice() {
                return Err(corrupt(format!(
                    "{name}: shape {shape:?} vs {:?}",
                    slot.shape()
                )));
            }
            *slot = Tensor::new(shape.clone(), data)?;
        }
        model.frozen = header.frozen;
        if model.digest() != header.weights_digest {
            return Err(corrupt("weights digest mismatch".into()));
        }
        Ok(model)
    }
}
