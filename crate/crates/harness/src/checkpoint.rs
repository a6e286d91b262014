//! Self-describing JSON checkpoints: a versioned header, the model layout and
//! every named parameter array with its shape.

use std::path::Path;

use condcomp::{Model, ModelSpec, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const FORMAT: &str = "condcomp-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub spec: ModelSpec,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn of(model: &Model, seed: u64) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            seed,
            spec: model.spec.clone(),
            params: model
                .params
                .iter()
                .map(|(name, t)| NamedArray {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| HarnessError::Failed(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(HarnessError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Invalid(format!("{}: not a checkpoint ({e})", path.display())))?;
        if ckpt.format != FORMAT || ckpt.version != VERSION {
            return Err(HarnessError::Invalid(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::from_seed(self.spec, self.seed)?;
        if self.params.len() != model.params.len() {
            return Err(HarnessError::Invalid(format!(
                "checkpoint holds {} arrays, the model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        let arrays = self
            .params
            .into_iter()
            .map(|a| Ok((a.name, Tensor::new(a.shape, a.data)?)))
            .collect::<condcomp::Result<Vec<(String, Tensor)>>>()?;
        model.load_params(arrays.iter().map(|(n, t)| (n.as_str(), t.clone())))?;
        Ok(model)
    }
}
