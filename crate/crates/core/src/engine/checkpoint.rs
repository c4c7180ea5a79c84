//! Model files: named parameter arrays plus the hash of the config that
//! produced them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{ArchConfig, SegModel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub shape: [usize; 2],
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: usize,
    pub arch: ArchConfig,
    pub classes: Vec<String>,
    pub params: BTreeMap<String, NamedArray>,
}

impl Checkpoint {
    pub fn from_model(model: &SegModel, step: usize, config_hash: &str) -> Self {
        let mut model = model.clone();
        let params = model
            .params_mut()
            .into_iter()
            .map(|(name, p)| {
                let (r, c) = p.value.dim();
                (
                    name,
                    NamedArray {
                        shape: [r, c],
                        data: p.value.iter().copied().collect(),
                    },
                )
            })
            .collect();
        Self {
            config_hash: config_hash.to_string(),
            step,
            arch: model.arch.clone(),
            classes: model.classes().to_vec(),
            params,
        }
    }

    /// Rebuilds the model; every parameter must be present with the shape
    /// implied by the architecture and class list.
    pub fn to_model(&self) -> Result<SegModel> {
        let mut model = SegModel::new(self.arch.clone(), self.classes.clone(), 0)?;
        let mut used = 0;
        for (name, p) in model.params_mut() {
            let stored = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks parameter `{name}`")))?;
            let shape = (stored.shape[0], stored.shape[1]);
            if shape != p.value.dim() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` is {shape:?}, model expects {:?}",
                    p.value.dim()
                )));
            }
            p.value = Array2::from_shape_vec(shape, stored.data.clone())
                .map_err(|e| Error::Shape(e.to_string()))?;
            used += 1;
        }
        if used != self.params.len() {
            return Err(Error::Invalid(
                "checkpoint has parameters the model does not know".into(),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}
