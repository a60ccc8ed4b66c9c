use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, NetworkSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::GeometryConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk form of a model: spec, geometry, permutations and tensors by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub spec: NetworkSpec,
    pub geometry: GeometryConfig,
    pub permutations: BTreeMap<String, Vec<usize>>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64) -> Self {
        let topo = &model.topology;
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step,
            spec: model.spec.clone(),
            geometry: model.geometry.config,
            permutations: topo
                .groups
                .iter()
                .zip(&model.perms)
                .map(|(g, p)| (g.name.clone(), p.clone()))
                .collect(),
            tensors: topo
                .tensors
                .iter()
                .zip(&model.params)
                .map(|(t, p)| (t.name.clone(), p.clone()))
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let topo = self.spec.topology()?;
        let mut tensors = self.tensors;
        let params = topo
            .tensors
            .iter()
            .map(|t| {
                tensors
                    .remove(&t.name)
                    .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor `{}`", t.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::invalid(format!("checkpoint has unknown tensor `{extra}`")));
        }
        let perms = topo
            .groups
            .iter()
            .map(|g| {
                self.permutations
                    .get(&g.name)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("checkpoint lacks permutation `{}`", g.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_parts(self.spec, self.geometry, params, Some(perms))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
