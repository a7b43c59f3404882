//! Checkpoint archive: one JSON document holding a schema version, a kind tag,
//! the component config, the provenance of the run (config and seed), and
//! every parameter as `{name, shape, data}` in creation order.

use crate::error::{CastError, Result};
use autograd::{ParamStore, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    CastModel,
    StyleClassifier,
    CoherenceClassifier,
    LanguageModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: u32,
    pub kind: CheckpointKind,
    pub config: serde_json::Value,
    pub provenance: serde_json::Value,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: CheckpointKind, config: &C, provenance: serde_json::Value, params: &ParamStore) -> Self {
        Checkpoint {
            schema: SCHEMA_VERSION,
            kind,
            config: serde_json::to_value(config).expect("config serializes"),
            provenance,
            params: params
                .iter()
                .map(|(_, name, t)| NamedTensor { name: name.to_string(), shape: [t.rows(), t.cols()], data: t.data().to_vec() })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CastError::io(dir, e))?;
        }
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| CastError::io(path, e))
    }

    /// Loads and checks schema and kind.
    pub fn load(path: &Path, kind: CheckpointKind) -> Result<Self> {
        if !path.exists() {
            return Err(CastError::MissingCheckpoint(path.to_path_buf()));
        }
        let bad = |message: String| CastError::Checkpoint { path: path.to_path_buf(), message };
        let text = fs::read_to_string(path).map_err(|e| CastError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if ck.schema != SCHEMA_VERSION {
            return Err(bad(format!("schema {} is not supported (expected {SCHEMA_VERSION})", ck.schema)));
        }
        if ck.kind != kind {
            return Err(bad(format!("holds a {:?}, expected a {kind:?}", ck.kind)));
        }
        Ok(ck)
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| CastError::Checkpoint { path: Default::default(), message: format!("config: {e}") })
    }

    pub fn param_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for p in &self.params {
            let [r, c] = p.shape;
            if r * c != p.data.len() {
                return Err(CastError::Shape(format!("parameter {}: shape {r}x{c} but {} values", p.name, p.data.len())));
            }
            if store.find(&p.name).is_some() {
                return Err(CastError::Shape(format!("parameter {} appears twice", p.name)));
            }
            store.add(p.name.clone(), Tensor::from_vec(r, c, p.data.clone()));
        }
        Ok(store)
    }
}

/// Overwrites every parameter of `dst` with the same-named one of `src`.
/// Both stores must hold exactly the same names and shapes.
pub fn copy_named(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(CastError::Shape(format!("expected {} parameters, found {}", dst.len(), src.len())));
    }
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let name = dst.name(id).to_string();
        let from = src.find(&name).ok_or_else(|| CastError::Shape(format!("parameter {name} is missing")))?;
        let t = src.get(from);
        if t.shape() != dst.get(id).shape() {
            return Err(CastError::Shape(format!("parameter {name}: expected {:?}, found {:?}", dst.get(id).shape(), t.shape())));
        }
        *dst.get_mut(id) = t.clone();
    }
    Ok(())
}
