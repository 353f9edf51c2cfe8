use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Array;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |id| self.names[id.0].starts_with(prefix))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Overwrites values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Model("parameter names differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::Model(format!(
                    "parameter shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<ParamRecord> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| ParamRecord {
                name: name.clone(),
                shape: v.shape().to_vec(),
                values: v.data().to_vec(),
            })
            .collect()
    }

    /// Replaces values by name; every parameter in `self` must be present.
    pub fn load_records(&mut self, records: &[ParamRecord]) -> Result<()> {
        if records.len() != self.len() {
            return Err(Error::Model(format!(
                "expected {} parameter arrays, found {}",
                self.len(),
                records.len()
            )));
        }
        for rec in records {
            let idx = self
                .names
                .iter()
                .position(|n| *n == rec.name)
                .ok_or_else(|| Error::Model(format!("unexpected parameter `{}`", rec.name)))?;
            if self.values[idx].shape() != rec.shape.as_slice() {
                return Err(Error::Model(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    rec.name,
                    rec.shape,
                    self.values[idx].shape()
                )));
            }
            self.values[idx] = Array::new(rec.shape.clone(), rec.values.clone())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// On-disk model container shared by every model kind.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub model_kind: String,
    pub config: serde_json::Value,
    /// Kind-specific extras (label vocabulary, noise schedule, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub params: Vec<ParamRecord>,
}

impl ModelFile {
    pub fn new(
        model_kind: &str,
        config: serde_json::Value,
        extra: serde_json::Value,
        store: &ParamStore,
    ) -> Self {
        ModelFile {
            format_version: FORMAT_VERSION,
            model_kind: model_kind.to_string(),
            config,
            extra,
            params: store.to_records(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Model(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        Ok(file)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.model_kind != kind {
            return Err(Error::Model(format!(
                "expected model_kind `{kind}`, found `{}`",
                self.model_kind
            )));
        }
        Ok(())
    }
}
