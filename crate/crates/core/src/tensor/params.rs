use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const PARAM_FORMAT_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "params.json";
const DATA_FILE: &str = "params.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable arrays, addressed by [`ParamId`] in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Writes `params.json` and `params.bin` (little-endian f64) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut bytes = Vec::with_capacity(self.num_values() * 8);
        let mut tensors = Vec::with_capacity(self.len());
        for (name, value) in self.names.iter().zip(&self.values) {
            tensors.push(ManifestEntry {
                name: name.clone(),
                shape: value.shape().to_vec(),
                offset: bytes.len() as u64,
            });
            for v in value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: PARAM_FORMAT_VERSION,
            dtype: "f64-le".into(),
            tensors,
        };
        write_atomic(&dir.join(DATA_FILE), &bytes)?;
        write_atomic(
            &dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != PARAM_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported parameter format version {}",
                manifest.format_version
            )));
        }
        if manifest.dtype != "f64-le" {
            return Err(Error::Format(format!("unsupported dtype {}", manifest.dtype)));
        }
        let bytes = std::fs::read(dir.join(DATA_FILE))?;
        let mut store = ParamStore::new();
        for entry in manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + n * 8;
            if end > bytes.len() {
                return Err(Error::Format(format!(
                    "tensor {} runs past end of data file",
                    entry.name
                )));
            }
            let data = bytes[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            store.insert(entry.name, Tensor::new(entry.shape, data)?);
        }
        Ok(store)
    }
}

/// Accumulated gradients keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id, grad);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.map.values_mut().for_each(|g| g.scale_in_place(factor));
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            match self.map.get_mut(&id) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.map.insert(id, g.clone());
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}
