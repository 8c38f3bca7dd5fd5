//! A directory of named tensor containers plus a JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataio::tensor::{read_tensor, write_tensor, Tensor, TensorData};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const ARCHIVE_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveManifest {
    version: u32,
    kind: String,
    meta: BTreeMap<String, Value>,
    tensors: BTreeMap<String, String>,
}

pub struct ArchiveWriter {
    dir: PathBuf,
    manifest: ArchiveManifest,
}

impl ArchiveWriter {
    pub fn create(dir: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            manifest: ArchiveManifest {
                version: ARCHIVE_VERSION,
                kind: kind.to_string(),
                meta: BTreeMap::new(),
                tensors: BTreeMap::new(),
            },
        })
    }

    pub fn meta(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("serializable meta");
        self.manifest.meta.insert(key.to_string(), v);
    }

    pub fn put(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let file = format!("{name}.stpg");
        write_tensor(self.dir.join(&file), tensor)?;
        self.manifest.tensors.insert(name.to_string(), file);
        Ok(())
    }

    pub fn put_real<T: Real>(&mut self, name: &str, dims: Vec<usize>, values: &[T]) -> Result<()> {
        self.put(name, &Tensor::from_real(dims, values)?)
    }

    pub fn finish(self) -> Result<()> {
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Fully loaded archive; every tensor is parsed and checksummed at open.
pub struct ArchiveReader {
    pub dir: PathBuf,
    pub kind: String,
    meta: BTreeMap<String, Value>,
    tensors: BTreeMap<String, Tensor>,
}

impl ArchiveReader {
    pub fn open(dir: impl AsRef<Path>, expected_kind: &str) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ArchiveManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        if manifest.version != ARCHIVE_VERSION {
            return Err(Error::Checkpoint {
                field: "version".into(),
                detail: format!("expected {ARCHIVE_VERSION}, found {}", manifest.version),
            });
        }
        if manifest.kind != expected_kind {
            return Err(Error::Checkpoint {
                field: "kind".into(),
                detail: format!("expected {expected_kind:?}, found {:?}", manifest.kind),
            });
        }
        let mut tensors = BTreeMap::new();
        for (name, file) in &manifest.tensors {
            let t = read_tensor(dir.join(file)).map_err(|e| Error::Checkpoint {
                field: name.clone(),
                detail: e.to_string(),
            })?;
            tensors.insert(name.clone(), t);
        }
        Ok(Self {
            dir,
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint {
            field: name.to_string(),
            detail: "tensor missing".into(),
        })
    }

    pub fn real<T: Real>(&self, name: &str, dims: &[usize]) -> Result<Vec<T>> {
        let t = self.tensor(name)?;
        if t.dims != dims {
            return Err(Error::Checkpoint {
                field: name.to_string(),
                detail: format!("dims {:?}, expected {dims:?}", t.dims),
            });
        }
        if T::DTYPE != t.data.dtype() {
            return Err(Error::Checkpoint {
                field: name.to_string(),
                detail: format!("dtype {:?}, expected {:?}", t.data.dtype(), T::DTYPE),
            });
        }
        t.to_real()
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        match &self.tensor(name)?.data {
            TensorData::F64(v) => Ok(v.iter().map(|&x| x as u64).collect()),
            _ => Err(Error::Checkpoint {
                field: name.to_string(),
                detail: "expected f64 tensor".into(),
            }),
        }
    }

    pub fn meta_value(&self, key: &str) -> Result<&Value> {
        self.meta.get(key).ok_or_else(|| Error::Checkpoint {
            field: key.to_string(),
            detail: "manifest entry missing".into(),
        })
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_value(key)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Error::Checkpoint {
                field: key.to_string(),
                detail: "expected unsigned integer".into(),
            })
    }

    pub fn meta_as<V: serde::de::DeserializeOwned>(&self, key: &str) -> Result<V> {
        serde_json::from_value(self.meta_value(key)?.clone()).map_err(|e| Error::Checkpoint {
            field: key.to_string(),
            detail: e.to_string(),
        })
    }
}
