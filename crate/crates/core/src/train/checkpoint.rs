//! Checkpoint archives.
//!
//! A checkpoint is an uncompressed tar holding `manifest.json` followed by
//! one MSCM file per tensor, in the order listed by the manifest. Headers
//! carry no timestamps or ownership, so identical state always produces
//! identical bytes.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::params::{load_tensors, named_tensors, Parameters};
use crate::tensor::Tensor;

const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "mscrack-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Free-form metadata plus named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn tensor_path(name: &str) -> String {
    format!("tensors/{name}.mscm")
}

fn append(builder: &mut tar::Builder<Vec<u8>>, path: &str, bytes: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_ustar();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_entry_type(tar::EntryType::Regular);
    builder
        .append_data(&mut header, path, bytes)
        .map_err(|e| Error::io(path, e))
}

impl Archive {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    /// Appends every parameter of `p` as `prefix.name`.
    pub fn push_params(&mut self, prefix: &str, p: &impl Parameters) {
        for (name, t) in named_tensors(p) {
            self.tensors.push((format!("{prefix}.{name}"), t));
        }
    }

    /// Loads `prefix.*` tensors into `p` in visiting order, checking names
    /// and shapes.
    pub fn load_params(&self, prefix: &str, p: &mut impl Parameters) -> Result<()> {
        let want: Vec<String> = named_tensors(p)
            .into_iter()
            .map(|(n, _)| format!("{prefix}.{n}"))
            .collect();
        let mut values = Vec::with_capacity(want.len());
        for name in &want {
            values.push(self.get(name)?.clone());
        }
        let extra = self
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with(&format!("{prefix}.")))
            .count();
        if extra != want.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {extra} tensors under '{prefix}', model expects {}",
                want.len()
            )));
        }
        load_tensors(p, &values)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Validation(format!("checkpoint lacks tensor '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format: FORMAT.into(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let mut builder = tar::Builder::new(Vec::new());
        builder.mode(tar::HeaderMode::Deterministic);
        append(&mut builder, MANIFEST, &serde_json::to_vec_pretty(&manifest)?)?;
        for (name, t) in &self.tensors {
            append(&mut builder, &tensor_path(name), &t.to_mscm_bytes())?;
        }
        builder.into_inner().map_err(|e| Error::io("<checkpoint>", e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        let mut archive = tar::Archive::new(bytes);
        let entries = archive.entries().map_err(|e| Error::io("<checkpoint>", e))?;
        for entry in entries {
            let mut entry = entry.map_err(|e| Error::io("<checkpoint>", e))?;
            let path = entry
                .path()
                .map_err(|e| Error::io("<checkpoint>", e))?
                .to_string_lossy()
                .into_owned();
            let mut data = Vec::new();
            entry.read_to_end(&mut data).map_err(|e| Error::io(&path, e))?;
            files.push((path, data));
        }
        let (first, rest) = files
            .split_first()
            .ok_or_else(|| Error::Validation("empty checkpoint archive".into()))?;
        if first.0 != MANIFEST {
            return Err(Error::Validation(format!(
                "checkpoint starts with '{}', expected {MANIFEST}",
                first.0
            )));
        }
        let manifest: Manifest = serde_json::from_slice(&first.1)?;
        if manifest.format != FORMAT {
            return Err(Error::Unsupported(format!("checkpoint format '{}'", manifest.format)));
        }
        if rest.len() != manifest.tensors.len() {
            return Err(Error::Validation(format!(
                "manifest lists {} tensors, archive holds {}",
                manifest.tensors.len(),
                rest.len()
            )));
        }
        let mut tensors = Vec::with_capacity(rest.len());
        for (entry, (path, data)) in manifest.tensors.iter().zip(rest) {
            if *path != tensor_path(&entry.name) {
                return Err(Error::Validation(format!(
                    "archive member '{path}' out of manifest order (expected {})",
                    tensor_path(&entry.name)
                )));
            }
            let t = Tensor::from_mscm_bytes(data)?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Validation(format!(
                    "tensor '{}' has shape {:?}, manifest says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            tensors.push((entry.name.clone(), t));
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    /// Writes through a temporary sibling and renames, so a crash never
    /// leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::Validation(format!("{}: {other}", path.display())),
        })
    }

    /// Typed view of a metadata field.
    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Validation(format!("checkpoint metadata lacks '{key}'")))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Archive {
        let mut a = Archive::new(json!({"kind": "test", "lr": 3e-5, "best": 0.123456789012345}));
        a.push_params(
            "w",
            &vec![Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1), Tensor::scalar(-2.5)],
        );
        a
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(bytes, b.to_bytes().unwrap());
        let mut p = vec![Tensor::zeros(&[2, 3]), Tensor::zeros(&[])];
        b.load_params("w", &mut p).unwrap();
        assert_eq!(p[1].data()[0], -2.5);
        let lr: f64 = b.meta_field("lr").unwrap();
        assert_eq!(lr, 3e-5);
    }

    #[test]
    fn rejects_mismatches() {
        let a = sample();
        let mut wrong = vec![Tensor::zeros(&[3, 2]), Tensor::zeros(&[])];
        assert!(a.load_params("w", &mut wrong).is_err());
        let mut fewer = vec![Tensor::zeros(&[2, 3])];
        assert!(a.load_params("w", &mut fewer).is_err());
        assert!(a.get("nope").is_err());
        assert!(Archive::from_bytes(b"not a tar").is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Archive::load(&path).unwrap(), sample());
        assert!(Archive::load(&dir.path().join("missing")).is_err());
    }
}
