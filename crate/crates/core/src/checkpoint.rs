//! Checkpoint directories: `manifest.json` naming every parameter with its
//! shape and byte offset into `params.bin`, a flat little-endian `f64` dump.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Parameter, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    /// Architecture description needed to rebuild the model.
    pub arch: serde_json::Value,
    pub params_sha256: String,
    pub params: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub arch: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_params<'a>(
        kind: &str,
        arch: serde_json::Value,
        params: impl IntoIterator<Item = &'a Parameter>,
    ) -> Self {
        Self {
            kind: kind.to_string(),
            arch,
            tensors: params.into_iter().map(|p| (p.name.clone(), p.tensor.clone())).collect(),
        }
    }

    fn payload(&self) -> Vec<u8> {
        let n: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut bytes = Vec::with_capacity(8 * n);
        for (_, t) in &self.tensors {
            for v in t.values() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    /// SHA-256 of the parameter payload, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.payload()))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored tensors into `params` by name. Every parameter must be
    /// present with the same shape.
    pub fn restore<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        for p in params {
            let t = self
                .get(&p.name)
                .ok_or_else(|| Error::invalid(format!("checkpoint has no parameter {}", p.name)))?;
            if t.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "restore",
                    lhs: p.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.tensor = t.clone();
            p.zero_grad();
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let payload = self.payload();
        let mut offset = 0;
        let params = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.numel();
                e
            })
            .collect();
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            arch: self.arch.clone(),
            params_sha256: hex(&Sha256::digest(&payload)),
            params,
        };
        let bin = dir.join(PARAMS_FILE);
        fs::write(&bin, &payload).map_err(|e| Error::io(&bin, e))?;
        let mp = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&mp, text + "\n").map_err(|e| Error::io(&mp, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join(MANIFEST_FILE);
        let bin = dir.join(PARAMS_FILE);
        for p in [&mp, &bin] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.clone()));
            }
        }
        let format = |path: &Path, message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| format(&mp, e.to_string()))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(format(
                &mp,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let payload = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if hex(&Sha256::digest(&payload)) != manifest.params_sha256 {
            return Err(format(&bin, "payload hash does not match manifest".into()));
        }
        let mut tensors = Vec::with_capacity(manifest.params.len());
        for e in &manifest.params {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 8 * n;
            let bytes = payload
                .get(e.offset..end)
                .ok_or_else(|| format(&bin, format!("{} runs past the end of the file", e.name)))?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, values)?));
        }
        Ok(Self {
            kind: manifest.kind,
            arch: manifest.arch,
            tensors,
        })
    }
}
