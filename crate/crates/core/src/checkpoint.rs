//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `SEMSRCKP`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then the raw
//! little-endian `f32` payload of every tensor in header order. The header
//! carries the component kind, architecture hyperparameters, the training
//! step count, the hash of the config that produced it and free-form metadata.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

pub const MAGIC: &[u8; 8] = b"SEMSRCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentKind {
    Teacher,
    Dape,
    Vae,
    BaseUnet,
    SrControl,
}

impl std::fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ComponentKind::Teacher => "teacher",
            ComponentKind::Dape => "dape",
            ComponentKind::Vae => "vae",
            ComponentKind::BaseUnet => "base-unet",
            ComponentKind::SrControl => "sr-control",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: ComponentKind,
    format_version: u32,
    step: u64,
    config_hash: String,
    hyper: serde_json::Value,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ComponentKind,
    pub step: u64,
    pub config_hash: String,
    pub hyper: serde_json::Value,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: ComponentKind, hyper: serde_json::Value, tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            kind,
            step: 0,
            config_hash: String::new(),
            hyper,
            meta: serde_json::Value::Null,
            tensors,
        }
    }

    pub fn hyper_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.hyper.clone())
            .map_err(|e| Error::Checkpoint(format!("{} hyperparameters: {e}", self.kind)))
    }

    /// Tensors under `prefix.`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind,
            format_version: FORMAT_VERSION,
            step: self.step,
            config_hash: self.config_hash.clone(),
            hyper: self.hyper.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.dims().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            bail!(Checkpoint, "not a checkpoint file (bad magic)");
        }
        let mut v = [0u8; 4];
        read_exact(&mut r, &mut v)?;
        let version = u32::from_le_bytes(v);
        if version != FORMAT_VERSION {
            bail!(
                Checkpoint,
                "checkpoint format version {version} is not supported (this build reads version {FORMAT_VERSION})"
            );
        }
        let mut l = [0u8; 8];
        read_exact(&mut r, &mut l)?;
        let hlen = u64::from_le_bytes(l) as usize;
        if hlen > r.len() {
            bail!(Checkpoint, "truncated header");
        }
        let header: Header = serde_json::from_slice(&r[..hlen])?;
        r = &r[hlen..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if r.len() < n * 4 {
                bail!(Checkpoint, "truncated payload at tensor {}", e.name);
            }
            let data: Vec<f32> = r[..n * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            r = &r[n * 4..];
            tensors.insert(e.name, Tensor::from_vec(data, e.shape, &Device::Cpu)?);
        }
        if !r.is_empty() {
            bail!(Checkpoint, "{} trailing bytes after payload", r.len());
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            config_hash: header.config_hash,
            hyper: header.hyper,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and rejects a file of the wrong component kind.
    pub fn load_kind(path: impl AsRef<Path>, kind: ComponentKind) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact {
                artifact: path.display().to_string(),
                hint: format!("no {kind} checkpoint; run the command that trains it first"),
            });
        }
        let ck = Self::load(path)?;
        if ck.kind != kind {
            bail!(Checkpoint, "{} holds a {} checkpoint, expected {kind}", path.display(), ck.kind);
        }
        Ok(ck)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut t = BTreeMap::new();
        t.insert("a.w".to_string(), Tensor::new(&[[1f32, -2.5], [3.25, 0.0]], &Device::Cpu).unwrap());
        t.insert("b".to_string(), Tensor::new(&[f32::MIN_POSITIVE, 7.0, -0.0], &Device::Cpu).unwrap());
        let mut c = Checkpoint::new(ComponentKind::Vae, serde_json::json!({"width": 4}), t);
        c.step = 17;
        c.config_hash = "abc".into();
        c
    }

    #[test]
    fn roundtrip_preserves_weights_and_header() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.kind, ComponentKind::Vae);
        assert_eq!(back.step, 17);
        assert_eq!(back.hyper["width"], 4);
        for (k, v) in &c.tensors {
            let w = &back.tensors[k];
            assert_eq!(v.dims(), w.dims());
            assert_eq!(
                v.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                w.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }

    #[test]
    fn future_version_fails_loudly() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("not supported"), "{err}");
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        sample().save(&p).unwrap();
        assert!(Checkpoint::load_kind(&p, ComponentKind::Vae).is_ok());
        assert!(Checkpoint::load_kind(&p, ComponentKind::Teacher).is_err());
        assert!(matches!(
            Checkpoint::load_kind(dir.path().join("missing"), ComponentKind::Vae),
            Err(Error::MissingArtifact { .. })
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    }
}
