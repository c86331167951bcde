//! Named parameter registry with deterministic initialization.
//!
//! Every parameter is addressed by a dotted path. Fresh parameters draw their
//! values from a ChaCha stream keyed by `(seed, path)`, so a model's initial
//! weights do not depend on construction order. Parameters are either
//! trainable ([`Var`]) or frozen (plain tensors that never receive gradients).

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// `U(-b, b)` with `b = gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
}

#[derive(Debug, Clone)]
enum Param {
    Trainable(Var),
    Frozen(Tensor),
}

impl Param {
    fn tensor(&self) -> Tensor {
        match self {
            Param::Trainable(v) => v.as_tensor().clone(),
            Param::Frozen(t) => t.clone(),
        }
    }
}

/// Shared table of every parameter created through a [`ParamBuilder`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Arc<Mutex<BTreeMap<String, Param>>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.params.lock().unwrap().keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.params.lock().unwrap().get(name).map(Param::tensor)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        matches!(self.params.lock().unwrap().get(name), Some(Param::Trainable(_)))
    }

    /// Trainable variables in name order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.trainable_named().into_iter().map(|(_, v)| v).collect()
    }

    pub fn trainable_named(&self) -> Vec<(String, Var)> {
        self.params
            .lock()
            .unwrap()
            .iter()
            .filter_map(|(k, p)| match p {
                Param::Trainable(v) => Some((k.clone(), v.clone())),
                Param::Frozen(_) => None,
            })
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_vars().iter().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .lock()
            .unwrap()
            .iter()
            .map(|(k, p)| (k.clone(), p.tensor()))
            .collect()
    }

    /// Overwrites a trainable parameter in place.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let map = self.params.lock().unwrap();
        match map.get(name) {
            Some(Param::Trainable(v)) => {
                if v.dims() != value.dims() {
                    bail!(Argument, "assign {name}: shape {:?} vs {:?}", v.dims(), value.dims());
                }
                v.set(&value.to_dtype(v.dtype())?)?;
                Ok(())
            }
            Some(Param::Frozen(_)) => bail!(State, "parameter {name} is frozen"),
            None => bail!(Argument, "unknown parameter {name}"),
        }
    }

    /// SHA-256 over names and f32 values of the parameters whose name starts with `prefix`.
    pub fn checksum(&self, prefix: &str) -> Result<String> {
        checksum_tensors(self.tensors().iter().filter(|(k, _)| k.starts_with(prefix)))
    }

    fn insert(&self, name: String, p: Param) -> Result<()> {
        let mut map = self.params.lock().unwrap();
        if map.contains_key(&name) {
            bail!(State, "parameter {name} registered twice");
        }
        map.insert(name, p);
        Ok(())
    }
}

pub fn checksum_tensors<'a>(items: impl Iterator<Item = (&'a String, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update(name.as_bytes());
        h.update([0u8]);
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.wrapping_mul(0x9E3779B97F4A7C15);
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn init_values(init: Init, n: usize, seed: u64, name: &str) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        Init::FanIn { fan_in, gain } => {
            let b = gain / (fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-b..=b)).collect()
        }
    }
}

/// Hands out parameters under a path prefix.
#[derive(Debug, Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
    seed: u64,
    dtype: DType,
    device: Device,
    trainable: bool,
    source: Option<Arc<BTreeMap<String, Tensor>>>,
}

impl ParamBuilder {
    pub fn new(store: &ParamStore, seed: u64, dtype: DType) -> Self {
        Self {
            store: store.clone(),
            prefix: String::new(),
            seed,
            dtype,
            device: Device::Cpu,
            trainable: true,
            source: None,
        }
    }

    /// Values found in `source` (by full path) are used instead of fresh initialization.
    pub fn with_source(mut self, source: BTreeMap<String, Tensor>) -> Self {
        self.source = Some(Arc::new(source));
        self
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let mut b = self.clone();
        b.prefix = self.path(name.as_ref());
        b
    }

    pub fn trainable(&self, trainable: bool) -> Self {
        let mut b = self.clone();
        b.trainable = trainable;
        b
    }

    /// Same store and settings, different source table.
    pub fn sourced(&self, source: Option<Arc<BTreeMap<String, Tensor>>>) -> Self {
        let mut b = self.clone();
        b.source = source;
        b
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let path = self.path(name);
        let value = match self.source.as_ref().and_then(|s| s.get(&path)) {
            Some(t) => {
                if t.dims() != shape {
                    bail!(
                        Checkpoint,
                        "parameter {path}: stored shape {:?}, model expects {shape:?}",
                        t.dims()
                    );
                }
                t.to_dtype(self.dtype)?.copy()?
            }
            None => {
                if self.source.is_some() && !self.trainable {
                    bail!(Checkpoint, "frozen parameter {path} missing from checkpoint");
                }
                let n = shape.iter().product();
                let data = init_values(init, n, self.seed, &path);
                Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?
            }
        };
        let param = if self.trainable {
            Param::Trainable(Var::from_tensor(&value)?)
        } else {
            Param::Frozen(value.detach())
        };
        let t = param.tensor();
        self.store.insert(path, param)?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_depends_on_path_not_order() {
        let s1 = ParamStore::new();
        let b1 = ParamBuilder::new(&s1, 9, DType::F32);
        let a1 = b1.get("a", &[4], Init::Normal(1.0)).unwrap();
        let _ = b1.get("b", &[4], Init::Normal(1.0)).unwrap();
        let s2 = ParamStore::new();
        let b2 = ParamBuilder::new(&s2, 9, DType::F32);
        let _ = b2.get("b", &[4], Init::Normal(1.0)).unwrap();
        let a2 = b2.get("a", &[4], Init::Normal(1.0)).unwrap();
        assert_eq!(a1.to_vec1::<f32>().unwrap(), a2.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn frozen_parameters_are_not_trainable() {
        let s = ParamStore::new();
        let b = ParamBuilder::new(&s, 0, DType::F32);
        b.pp("x").trainable(false).get("w", &[2, 2], Init::Ones).unwrap();
        b.pp("y").get("w", &[2, 2], Init::Zeros).unwrap();
        assert_eq!(s.names(), vec!["x.w", "y.w"]);
        assert_eq!(s.trainable_vars().len(), 1);
        assert!(s.assign("x.w", &Tensor::zeros((2, 2), DType::F32, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let s = ParamStore::new();
        let b = ParamBuilder::new(&s, 0, DType::F32);
        b.get("w", &[3], Init::Ones).unwrap();
        let before = s.checksum("").unwrap();
        s.assign("w", &Tensor::new(&[1f32, 1., 2.], &Device::Cpu).unwrap()).unwrap();
        assert_ne!(before, s.checksum("").unwrap());
    }

    #[test]
    fn duplicate_registration_fails() {
        let s = ParamStore::new();
        let b = ParamBuilder::new(&s, 0, DType::F32);
        b.get("w", &[1], Init::Ones).unwrap();
        assert!(b.get("w", &[1], Init::Ones).is_err());
    }
}
