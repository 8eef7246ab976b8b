//! Named parameter storage with seed-derived initialisation.
//!
//! Every parameter is initialised from its own RNG stream keyed by
//! `(seed, name)`, so the values do not depend on construction order.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot uniform over the first two dims (`[fan_out, fan_in, ...]`).
    XavierUniform,
    /// He uniform for convolution kernels `[out, in, kh, kw]`.
    KaimingUniform,
}

fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"param:");
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn init_values(seed: u64, name: &str, dims: &[usize], init: Init) -> Vec<f32> {
    let n: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    let receptive: usize = dims.iter().skip(2).product();
    let fan_out = dims.first().copied().unwrap_or(1) * receptive.max(1);
    let fan_in = dims.get(1).copied().unwrap_or(1) * receptive.max(1);
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| d.sample(&mut rng) as f32).collect()
        }
        Init::XavierUniform => {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-limit..limit) as f32).collect()
        }
        Init::KaimingUniform => {
            let limit = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-limit..limit) as f32).collect()
        }
    }
}

/// Shared map of trainable variables, ordered by name.
#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    seed: u64,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.len())
            .field("seed", &self.seed)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, device: Device) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
            device,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vars.lock().expect("param lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(name, var)` pairs in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .expect("param lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().expect("param lock").get(name).cloned()
    }

    /// Total scalar count of the parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.vars
            .lock()
            .expect("param lock")
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn count(&self) -> usize {
        self.count_with_prefix("")
    }

    fn get_or_init(&self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().expect("param lock");
        if let Some(v) = vars.get(name) {
            if v.dims() != dims {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {dims:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let data = init_values(self.seed, name, dims, init);
        let t = Tensor::from_vec(data, dims, &self.device)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Overwrites existing values; every name must already exist with the
    /// same shape, and every existing parameter must be provided.
    pub fn load_values(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let vars = self.vars.lock().expect("param lock");
        for name in vars.keys() {
            if !values.contains_key(name) {
                return Err(Error::Config(format!("missing parameter {name}")));
            }
        }
        for (name, t) in values {
            let var = vars
                .get(name)
                .ok_or_else(|| Error::Config(format!("unexpected parameter {name}")))?;
            if var.dims() != t.dims() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, stored {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

/// A name prefix into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.get_or_init(&full, dims, init)
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let a = ParamStore::new(5, Device::Cpu);
        let b = ParamStore::new(5, Device::Cpu);
        let a1 = a.root().get("x", &[3, 4], Init::XavierUniform).unwrap();
        let _ = a.root().get("y", &[2], Init::Normal(1.0)).unwrap();
        let _ = b.root().get("y", &[2], Init::Normal(1.0)).unwrap();
        let b1 = b.root().get("x", &[3, 4], Init::XavierUniform).unwrap();
        assert_eq!(a1.to_vec2::<f32>().unwrap(), b1.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn seeds_and_names_matter() {
        let a = ParamStore::new(1, Device::Cpu).root().get("x", &[8], Init::Normal(1.0)).unwrap();
        let b = ParamStore::new(2, Device::Cpu).root().get("x", &[8], Init::Normal(1.0)).unwrap();
        let c = ParamStore::new(1, Device::Cpu).root().get("z", &[8], Init::Normal(1.0)).unwrap();
        let (a, b, c) = (a.to_vec1::<f32>().unwrap(), b.to_vec1::<f32>().unwrap(), c.to_vec1::<f32>().unwrap());
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let s = ParamStore::new(0, Device::Cpu);
        s.root().pp("l").get("w", &[2, 2], Init::Zeros).unwrap();
        assert!(s.root().pp("l").get("w", &[3, 2], Init::Zeros).is_err());
        assert!(s.get("l.w").is_some());
    }

    #[test]
    fn xavier_bounds() {
        let v = init_values(0, "w", &[10, 30], Init::XavierUniform);
        let limit = (6.0f64 / 40.0).sqrt() as f32;
        assert!(v.iter().all(|x| x.abs() <= limit));
    }
}
