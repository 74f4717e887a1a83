use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Initialization scheme for a new parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// U(-bound, bound).
    Uniform(f64),
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for linear and conv layers.
    FanIn(usize),
}

struct Inner {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

/// Named parameters and buffers of one model replica.
///
/// Parameter values are drawn from a generator seeded by the store seed and
/// the parameter name, so initialization does not depend on creation order.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                params: BTreeMap::new(),
                buffers: BTreeMap::new(),
            })),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn root(&self) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Trainable parameters in name order.
    pub fn params(&self) -> Vec<(String, Var)> {
        self.lock()
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Non-trainable state (normalization statistics) in name order.
    pub fn buffers(&self) -> Vec<(String, Var)> {
        self.lock()
            .buffers
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        let inner = self.lock();
        inner
            .params
            .get(name)
            .or_else(|| inner.buffers.get(name))
            .cloned()
    }

    /// Names of every trainable parameter under `prefix`.
    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.lock()
            .params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.lock().params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter or buffer with a constant.
    pub fn fill(&self, name: &str, value: f64) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let t = (Tensor::ones(var.shape(), var.dtype(), var.device())? * value)?;
        var.set(&t)?;
        Ok(())
    }

    /// Overwrites every parameter whose name starts with `prefix`.
    pub fn fill_prefix(&self, prefix: &str, value: f64) -> Result<usize> {
        let names = self.names_with_prefix(prefix);
        for n in &names {
            self.fill(n, value)?;
        }
        Ok(names.len())
    }

    /// Copies every parameter and buffer value from `other` (same names and shapes).
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in self.params().into_iter().chain(self.buffers()) {
            let src = other
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name} in source store")))?;
            var.set(&src.as_tensor().to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    fn insert(&self, name: String, var: Var, buffer: bool) -> Result<()> {
        let mut inner = self.lock();
        if inner.params.contains_key(&name) || inner.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        if buffer {
            inner.buffers.insert(name, var);
        } else {
            inner.params.insert(name, var);
        }
        Ok(())
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Scoped handle used while constructing layers.
#[derive(Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn values(&self, name: &str, count: usize, init: Init) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.store.seed ^ fnv1a(name));
        let bound = match init {
            Init::Zeros => return vec![0.0; count],
            Init::Const(c) => return vec![c; count],
            Init::Uniform(b) => b,
            Init::FanIn(fan_in) => 1.0 / (fan_in.max(1) as f64).sqrt(),
        };
        (0..count).map(|_| rng.random_range(-bound..=bound)).collect()
    }

    pub fn param(&self, name: &str, shape: impl Into<candle_core::Shape>, init: Init) -> Result<Var> {
        let shape = shape.into();
        let full = self.full_name(name);
        let data = self.values(&full, shape.elem_count(), init);
        let t = Tensor::from_vec(data, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.store.insert(full, var.clone(), false)?;
        Ok(var)
    }

    pub fn buffer(&self, name: &str, shape: impl Into<candle_core::Shape>, value: f64) -> Result<Var> {
        let shape = shape.into();
        let full = self.full_name(name);
        let t = (Tensor::ones(shape, self.store.dtype, &self.store.device)? * value)?;
        let var = Var::from_tensor(&t)?;
        self.store.insert(full, var.clone(), true)?;
        Ok(var)
    }
}
