//! Named, seeded parameter storage.
//!
//! Every learnable tensor and every running statistic lives in a
//! [`ParamStore`] under a dotted path such as `encoder.stem.conv1.weight`.
//! Initialisation draws from a single ChaCha stream, so building the same
//! configuration with the same seed yields bit-identical weights.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Updated in place during the forward pass (batch-norm running stats).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub var: Var,
    pub kind: ParamKind,
}

#[derive(Debug)]
struct Inner {
    entries: BTreeMap<String, ParamEntry>,
    rng: ChaCha8Rng,
}

/// Shared handle to all parameters of one model instance.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                entries: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            device: Device::Cpu,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Root builder; layers register their parameters through it.
    pub fn root(&self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
        }
    }

    /// Snapshot of every entry, ordered by name.
    pub fn entries(&self) -> Vec<(String, ParamEntry)> {
        self.lock()
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().entries.keys().cloned().collect()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.lock()
            .entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().entries.get(name).map(|e| e.var.clone())
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.lock()
            .entries
            .values()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Overwrite the value of an existing entry. Shapes must agree.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::data(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(DType::F32)?)?;
        Ok(())
    }

    fn insert(&self, name: String, data: Vec<f32>, shape: &[usize], kind: ParamKind) -> Result<Var> {
        let tensor = Tensor::from_vec(data, shape, &self.device)?;
        let var = Var::from_tensor(&tensor)?;
        let mut inner = self.lock();
        if inner.entries.contains_key(&name) {
            return Err(Error::config(format!("parameter `{name}` registered twice")));
        }
        inner.entries.insert(
            name,
            ParamEntry {
                var: var.clone(),
                kind,
            },
        );
        Ok(var)
    }
}

/// Path-scoped view of a [`ParamStore`], in the spirit of a var-builder.
#[derive(Debug, Clone)]
pub struct ParamBuilder<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> ParamBuilder<'a> {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            prefix,
        }
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn draw<F: FnMut(&mut ChaCha8Rng) -> f32>(&self, n: usize, mut f: F) -> Vec<f32> {
        let mut inner = self.store.lock();
        (0..n).map(|_| f(&mut inner.rng)).collect()
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n = shape.iter().product();
        let bound = bound as f32;
        let data = self.draw(n, |rng| rng.random_range(-bound..=bound));
        self.store
            .insert(self.path(name), data, shape, ParamKind::Trainable)
    }

    /// Kaiming-uniform with ReLU gain: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    pub fn kaiming_uniform(&self, name: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        self.uniform(name, shape, (6.0 / fan_in.max(1) as f64).sqrt())
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n = shape.iter().product();
        let dist = Normal::new(0f32, std as f32)
            .map_err(|e| Error::config(format!("normal init for `{name}`: {e}")))?;
        let data = self.draw(n, |rng| dist.sample(rng));
        self.store
            .insert(self.path(name), data, shape, ParamKind::Trainable)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f32) -> Result<Var> {
        let n = shape.iter().product();
        self.store
            .insert(self.path(name), vec![value; n], shape, ParamKind::Trainable)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], value: f32) -> Result<Var> {
        let n = shape.iter().product();
        self.store
            .insert(self.path(name), vec![value; n], shape, ParamKind::Buffer)
    }
}
