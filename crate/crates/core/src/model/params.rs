//! Named parameter storage and seeded initialization.

use std::cell::Cell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// While alive, forward passes on this thread read parameters as plain
/// tensors, so no autodiff graph is recorded and intermediates are freed
/// as soon as they go out of use.
#[must_use]
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    NoGradGuard {
        prev: NO_GRAD.replace(true),
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD.set(self.prev);
    }
}

/// A parameter as seen by forward passes.
pub(crate) fn value(v: &Var) -> Tensor {
    if NO_GRAD.get() {
        v.as_tensor().detach()
    } else {
        v.as_tensor().clone()
    }
}

/// Ordered set of named learnable tensors.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
    index: BTreeMap<String, usize>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.entries.len())
            .field("scalars", &self.count())
            .finish()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, var: Var) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {name}"
            )));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, var));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        self.entries.iter().map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total learnable scalars.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Scalars grouped by the first dotted segment of each name.
    pub fn count_by_component(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.entries {
            let comp = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(comp).or_insert(0) += v.elem_count();
        }
        out
    }

    /// Snapshot of every tensor, detached from the graph.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.entries
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites every parameter from `values`, which must cover the same
    /// names with identical shapes. Nothing is written unless all checks pass.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.entries {
            let v = values
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            if v.dims() != var.dims() {
                return Err(Error::shape(
                    format!("{name} {:?}", var.dims()),
                    format!("{:?}", v.dims()),
                ));
            }
        }
        if let Some(extra) = values.keys().find(|k| !self.index.contains_key(*k)) {
            return Err(Error::InvalidArgument(format!(
                "unexpected parameter {extra}"
            )));
        }
        for (name, var) in &self.entries {
            var.set(&values[name].to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// Allocates parameters under a dotted name prefix, drawing initial values
/// from a seeded stream so that construction is reproducible.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
            prefix: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn push(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scoped<T>(
        &mut self,
        name: impl Into<String>,
        f: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T> {
        self.push(name);
        let out = f(self);
        self.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn make(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.store.insert(self.full_name(name), var.clone())?;
        Ok(var)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.make(name, shape, data)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        self.make(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.make(name, shape, vec![value; n])
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        self.make(name, shape, data)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}
