use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::Array;
use crate::error::{Error, Result};

/// Handle to one parameter array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter arrays with gradient accumulators and per-group freezing.
///
/// A parameter's group is the prefix of its name up to the first `.`
/// (`enc.in.w` belongs to `enc`). Frozen groups never receive accumulated
/// gradient.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    accum: Vec<Array>,
    index: BTreeMap<String, usize>,
    frozen: BTreeSet<String>,
}

/// Per-parameter gradient buffers produced by one backward pass.
///
/// Independent backward passes each fill their own `Grads`; they are merged
/// by summation before being accumulated into the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    bufs: Vec<Vec<f64>>,
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Array) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid {
                op: "ParamStore::register",
                detail: format!("duplicate parameter `{name}`"),
            });
        }
        let id = self.names.len();
        self.accum.push(Array::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Registers a `fan_in x fan_out` weight with Glorot-uniform init.
    pub fn register_weight<R: Rng>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-a..a))
            .collect();
        self.register(name, Array::from_vec(&[fan_in, fan_out], data)?)
    }

    pub fn register_filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.register(name, Array::filled(shape, value))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn accum(&self, id: ParamId) -> &Array {
        &self.accum[id.0]
    }

    /// Parameter names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.names.iter().map(|n| group_of(n).to_string()).collect()
    }

    pub fn freeze_group(&mut self, group: &str) {
        self.frozen.insert(group.to_string());
        for i in 0..self.names.len() {
            if group_of(&self.names[i]) == group {
                self.accum[i].scale(0.0);
            }
        }
    }

    pub fn freeze_all(&mut self) {
        for g in self.groups() {
            self.freeze_group(&g);
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(group_of(&self.names[id.0]))
    }

    pub fn all_frozen(&self) -> bool {
        !self.names.is_empty() && self.ids().all(|id| self.is_frozen(id))
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            bufs: self.values.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    /// Adds `grads` into the accumulators of every non-frozen parameter.
    pub fn accumulate(&mut self, grads: &Grads) {
        debug_assert_eq!(grads.bufs.len(), self.accum.len());
        for i in 0..self.accum.len() {
            if self.is_frozen(ParamId(i)) {
                continue;
            }
            for (a, g) in self.accum[i].data_mut().iter_mut().zip(&grads.bufs[i]) {
                *a += g;
            }
        }
    }

    pub fn zero_accum(&mut self) {
        for a in &mut self.accum {
            a.scale(0.0);
        }
    }

    pub fn accum_norm(&self) -> f64 {
        self.accum
            .iter()
            .flat_map(|a| a.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn scale_accum(&mut self, s: f64) {
        for a in &mut self.accum {
            a.scale(s);
        }
    }

    /// Sorted `(name, value)` view, the on-disk ordering.
    pub fn named_values(&self) -> BTreeMap<String, Array> {
        self.index
            .iter()
            .map(|(n, &i)| (n.clone(), self.values[i].clone()))
            .collect()
    }

    /// Copies every parameter whose name appears in `values`; returns the
    /// copied names in sorted order. A shared name with a different shape is
    /// an error and leaves the store untouched.
    pub fn load_shared(&mut self, values: &BTreeMap<String, Array>) -> Result<Vec<String>> {
        for (name, &i) in &self.index {
            if let Some(v) = values.get(name) {
                if v.shape() != self.values[i].shape() {
                    return Err(Error::Incompatible {
                        name: name.clone(),
                        detail: format!("shape {:?} vs expected {:?}", v.shape(), self.values[i].shape()),
                    });
                }
            }
        }
        let mut copied = Vec::new();
        for (name, &i) in &self.index {
            if let Some(v) = values.get(name) {
                self.values[i] = v.clone();
                copied.push(name.clone());
            }
        }
        Ok(copied)
    }

    /// Overwrites every parameter from `values`; every name must be present
    /// with a matching shape.
    pub fn load_values(&mut self, values: &BTreeMap<String, Array>) -> Result<()> {
        for (name, &i) in &self.index {
            let v = values
                .get(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if v.shape() != self.values[i].shape() {
                return Err(Error::Incompatible {
                    name: name.clone(),
                    detail: format!(
                        "shape {:?} vs expected {:?}",
                        v.shape(),
                        self.values[i].shape()
                    ),
                });
            }
            self.values[i] = v.clone();
        }
        Ok(())
    }
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.bufs[id.0]
    }

    pub fn add_to(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.bufs[id.0].iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.bufs {
            for x in b.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn is_zero(&self, id: ParamId) -> bool {
        self.bufs[id.0].iter().all(|&g| g == 0.0)
    }
}
