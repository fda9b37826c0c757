//! Named parameter storage, initialization, and binding onto an autodiff tape.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Top-level model component a parameter belongs to, by its name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    ImageEncoder,
    PromptEncoders,
    MemoryAttention,
    MaskDecoder,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::ImageEncoder,
        Component::PromptEncoders,
        Component::MemoryAttention,
        Component::MaskDecoder,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::ImageEncoder => "encoder.",
            Component::PromptEncoders => "prompts.",
            Component::MemoryAttention => "memory.",
            Component::MaskDecoder => "decoder.",
        }
    }

    pub fn of(name: &str) -> Option<Component> {
        Component::ALL.into_iter().find(|c| name.starts_with(c.prefix()))
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::ImageEncoder => "Image encoder",
            Component::PromptEncoders => "Prompt encoders",
            Component::MemoryAttention => "Memory attention",
            Component::MaskDecoder => "Mask decoder",
        })
    }
}

/// Flat map of dotted parameter names to tensors.
///
/// Buffers (fixed random projections) live in the same map but are never trained
/// and are not counted as parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    buffers: BTreeSet<String>,
    /// Number of optimizer steps these parameters have received.
    pub trained_steps: u64,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.buffers.insert(name.clone());
        self.tensors.insert(name, t);
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.buffers.contains(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Trainable parameters only (buffers excluded).
    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter().filter(|(k, _)| !self.buffers.contains(*k))
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().map(|(_, t)| t.numel()).sum()
    }

    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.tensors.retain(|k, _| keep(k));
        self.buffers.retain(|k| keep(k));
    }

    /// Merges every tensor of `other` into `self`, overwriting on name clashes.
    pub fn extend(&mut self, other: ParamStore) {
        for (k, v) in other.tensors {
            self.tensors.insert(k, v);
        }
        self.buffers.extend(other.buffers);
    }

    pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(name_seed(seed, name))
    }

    /// Uniform `±1/sqrt(fan_in)` weights `[fan_in, fan_out]` plus zero bias `[fan_out]`.
    pub fn init_linear(&mut self, seed: u64, name: &str, fan_in: usize, fan_out: usize) {
        let w = format!("{name}.weight");
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = Self::rng_for(seed, &w);
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(w, Tensor::from_parts(vec![fan_in, fan_out], data));
        self.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    }

    pub fn init_linear_zero(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.insert(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]));
        self.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    }

    pub fn init_layer_norm(&mut self, name: &str, dim: usize) {
        self.insert(format!("{name}.weight"), Tensor::full(&[dim], 1.0));
        self.insert(format!("{name}.bias"), Tensor::zeros(&[dim]));
    }

    pub fn init_normal(&mut self, seed: u64, name: &str, shape: &[usize], std: f64) {
        self.insert(name, normal_tensor(seed, name, shape, std));
    }

    /// Overwrites every value; used by tests and ablations.
    pub fn fill(&mut self, name: &str, value: f64) -> Result<()> {
        let t = self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.into()))?;
        t.data_mut().iter_mut().for_each(|x| *x = value);
        Ok(())
    }

    /// Rounds every tensor to `f32` precision so checkpoint round trips are exact.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            *t = t.round_to_f32();
        }
    }

    /// Checks that `self` has exactly the names and shapes of `reference`.
    pub fn check_layout(&self, reference: &ParamStore) -> Result<()> {
        for (k, t) in &reference.tensors {
            match self.tensors.get(k) {
                None => return Err(Error::MissingParam(k.clone())),
                Some(s) if s.shape() != t.shape() => {
                    return Err(Error::Shape(format!(
                        "parameter {k:?}: expected {:?}, found {:?}",
                        t.shape(),
                        s.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !reference.tensors.contains_key(*k)) {
            return Err(Error::Archive(format!("unexpected parameter {extra:?}")));
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        for (k, t) in &self.tensors {
            a.put_tensor(k.clone(), t);
        }
        a.put_meta("buffers", self.buffers.iter().cloned().collect::<Vec<_>>().join(","));
        a.put_meta("trained_steps", self.trained_steps.to_string());
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let mut out = ParamStore::new();
        for name in a.entries.keys() {
            out.tensors.insert(name.clone(), a.tensor(name)?);
        }
        if let Ok(b) = a.meta("buffers") {
            out.buffers = b.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
        }
        out.trained_steps = a
            .meta("trained_steps")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

pub fn normal_tensor(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    let mut rng = ParamStore::rng_for(seed, name);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Binds parameters onto a tape lazily, one leaf per name.
pub struct Binder<'p, 't> {
    store: &'p ParamStore,
    tape: &'t Tape,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
    vars: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'p, 't> Binder<'p, 't> {
    /// All non-buffer parameters require gradients.
    pub fn new(store: &'p ParamStore, tape: &'t Tape) -> Self {
        Self::with_trainable(store, tape, |_| true)
    }

    /// Nothing requires gradients.
    pub fn frozen(store: &'p ParamStore, tape: &'t Tape) -> Self {
        Self::with_trainable(store, tape, |_| false)
    }

    pub fn with_trainable(
        store: &'p ParamStore,
        tape: &'t Tape,
        trainable: impl Fn(&str) -> bool + 'p,
    ) -> Self {
        Self { store, tape, trainable: Box::new(trainable), vars: RefCell::new(BTreeMap::new()) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Leaf for `name`. Panics when the parameter is absent: layouts are validated
    /// against the configuration before any forward pass.
    pub fn var(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} missing from store"));
        let grad = !self.store.is_buffer(name) && (self.trainable)(name);
        let v = self.tape.leaf(t.clone(), grad);
        self.vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn scope(&self, prefix: impl Into<String>) -> Scope<'_, 'p, 't> {
        Scope { binder: self, prefix: prefix.into() }
    }

    /// Gradients for every bound parameter that required one.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// A name prefix within a [`Binder`].
#[derive(Clone)]
pub struct Scope<'b, 'p, 't> {
    binder: &'b Binder<'p, 't>,
    prefix: String,
}

impl<'b, 'p, 't> Scope<'b, 'p, 't> {
    pub fn sub(&self, name: &str) -> Scope<'b, 'p, 't> {
        Scope { binder: self.binder, prefix: format!("{}.{}", self.prefix, name) }
    }

    pub fn var(&self, name: &str) -> Var<'t> {
        self.binder.var(&format!("{}.{}", self.prefix, name))
    }

    pub fn has(&self, name: &str) -> bool {
        self.binder.store.contains(&format!("{}.{}", self.prefix, name))
    }

    pub fn tape(&self) -> &'t Tape {
        self.binder.tape
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_independent_of_insertion_order() {
        let mut a = ParamStore::new();
        a.init_linear(3, "x.l", 4, 2);
        a.init_linear(3, "y.l", 4, 2);
        let mut b = ParamStore::new();
        b.init_linear(3, "y.l", 4, 2);
        b.init_linear(3, "x.l", 4, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn archive_round_trip_keeps_buffers_and_steps() {
        let mut a = ParamStore::new();
        a.init_linear(1, "encoder.l", 3, 3);
        a.insert_buffer("prompts.g", normal_tensor(1, "g", &[3, 2], 1.0));
        a.trained_steps = 7;
        a.round_to_f32();
        let b = ParamStore::from_archive(&Archive::from_bytes(&a.to_archive().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(b.is_buffer("prompts.g"));
        assert_eq!(b.num_params(), 12);
    }

    #[test]
    fn component_by_prefix() {
        assert_eq!(Component::of("memory.x.weight"), Some(Component::MemoryAttention));
        assert_eq!(Component::of("other"), None);
    }
}
