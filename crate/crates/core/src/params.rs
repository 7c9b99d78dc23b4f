use alloc::collections::BTreeMap;
use num_traits::Float;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-parameter optimizer buffers, allocated on first use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub max_second_moment: Vec<T>,
    pub velocity: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Set once a backward pass has written this entry's gradient.
    pub has_grad: bool,
    /// Buffers (running statistics, counters) are saved with the model but
    /// never touched by optimizers or counted as parameters.
    pub trainable: bool,
    pub state: OptimizerState<T>,
}

/// Named parameter tensors with gradient buffers and optimizer state.
///
/// Entries iterate in insertion order. The store also owns the seeded
/// generator used for initialization, so the same build sequence always
/// yields the same weights.
#[derive(Debug, Clone)]
pub struct ParameterStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, usize>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<T: Real> ParameterStore<T> {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
            has_grad: false,
            trainable,
            state: OptimizerState::default(),
        });
        let id = self.entries.len() - 1;
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    /// He-normal initialized parameter: `N(0, 2 / fan_in)`.
    pub fn add_he_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let std = Float::sqrt(2.0 / fan_in.max(1) as f64);
        self.add_normal(name, shape, std)
    }

    /// Glorot-normal initialized parameter: `N(0, 2 / (fan_in + fan_out))`.
    pub fn add_glorot_normal(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let std = Float::sqrt(2.0 / (fan_in + fan_out).max(1) as f64);
        self.add_normal(name, shape, std)
    }

    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("{e:?}")))?;
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)));
        self.add_param(name, value)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.value(id))
    }

    /// Replaces the value of an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("`{name}` has shape {:?}, got {:?}", entry.value.shape(), value.shape()),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.grad.len() != grad.len() {
            return Err(Error::shape("accumulate_grad", format!("`{}` gradient length mismatch", entry.name)));
        }
        for (a, &b) in entry.grad.data_mut().iter_mut().zip(grad) {
            *a += b;
        }
        entry.has_grad = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
            e.has_grad = false;
        }
    }

    /// Number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// FNV-1a over names, shapes and value bits of every entry.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for e in &self.entries {
            h.write(e.name.as_bytes());
            for &d in e.value.shape() {
                h.write(&(d as u64).to_le_bytes());
            }
            let mut bytes = Vec::with_capacity(e.value.len() * T::DTYPE.size());
            for &v in e.value.data() {
                v.write_le(&mut bytes);
            }
            h.write(&bytes);
        }
        h.finish()
    }

    /// Same entries at another precision. Gradients and optimizer state are
    /// reset; ids stay valid.
    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: Tensor::zeros(e.value.shape()),
                    has_grad: false,
                    trainable: e.trainable,
                    state: OptimizerState::default(),
                })
                .collect(),
            index: self.index.clone(),
            seed: self.seed,
            rng: self.rng.clone(),
        }
    }

    /// Copies every value whose name and shape match from `other`.
    /// Returns the names of entries that were not found or did not match.
    pub fn load_matching(&mut self, other: &ParameterStore<T>) -> Vec<String> {
        let mut mismatched = vec![];
        for e in &mut self.entries {
            match other.get(&e.name) {
                Some(v) if v.shape() == e.value.shape() => e.value = v.clone(),
                _ => mismatched.push(e.name.clone()),
            }
        }
        mismatched
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_iteration_order() {
        let mut s = ParameterStore::<f32>::new(1);
        for name in ["z", "a", "m"] {
            s.add_param(name, Tensor::zeros(&[2])).unwrap();
        }
        let names: Vec<_> = s.entries().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["z", "a", "m"]);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParameterStore::<f32>::new(1);
        s.add_param("w", Tensor::zeros(&[1])).unwrap();
        assert!(s.add_param("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn same_seed_same_init() {
        let build = || {
            let mut s = ParameterStore::<f64>::new(9);
            s.add_he_normal("w", &[4, 4], 4).unwrap();
            s
        };
        assert_eq!(build().checksum(), build().checksum());
        let mut other = ParameterStore::<f64>::new(10);
        other.add_he_normal("w", &[4, 4], 4).unwrap();
        assert_ne!(build().checksum(), other.checksum());
    }

    #[test]
    fn gradient_buffers_match_parameter_shapes() {
        let mut s = ParameterStore::<f32>::new(0);
        s.add_he_normal("w", &[3, 5, 2], 15).unwrap();
        s.add_buffer("running", Tensor::ones(&[2])).unwrap();
        for e in s.entries() {
            assert_eq!(e.grad.shape(), e.value.shape());
        }
        assert_eq!(s.count_params(), 30);
    }
}
