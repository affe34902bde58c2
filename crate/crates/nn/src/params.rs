//! Named parameter storage and initializers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to one parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered set of uniquely named parameters.
///
/// Each store carries a process-unique id so a [`crate::Graph`] can tell
/// parameters of different stores apart.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter name `{name}`")));
        }
        if !tensor.is_finite() {
            return Err(NnError::NumericFailure { op: "param-init" });
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, tensor });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Replace the value of `name`; the shape must match.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| invalid(format!("unknown parameter `{name}`")))?;
        let slot = &mut self.params[id.0].tensor;
        if slot.shape() != tensor.shape() {
            return Err(invalid(format!(
                "shape mismatch for `{name}`: {:?} vs {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    /// Copy every parameter of `other` whose name exists here.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &other.params {
            if self.by_name.contains_key(&p.name) {
                self.set(&p.name, p.tensor.clone())?;
            }
        }
        Ok(())
    }

    /// Same parameter set in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.tensor.cast())
                .expect("names already unique");
        }
        out
    }

    /// Order-dependent FNV-1a hash over names, shapes and raw value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for d in p.tensor.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                eat(&v.f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Uniform in `[-bound, bound]`.
pub fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}

/// Normal with the given standard deviation, truncated at two deviations.
pub fn trunc_normal<T: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        // Box-Muller
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}
