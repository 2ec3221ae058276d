use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

fn fresh_store_id() -> u64 {
    NEXT_STORE.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named learnable tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real = f64> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Owns every parameter of one model. Each store carries a process-unique id so a tape
/// can route gradients back to the store that produced a leaf.
#[derive(Debug)]
pub struct ParamStore<T: Real = f64> {
    id: u64,
    params: Vec<Parameter<T>>,
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            id: fresh_store_id(),
            params: self.params.clone(),
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
            id: fresh_store_id(),
            params: Vec::new(),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Gaussian init with standard deviation `1/sqrt(rows)` (fan-in of a `x · W` layer).
    pub fn add_randn(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(rows, cols, |_, _| T::from_f64c(normal.sample(rng)));
        self.add(name, t, trainable)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds gradients produced by a tape. Entries belonging to other stores are ignored and
    /// frozen parameters never change.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (store, id, g) in &grads.entries {
            if *store != self.id {
                continue;
            }
            let p = &mut self.params[id.0];
            if p.trainable {
                p.grad.add_assign(g);
            }
        }
    }

    /// SHA-256 over names, shapes and the little-endian value bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                h.update(v.to_f64c().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            id: fresh_store_id(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Overwrites values from `(name, tensor)` pairs; every parameter must be covered.
    pub fn load_values(&mut self, values: &[(String, Tensor<T>)]) -> Result<()> {
        for p in &mut self.params {
            let (_, v) = values
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Format(format!("missing parameter {}", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "load_values",
                    lhs: p.value.shape(),
                    rhs: v.shape(),
                });
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

/// Gradients for parameter leaves, keyed by owning store.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Real = f64> {
    pub(crate) entries: Vec<(u64, ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Gradient for `id` in `store`, if the tape produced one.
    pub fn get(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|(s, p, _)| *s == store.id() && *p == id)
            .map(|(_, _, g)| g)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
