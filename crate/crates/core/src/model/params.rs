use ndarray::{ArrayD, IxDyn, Zip};

use crate::{Error, Real, Result};

/// A named parameter or buffer array.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray<T> {
    pub name: String,
    pub value: ArrayD<T>,
}

/// Learnable parameters plus non-learnable buffers (batch-norm running
/// statistics) of one network instance.
///
/// Student and teacher each own a `ParamStore` built from the same
/// architecture, so their structures are identical by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub params: Vec<NamedArray<T>>,
    pub buffers: Vec<NamedArray<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), buffers: Vec::new() }
    }

    pub fn from_flat(values: &[T]) -> Self {
        let mut store = ParamStore::new();
        for (i, &v) in values.iter().enumerate() {
            store.params.push(NamedArray {
                name: format!("p{i}"),
                value: ArrayD::from_elem(IxDyn(&[1]), v),
            });
        }
        store
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&ArrayD<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    /// All parameter values flattened in declaration order.
    pub fn flat_params(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    /// Errors unless `other` has the same names and shapes, in the same order.
    pub fn check_isomorphic<U>(&self, other: &ParamStore<U>) -> Result<()> {
        fn same<A, B>(kind: &str, a: &[NamedArray<A>], b: &[NamedArray<B>]) -> Result<()> {
            if a.len() != b.len() {
                return Err(Error::contract(format!(
                    "{kind} count mismatch: {} vs {}",
                    a.len(),
                    b.len()
                )));
            }
            for (x, y) in a.iter().zip(b) {
                if x.name != y.name || x.value.shape() != y.value.shape() {
                    return Err(Error::contract(format!(
                        "{kind} mismatch: {}{:?} vs {}{:?}",
                        x.name,
                        x.value.shape(),
                        y.name,
                        y.value.shape()
                    )));
                }
            }
            Ok(())
        }
        same("parameter", &self.params, &other.params)?;
        same("buffer", &self.buffers, &other.buffers)
    }

    pub fn zeros_like_params(&self) -> Vec<ArrayD<T>> {
        self.params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn copy_buffers_from(&mut self, other: &ParamStore<T>) {
        for (dst, src) in self.buffers.iter_mut().zip(&other.buffers) {
            dst.value.assign(&src.value);
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients aligned with [`ParamStore::params`].
#[derive(Debug, Clone)]
pub struct Grads<T>(pub Vec<ArrayD<T>>);

impl<T: Real> Grads<T> {
    pub fn zeros_for(store: &ParamStore<T>) -> Self {
        Grads(store.zeros_like_params())
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn accumulate(&mut self, idx: usize, delta: &ArrayD<T>) {
        Zip::from(&mut self.0[idx]).and(delta).for_each(|g, &d| *g += d);
    }
}
