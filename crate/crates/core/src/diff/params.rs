use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DiffError;
use crate::scalar::Scalar;

/// Handle to a parameter array inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter arrays plus the Adam moment accumulators.
///
/// Vectors (biases) are stored as `1 x n` matrices so every parameter shares
/// one representation.
#[derive(Debug, Clone)]
pub struct ParameterStore<S> {
    pub(crate) names: Vec<String>,
    pub(crate) values: Vec<Array2<S>>,
    index: HashMap<String, ParamId>,
    pub(crate) first_moment: Vec<Array2<S>>,
    pub(crate) second_moment: Vec<Array2<S>>,
    pub(crate) step: u64,
    rng: ChaCha8Rng,
}

impl<S: Scalar> ParameterStore<S> {
    /// Empty store; `seed` drives every subsequent initialization.
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Register a parameter with explicit initial contents.
    pub fn insert(&mut self, name: &str, value: Array2<S>) -> Result<ParamId, DiffError> {
        if self.index.contains_key(name) {
            return Err(DiffError::DuplicateParameter(name.to_string()));
        }
        let id = ParamId(self.values.len());
        let shape = value.raw_dim();
        self.names.push(name.to_string());
        self.values.push(value);
        self.first_moment.push(Array2::zeros(shape));
        self.second_moment.push(Array2::zeros(shape));
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Weight matrix `fan_in x fan_out`, uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_weight(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<ParamId, DiffError> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let value = Array2::from_shape_fn((fan_in, fan_out), |_| {
            S::lit(rng.random_range(-bound..=bound))
        });
        self.insert(name, value)
    }

    /// Zero-initialized `1 x width` bias.
    pub fn insert_bias(&mut self, name: &str, width: usize) -> Result<ParamId, DiffError> {
        self.insert(name, Array2::zeros((1, width)))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<S> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<S>)> {
        self.values
            .iter()
            .enumerate()
            .map(move |(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Copy of the store converted to another scalar type. Optimizer state is reset.
    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        let mut out = ParameterStore::<T>::new(0);
        for (_, name, v) in self.iter() {
            out.insert(name, v.mapv(|x| T::lit(x.to_f64_lossy())))
                .expect("names already unique");
        }
        out
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn load_values_from<T: Scalar>(
        &mut self,
        other: &ParameterStore<T>,
    ) -> Result<(), DiffError> {
        for (_, name, v) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| DiffError::UnknownParameter(name.to_string()))?;
            let dst = &mut self.values[id.0];
            if dst.dim() != v.dim() {
                return Err(DiffError::ShapeMismatch {
                    context: format!("loading `{name}`"),
                    expected: dst.dim(),
                    found: v.dim(),
                });
            }
            dst.zip_mut_with(v, |d, s| *d = S::lit(s.to_f64_lossy()));
        }
        Ok(())
    }
}

/// Gradient arrays indexed by [`ParamId`]; `None` means the parameter was not touched.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    pub(crate) grads: Vec<Option<Array2<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn empty(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn set(&mut self, id: ParamId, g: Array2<S>) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(g);
    }

    /// Drop the gradient of a frozen parameter.
    pub fn clear(&mut self, id: ParamId) {
        if let Some(g) = self.grads.get_mut(id.0) {
            *g = None;
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// Global L2 norm over every touched parameter.
    pub fn norm(&self) -> S {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().fold(S::zero(), |acc, &x| acc + x * x))
            .fold(S::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn scale(&mut self, factor: S) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }
}
