use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::{Float, NnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable matrices.
///
/// Names are dot-separated paths (`encoder.blocks.0.attn.wq.weight`), which
/// makes prefix-scoped freezing and checksumming straightforward.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Float> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<ParamId> {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: f64) -> Result<ParamId> {
        self.add(name, Array2::from_elem((rows, cols), F::lit(value)))
    }

    pub fn normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut R) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let value = Array2::from_shape_simple_fn((rows, cols), || F::lit(dist.sample(rng)));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over names, shapes and values (as little-endian `f64`) of
    /// every parameter whose name starts with `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for id in self.ids_with_prefix(prefix) {
            let v = self.get(id);
            hasher.update(self.name(id).as_bytes());
            hasher.update((v.nrows() as u64).to_le_bytes());
            hasher.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                hasher.update(x.as_f64().to_le_bytes());
            }
        }
        hex_digest(hasher)
    }

    /// Converts every value to another scalar type, keeping names and ids.
    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| G::lit(x.as_f64()))).collect(),
            index: self.index.clone(),
        }
    }

    /// Copies all values from `other`, which must hold the same names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let Some(&src) = other.index.get(name) else {
                return Err(NnError::UnknownParam(name.clone()));
            };
            let src = &other.values[src.0];
            if src.dim() != self.values[i].dim() {
                return Err(NnError::ShapeMismatch {
                    name: name.clone(),
                    expected: self.values[i].dim(),
                    found: src.dim(),
                });
            }
            self.values[i].assign(src);
        }
        Ok(())
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Gradients indexed by [`ParamId`]; `None` means "no gradient reached it".
#[derive(Clone, Debug)]
pub struct ParamGrads<F: Float> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Float> ParamGrads<F> {
    pub fn new(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Array2<F>) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &ParamGrads<F>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: F) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * c);
        }
    }

    /// Drops gradients for parameters outside `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *g = None;
            }
        }
    }

    pub fn norm_of(&self, ids: impl IntoIterator<Item = ParamId>) -> f64 {
        ids.into_iter()
            .filter_map(|id| self.get(id))
            .map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn global_norm(&self) -> f64 {
        self.norm_of((0..self.grads.len()).map(ParamId))
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(F::lit(max_norm / norm));
        }
        norm
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<F>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.zeros("a", 1, 1).unwrap();
        assert!(matches!(store.zeros("a", 2, 2), Err(NnError::DuplicateParam(_))));
    }

    #[test]
    fn checksum_is_prefix_scoped() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("text.w", array![[1.0, 2.0]]).unwrap();
        let b = store.add("vision.w", array![[3.0]]).unwrap();
        let before = store.checksum("text.");
        store.get_mut(b)[[0, 0]] = 4.0;
        assert_eq!(before, store.checksum("text."));
        store.get_mut(a)[[0, 1]] = 2.5;
        assert_ne!(before, store.checksum("text."));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut grads = ParamGrads::<f64>::new(2);
        grads.accumulate(ParamId(0), &array![[3.0]]);
        grads.accumulate(ParamId(1), &array![[4.0]]);
        let before = grads.clip_global_norm(1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
