//! Learnable parameter storage with a flat-index view for the optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DriftError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// How a parameter participates in optimization and gradient checking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    /// Biases, norm gains and layer scales: no weight decay.
    NoDecay,
    /// Mask logits: trained through a straight-through estimator, so finite
    /// differences see a piecewise-constant function.
    StraightThrough,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Maps a flat index to `(param, offset)`.
    pub fn locate(&self, mut flat: usize) -> Option<(ParamId, usize)> {
        for (i, e) in self.entries.iter().enumerate() {
            if flat < e.value.len() {
                return Some((ParamId(i), flat));
            }
            flat -= e.value.len();
        }
        None
    }

    pub fn get_flat(&self, flat: usize) -> f64 {
        let (id, off) = self.locate(flat).expect("flat index out of range");
        self.get(id).data()[off]
    }

    pub fn set_flat(&mut self, flat: usize, v: f64) {
        let (id, off) = self.locate(flat).expect("flat index out of range");
        self.get_mut(id).data_mut()[off] = v;
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.value.data().iter().copied()).collect()
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(DriftError::Shape(format!(
                "flat parameter vector has {} values, store has {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            e.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        self.grads[id.0].add_assign(g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(|t| t.dot(t)).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.grads {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|t| t.all_finite())
    }
}

/// Gaussian tensor with standard deviation `std`.
pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Uniform tensor on `[-a, a]`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..=a)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", ParamKind::Weight, Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        s.add("b", ParamKind::NoDecay, Tensor::new(vec![3], vec![3.0, 4.0, 5.0]).unwrap());
        s
    }

    #[test]
    fn flat_view_round_trips() {
        let mut s = store();
        assert_eq!(s.flat_len(), 5);
        assert_eq!(s.to_flat(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(s.locate(3), Some((ParamId(1), 1)));
        assert_eq!(s.locate(5), None);
        s.set_flat(4, -1.0);
        assert_eq!(s.get_flat(4), -1.0);
        let flat = vec![9.0, 8.0, 7.0, 6.0, 5.0];
        s.set_from_flat(&flat).unwrap();
        assert_eq!(s.to_flat(), flat);
        assert!(s.set_from_flat(&[1.0]).is_err());
        assert_eq!(s.find("b"), Some(ParamId(1)));
    }

    #[test]
    fn grads_norm_and_scale() {
        let s = store();
        let mut g = ParamGrads::zeros_like(&s);
        g.accumulate(ParamId(0), &Tensor::new(vec![2], vec![3.0, 0.0]).unwrap());
        g.accumulate(ParamId(1), &Tensor::new(vec![3], vec![0.0, 4.0, 0.0]).unwrap());
        assert_eq!(g.global_norm(), 5.0);
        g.scale(0.5);
        assert_eq!(g.to_flat(), vec![1.5, 0.0, 0.0, 2.0, 0.0]);
        assert!(g.all_finite());
    }

    #[test]
    fn init_helpers_are_seeded() {
        let a = normal(&mut ChaCha8Rng::seed_from_u64(1), &[4, 4], 0.1);
        let b = normal(&mut ChaCha8Rng::seed_from_u64(1), &[4, 4], 0.1);
        assert_eq!(a, b);
        let u = uniform(&mut ChaCha8Rng::seed_from_u64(2), &[100], 0.5);
        assert!(u.data().iter().all(|v| v.abs() <= 0.5));
    }
}
