//! Named trainable tensors and gradient buffers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Role of a parameter tensor. Only `Matrix` parameters enter the L2
/// penalty; embeddings and biases are exempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Matrix,
    Bias,
    Embedding,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered collection of named parameters. Insertion order is the canonical
/// order used for gradient reduction, optimizer state and checkpoints, so
/// construction must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let index = self.entries.len();
        self.by_name.insert(name.clone(), index);
        self.entries.push(ParamEntry { name, kind, value });
        index
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, index: usize) -> &ParamEntry {
        &self.entries[index]
    }

    pub fn value(&self, index: usize) -> &Tensor {
        &self.entries[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Sum of squared entries over `Matrix` parameters.
    pub fn l2_penalty(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Matrix)
            .map(|e| e.value.sum_squares())
            .sum()
    }
}

/// Per-parameter gradient accumulator, parallel to a `ParamSet`.
#[derive(Debug, Clone)]
pub struct GradBuf {
    slots: Vec<Vec<f64>>,
}

impl GradBuf {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradBuf { slots: params.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect() }
    }

    pub fn slot(&self, index: usize) -> &[f64] {
        &self.slots[index]
    }

    pub fn slot_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.slots[index]
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Accumulate `other` into `self`, element by element.
    pub fn add_assign(&mut self, other: &GradBuf) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for slot in &mut self.slots {
            for x in slot.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_skips_biases_and_embeddings() {
        let mut p = ParamSet::new();
        p.add("w", ParamKind::Matrix, Tensor::vector(vec![2.0, 1.0]));
        p.add("b", ParamKind::Bias, Tensor::vector(vec![10.0]));
        p.add("e", ParamKind::Embedding, Tensor::vector(vec![10.0]));
        assert_eq!(p.l2_penalty(), 5.0);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_panic() {
        let mut p = ParamSet::new();
        p.add("w", ParamKind::Matrix, Tensor::scalar(0.0));
        p.add("w", ParamKind::Matrix, Tensor::scalar(0.0));
    }

    #[test]
    fn gradbuf_norm_and_reduce() {
        let mut p = ParamSet::new();
        p.add("w", ParamKind::Matrix, Tensor::vector(vec![0.0, 0.0]));
        let mut a = GradBuf::zeros_like(&p);
        a.slot_mut(0)[0] = 3.0;
        a.slot_mut(0)[1] = 4.0;
        assert_eq!(a.global_norm(), 5.0);
        let b = a.clone();
        a.add_assign(&b);
        assert_eq!(a.slot(0), &[6.0, 8.0]);
        a.scale(0.5);
        assert_eq!(a.slot(0), &[3.0, 4.0]);
    }
}
