//! Sparse linear layers as an explicit coordinate mask plus a weight vector.
//!
//! The mask is sampled once (without replacement) from a seeded RNG and then
//! fixed for the life of the layer; training only ever touches the weight
//! values, so the mask is stored separately and shared by reference.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

/// Fixed sparsity pattern: a sorted list of `(row, col)` coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseMask {
    pub rows: usize,
    pub cols: usize,
    /// Sorted by `(row, col)`; one weight per entry, in this order.
    pub entries: Vec<(u32, u32)>,
}

impl SparseMask {
    /// Samples `round(density * rows * cols)` distinct coordinates.
    pub fn sample(rows: usize, cols: usize, density: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&density) {
            return Err(CoreError::Invalid(format!("density {density} outside [0, 1]")));
        }
        let total = rows * cols;
        let count = (density * total as f64).round() as usize;
        if count > total {
            return Err(CoreError::Invalid("mask larger than the layer".into()));
        }
        let mut picked = std::collections::HashSet::with_capacity(count);
        let mut entries = Vec::with_capacity(count);
        while entries.len() < count {
            let flat = rng.gen_range(0..total);
            if picked.insert(flat) {
                entries.push(((flat / cols) as u32, (flat % cols) as u32));
            }
        }
        entries.sort_unstable();
        Ok(SparseMask { rows, cols, entries })
    }

    pub fn from_entries(rows: usize, cols: usize, entries: Vec<(u32, u32)>) -> Result<Self> {
        for &(r, c) in &entries {
            if r as usize >= rows || c as usize >= cols {
                return Err(CoreError::Invalid(format!(
                    "mask entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
        }
        let mut sorted = entries.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != entries.len() {
            return Err(CoreError::Invalid("duplicate mask entries".into()));
        }
        Ok(SparseMask { rows, cols, entries: sorted })
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

/// A sparse linear map `y = W x` with storage only for masked weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseLinear {
    pub mask: std::sync::Arc<SparseMask>,
    pub weights: Vec<f64>,
}

impl SparseLinear {
    pub fn new(mask: SparseMask, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != mask.entries.len() {
            return Err(CoreError::Invalid(format!(
                "{} weights for {} mask entries",
                weights.len(),
                mask.entries.len()
            )));
        }
        Ok(SparseLinear { mask: std::sync::Arc::new(mask), weights })
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.mask.cols);
        debug_assert_eq!(out.len(), self.mask.rows);
        out.fill(0.0);
        for (w, &(r, c)) in self.weights.iter().zip(&self.mask.entries) {
            out[r as usize] += w * x[c as usize];
        }
    }

    /// Dense `rows x cols` materialization, for tests and inspection.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.mask.rows * self.mask.cols];
        for (w, &(r, c)) in self.weights.iter().zip(&self.mask.entries) {
            dense[r as usize * self.mask.cols + c as usize] = *w;
        }
        dense
    }
}
