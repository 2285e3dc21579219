//! Fixed-capacity FIFO queue of unit-norm keys used as contrastive negatives.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{keyed, Stream};
use crate::tensor::{norm, Tensor};

const KEY_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    rows: Vec<f64>,
    cursor: usize,
    filled: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Bank(format!(
                "capacity {capacity} and dim {dim} must be positive"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            rows: vec![0.0; capacity * dim],
            cursor: 0,
            filled: 0,
        })
    }

    /// A full bank of seeded random unit vectors.
    pub fn with_random_keys(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut bank = Self::new(capacity, dim)?;
        let mut rng = keyed(seed, Stream::Bank, 0, 0);
        for r in 0..capacity {
            let row = &mut bank.rows[r * dim..(r + 1) * dim];
            loop {
                row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                let n = norm(row);
                if n > 1e-6 {
                    row.iter_mut().for_each(|v| *v /= n);
                    break;
                }
            }
        }
        bank.filled = capacity;
        Ok(bank)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Writes `keys` at the cursor, overwriting the oldest entries.
    pub fn enqueue_batch(&mut self, keys: &Tensor) -> Result<()> {
        let b = keys.rows();
        if keys.shape().len() != 2 || keys.cols() != self.dim {
            return Err(Error::Bank(format!(
                "keys of shape {:?}, bank dim {}",
                keys.shape(),
                self.dim
            )));
        }
        if !self.capacity.is_multiple_of(b) {
            return Err(Error::Bank(format!(
                "batch {b} does not divide capacity {}",
                self.capacity
            )));
        }
        for r in 0..b {
            let n = norm(keys.row(r));
            if !n.is_finite() || (n - 1.0).abs() > KEY_TOLERANCE {
                return Err(Error::NotUnitNorm { row: r, norm: n });
            }
        }
        let start = self.cursor * self.dim;
        self.rows[start..start + b * self.dim].copy_from_slice(keys.values());
        self.cursor = (self.cursor + b) % self.capacity;
        self.filled = (self.filled + b).min(self.capacity);
        Ok(())
    }

    /// Snapshot of the `filled × D` keys in storage order.
    pub fn negatives_view(&self) -> Result<Tensor> {
        if self.filled == 0 {
            return Err(Error::EmptyBank);
        }
        Ok(Tensor::matrix(
            self.filled,
            self.dim,
            self.rows[..self.filled * self.dim].to_vec(),
        ))
    }
}
