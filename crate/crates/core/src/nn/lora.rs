use ndarray::Array2;
use rand_distr::{Distribution, Normal};

use super::Param;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Residual `ΔW = A·Bᵀ` on an `m × n` weight, with `A: m × d` and `B: n × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub target: String,
    pub a: Param,
    pub b: Param,
}

impl LowRankAdapter {
    /// `A` is Gaussian and `B` starts at zero so the adapted layer is the
    /// base layer until the first update.
    pub fn new(target: &str, rows: usize, cols: usize, rank: usize, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("adapter rank must be at least 1"));
        }
        if rank > rows.min(cols) {
            return Err(Error::invalid(format!(
                "rank {rank} exceeds min dimension of {target} ({rows}x{cols})"
            )));
        }
        let normal = Normal::new(0.0f32, 1.0 / (rank as f32).sqrt()).expect("valid std");
        let a = Array2::from_shape_fn((rows, rank), |_| normal.sample(rng));
        Ok(LowRankAdapter {
            target: target.to_string(),
            a: Param::new(a),
            b: Param::zeros(cols, rank),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.value.ncols()
    }

    pub fn delta(&self) -> Array2<f32> {
        self.a.value.dot(&self.b.value.t())
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}
