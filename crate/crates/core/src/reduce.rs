//! Deterministic reductions.
//!
//! All loss terms accumulate per-pixel contributions into a vector first and
//! then reduce with [`pairwise_sum`], so the result depends only on the
//! ordered list of contributions and never on thread scheduling.

const LEAF: usize = 32;

/// Fixed-order pairwise (cascade) summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= LEAF {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Sum and count of the contributions of a masked per-pixel term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanAccumulator {
    pub sum: f64,
    pub count: usize,
}

impl MeanAccumulator {
    pub fn from_contributions(contributions: &[f64]) -> Self {
        Self {
            sum: pairwise_sum(contributions),
            count: contributions.len(),
        }
    }

    /// Mean of the contributions, zero when nothing contributed.
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}
