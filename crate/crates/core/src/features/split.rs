use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Training-partition size: `floor(ratio · n)`, kept within `1..=n-1` so
/// neither side is empty.
pub fn train_size(n_rows: usize, ratio: f64) -> usize {
    ((ratio * n_rows as f64).floor() as usize).clamp(1, n_rows - 1)
}

/// Seeded random partition of `0..n_rows`.
pub fn split(n_rows: usize, ratio: f64, seed: u64) -> Result<SplitIndices> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    if n_rows < 2 {
        return Err(Error::Argument(format!("cannot split {n_rows} rows")));
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let test = order.split_off(train_size(n_rows, ratio));
    Ok(SplitIndices {
        train: order,
        test,
        seed,
    })
}
