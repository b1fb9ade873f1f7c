//! Generators for synthetic panels with known target functions.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::features::{CategoryMaps, CodeMatrix, Dataset, FeatureSchema, RowKey};
use crate::numcore::Matrix;
use crate::seeds::rng_from_seed;

/// Three dense inputs `x1, x2, x3`, target `y`, no categorical fields.
pub fn interaction_schema() -> FeatureSchema {
    FeatureSchema::new(&[("x1", ""), ("x2", ""), ("x3", "")], &[], &["y"], "id", "year").expect("valid schema")
}

/// `n` rows of `y = f(x) + N(0, noise_sd²)` with every `x_j ~ U(-1, 1)`.
pub fn generate(schema: &FeatureSchema, n: usize, noise_sd: f64, seed: u64, f: impl Fn(&[f64]) -> f64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let noise = Normal::new(0.0, noise_sd).expect("finite noise");
    let m = schema.n_dense();
    let mut dense = Matrix::zeros(n, m);
    let mut targets = Matrix::zeros(n, 1);
    for i in 0..n {
        for v in dense.row_mut(i) {
            *v = rng.random_range(-1.0..1.0);
        }
        targets[(i, 0)] = f(dense.row(i)) + noise.sample(&mut rng);
    }
    Dataset {
        schema: schema.clone(),
        dense,
        sparse_codes: CodeMatrix::zeros(n, 0),
        targets,
        row_keys: (0..n)
            .map(|i| RowKey {
                id: format!("s{i}"),
                year: (2009 + i % 13).to_string(),
            })
            .collect(),
        category_maps: CategoryMaps::new(),
    }
}

/// `y = 3·x1 + 2·x2·x3 + N(0, 0.01)`.
pub fn interaction_dataset(n: usize, seed: u64) -> Dataset {
    generate(&interaction_schema(), n, 0.1, seed, |x| 3.0 * x[0] + 2.0 * x[1] * x[2])
}
