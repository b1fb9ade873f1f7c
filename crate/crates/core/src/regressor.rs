use crate::error::Result;
use crate::features::{CodeMatrix, Dataset};
use crate::madcn::MadcnModel;
use crate::numcore::Matrix;

/// Anything that maps raw dense values and categorical codes to target
/// predictions in raw units.
pub trait Regressor: Sync {
    fn name(&self) -> String;

    fn n_targets(&self) -> usize;

    /// One output row per input row.
    fn predict(&self, dense: &Matrix, codes: &CodeMatrix) -> Result<Matrix>;

    fn check_dataset(&self, _ds: &Dataset) -> Result<()> {
        Ok(())
    }

    fn predict_rows(&self, ds: &Dataset, rows: &[usize]) -> Result<Matrix> {
        self.check_dataset(ds)?;
        self.predict(&ds.dense.select_rows(rows), &ds.sparse_codes.select_rows(rows))
    }
}

impl Regressor for MadcnModel {
    fn name(&self) -> String {
        self.kind().label().to_string()
    }

    fn n_targets(&self) -> usize {
        self.schema.n_targets()
    }

    fn predict(&self, dense: &Matrix, codes: &CodeMatrix) -> Result<Matrix> {
        MadcnModel::predict(self, dense, codes)
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        MadcnModel::check_dataset(self, ds)
    }
}

/// A closure over the dense fields wrapped as a single-target regressor.
/// Categorical codes are ignored.
pub struct FnRegressor<F> {
    pub name: String,
    pub n_dense: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnRegressor<F> {
    pub fn new(name: &str, n_dense: usize, f: F) -> Self {
        Self {
            name: name.to_string(),
            n_dense,
            f,
        }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Regressor for FnRegressor<F> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn n_targets(&self) -> usize {
        1
    }

    fn predict(&self, dense: &Matrix, _codes: &CodeMatrix) -> Result<Matrix> {
        if dense.cols() != self.n_dense {
            return Err(crate::error::Error::shape("predict", self.n_dense, dense.cols()));
        }
        let out = dense.iter_rows().map(|x| (self.f)(x)).collect();
        Matrix::new(dense.rows(), 1, out)
    }
}
