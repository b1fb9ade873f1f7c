use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::CodeMatrix;
use crate::numcore::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Euclidean,
}

/// Stored training rows for nearest-neighbor averaging.
///
/// Categorical fields are kept as codes. Their contribution to the squared
/// distance is 2 per mismatching field, which is exactly what one-hot columns
/// would contribute, without materializing them.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    pub train_features: Matrix,
    pub train_codes: CodeMatrix,
    pub train_targets: Matrix,
    pub distance: Distance,
}

impl KnnModel {
    pub fn new(k: usize, train_features: Matrix, train_codes: CodeMatrix, train_targets: Matrix) -> Result<Self> {
        let n = train_features.rows();
        if train_codes.rows() != n || train_targets.rows() != n {
            return Err(Error::shape(
                "knn",
                train_features.shape(),
                format!(
                    "codes {}x{} / targets {}",
                    train_codes.rows(),
                    train_codes.cols(),
                    train_targets.shape()
                ),
            ));
        }
        if k == 0 || k > n {
            return Err(Error::Argument(format!("k must lie in 1..={n}, got {k}")));
        }
        Ok(Self {
            k,
            train_features,
            train_codes,
            train_targets,
            distance: Distance::Euclidean,
        })
    }

    fn squared_distance(&self, row: usize, features: &[f64], codes: &[usize]) -> f64 {
        let dense: f64 = self
            .train_features
            .row(row)
            .iter()
            .zip(features)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let mismatches = self
            .train_codes
            .row(row)
            .iter()
            .zip(codes)
            .filter(|(a, b)| a != b)
            .count();
        dense + 2.0 * mismatches as f64
    }

    /// Mean target of the `k` nearest stored rows; equal distances go to the
    /// lower row index.
    pub fn predict_one(&self, features: &[f64], codes: &[usize]) -> Result<Vec<f64>> {
        if features.len() != self.train_features.cols() || codes.len() != self.train_codes.cols() {
            return Err(Error::shape(
                "knn query",
                format!(
                    "{} features / {} codes",
                    self.train_features.cols(),
                    self.train_codes.cols()
                ),
                format!("{} features / {} codes", features.len(), codes.len()),
            ));
        }
        let mut order: Vec<(f64, usize)> = (0..self.train_features.rows())
            .map(|r| (self.squared_distance(r, features, codes), r))
            .collect();
        let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < order.len() {
            order.select_nth_unstable_by(self.k - 1, by_distance);
            order.truncate(self.k);
        }
        order.sort_unstable_by_key(|&(_, r)| r);

        let t = self.train_targets.cols();
        let mut mean = vec![0.0; t];
        for &(_, r) in &order {
            for (m, y) in mean.iter_mut().zip(self.train_targets.row(r)) {
                *m += y;
            }
        }
        for m in &mut mean {
            *m /= self.k as f64;
        }
        Ok(mean)
    }

    /// One prediction row per query row, computed in parallel.
    pub fn predict(&self, features: &Matrix, codes: &CodeMatrix) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = (0..features.rows())
            .into_par_iter()
            .map(|i| self.predict_one(features.row(i), codes.row(i)))
            .collect::<Result<_>>()?;
        let mut out = Matrix::zeros(features.rows(), self.train_targets.cols());
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(r);
        }
        Ok(out)
    }
}

/// Prediction for a query without categorical fields.
pub fn knn_predict(model: &KnnModel, query: &[f64]) -> Result<Vec<f64>> {
    model.predict_one(query, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(k: usize) -> KnnModel {
        // distances from the origin: 1, 3, 2
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 3.0], [0.0, -2.0]]).unwrap();
        let y = Matrix::from_rows(&[[10.0], [30.0], [20.0]]).unwrap();
        KnnModel::new(k, x, CodeMatrix::zeros(3, 0), y).unwrap()
    }

    #[test]
    fn two_nearest_of_three() {
        assert_eq!(knn_predict(&fixture(2), &[0.0, 0.0]).unwrap(), vec![15.0]);
    }

    #[test]
    fn k_one_returns_stored_target() {
        let m = fixture(1);
        for r in 0..3 {
            let q = m.train_features.row(r).to_vec();
            assert_eq!(knn_predict(&m, &q).unwrap()[0], m.train_targets[(r, 0)]);
        }
    }

    #[test]
    fn k_all_is_the_global_mean() {
        assert_eq!(knn_predict(&fixture(3), &[5.0, -7.0]).unwrap(), vec![20.0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let x = Matrix::from_rows(&[[1.0], [-1.0], [1.0]]).unwrap();
        let y = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let m = KnnModel::new(1, x, CodeMatrix::zeros(3, 0), y).unwrap();
        assert_eq!(knn_predict(&m, &[0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn code_mismatch_counts_like_one_hot() {
        // one-hot distance between different categories is √2
        let x = Matrix::from_rows(&[[0.0], [1.2]]).unwrap();
        let codes = CodeMatrix::from_rows(1, &[[1], [0]]).unwrap();
        let y = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let m = KnnModel::new(1, x, codes, y).unwrap();
        assert_eq!(m.predict_one(&[0.0], &[0]).unwrap(), vec![2.0]);
        assert_eq!(m.predict_one(&[0.0], &[1]).unwrap(), vec![1.0]);
    }

    #[test]
    fn invalid_k() {
        let x = Matrix::zeros(2, 1);
        let y = Matrix::zeros(2, 1);
        assert!(KnnModel::new(0, x.clone(), CodeMatrix::zeros(2, 0), y.clone()).is_err());
        assert!(KnnModel::new(3, x, CodeMatrix::zeros(2, 0), y).is_err());
    }
}
