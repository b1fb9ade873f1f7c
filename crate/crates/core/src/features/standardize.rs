use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub name: String,
    pub mu: f64,
    /// Population standard deviation; zero for constant fields.
    pub sigma: f64,
    pub constant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizerStats {
    pub fields: Vec<FieldStats>,
}

impl StandardizerStats {
    /// Mean and population standard deviation of each dense column over
    /// `rows`. A column whose values on `rows` are all equal is flagged
    /// constant.
    pub fn fit(ds: &Dataset, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Argument("cannot fit a standardizer on zero rows".into()));
        }
        let n = rows.len() as f64;
        let fields = ds
            .schema
            .dense_fields
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let values = rows.iter().map(|&r| ds.dense[(r, j)]);
                let first = ds.dense[(rows[0], j)];
                let constant = values.clone().all(|v| v == first);
                let mu = values.clone().sum::<f64>() / n;
                let sigma = if constant {
                    0.0
                } else {
                    (values.map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt()
                };
                FieldStats {
                    name: f.name.clone(),
                    mu: if constant { first } else { mu },
                    sigma,
                    constant,
                }
            })
            .collect();
        Ok(Self { fields })
    }

    /// Identity transform for `names` (μ = 0, σ = 1).
    pub fn identity<S: AsRef<str>>(names: &[S]) -> Self {
        Self {
            fields: names
                .iter()
                .map(|n| FieldStats {
                    name: n.as_ref().to_string(),
                    mu: 0.0,
                    sigma: 1.0,
                    constant: false,
                })
                .collect(),
        }
    }

    pub fn check_schema(&self, ds: &Dataset) -> Result<()> {
        let matches = self.fields.len() == ds.schema.n_dense()
            && self
                .fields
                .iter()
                .zip(&ds.schema.dense_fields)
                .all(|(s, f)| s.name == f.name);
        if matches {
            Ok(())
        } else {
            Err(Error::Schema(
                "standardizer fields do not match the dataset's dense fields".into(),
            ))
        }
    }

    #[inline]
    pub fn standardize_value(&self, j: usize, x: f64) -> f64 {
        let s = &self.fields[j];
        if s.constant {
            0.0
        } else {
            (x - s.mu) / s.sigma
        }
    }

    /// Derivative of the standardized value with respect to the raw value.
    #[inline]
    pub fn scale_factor(&self, j: usize) -> f64 {
        let s = &self.fields[j];
        if s.constant {
            0.0
        } else {
            1.0 / s.sigma
        }
    }

    pub fn standardize(&self, dense: &Matrix) -> Result<Matrix> {
        if dense.cols() != self.fields.len() {
            return Err(Error::shape("standardize", dense.shape(), self.fields.len()));
        }
        let mut out = dense.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = self.standardize_value(j, *v);
            }
        }
        Ok(out)
    }

    /// Maps standardized values back; constant fields come back as μ.
    pub fn invert(&self, standardized: &Matrix) -> Result<Matrix> {
        if standardized.cols() != self.fields.len() {
            return Err(Error::shape("invert", standardized.shape(), self.fields.len()));
        }
        let mut out = standardized.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                let s = &self.fields[j];
                *v = if s.constant { s.mu } else { *v * s.sigma + s.mu };
            }
        }
        Ok(out)
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        self.check_schema(ds)?;
        let mut out = ds.clone();
        out.dense = self.standardize(&ds.dense)?;
        Ok(out)
    }
}

pub fn fit_standardizer(ds: &Dataset, rows: &[usize]) -> Result<StandardizerStats> {
    StandardizerStats::fit(ds, rows)
}

pub fn apply_standardizer(ds: &Dataset, stats: &StandardizerStats) -> Result<Dataset> {
    stats.apply(ds)
}
