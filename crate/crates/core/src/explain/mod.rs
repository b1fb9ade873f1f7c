//! Shapley attribution for any [`Regressor`].
//!
//! A coalition `S` of explained features is valued interventionally: every
//! background row is overwritten with the sample's values on `S`, the
//! hybrid rows are predicted, and the predictions are averaged. Features
//! outside the explained set always keep the sample's values, so the full
//! coalition reproduces `f(x)` and efficiency holds for any explained set.
//! A categorical field is one feature and its code is swapped whole.

mod summary;

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use summary::{
    dependence_export, dependence_records, force_record, importance_summary, read_explanations_csv,
    write_dependence_csv, write_explanations_csv, write_importance_csv, DependenceRecord, Direction, ForceEntry,
    ForceRecord, ImportanceRow,
};

use crate::error::{Error, Result};
use crate::features::{CodeMatrix, Dataset, FeatureSchema, RowKey};
use crate::numcore::Matrix;
use crate::regressor::Regressor;
use crate::seeds::rng_from_seed;

/// Largest explained set `shap_exact` will enumerate.
pub const MAX_EXACT_FEATURES: usize = 20;
/// Largest explained set the permutation estimator accepts (coalitions are
/// bit masks).
pub const MAX_FEATURES: usize = 64;
pub const DEFAULT_BACKGROUND_SIZE: usize = 64;

/// Hybrid rows predicted per model call.
const ROWS_PER_CALL: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSlot {
    Dense(usize),
    Sparse(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplainedFeature {
    pub name: String,
    pub slot: FeatureSlot,
}

/// Every dense and sparse field of `schema`, in schema order, except those
/// named in `exclude`.
pub fn explained_features<S: AsRef<str>>(schema: &FeatureSchema, exclude: &[S]) -> Result<Vec<ExplainedFeature>> {
    for name in exclude {
        let name = name.as_ref();
        if schema.dense_index(name).is_none() && schema.sparse_index(name).is_none() {
            return Err(Error::Argument(format!("cannot exclude unknown feature `{name}`")));
        }
    }
    let excluded = |n: &str| exclude.iter().any(|e| e.as_ref() == n);
    let dense = schema.dense_fields.iter().enumerate().map(|(j, f)| ExplainedFeature {
        name: f.name.clone(),
        slot: FeatureSlot::Dense(j),
    });
    let sparse = schema.sparse_fields.iter().enumerate().map(|(k, f)| ExplainedFeature {
        name: f.name.clone(),
        slot: FeatureSlot::Sparse(k),
    });
    Ok(dense.chain(sparse).filter(|f| !excluded(&f.name)).collect())
}

/// One input row in raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub dense: Vec<f64>,
    pub codes: Vec<usize>,
    pub key: Option<RowKey>,
    pub row: Option<usize>,
}

impl Sample {
    pub fn from_dataset(ds: &Dataset, row: usize) -> Result<Self> {
        if row >= ds.n_rows() {
            return Err(Error::Argument(format!(
                "row {row} is out of range for {} rows",
                ds.n_rows()
            )));
        }
        Ok(Self {
            dense: ds.dense.row(row).to_vec(),
            codes: ds.sparse_codes.row(row).to_vec(),
            key: ds.row_keys.get(row).cloned(),
            row: Some(row),
        })
    }

    pub fn dense_only(values: &[f64]) -> Self {
        Self {
            dense: values.to_vec(),
            codes: Vec::new(),
            key: None,
            row: None,
        }
    }

    fn value(&self, slot: FeatureSlot) -> f64 {
        match slot {
            FeatureSlot::Dense(j) => self.dense[j],
            FeatureSlot::Sparse(k) => self.codes[k] as f64,
        }
    }
}

/// Reference rows that stand in for absent features.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundSet {
    pub dense: Matrix,
    pub codes: CodeMatrix,
    /// Dataset rows the background was drawn from, if any.
    pub source_rows: Vec<usize>,
    pub seed: u64,
}

impl BackgroundSet {
    pub fn new(dense: Matrix, codes: CodeMatrix) -> Result<Self> {
        if dense.rows() == 0 || dense.rows() != codes.rows() {
            return Err(Error::Argument(format!(
                "background needs at least one row and matching blocks, got {} dense / {} code rows",
                dense.rows(),
                codes.rows()
            )));
        }
        Ok(Self {
            dense,
            codes,
            source_rows: Vec::new(),
            seed: 0,
        })
    }

    /// `min(size, rows.len())` distinct rows drawn from `rows` with a seeded
    /// generator.
    pub fn sample(ds: &Dataset, rows: &[usize], size: usize, seed: u64) -> Result<Self> {
        if rows.is_empty() || size == 0 {
            return Err(Error::Argument("background needs at least one row".into()));
        }
        let mut rng = rng_from_seed(seed);
        let chosen: Vec<usize> = rows.choose_multiple(&mut rng, size.min(rows.len())).copied().collect();
        Ok(Self {
            dense: ds.dense.select_rows(&chosen),
            codes: ds.sparse_codes.select_rows(&chosen),
            source_rows: chosen,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.dense.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.dense.rows() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Permutation,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Permutation => "permutation",
        }
    }
}

/// Additive attribution `f(x) ≈ φ₀ + Σ φ_i` for one sample and target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub phi0: f64,
    pub phi: Vec<f64>,
    pub fx: f64,
    pub method: Method,
    /// Zero for exact enumeration.
    pub n_permutations: usize,
    pub feature_names: Vec<String>,
    /// Raw feature values of the sample; codes for categorical fields.
    pub feature_values: Vec<f64>,
    pub target: String,
    pub sample_key: Option<RowKey>,
    pub row: Option<usize>,
    /// True when the sampling residual was redistributed onto `phi`.
    pub efficiency_enforced: bool,
    /// `fx − φ₀ − Σφ` before any redistribution.
    pub residual: f64,
}

impl Explanation {
    pub fn efficiency_gap(&self) -> f64 {
        self.fx - self.phi0 - self.phi.iter().sum::<f64>()
    }
}

/// Binds a model, a background and an explained feature set.
pub struct Explainer<'a> {
    model: &'a dyn Regressor,
    schema: FeatureSchema,
    background: &'a BackgroundSet,
    features: Vec<ExplainedFeature>,
    target: usize,
}

impl<'a> Explainer<'a> {
    pub fn new(
        model: &'a dyn Regressor,
        schema: &FeatureSchema,
        background: &'a BackgroundSet,
        features: Vec<ExplainedFeature>,
        target: usize,
    ) -> Result<Self> {
        if background.dense.cols() != schema.n_dense() || background.codes.cols() != schema.n_sparse() {
            return Err(Error::Schema(format!(
                "background has {} dense / {} categorical columns, schema expects {} / {}",
                background.dense.cols(),
                background.codes.cols(),
                schema.n_dense(),
                schema.n_sparse()
            )));
        }
        if background.is_empty() {
            return Err(Error::Argument("background needs at least one row".into()));
        }
        if target >= model.n_targets() {
            return Err(Error::Argument(format!(
                "target {target} is out of range for a model with {} targets",
                model.n_targets()
            )));
        }
        for f in &features {
            let known = match f.slot {
                FeatureSlot::Dense(j) => schema.dense_fields.get(j).map(|d| &d.name),
                FeatureSlot::Sparse(k) => schema.sparse_fields.get(k).map(|s| &s.name),
            };
            if known != Some(&f.name) {
                return Err(Error::Schema(format!("feature `{}` is not in the schema", f.name)));
            }
        }
        Ok(Self {
            model,
            schema: schema.clone(),
            background,
            features,
            target,
        })
    }

    pub fn features(&self) -> &[ExplainedFeature] {
        &self.features
    }

    fn check_sample(&self, x: &Sample) -> Result<()> {
        if x.dense.len() != self.schema.n_dense() || x.codes.len() != self.schema.n_sparse() {
            return Err(Error::Schema(format!(
                "sample has {} dense / {} categorical values, schema expects {} / {}",
                x.dense.len(),
                x.codes.len(),
                self.schema.n_dense(),
                self.schema.n_sparse()
            )));
        }
        Ok(())
    }

    fn check_mask(&self, mask: u64) -> Result<()> {
        let f = self.features.len();
        if f < 64 && mask >> f != 0 {
            return Err(Error::Argument(format!(
                "coalition {mask:#b} names features beyond the {f} explained"
            )));
        }
        Ok(())
    }

    fn full_mask(&self) -> u64 {
        match self.features.len() {
            64 => u64::MAX,
            f => (1u64 << f) - 1,
        }
    }

    /// `f(x)` for the explained target.
    pub fn predict_sample(&self, x: &Sample) -> Result<f64> {
        self.check_sample(x)?;
        let dense = Matrix::row_vector(&x.dense);
        let codes = CodeMatrix::new(1, x.codes.len(), x.codes.clone())?;
        Ok(self.model.predict(&dense, &codes)?[(0, self.target)])
    }

    /// Interventional value of the coalition whose members are the set bits
    /// of `mask` (bit `i` is explained feature `i`).
    pub fn coalition_value(&self, x: &Sample, mask: u64) -> Result<f64> {
        self.check_sample(x)?;
        self.check_mask(mask)?;
        Ok(self.values(x, &[mask])?[0])
    }

    /// Coalition values for many masks. Each value is an independent
    /// average, so the result does not depend on how work is scheduled.
    fn values(&self, x: &Sample, masks: &[u64]) -> Result<Vec<f64>> {
        let full = self.full_mask();
        let fx = if masks.contains(&full) {
            Some(self.predict_sample(x)?)
        } else {
            None
        };
        let b = self.background.len();
        let per_call = (ROWS_PER_CALL / b).max(1);
        let chunks: Vec<Vec<f64>> = masks
            .par_chunks(per_call)
            .map(|chunk| -> Result<Vec<f64>> {
                let (dense, codes) = self.hybrid_rows(x, chunk);
                let pred = self.model.predict(&dense, &codes)?;
                Ok(chunk
                    .iter()
                    .enumerate()
                    .map(|(c, &mask)| match (mask == full, fx) {
                        (true, Some(v)) => v,
                        _ => shifted_mean((0..b).map(|r| pred[(c * b + r, self.target)])),
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    fn hybrid_rows(&self, x: &Sample, masks: &[u64]) -> (Matrix, CodeMatrix) {
        let bg = self.background;
        let b = bg.len();
        let mut dense = Matrix::zeros(masks.len() * b, x.dense.len());
        let mut codes = CodeMatrix::zeros(masks.len() * b, x.codes.len());
        // features outside the explained set are pinned to the sample
        let mut base_dense = x.dense.clone();
        let mut base_codes = x.codes.clone();
        for (c, &mask) in masks.iter().enumerate() {
            for r in 0..b {
                base_dense.copy_from_slice(&x.dense);
                base_codes.copy_from_slice(&x.codes);
                for (i, f) in self.features.iter().enumerate() {
                    if mask >> i & 1 == 1 {
                        continue;
                    }
                    match f.slot {
                        FeatureSlot::Dense(j) => base_dense[j] = bg.dense[(r, j)],
                        FeatureSlot::Sparse(k) => base_codes[k] = bg.codes.row(r)[k],
                    }
                }
                dense.row_mut(c * b + r).copy_from_slice(&base_dense);
                codes.row_mut(c * b + r).copy_from_slice(&base_codes);
            }
        }
        (dense, codes)
    }

    fn explanation(&self, x: &Sample, phi0: f64, phi: Vec<f64>, fx: f64, method: Method, n_perm: usize) -> Explanation {
        let residual = fx - phi0 - phi.iter().sum::<f64>();
        Explanation {
            phi0,
            phi,
            fx,
            method,
            n_permutations: n_perm,
            feature_names: self.features.iter().map(|f| f.name.clone()).collect(),
            feature_values: self.features.iter().map(|f| x.value(f.slot)).collect(),
            target: self.schema.target_fields[self.target].clone(),
            sample_key: x.key.clone(),
            row: x.row,
            efficiency_enforced: false,
            residual,
        }
    }

    /// Shapley values by enumerating all `2^F` coalitions.
    pub fn shap_exact(&self, x: &Sample) -> Result<Explanation> {
        self.check_sample(x)?;
        let f = self.features.len();
        if f > MAX_EXACT_FEATURES {
            return Err(Error::Capacity {
                features: f,
                max: MAX_EXACT_FEATURES,
            });
        }
        let masks: Vec<u64> = (0..1u64 << f).collect();
        let v = self.values(x, &masks)?;
        // |S|!(F−|S|−1)!/F! = 1 / (F · C(F−1, |S|))
        let weights: Vec<f64> = (0..f).map(|s| 1.0 / (f as f64 * binomial(f - 1, s))).collect();
        let mut phi = vec![0.0; f];
        for (i, p) in phi.iter_mut().enumerate() {
            let bit = 1u64 << i;
            for &s in masks.iter().filter(|&&s| s & bit == 0) {
                *p += weights[s.count_ones() as usize] * (v[(s | bit) as usize] - v[s as usize]);
            }
        }
        let full = self.full_mask() as usize;
        Ok(self.explanation(x, v[0], phi, v[full], Method::Exact, 0))
    }

    /// Monte-Carlo Shapley values from `n_perm` seeded random orderings, with
    /// the efficiency residual redistributed onto `phi`.
    pub fn shap_permutation(&self, x: &Sample, n_perm: usize, seed: u64) -> Result<Explanation> {
        if n_perm == 0 {
            return Err(Error::Argument("n_perm must be positive".into()));
        }
        let mut rng = rng_from_seed(seed);
        let orderings: Vec<Vec<usize>> = (0..n_perm)
            .map(|_| {
                let mut o: Vec<usize> = (0..self.features.len()).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        let mut e = self.shap_from_orderings(x, &orderings)?;
        enforce_efficiency(&mut e);
        Ok(e)
    }

    /// Average marginal contributions over the given feature orderings,
    /// without residual redistribution.
    pub fn shap_from_orderings(&self, x: &Sample, orderings: &[Vec<usize>]) -> Result<Explanation> {
        self.check_sample(x)?;
        let f = self.features.len();
        if f > MAX_FEATURES {
            return Err(Error::Capacity {
                features: f,
                max: MAX_FEATURES,
            });
        }
        if orderings.is_empty() {
            return Err(Error::Argument("at least one ordering is required".into()));
        }
        for o in orderings {
            let mut seen = vec![false; f];
            if o.len() != f || o.iter().any(|&i| i >= f || std::mem::replace(&mut seen[i], true)) {
                return Err(Error::Argument(format!("{o:?} is not an ordering of {f} features")));
            }
        }

        let mut needed = BTreeMap::new();
        needed.insert(0u64, 0.0);
        for o in orderings {
            let mut s = 0u64;
            for &i in o {
                s |= 1 << i;
                needed.insert(s, 0.0);
            }
        }
        let masks: Vec<u64> = needed.keys().copied().collect();
        for (slot, v) in needed.values_mut().zip(self.values(x, &masks)?) {
            *slot = v;
        }

        let mut phi = vec![0.0; f];
        for o in orderings {
            let mut s = 0u64;
            for &i in o {
                let next = s | 1 << i;
                phi[i] += needed[&next] - needed[&s];
                s = next;
            }
        }
        for p in &mut phi {
            *p /= orderings.len() as f64;
        }
        let fx = if f == 0 {
            self.predict_sample(x)?
        } else {
            needed[&self.full_mask()]
        };
        Ok(self.explanation(x, needed[&0], phi, fx, Method::Permutation, orderings.len()))
    }
}

/// Mean computed as `first + Σ(v − first)/n`, so that identical values
/// average to themselves bit for bit.
fn shifted_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut values = values.peekable();
    let first = *values.peek().expect("background is nonempty");
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + (v - first), n + 1));
    first + sum / n as f64
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64).round()
}

/// Spreads `fx − φ₀ − Σφ` over `phi` in proportion to `|φ|`, or equally when
/// every `φ` is zero.
fn enforce_efficiency(e: &mut Explanation) {
    let residual = e.efficiency_gap();
    e.residual = residual;
    e.efficiency_enforced = true;
    if residual == 0.0 || e.phi.is_empty() {
        return;
    }
    let total: f64 = e.phi.iter().map(|p| p.abs()).sum();
    let n = e.phi.len() as f64;
    for p in &mut e.phi {
        *p += if total > 0.0 {
            residual * p.abs() / total
        } else {
            residual / n
        };
    }
}

pub fn coalition_value(explainer: &Explainer<'_>, x: &Sample, mask: u64) -> Result<f64> {
    explainer.coalition_value(x, mask)
}

pub fn shap_exact(explainer: &Explainer<'_>, x: &Sample) -> Result<Explanation> {
    explainer.shap_exact(x)
}

pub fn shap_permutation(explainer: &Explainer<'_>, x: &Sample, n_perm: usize, seed: u64) -> Result<Explanation> {
    explainer.shap_permutation(x, n_perm, seed)
}
