//! Reference models: ridge regression, k-nearest neighbors, and the two
//! network ablations.
//!
//! Ridge and KNN see standardized dense fields plus one-hot categorical
//! fields; they have no learned embeddings.

mod knn;
mod linear;

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use knn::{knn_predict, Distance, KnnModel};
pub use linear::{fit_linear, LinearModel};

use crate::container::{self, TensorTable};
use crate::error::{Error, Result};
use crate::features::{CategoryMaps, CodeMatrix, Dataset, FeatureSchema, StandardizerStats};
use crate::madcn::{self, MadcnModel, ModelConfig, ModelKind};
use crate::numcore::Matrix;
use crate::regressor::Regressor;

pub const LINEAR_MAGIC: &[u8; 5] = b"LINR1";
pub const KNN_MAGIC: &[u8; 5] = b"KNNR1";
pub const DEFAULT_K: usize = 5;
pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-6;

/// Standardized dense columns followed by one one-hot block per categorical
/// field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularEncoder {
    pub standardizer: StandardizerStats,
    pub cardinalities: Vec<usize>,
}

impl TabularEncoder {
    pub fn fit(ds: &Dataset, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            standardizer: StandardizerStats::fit(ds, rows)?,
            cardinalities: ds.schema.sparse_fields.iter().map(|f| f.cardinality).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.standardizer.fields.len() + self.cardinalities.iter().sum::<usize>()
    }

    fn check_codes(&self, codes: &CodeMatrix) -> Result<()> {
        if codes.cols() != self.cardinalities.len() {
            return Err(Error::shape("encoder", self.cardinalities.len(), codes.cols()));
        }
        for i in 0..codes.rows() {
            for (k, (&c, &card)) in codes.row(i).iter().zip(&self.cardinalities).enumerate() {
                if c >= card {
                    return Err(Error::Encoding(format!(
                        "code {c} of categorical field {k} exceeds its cardinality {card}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self, dense: &Matrix, codes: &CodeMatrix) -> Result<Matrix> {
        let std = self.standardizer.standardize(dense)?;
        self.check_codes(codes)?;
        let m = std.cols();
        let mut out = Matrix::zeros(dense.rows(), self.width());
        for i in 0..dense.rows() {
            let row = out.row_mut(i);
            row[..m].copy_from_slice(std.row(i));
            let mut offset = m;
            for (&c, &card) in codes.row(i).iter().zip(&self.cardinalities) {
                row[offset + c] = 1.0;
                offset += card;
            }
        }
        Ok(out)
    }
}

fn check_schema(expected: &FeatureSchema, ds: &Dataset) -> Result<()> {
    if &ds.schema != expected {
        return Err(Error::Schema("dataset schema differs from the model's schema".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearRegressor {
    pub schema: FeatureSchema,
    pub category_maps: CategoryMaps,
    pub encoder: TabularEncoder,
    pub model: LinearModel,
}

#[derive(Serialize, Deserialize)]
struct LinearMeta {
    schema: FeatureSchema,
    category_maps: CategoryMaps,
    encoder: TabularEncoder,
    ridge_lambda: f64,
}

impl LinearRegressor {
    pub fn fit(ds: &Dataset, rows: &[usize], ridge_lambda: f64) -> Result<Self> {
        let encoder = TabularEncoder::fit(ds, rows)?;
        let x = encoder.encode(&ds.dense.select_rows(rows), &ds.sparse_codes.select_rows(rows))?;
        let model = fit_linear(&x, &ds.targets.select_rows(rows), ridge_lambda)?;
        Ok(Self {
            schema: ds.schema.clone(),
            category_maps: ds.category_maps.clone(),
            encoder,
            model,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = LinearMeta {
            schema: self.schema.clone(),
            category_maps: self.category_maps.clone(),
            encoder: self.encoder.clone(),
            ridge_lambda: self.model.ridge_lambda,
        };
        let intercept = Matrix::row_vector(&self.model.intercept);
        container::encode(
            LINEAR_MAGIC,
            serde_json::to_value(meta)?,
            &[
                ("weights".into(), &self.model.weights),
                ("intercept".into(), &intercept),
            ],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = container::decode(LINEAR_MAGIC, bytes)?;
        let meta: LinearMeta =
            serde_json::from_value(meta).map_err(|e| Error::Format(format!("corrupt model header: {e}")))?;
        let mut table = TensorTable::new(tensors);
        let weights = table.take("weights")?;
        let intercept = table.take_row("intercept")?;
        let t = meta.schema.n_targets();
        if weights.shape() != Matrix::zeros(meta.encoder.width(), t).shape() || intercept.len() != t {
            return Err(Error::Format("linear model tensors do not match the schema".into()));
        }
        Ok(Self {
            schema: meta.schema,
            category_maps: meta.category_maps,
            encoder: meta.encoder,
            model: LinearModel {
                weights,
                intercept,
                ridge_lambda: meta.ridge_lambda,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

impl Regressor for LinearRegressor {
    fn name(&self) -> String {
        "LR".into()
    }

    fn n_targets(&self) -> usize {
        self.schema.n_targets()
    }

    fn predict(&self, dense: &Matrix, codes: &CodeMatrix) -> Result<Matrix> {
        self.model.predict(&self.encoder.encode(dense, codes)?)
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        check_schema(&self.schema, ds)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnRegressor {
    pub schema: FeatureSchema,
    pub category_maps: CategoryMaps,
    pub standardizer: StandardizerStats,
    pub model: KnnModel,
}

#[derive(Serialize, Deserialize)]
struct KnnMeta {
    schema: FeatureSchema,
    category_maps: CategoryMaps,
    standardizer: StandardizerStats,
    k: usize,
    distance: Distance,
}

impl KnnRegressor {
    pub fn fit(ds: &Dataset, rows: &[usize], k: usize) -> Result<Self> {
        let standardizer = StandardizerStats::fit(ds, rows)?;
        let model = KnnModel::new(
            k,
            standardizer.standardize(&ds.dense.select_rows(rows))?,
            ds.sparse_codes.select_rows(rows),
            ds.targets.select_rows(rows),
        )?;
        Ok(Self {
            schema: ds.schema.clone(),
            category_maps: ds.category_maps.clone(),
            standardizer,
            model,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = KnnMeta {
            schema: self.schema.clone(),
            category_maps: self.category_maps.clone(),
            standardizer: self.standardizer.clone(),
            k: self.model.k,
            distance: self.model.distance,
        };
        let c = &self.model.train_codes;
        let codes = Matrix::new(
            c.rows(),
            c.cols(),
            (0..c.rows()).flat_map(|i| c.row(i).iter().map(|&v| v as f64)).collect(),
        )?;
        container::encode(
            KNN_MAGIC,
            serde_json::to_value(meta)?,
            &[
                ("features".into(), &self.model.train_features),
                ("codes".into(), &codes),
                ("targets".into(), &self.model.train_targets),
            ],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = container::decode(KNN_MAGIC, bytes)?;
        let meta: KnnMeta =
            serde_json::from_value(meta).map_err(|e| Error::Format(format!("corrupt model header: {e}")))?;
        let mut table = TensorTable::new(tensors);
        let features = table.take("features")?;
        let codes = table.take("codes")?;
        let targets = table.take("targets")?;
        if codes.as_slice().iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
            return Err(Error::Format("stored categorical codes are not whole numbers".into()));
        }
        let codes = CodeMatrix::new(
            codes.rows(),
            codes.cols(),
            codes.as_slice().iter().map(|&v| v as usize).collect(),
        )?;
        let mut model = KnnModel::new(meta.k, features, codes, targets)
            .map_err(|e| Error::Format(format!("inconsistent nearest-neighbor model: {e}")))?;
        model.distance = meta.distance;
        Ok(Self {
            schema: meta.schema,
            category_maps: meta.category_maps,
            standardizer: meta.standardizer,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

impl Regressor for KnnRegressor {
    fn name(&self) -> String {
        "KNN".into()
    }

    fn n_targets(&self) -> usize {
        self.schema.n_targets()
    }

    fn predict(&self, dense: &Matrix, codes: &CodeMatrix) -> Result<Matrix> {
        self.model.predict(&self.standardizer.standardize(dense)?, codes)
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        check_schema(&self.schema, ds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    DnnOnly,
    DcnNoAttention,
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dnn_only" | "dnn" => Ok(Self::DnnOnly),
            "dcn_no_attention" | "dcn" => Ok(Self::DcnNoAttention),
            other => Err(Error::Argument(format!(
                "unknown ablation `{other}`; expected dnn_only or dcn_no_attention"
            ))),
        }
    }
}

impl From<AblationKind> for ModelKind {
    fn from(kind: AblationKind) -> Self {
        match kind {
            AblationKind::DnnOnly => ModelKind::DnnOnly,
            AblationKind::DcnNoAttention => ModelKind::DcnNoAttention,
        }
    }
}

/// A network with the attention branch (and, for `DnnOnly`, the cross
/// branch) removed. Noise is always off. The remaining hyperparameters come
/// from `config`.
pub fn build_ablation(
    kind: AblationKind,
    ds: &Dataset,
    train_rows: &[usize],
    config: &ModelConfig,
    seed: u64,
) -> Result<MadcnModel> {
    let config = ModelConfig {
        kind: kind.into(),
        ..config.clone()
    };
    MadcnModel::for_dataset(ds, train_rows, config, seed)
}

/// Any persisted model.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum AnyModel {
    Madcn(MadcnModel),
    Linear(LinearRegressor),
    Knn(KnnRegressor),
}

impl AnyModel {
    /// Reads a model file, dispatching on its magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match container::peek_magic(bytes).as_ref() {
            Some(m) if m == madcn::MAGIC => Ok(Self::Madcn(MadcnModel::from_bytes(bytes)?)),
            Some(m) if m == LINEAR_MAGIC => Ok(Self::Linear(LinearRegressor::from_bytes(bytes)?)),
            Some(m) if m == KNN_MAGIC => Ok(Self::Knn(KnnRegressor::from_bytes(bytes)?)),
            Some(m) => Err(Error::Format(format!(
                "bad magic: {:?} is not a known model format",
                String::from_utf8_lossy(m)
            ))),
            None => Err(Error::Format("truncated file: no magic bytes".into())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match self {
            Self::Madcn(m) => m.to_bytes(),
            Self::Linear(m) => m.to_bytes(),
            Self::Knn(m) => m.to_bytes(),
        }
    }

    pub fn schema(&self) -> &FeatureSchema {
        match self {
            Self::Madcn(m) => &m.schema,
            Self::Linear(m) => &m.schema,
            Self::Knn(m) => &m.schema,
        }
    }

    pub fn category_maps(&self) -> &CategoryMaps {
        match self {
            Self::Madcn(m) => &m.category_maps,
            Self::Linear(m) => &m.category_maps,
            Self::Knn(m) => &m.category_maps,
        }
    }

    pub fn as_regressor(&self) -> &dyn Regressor {
        match self {
            Self::Madcn(m) => m,
            Self::Linear(m) => m,
            Self::Knn(m) => m,
        }
    }
}
