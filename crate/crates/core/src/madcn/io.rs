use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{MadcnModel, ModelConfig, TargetScaler};
use crate::container::{self, TensorTable};
use crate::error::{Error, Result};
use crate::features::{CategoryMaps, FeatureSchema, FieldStats, StandardizerStats};
use crate::numcore::Matrix;

pub const MAGIC: &[u8; 5] = b"MADCN";

#[derive(Serialize, Deserialize)]
struct Meta {
    schema: FeatureSchema,
    category_maps: CategoryMaps,
    config: ModelConfig,
    seed: u64,
    constant_fields: Vec<bool>,
}

impl MadcnModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            schema: self.schema.clone(),
            category_maps: self.category_maps.clone(),
            config: self.config.clone(),
            seed: self.seed,
            constant_fields: self.standardizer.fields.iter().map(|f| f.constant).collect(),
        };
        let mu: Vec<f64> = self.standardizer.fields.iter().map(|f| f.mu).collect();
        let sigma: Vec<f64> = self.standardizer.fields.iter().map(|f| f.sigma).collect();
        let std_mu = Matrix::row_vector(&mu);
        let std_sigma = Matrix::row_vector(&sigma);
        let t_mu = Matrix::row_vector(&self.target_scaler.mu);
        let t_sigma = Matrix::row_vector(&self.target_scaler.sigma);

        let mut tensors: Vec<(String, &Matrix)> = vec![
            ("standardizer.mu".into(), &std_mu),
            ("standardizer.sigma".into(), &std_sigma),
            ("target.mu".into(), &t_mu),
            ("target.sigma".into(), &t_sigma),
        ];
        tensors.extend(self.params.tensor_names().into_iter().zip(self.params.tensors()));
        container::encode(MAGIC, serde_json::to_value(meta)?, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = container::decode(MAGIC, bytes)?;
        let meta: Meta =
            serde_json::from_value(meta).map_err(|e| Error::Format(format!("corrupt model header: {e}")))?;
        let mut table = TensorTable::new(tensors);

        let mu = table.take_row("standardizer.mu")?;
        let sigma = table.take_row("standardizer.sigma")?;
        let m = meta.schema.n_dense();
        if mu.len() != m || sigma.len() != m || meta.constant_fields.len() != m {
            return Err(Error::Format("standardizer size does not match the schema".into()));
        }
        let standardizer = StandardizerStats {
            fields: meta
                .schema
                .dense_fields
                .iter()
                .enumerate()
                .map(|(j, f)| FieldStats {
                    name: f.name.clone(),
                    mu: mu[j],
                    sigma: sigma[j],
                    constant: meta.constant_fields[j],
                })
                .collect(),
        };
        let target_scaler = TargetScaler {
            mu: table.take_row("target.mu")?,
            sigma: table.take_row("target.sigma")?,
        };

        let mut model = MadcnModel::new(meta.schema, standardizer, target_scaler, meta.config, meta.seed)
            .map_err(|e| Error::Format(format!("inconsistent model header: {e}")))?;
        model.category_maps = meta.category_maps;
        let values = model
            .params
            .tensor_names()
            .iter()
            .map(|n| table.take(n))
            .collect::<Result<Vec<_>>>()?;
        model
            .params
            .set_tensors(&values)
            .map_err(|e| Error::Format(format!("tensor shape mismatch: {e}")))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

pub fn save_model(model: &MadcnModel, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: &Path) -> Result<MadcnModel> {
    MadcnModel::load(path)
}
