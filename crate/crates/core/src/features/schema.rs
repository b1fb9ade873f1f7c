use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseField {
    pub name: String,
    #[serde(default)]
    pub unit: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseField {
    pub name: String,
    pub cardinality: usize,
}

/// Column layout of a panel dataset.
///
/// `id_field` and `time_field` key each row. They may also appear as sparse
/// fields, in which case they are embedded like any other categorical column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub dense_fields: Vec<DenseField>,
    #[serde(default)]
    pub sparse_fields: Vec<SparseField>,
    pub target_fields: Vec<String>,
    pub id_field: String,
    pub time_field: String,
}

/// Per sparse field, the label assigned to each integer code.
pub type CategoryMaps = BTreeMap<String, Vec<String>>;

impl FeatureSchema {
    pub fn new(
        dense: &[(&str, &str)],
        sparse: &[(&str, usize)],
        targets: &[&str],
        id_field: &str,
        time_field: &str,
    ) -> Result<Self> {
        let schema = Self {
            dense_fields: dense
                .iter()
                .map(|(n, u)| DenseField {
                    name: n.to_string(),
                    unit: u.to_string(),
                })
                .collect(),
            sparse_fields: sparse
                .iter()
                .map(|(n, c)| SparseField {
                    name: n.to_string(),
                    cardinality: *c,
                })
                .collect(),
            target_fields: targets.iter().map(|t| t.to_string()).collect(),
            id_field: id_field.to_string(),
            time_field: time_field.to_string(),
        };
        schema.validate()?;
        Ok(schema)
    }

    /// City-panel layout: thirteen composite indicators as dense inputs, city
    /// and year embedded, total emissions as the single target.
    pub fn carbon_panel() -> Self {
        Self::new(
            &[
                ("population", "10^4 persons"),
                ("gdp", "yuan"),
                ("urbanization_rate", "%"),
                ("city_size", "[1,7]"),
                ("city_development_level", "[1,5]"),
                ("industry_agglomeration_level", ""),
                ("environmental_pollution_index", ""),
                ("low_carbon_city", "{0,1}"),
                ("carbon_peak_city", "{0,1}"),
                ("smart_city", "{0,1}"),
                ("nqpf", ""),
                ("digital_economy_index", ""),
                ("ai_technology_level", ""),
            ],
            &[("city_id", 275), ("year", 13)],
            &["carbon_emissions"],
            "city_id",
            "year",
        )
        .expect("built-in schema is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: Self =
            serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let names = self
            .dense_fields
            .iter()
            .map(|f| &f.name)
            .chain(self.sparse_fields.iter().map(|f| &f.name))
            .chain(self.target_fields.iter());
        for name in names {
            if name.is_empty() {
                return Err(Error::Schema("empty field name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate field name `{name}`")));
            }
        }
        if self.target_fields.is_empty() {
            return Err(Error::Schema("at least one target field is required".into()));
        }
        if let Some(f) = self.sparse_fields.iter().find(|f| f.cardinality == 0) {
            return Err(Error::Schema(format!("sparse field `{}` has cardinality 0", f.name)));
        }
        if self.id_field == self.time_field {
            return Err(Error::Schema("id_field and time_field must differ".into()));
        }
        for key in [&self.id_field, &self.time_field] {
            let clashes =
                self.dense_fields.iter().any(|f| &f.name == key) || self.target_fields.iter().any(|t| t == key);
            if clashes {
                return Err(Error::Schema(format!(
                    "key field `{key}` may only double as a sparse field"
                )));
            }
        }
        Ok(())
    }

    pub fn n_dense(&self) -> usize {
        self.dense_fields.len()
    }

    pub fn n_sparse(&self) -> usize {
        self.sparse_fields.len()
    }

    pub fn n_targets(&self) -> usize {
        self.target_fields.len()
    }

    pub fn dense_index(&self, name: &str) -> Option<usize> {
        self.dense_fields.iter().position(|f| f.name == name)
    }

    pub fn sparse_index(&self, name: &str) -> Option<usize> {
        self.sparse_fields.iter().position(|f| f.name == name)
    }

    pub fn target_index(&self, name: &str) -> Option<usize> {
        self.target_fields.iter().position(|f| f == name)
    }
}
