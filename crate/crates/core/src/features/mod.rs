//! Panel schema, CSV ingestion, dense-field standardization and seeded
//! train/test splitting.

mod dataset;
mod schema;
mod split;
mod standardize;

pub use dataset::{CodeMatrix, Dataset, DropReason, IngestLog, RowKey};
pub use schema::{CategoryMaps, DenseField, FeatureSchema, SparseField};
pub use split::{split, train_size, SplitIndices};
pub use standardize::{apply_standardizer, fit_standardizer, FieldStats, StandardizerStats};
