use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schema::{CategoryMaps, FeatureSchema};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Row-major matrix of categorical codes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeMatrix {
    rows: usize,
    cols: usize,
    data: Vec<usize>,
}

impl CodeMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "CodeMatrix::new",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[usize]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("CodeMatrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [usize] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, rows: &[usize]) -> CodeMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        CodeMatrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub id: String,
    pub year: String,
}

/// In-memory panel: dense inputs, sparse codes, targets, and row keys.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub dense: Matrix,
    pub sparse_codes: CodeMatrix,
    pub targets: Matrix,
    pub row_keys: Vec<RowKey>,
    pub category_maps: CategoryMaps,
}

/// Why an ingested row was discarded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropReason {
    Missing,
    Unparseable,
    NonFinite,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Missing => "missing value",
            DropReason::Unparseable => "unparseable number",
            DropReason::NonFinite => "non-finite number",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestLog {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub dropped: BTreeMap<DropReason, usize>,
}

impl IngestLog {
    pub fn dropped_total(&self) -> usize {
        self.dropped.values().sum()
    }
}

impl fmt::Display for IngestLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows read: {}", self.rows_read)?;
        writeln!(f, "rows kept: {}", self.rows_kept)?;
        writeln!(f, "rows dropped: {}", self.dropped_total())?;
        for (reason, count) in &self.dropped {
            writeln!(f, "  {}: {count}", reason.as_str())?;
        }
        Ok(())
    }
}

const MISSING_MARKERS: [&str; 5] = ["", "na", "n/a", "nan", "null"];

fn is_missing(cell: &str) -> bool {
    let lower = cell.to_ascii_lowercase();
    MISSING_MARKERS.contains(&lower.as_str())
}

fn parse_number(cell: &str) -> std::result::Result<f64, DropReason> {
    let cell = cell.trim();
    if is_missing(cell) {
        return Err(DropReason::Missing);
    }
    let v: f64 = cell.parse().map_err(|_| DropReason::Unparseable)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DropReason::NonFinite)
    }
}

fn column_index(header: &HashMap<&str, usize>, name: &str) -> Result<usize> {
    header
        .get(name)
        .copied()
        .ok_or_else(|| Error::Schema(format!("CSV is missing column `{name}`")))
}

struct Encoder {
    labels: Vec<String>,
    index: HashMap<String, usize>,
    cardinality: usize,
}

impl Encoder {
    fn new(seed: &[String], cardinality: usize, field: &str) -> Result<Self> {
        if seed.len() > cardinality {
            return Err(Error::Encoding(format!(
                "category map for `{field}` has {} labels but cardinality is {cardinality}",
                seed.len()
            )));
        }
        let index = seed.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Ok(Self {
            labels: seed.to_vec(),
            index,
            cardinality,
        })
    }

    fn code(&mut self, label: &str, field: &str) -> Result<usize> {
        if let Some(&c) = self.index.get(label) {
            return Ok(c);
        }
        if self.labels.len() == self.cardinality {
            return Err(Error::Encoding(format!(
                "label `{label}` in `{field}` exceeds declared cardinality {}",
                self.cardinality
            )));
        }
        let code = self.labels.len();
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), code);
        Ok(code)
    }
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.row_keys.len()
    }

    /// Reads a CSV panel. Sparse labels not present in `category_maps` are
    /// assigned the next free code in first-seen order; the extended maps
    /// are stored on the returned dataset.
    pub fn ingest_csv(
        path: &Path,
        schema: &FeatureSchema,
        category_maps: Option<&CategoryMaps>,
    ) -> Result<(Dataset, IngestLog)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::ingest_reader(file, schema, category_maps)
    }

    pub fn ingest_reader<R: Read>(
        reader: R,
        schema: &FeatureSchema,
        category_maps: Option<&CategoryMaps>,
    ) -> Result<(Dataset, IngestLog)> {
        schema.validate()?;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let header: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();

        let dense_idx = schema
            .dense_fields
            .iter()
            .map(|f| column_index(&header, &f.name))
            .collect::<Result<Vec<_>>>()?;
        let sparse_idx = schema
            .sparse_fields
            .iter()
            .map(|f| column_index(&header, &f.name))
            .collect::<Result<Vec<_>>>()?;
        let target_idx = schema
            .target_fields
            .iter()
            .map(|f| column_index(&header, f))
            .collect::<Result<Vec<_>>>()?;
        let id_idx = column_index(&header, &schema.id_field)?;
        let time_idx = column_index(&header, &schema.time_field)?;

        let mut encoders = schema
            .sparse_fields
            .iter()
            .map(|f| {
                let seed = category_maps
                    .and_then(|m| m.get(&f.name))
                    .map(Vec::as_slice)
                    .unwrap_or(&[]);
                Encoder::new(seed, f.cardinality, &f.name)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut log = IngestLog::default();
        let mut dense = Vec::new();
        let mut codes = Vec::new();
        let mut targets = Vec::new();
        let mut keys = Vec::new();
        let mut dense_row = Vec::with_capacity(dense_idx.len());
        let mut target_row = Vec::with_capacity(target_idx.len());

        for record in rdr.records() {
            let record = record?;
            log.rows_read += 1;
            let cell = |i: usize| record.get(i).map(str::trim).unwrap_or("");
            let mut labels = Vec::with_capacity(sparse_idx.len());

            let outcome = (|| {
                dense_row.clear();
                target_row.clear();
                for &i in &dense_idx {
                    dense_row.push(parse_number(cell(i))?);
                }
                for &i in &target_idx {
                    target_row.push(parse_number(cell(i))?);
                }
                for &i in sparse_idx.iter().chain([&id_idx, &time_idx]) {
                    if is_missing(cell(i)) {
                        return Err(DropReason::Missing);
                    }
                }
                for &i in &sparse_idx {
                    labels.push(cell(i));
                }
                Ok(())
            })();

            if let Err(reason) = outcome {
                *log.dropped.entry(reason).or_default() += 1;
                continue;
            }
            for ((enc, field), label) in encoders.iter_mut().zip(&schema.sparse_fields).zip(&labels) {
                codes.push(enc.code(label, &field.name)?);
            }
            dense.extend_from_slice(&dense_row);
            targets.extend_from_slice(&target_row);
            keys.push(RowKey {
                id: cell(id_idx).to_string(),
                year: cell(time_idx).to_string(),
            });
            log.rows_kept += 1;
        }

        let n = keys.len();
        let category_maps = schema
            .sparse_fields
            .iter()
            .zip(encoders)
            .map(|(f, enc)| (f.name.clone(), enc.labels))
            .collect();
        let ds = Dataset {
            schema: schema.clone(),
            dense: Matrix::new(n, schema.n_dense(), dense)?,
            sparse_codes: CodeMatrix::new(n, schema.n_sparse(), codes)?,
            targets: Matrix::new(n, schema.n_targets(), targets)?,
            row_keys: keys,
            category_maps,
        };
        Ok((ds, log))
    }

    /// Writes the dataset back as CSV. Numbers use the shortest
    /// representation that parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let schema = &self.schema;
        let key_is_sparse = |k: &str| schema.sparse_index(k).is_some();

        let mut header: Vec<&str> = Vec::new();
        if !key_is_sparse(&schema.id_field) {
            header.push(&schema.id_field);
        }
        if !key_is_sparse(&schema.time_field) {
            header.push(&schema.time_field);
        }
        header.extend(schema.dense_fields.iter().map(|f| f.name.as_str()));
        header.extend(schema.sparse_fields.iter().map(|f| f.name.as_str()));
        header.extend(schema.target_fields.iter().map(String::as_str));
        w.write_record(&header)?;

        for i in 0..self.n_rows() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            if !key_is_sparse(&schema.id_field) {
                rec.push(self.row_keys[i].id.clone());
            }
            if !key_is_sparse(&schema.time_field) {
                rec.push(self.row_keys[i].year.clone());
            }
            rec.extend(self.dense.row(i).iter().map(f64::to_string));
            for (j, f) in schema.sparse_fields.iter().enumerate() {
                let code = self.sparse_codes.row(i)[j];
                let label = self
                    .category_maps
                    .get(&f.name)
                    .and_then(|labels| labels.get(code))
                    .cloned()
                    .unwrap_or_else(|| code.to_string());
                rec.push(label);
            }
            rec.extend(self.targets.row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv output>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Dataset restricted to `rows`, in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            dense: self.dense.select_rows(rows),
            sparse_codes: self.sparse_codes.select_rows(rows),
            targets: self.targets.select_rows(rows),
            row_keys: rows.iter().map(|&r| self.row_keys[r].clone()).collect(),
            category_maps: self.category_maps.clone(),
        }
    }

    /// Raw value of a named dense or sparse field (codes as `f64`).
    pub fn field_value(&self, row: usize, name: &str) -> Option<f64> {
        if let Some(j) = self.schema.dense_index(name) {
            return Some(self.dense[(row, j)]);
        }
        self.schema
            .sparse_index(name)
            .map(|j| self.sparse_codes.row(row)[j] as f64)
    }
}
