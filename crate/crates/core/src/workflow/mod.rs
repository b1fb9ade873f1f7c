//! File-based workflows behind the command-line tool: each function takes a
//! resolved [`RunConfig`], reads its inputs, and writes its outputs plus the
//! resolved configuration into an output directory.

mod config;

pub use config::{
    BaselineConfig, DependencePair, ExplainConfig, ExplainMethod, Partition, RunConfig, SubSeeds, DEFAULT_SEED,
    DEFAULT_SPLIT_RATIO,
};

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::baselines::{build_ablation, AblationKind, AnyModel, KnnRegressor, LinearRegressor};
use crate::error::{Error, Result};
use crate::explain::{
    explained_features, force_record, importance_summary, write_dependence_csv, write_explanations_csv,
    write_importance_csv, BackgroundSet, DependenceRecord, Explainer, Explanation, Sample,
};
use crate::features::{split, CategoryMaps, Dataset, FeatureSchema, IngestLog, SplitIndices};
use crate::madcn::{grad_check_suite, GradCheckCase, MadcnModel, ModelKind};
use crate::metrics::MetricTriple;
use crate::regressor::Regressor;
use crate::seeds::derive_seed;
use crate::training::{evaluate, train_with_progress, EpochRecord, TrainReport};

pub const MODEL_FILE: &str = "model.madcn";
pub const REPORT_FILE: &str = "train_report.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const EXPLANATIONS_FILE: &str = "explanations.csv";
pub const IMPORTANCE_FILE: &str = "importance.csv";
pub const FORCE_FILE: &str = "force.json";
pub const BENCHMARK_FILE: &str = "benchmark.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

pub const BENCHMARK_HEADER: &str = "model,train_mse,train_mae,train_r2,test_mse,test_mae,test_r2";

/// Relative error bound a gradient check must stay under.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const GRADCHECK_EPS: f64 = 1e-5;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_file(path, (text + "\n").as_bytes())
}

/// Reads `data` under `schema`, extending `maps` with unseen labels.
pub fn load_data(schema: &FeatureSchema, data: &Path, maps: Option<&CategoryMaps>) -> Result<(Dataset, IngestLog)> {
    let (ds, log) = Dataset::ingest_csv(data, schema, maps)?;
    if ds.n_rows() == 0 {
        return Err(Error::Argument(format!("{}: no usable rows", data.display())));
    }
    Ok((ds, log))
}

/// The train/test partition every command derives from the same config.
pub fn split_for(cfg: &RunConfig, n_rows: usize) -> Result<SplitIndices> {
    split(n_rows, cfg.split_ratio, cfg.seeds().split)
}

/// Loads the configured model and the data under the model's schema. An
/// explicitly configured schema must equal the model's.
fn load_model_and_data(cfg: &RunConfig) -> Result<(AnyModel, Dataset, IngestLog)> {
    let model = AnyModel::load(cfg.model_file()?)?;
    if let Some(path) = &cfg.schema {
        if &FeatureSchema::load(path)? != model.schema() {
            return Err(Error::Schema(format!(
                "{} does not match the schema stored in the model",
                path.display()
            )));
        }
    }
    let (ds, log) = load_data(model.schema(), cfg.data_path()?, Some(model.category_maps()))?;
    model.as_regressor().check_dataset(&ds)?;
    Ok((model, ds, log))
}

#[derive(Debug)]
pub struct TrainOutput {
    pub model: MadcnModel,
    pub report: TrainReport,
    pub model_path: PathBuf,
    pub report_path: PathBuf,
}

/// Ingest, split, build, train; writes the model, its report and the
/// resolved config into `out_dir`.
pub fn train_run(
    cfg: &RunConfig,
    out_dir: &Path,
    log: &mut dyn FnMut(&str),
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutput> {
    let schema = FeatureSchema::load(cfg.schema_path()?)?;
    let (ds, ingest) = load_data(&schema, cfg.data_path()?, None)?;
    log(&ingest.to_string());
    let split = split_for(cfg, ds.n_rows())?;
    let model = MadcnModel::for_dataset(&ds, &split.train, cfg.model.clone(), cfg.seeds().init)?;
    let (model, report) = train_with_progress(model, &ds, &split, &cfg.train, progress)?;

    create_dir(out_dir)?;
    let model_path = out_dir.join(MODEL_FILE);
    let report_path = out_dir.join(REPORT_FILE);
    model.save(&model_path)?;
    write_json(&report_path, &report)?;
    let resolved = RunConfig {
        model_path: Some(model_path.clone()),
        ..cfg.clone()
    };
    resolved.save(&out_dir.join(RESOLVED_CONFIG))?;
    Ok(TrainOutput {
        model,
        report,
        model_path,
        report_path,
    })
}

fn triple_json(m: &MetricTriple) -> Value {
    json!({ "mse": m.mse, "mae": m.mae, "r2": m.r2 })
}

fn metrics_json(targets: &[String], metrics: &[MetricTriple]) -> Value {
    if let [only] = metrics {
        return triple_json(only);
    }
    let map: Map<String, Value> = targets
        .iter()
        .zip(metrics)
        .map(|(t, m)| (t.clone(), triple_json(m)))
        .collect();
    Value::Object(map)
}

/// Train and test metrics of a saved model on the configured split. With
/// several targets, each partition maps target names to metrics.
pub fn evaluate_run(cfg: &RunConfig, out_dir: &Path, log: &mut dyn FnMut(&str)) -> Result<Value> {
    let (model, ds, ingest) = load_model_and_data(cfg)?;
    log(&ingest.to_string());
    let split = split_for(cfg, ds.n_rows())?;
    let regressor = model.as_regressor();
    let targets: Vec<String> = ds.schema.target_fields.clone();
    let train = evaluate(regressor, &ds, &split.train)?;
    let test = evaluate(regressor, &ds, &split.test)?;
    create_dir(out_dir)?;
    cfg.save(&out_dir.join(RESOLVED_CONFIG))?;
    Ok(json!({
        "model": regressor.name(),
        "n_train": split.train.len(),
        "n_test": split.test.len(),
        "train": metrics_json(&targets, &train),
        "test": metrics_json(&targets, &test),
    }))
}

/// Predictions for every row of the data file, in file order, written as
/// `sample_id,year,<target>...`.
pub fn predict_run(cfg: &RunConfig, out_dir: &Path, log: &mut dyn FnMut(&str)) -> Result<PathBuf> {
    let (model, ds, ingest) = load_model_and_data(cfg)?;
    log(&ingest.to_string());
    let rows: Vec<usize> = (0..ds.n_rows()).collect();
    let yhat = model.as_regressor().predict_rows(&ds, &rows)?;

    create_dir(out_dir)?;
    let path = out_dir.join(PREDICTIONS_FILE);
    let mut w = csv::Writer::from_writer(create_file(&path)?);
    let mut header = vec!["sample_id".to_string(), "year".to_string()];
    header.extend(ds.schema.target_fields.iter().cloned());
    w.write_record(&header)?;
    for (i, key) in ds.row_keys.iter().enumerate() {
        let mut record = vec![key.id.clone(), key.year.clone()];
        record.extend(yhat.row(i).iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    cfg.save(&out_dir.join(RESOLVED_CONFIG))?;
    Ok(path)
}

fn explain_rows(cfg: &ExplainConfig, split: &SplitIndices, n_rows: usize) -> Result<Vec<usize>> {
    if !cfg.rows.is_empty() {
        if let Some(&r) = cfg.rows.iter().find(|&&r| r >= n_rows) {
            return Err(Error::Argument(format!(
                "explain row {r} is out of range for {n_rows} rows"
            )));
        }
        return Ok(cfg.rows.clone());
    }
    let pool: Vec<usize> = match cfg.partition {
        Partition::Train => split.train.clone(),
        Partition::Test => split.test.clone(),
        Partition::All => (0..n_rows).collect(),
    };
    Ok(pool.into_iter().take(cfg.max_samples).collect())
}

/// File name of a dependence export.
pub fn dependence_file(feature: &str, color: &str) -> String {
    format!("dependence_{feature}_by_{color}.csv")
}

#[derive(Debug)]
pub struct ExplainOutput {
    pub explanations: Vec<Explanation>,
    pub files: Vec<PathBuf>,
}

/// Shapley attributions for the selected rows against a background drawn
/// from the training partition. Writes the explanation table, importance
/// ranking, force-plot records and any requested dependence tables.
pub fn explain_run(cfg: &RunConfig, out_dir: &Path, log: &mut dyn FnMut(&str)) -> Result<ExplainOutput> {
    let ec = &cfg.explain;
    let (model, ds, ingest) = load_model_and_data(cfg)?;
    log(&ingest.to_string());
    let split = split_for(cfg, ds.n_rows())?;
    let shap_seed = cfg.seeds().shap;
    let background = BackgroundSet::sample(&ds, &split.train, ec.background_size, shap_seed)?;
    let features = explained_features(&ds.schema, &ec.exclude)?;
    let target = match &ec.target {
        None => 0,
        Some(name) => ds
            .schema
            .target_index(name)
            .ok_or_else(|| Error::Argument(format!("unknown target `{name}`")))?,
    };
    let explainer = Explainer::new(model.as_regressor(), &ds.schema, &background, features, target)?;

    let rows = explain_rows(ec, &split, ds.n_rows())?;
    let explanations = rows
        .iter()
        .map(|&row| {
            let sample = Sample::from_dataset(&ds, row)?;
            match ec.method {
                ExplainMethod::Exact => explainer.shap_exact(&sample),
                ExplainMethod::Permutation => {
                    let seed = derive_seed(shap_seed, &format!("sample{row}"));
                    explainer.shap_permutation(&sample, ec.n_permutations, seed)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    create_dir(out_dir)?;
    let mut files = Vec::new();
    let path = out_dir.join(EXPLANATIONS_FILE);
    write_explanations_csv(create_file(&path)?, &explanations)?;
    files.push(path);
    if !explanations.is_empty() {
        let path = out_dir.join(IMPORTANCE_FILE);
        write_importance_csv(create_file(&path)?, &importance_summary(&explanations)?)?;
        files.push(path);
    }
    let path = out_dir.join(FORCE_FILE);
    let force: Vec<_> = explanations.iter().map(force_record).collect();
    write_json(&path, &force)?;
    files.push(path);
    for pair in &ec.dependence {
        let records = crate::explain::dependence_export(&explanations, &pair.feature, &pair.color, &ds)?;
        let path = out_dir.join(dependence_file(&pair.feature, &pair.color));
        write_dependence_csv(create_file(&path)?, &records)?;
        files.push(path);
    }
    cfg.save(&out_dir.join(RESOLVED_CONFIG))?;
    Ok(ExplainOutput { explanations, files })
}

/// Reads an explanation table written by [`explain_run`].
pub fn read_explanations(path: &Path) -> Result<Vec<Explanation>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    crate::explain::read_explanations_csv(file)
}

/// Importance ranking recomputed from an explanation table.
pub fn importance_run(explanations_csv: &Path, out_dir: &Path) -> Result<PathBuf> {
    let rows = importance_summary(&read_explanations(explanations_csv)?)?;
    create_dir(out_dir)?;
    let path = out_dir.join(IMPORTANCE_FILE);
    write_importance_csv(create_file(&path)?, &rows)?;
    Ok(path)
}

/// Dependence table for one feature pair from an explanation table.
pub fn dependence_run(explanations_csv: &Path, feature: &str, color: &str, out_dir: &Path) -> Result<PathBuf> {
    let records: Vec<DependenceRecord> =
        crate::explain::dependence_records(&read_explanations(explanations_csv)?, feature, color)?;
    create_dir(out_dir)?;
    let path = out_dir.join(dependence_file(feature, color));
    write_dependence_csv(create_file(&path)?, &records)?;
    Ok(path)
}

/// One line of the benchmark table.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRow {
    pub model: String,
    /// Metrics on the first target, or the error message.
    pub outcome: std::result::Result<(MetricTriple, MetricTriple), String>,
}

impl BenchmarkRow {
    pub fn csv_line(&self) -> String {
        match &self.outcome {
            Ok((tr, te)) => format!(
                "{},{},{},{},{},{},{}",
                self.model, tr.mse, tr.mae, tr.r2, te.mse, te.mae, te.r2
            ),
            Err(msg) => format!("{},\"error: {}\",,,,,", self.model, msg.replace('"', "\"\"")),
        }
    }
}

pub fn write_benchmark_csv<W: Write>(mut writer: W, rows: &[BenchmarkRow]) -> Result<()> {
    let mut text = String::from(BENCHMARK_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.csv_line());
        text.push('\n');
    }
    writer
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<benchmark>", e))
}

pub const BENCHMARK_MODELS: [&str; 5] = ["LR", "KNN", "DNN", "DCN", "MADCN"];

fn first_target_metrics(
    model: &dyn Regressor,
    ds: &Dataset,
    split: &SplitIndices,
) -> Result<(MetricTriple, MetricTriple)> {
    let train = evaluate(model, ds, &split.train)?;
    let test = evaluate(model, ds, &split.test)?;
    Ok((train[0], test[0]))
}

/// Fits every benchmark model on one shared split. A model that fails
/// becomes an error row; the run fails only when every model does.
pub fn benchmark_run(cfg: &RunConfig, out_dir: &Path, log: &mut dyn FnMut(&str)) -> Result<Vec<BenchmarkRow>> {
    let schema = FeatureSchema::load(cfg.schema_path()?)?;
    let (ds, ingest) = load_data(&schema, cfg.data_path()?, None)?;
    log(&ingest.to_string());
    let split = split_for(cfg, ds.n_rows())?;
    let seeds = cfg.seeds();

    let network = |kind: ModelKind| -> Result<(MetricTriple, MetricTriple)> {
        let model = match kind {
            ModelKind::Madcn => MadcnModel::for_dataset(&ds, &split.train, cfg.model.clone(), seeds.init)?,
            ModelKind::DnnOnly => build_ablation(AblationKind::DnnOnly, &ds, &split.train, &cfg.model, seeds.init)?,
            ModelKind::DcnNoAttention => {
                build_ablation(AblationKind::DcnNoAttention, &ds, &split.train, &cfg.model, seeds.init)?
            }
        };
        let (model, _) = train_with_progress(model, &ds, &split, &cfg.train, &mut |_| {})?;
        first_target_metrics(&model, &ds, &split)
    };

    let mut rows = Vec::new();
    let mut first_error = None;
    for name in BENCHMARK_MODELS {
        log(&format!("benchmark: fitting {name}"));
        let result = match name {
            "LR" => LinearRegressor::fit(&ds, &split.train, cfg.baselines.ridge_lambda)
                .and_then(|m| first_target_metrics(&m, &ds, &split)),
            "KNN" => KnnRegressor::fit(&ds, &split.train, cfg.baselines.k)
                .and_then(|m| first_target_metrics(&m, &ds, &split)),
            "DNN" => network(ModelKind::DnnOnly),
            "DCN" => network(ModelKind::DcnNoAttention),
            _ => network(ModelKind::Madcn),
        };
        let outcome = result.map_err(|e| {
            let msg = e.to_string();
            first_error.get_or_insert(e);
            msg
        });
        rows.push(BenchmarkRow {
            model: name.to_string(),
            outcome,
        });
    }
    if rows.iter().all(|r| r.outcome.is_err()) {
        return Err(first_error.expect("every model failed"));
    }
    create_dir(out_dir)?;
    write_benchmark_csv(create_file(&out_dir.join(BENCHMARK_FILE))?, &rows)?;
    cfg.save(&out_dir.join(RESOLVED_CONFIG))?;
    Ok(rows)
}

/// Finite-difference checks of every layer type, written as JSON. Fails
/// when any case exceeds [`GRADCHECK_TOLERANCE`].
pub fn gradcheck_run(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<GradCheckCase>> {
    let cases = grad_check_suite(cfg.seeds().init, GRADCHECK_EPS)?;
    create_dir(out_dir)?;
    write_json(&out_dir.join(GRADCHECK_FILE), &cases)?;
    cfg.save(&out_dir.join(RESOLVED_CONFIG))?;
    if let Some(bad) = cases
        .iter()
        .find(|c| c.report.max_rel_error.is_nan() || c.report.max_rel_error >= GRADCHECK_TOLERANCE)
    {
        return Err(Error::Evaluation(format!(
            "gradient check failed for {}: relative error {:e}",
            bad.layer, bad.report.max_rel_error
        )));
    }
    Ok(cases)
}

#[cfg(test)]
mod tests;
