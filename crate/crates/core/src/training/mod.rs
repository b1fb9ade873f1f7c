//! Mini-batch training of [`MadcnModel`] and split evaluation.

mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{adam_step, mse_loss, sgd_step, AdamHyper, AdamState, Optimizer};

use crate::error::{Error, Result};
use crate::features::{Dataset, SplitIndices};
use crate::madcn::{ForwardMode, MadcnModel};
use crate::metrics::{metric_triple, MetricTriple};
use crate::numcore::Matrix;
use crate::regressor::Regressor;
use crate::seeds::{derive_seed, rng_from_seed};

/// Rows per unit of parallel gradient work. Chunk boundaries are fixed, and
/// chunk results are summed in order, so the reduction never depends on the
/// thread count.
const GRAD_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            early_stop_patience: 20,
            validation_fraction: 0.1,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Argument(msg.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a nonnegative finite number");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad("adam betas must lie in (0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 0.5)");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Losses are in standardized target units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

impl EpochRecord {
    /// `epoch,train_loss,val_loss` with an empty last field when there is no
    /// validation split.
    pub fn csv_line(&self) -> String {
        match self.val_loss {
            Some(v) => format!("{},{},{}", self.epoch, self.train_loss, v),
            None => format!("{},{},", self.epoch, self.train_loss),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: String,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, when early stopping was active.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub target_names: Vec<String>,
    pub train_metrics: Vec<MetricTriple>,
    pub test_metrics: Vec<MetricTriple>,
    pub n_fit: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub wall_clock_seconds: f64,
    pub seed: u64,
    pub model_seed: u64,
}

fn check_rows(ds: &Dataset, rows: &[usize], what: &str) -> Result<()> {
    if let Some(&r) = rows.iter().find(|&&r| r >= ds.n_rows()) {
        return Err(Error::Argument(format!(
            "{what} row {r} is out of range for a dataset of {} rows",
            ds.n_rows()
        )));
    }
    Ok(())
}

/// Per-target metrics of infer-mode predictions over `rows`.
pub fn evaluate(model: &dyn Regressor, ds: &Dataset, rows: &[usize]) -> Result<Vec<MetricTriple>> {
    if rows.is_empty() {
        return Err(Error::Argument("evaluate needs at least one row".into()));
    }
    check_rows(ds, rows, "evaluation")?;
    let pred = model.predict_rows(ds, rows)?;
    let truth = ds.targets.select_rows(rows);
    (0..truth.cols())
        .map(|j| {
            let y: Vec<f64> = (0..truth.rows()).map(|i| truth[(i, j)]).collect();
            let yhat: Vec<f64> = (0..pred.rows()).map(|i| pred[(i, j)]).collect();
            metric_triple(&y, &yhat)
        })
        .collect()
}

struct BatchResult {
    grads: Vec<Matrix>,
    sse: f64,
}

/// Gradient of the batch loss `(1/batch)·ΣΣ(ŷ−y)²` in standardized units.
fn batch_gradient(model: &MadcnModel, ds: &Dataset, rows: &[usize], noise: Option<&Matrix>) -> Result<BatchResult> {
    let scale = 2.0 / rows.len() as f64;
    let chunks: Vec<Result<BatchResult>> = rows
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let dense = ds.dense.select_rows(chunk);
            let codes = ds.sparse_codes.select_rows(chunk);
            let target = model.target_scaler.scale(&ds.targets.select_rows(chunk));
            let noise = noise.map(|n| {
                let idx: Vec<usize> = (c * GRAD_CHUNK..c * GRAD_CHUNK + chunk.len()).collect();
                n.select_rows(&idx)
            });
            let (y, cache) = model.forward_cached(&dense, &codes, noise.as_ref())?;
            let diff = y.sub(&target)?;
            let sse = diff.as_slice().iter().map(|d| d * d).sum();
            let (grads, _) = model.backward(&cache, &codes, &diff.scale(scale))?;
            Ok(BatchResult { grads, sse })
        })
        .collect();

    let mut chunks = chunks.into_iter();
    let mut total = chunks.next().expect("batches are nonempty")?;
    for part in chunks {
        let part = part?;
        for (acc, g) in total.grads.iter_mut().zip(&part.grads) {
            acc.add_assign(g)?;
        }
        total.sse += part.sse;
    }
    Ok(total)
}

/// Mean squared error in standardized target units, summed over targets.
fn standardized_loss(model: &MadcnModel, ds: &Dataset, rows: &[usize]) -> Result<f64> {
    let sse: f64 = rows
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| -> Result<f64> {
            let dense = ds.dense.select_rows(chunk);
            let codes = ds.sparse_codes.select_rows(chunk);
            let target = model.target_scaler.scale(&ds.targets.select_rows(chunk));
            let (y, _) = model.forward_cached(&dense, &codes, None)?;
            Ok(y.sub(&target)?.as_slice().iter().map(|d| d * d).sum())
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(sse / rows.len() as f64)
}

pub fn train(
    model: MadcnModel,
    ds: &Dataset,
    split: &SplitIndices,
    cfg: &TrainConfig,
) -> Result<(MadcnModel, TrainReport)> {
    train_with_progress(model, ds, split, cfg, &mut |_| {})
}

/// [`train`], calling `progress` after every epoch.
pub fn train_with_progress(
    mut model: MadcnModel,
    ds: &Dataset,
    split: &SplitIndices,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<(MadcnModel, TrainReport)> {
    let started = Instant::now();
    cfg.validate()?;
    model.check_dataset(ds)?;
    if split.train.is_empty() {
        return Err(Error::Argument("the training split is empty".into()));
    }
    check_rows(ds, &split.train, "training")?;
    check_rows(ds, &split.test, "test")?;

    let (mut fit_rows, val_rows) = hold_out(&split.train, cfg);
    let mut shuffle_rng = rng_from_seed(derive_seed(cfg.seed, "shuffle"));
    let mut noise_rng = rng_from_seed(derive_seed(cfg.seed, "noise"));
    let mut adam = AdamState::new(model.params.tensors());
    let hyper = cfg.adam();
    let early_stop = cfg.early_stop_patience > 0 && !val_rows.is_empty();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Matrix>)> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        fit_rows.shuffle(&mut shuffle_rng);
        let mut sse = 0.0;
        for (b, batch) in fit_rows.chunks(cfg.batch_size).enumerate() {
            let noise = model.draw_noise(batch.len(), &mut ForwardMode::Train(&mut noise_rng));
            let result = batch_gradient(&model, ds, batch, noise.as_ref())?;
            if !result.sse.is_finite() || result.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
            let mut params = model.params.tensors_mut();
            match cfg.optimizer {
                Optimizer::Adam => adam_step(&mut params, &result.grads, &mut adam, &hyper)?,
                Optimizer::Sgd => sgd_step(&mut params, &result.grads, cfg.learning_rate)?,
            }
            sse += result.sse;
        }

        let val_loss = if val_rows.is_empty() {
            None
        } else {
            Some(standardized_loss(&model, ds, &val_rows)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: sse / fit_rows.len() as f64,
            val_loss,
        };
        progress(&record);
        history.push(record);

        if let (true, Some(v)) = (early_stop, val_loss) {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, model.params.tensors().into_iter().cloned().collect()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.early_stop_patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params.set_tensors(&params)?;
            Some(epoch)
        }
        None => None,
    };

    let train_metrics = evaluate(&model, ds, &split.train)?;
    let test_metrics = if split.test.is_empty() {
        Vec::new()
    } else {
        evaluate(&model, ds, &split.test)?
    };
    let report = TrainReport {
        model: model.kind().label().to_string(),
        epochs: history,
        best_epoch,
        stopped_early,
        target_names: ds.schema.target_fields.clone(),
        train_metrics,
        test_metrics,
        n_fit: fit_rows.len(),
        n_validation: val_rows.len(),
        n_test: split.test.len(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        seed: cfg.seed,
        model_seed: model.seed,
    };
    Ok((model, report))
}

/// Splits the training rows into fitting and validation rows. The holdout is
/// `floor(fraction · n)` rows chosen by a seeded shuffle; it is skipped when
/// that would leave either side empty.
fn hold_out(train: &[usize], cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let n = train.len();
    let n_val = (cfg.validation_fraction * n as f64).floor() as usize;
    if n_val == 0 || n_val >= n {
        return (train.to_vec(), Vec::new());
    }
    let mut rows = train.to_vec();
    rows.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, "validation")));
    let val = rows.split_off(n - n_val);
    (rows, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::split;
    use crate::madcn::{ModelConfig, ModelKind, NoiseConfig};
    use crate::synthetic::interaction_dataset;

    fn small_config(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            deep_layers: vec![16, 8],
            heads: 2,
            d_model: 8,
            d_k: 4,
            ..ModelConfig::default()
        }
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 64,
            learning_rate: 1e-2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn setup(n: usize, kind: ModelKind) -> (Dataset, SplitIndices, MadcnModel) {
        let ds = interaction_dataset(n, 5);
        let sp = split(ds.n_rows(), 0.75, 1).unwrap();
        let model = MadcnModel::for_dataset(&ds, &sp.train, small_config(kind), 2).unwrap();
        (ds, sp, model)
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (ds, sp, model) = setup(200, ModelKind::Madcn);
        let (trained, report) = train(model.clone(), &ds, &sp, &quick_cfg(0)).unwrap();
        assert_eq!(trained.params, model.params);
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (ds, sp, model) = setup(200, ModelKind::Madcn);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            early_stop_patience: 0,
            ..quick_cfg(3)
        };
        let (trained, _) = train(model.clone(), &ds, &sp, &cfg).unwrap();
        assert_eq!(trained.params, model.params);
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, sp, model) = setup(300, ModelKind::Madcn);
        let (a, ra) = train(model.clone(), &ds, &sp, &quick_cfg(4)).unwrap();
        let (b, rb) = train(model, &ds, &sp, &quick_cfg(4)).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(ra.epochs, rb.epochs);
    }

    #[test]
    fn noise_free_training_is_deterministic() {
        let ds = interaction_dataset(300, 5);
        let sp = split(ds.n_rows(), 0.75, 1).unwrap();
        let config = ModelConfig {
            noise: NoiseConfig::OFF,
            ..small_config(ModelKind::Madcn)
        };
        let model = MadcnModel::for_dataset(&ds, &sp.train, config, 2).unwrap();
        let (a, _) = train(model.clone(), &ds, &sp, &quick_cfg(3)).unwrap();
        let (b, _) = train(model, &ds, &sp, &quick_cfg(3)).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn loss_goes_down() {
        let (ds, sp, model) = setup(600, ModelKind::DcnNoAttention);
        let cfg = TrainConfig {
            early_stop_patience: 0,
            ..quick_cfg(30)
        };
        let (_, report) = train(model, &ds, &sp, &cfg).unwrap();
        let first: f64 = report.epochs[..5].iter().map(|e| e.train_loss).sum();
        let last: f64 = report.epochs[25..].iter().map(|e| e.train_loss).sum();
        assert!(last < first, "{first} -> {last}");
        assert_eq!(report.epochs.len(), 30);
        assert_eq!(report.best_epoch, None);
    }

    #[test]
    fn sgd_also_learns() {
        let (ds, sp, model) = setup(400, ModelKind::DnnOnly);
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 0.05,
            early_stop_patience: 0,
            ..quick_cfg(20)
        };
        let (_, report) = train(model, &ds, &sp, &cfg).unwrap();
        assert!(report.epochs[19].train_loss < report.epochs[0].train_loss);
    }

    #[test]
    fn early_stopping_restores_best_epoch() {
        let (ds, sp, model) = setup(300, ModelKind::Madcn);
        let cfg = TrainConfig {
            early_stop_patience: 2,
            learning_rate: 0.5,
            ..quick_cfg(40)
        };
        let (trained, report) = train(model, &ds, &sp, &cfg).unwrap();
        let best = report.best_epoch.unwrap();
        let best_val = report.epochs[best - 1].val_loss.unwrap();
        assert!(report.epochs.iter().all(|e| e.val_loss.unwrap() >= best_val));
        if report.stopped_early {
            assert_eq!(report.epochs.len(), best + 2);
        }
        let (fit, val) = hold_out(&sp.train, &cfg);
        assert_eq!(fit.len() + val.len(), sp.train.len());
        let restored = standardized_loss(&trained, &ds, &val).unwrap();
        assert_eq!(restored, best_val);
    }

    #[test]
    fn validation_holdout_sizes() {
        let cfg = TrainConfig::default();
        let rows: Vec<usize> = (0..100).collect();
        let (fit, val) = hold_out(&rows, &cfg);
        assert_eq!((fit.len(), val.len()), (90, 10));
        let (fit, val) = hold_out(&rows[..5], &cfg);
        assert_eq!((fit.len(), val.len()), (5, 0));
    }

    #[test]
    fn divergence_is_reported() {
        let (ds, sp, mut model) = setup(200, ModelKind::DnnOnly);
        model.params.output_head.bias[(0, 0)] = f64::NAN;
        let err = train(model, &ds, &sp, &quick_cfg(2)).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1, batch: 1 }), "{err}");
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let (ds, _, model) = setup(50, ModelKind::DnnOnly);
        let sp = SplitIndices {
            train: vec![],
            test: (0..50).collect(),
            seed: 0,
        };
        assert!(matches!(train(model, &ds, &sp, &quick_cfg(1)), Err(Error::Argument(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                adam_beta1: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                adam_eps: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                validation_fraction: 0.5,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Argument(_))));
        }
    }

    struct Oracle;

    impl Regressor for Oracle {
        fn name(&self) -> String {
            "oracle".into()
        }
        fn n_targets(&self) -> usize {
            1
        }
        fn predict(&self, dense: &Matrix, _: &crate::features::CodeMatrix) -> Result<Matrix> {
            let rows: Vec<[f64; 1]> = dense.iter_rows().map(|x| [3.0 * x[0] + 2.0 * x[1] * x[2]]).collect();
            Matrix::from_rows(&rows)
        }
    }

    struct Constant(f64);

    impl Regressor for Constant {
        fn name(&self) -> String {
            "constant".into()
        }
        fn n_targets(&self) -> usize {
            1
        }
        fn predict(&self, dense: &Matrix, _: &crate::features::CodeMatrix) -> Result<Matrix> {
            Ok(Matrix::filled(dense.rows(), 1, self.0))
        }
    }

    #[test]
    fn evaluate_examples() {
        let mut ds = interaction_dataset(100, 9);
        for i in 0..100 {
            let x = ds.dense.row(i).to_vec();
            ds.targets[(i, 0)] = 3.0 * x[0] + 2.0 * x[1] * x[2];
        }
        let rows: Vec<usize> = (0..100).collect();
        let m = evaluate(&Oracle, &ds, &rows).unwrap();
        assert_eq!((m[0].mse, m[0].mae, m[0].r2), (0.0, 0.0, 1.0));

        let mean = ds.targets.as_slice().iter().sum::<f64>() / 100.0;
        let m = evaluate(&Constant(mean), &ds, &rows).unwrap();
        assert!(m[0].r2.abs() < 1e-12);

        assert!(matches!(evaluate(&Oracle, &ds, &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn evaluate_ignores_row_order() {
        let (ds, sp, model) = setup(200, ModelKind::Madcn);
        let a = evaluate(&model, &ds, &sp.test).unwrap();
        let mut rev = sp.test.clone();
        rev.reverse();
        let b = evaluate(&model, &ds, &rev).unwrap();
        assert!((a[0].mse - b[0].mse).abs() <= 1e-12);
        assert!((a[0].mae - b[0].mae).abs() <= 1e-12);
        assert!((a[0].r2 - b[0].r2).abs() <= 1e-12);
    }

    #[test]
    fn report_serializes() {
        let (ds, sp, model) = setup(100, ModelKind::DnnOnly);
        let (_, report) = train(model, &ds, &sp, &quick_cfg(2)).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: TrainReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.epochs, report.epochs);
        assert_eq!(report.epochs[0].csv_line().split(',').count(), 3);
    }
}
