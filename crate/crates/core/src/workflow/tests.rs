use super::*;
use crate::madcn::ModelConfig;
use crate::synthetic::{interaction_dataset, interaction_schema};
use crate::training::TrainConfig;

struct Fixture {
    dir: tempfile::TempDir,
    cfg: RunConfig,
}

fn fixture(n: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let schema = dir.path().join("schema.json");
    let data = dir.path().join("data.csv");
    interaction_schema().save(&schema).unwrap();
    interaction_dataset(n, 5).save_csv(&data).unwrap();
    let cfg = RunConfig {
        schema: Some(schema),
        data: Some(data),
        model: ModelConfig {
            deep_layers: vec![16],
            d_model: 8,
            heads: 2,
            d_k: 4,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 5,
            batch_size: 32,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
    .resolve(None)
    .unwrap();
    Fixture { dir, cfg }
}

fn quiet(_: &str) {}

#[test]
fn train_writes_model_report_and_config() {
    let f = fixture(120);
    let out = f.dir.path().join("run");
    let trained = train_run(&f.cfg, &out, &mut quiet, &mut |_| {}).unwrap();
    assert!(trained.model_path.exists() && trained.report_path.exists());
    assert_eq!(trained.report.epochs.len(), 5);

    let resolved = RunConfig::load(&out.join(RESOLVED_CONFIG)).unwrap();
    assert_eq!(resolved.model_path.as_deref(), Some(trained.model_path.as_path()));
    assert_eq!(resolved.sub_seeds, f.cfg.sub_seeds);

    // rerunning from the echoed config reproduces the model byte for byte
    let again = f.dir.path().join("again");
    train_run(&resolved, &again, &mut quiet, &mut |_| {}).unwrap();
    assert_eq!(
        std::fs::read(out.join(MODEL_FILE)).unwrap(),
        std::fs::read(again.join(MODEL_FILE)).unwrap()
    );
}

#[test]
fn evaluate_matches_the_training_report() {
    let f = fixture(120);
    let out = f.dir.path().join("run");
    let trained = train_run(&f.cfg, &out, &mut quiet, &mut |_| {}).unwrap();
    let cfg = RunConfig {
        model_path: Some(trained.model_path),
        ..f.cfg.clone()
    };
    let metrics = evaluate_run(&cfg, &f.dir.path().join("eval"), &mut quiet).unwrap();
    assert_eq!(metrics["model"], "MADCN");
    assert_eq!(metrics["n_train"], 90);
    assert_eq!(metrics["n_test"], 30);
    assert_eq!(
        metrics["test"]["r2"].as_f64().unwrap(),
        trained.report.test_metrics[0].r2
    );
    assert_eq!(
        metrics["train"]["mse"].as_f64().unwrap(),
        trained.report.train_metrics[0].mse
    );
}

#[test]
fn schema_mismatch_is_a_schema_error() {
    let f = fixture(60);
    let out = f.dir.path().join("run");
    let trained = train_run(&f.cfg, &out, &mut quiet, &mut |_| {}).unwrap();
    let other = f.dir.path().join("other.csv");
    std::fs::write(&other, "id,year,x1,x2,y\na,2010,0.1,0.2,0.3\nb,2011,0.2,0.1,0.0\n").unwrap();
    let cfg = RunConfig {
        model_path: Some(trained.model_path),
        data: Some(other),
        ..f.cfg.clone()
    };
    let err = evaluate_run(&cfg, &f.dir.path().join("eval"), &mut quiet).unwrap_err();
    assert!(matches!(err.root(), Error::Schema(_)), "{err}");
}

#[test]
fn predictions_cover_every_row() {
    let f = fixture(60);
    let trained = train_run(&f.cfg, &f.dir.path().join("run"), &mut quiet, &mut |_| {}).unwrap();
    let cfg = RunConfig {
        model_path: Some(trained.model_path),
        ..f.cfg.clone()
    };
    let path = predict_run(&cfg, &f.dir.path().join("pred"), &mut quiet).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sample_id,year,y");
    assert_eq!(lines.len(), 61);
    assert!(lines[1].starts_with("s0,2009,"));
}

#[test]
fn explain_writes_consistent_tables() {
    let f = fixture(80);
    let trained = train_run(&f.cfg, &f.dir.path().join("run"), &mut quiet, &mut |_| {}).unwrap();
    let mut cfg = RunConfig {
        model_path: Some(trained.model_path),
        ..f.cfg.clone()
    };
    cfg.explain.max_samples = 4;
    cfg.explain.dependence = vec![DependencePair {
        feature: "x2".into(),
        color: "x3".into(),
    }];
    let out = f.dir.path().join("explain");
    let result = explain_run(&cfg, &out, &mut quiet).unwrap();
    assert_eq!(result.explanations.len(), 4);
    for e in &result.explanations {
        assert!(e.efficiency_gap().abs() <= 1e-8);
    }
    let back = read_explanations(&out.join(EXPLANATIONS_FILE)).unwrap();
    assert_eq!(back.len(), 4);
    for (a, b) in back.iter().zip(&result.explanations) {
        assert_eq!(a.phi, b.phi);
    }

    // recomputing from the table gives the same importance file
    let again = f.dir.path().join("again");
    let path = importance_run(&out.join(EXPLANATIONS_FILE), &again).unwrap();
    assert_eq!(
        std::fs::read(path).unwrap(),
        std::fs::read(out.join(IMPORTANCE_FILE)).unwrap()
    );
    let dep = dependence_run(&out.join(EXPLANATIONS_FILE), "x2", "x3", &again).unwrap();
    assert_eq!(
        std::fs::read(dep).unwrap(),
        std::fs::read(out.join(dependence_file("x2", "x3"))).unwrap()
    );
}

#[test]
fn permutation_explanations_are_seeded() {
    let f = fixture(80);
    let trained = train_run(&f.cfg, &f.dir.path().join("run"), &mut quiet, &mut |_| {}).unwrap();
    let mut cfg = RunConfig {
        model_path: Some(trained.model_path),
        ..f.cfg.clone()
    };
    cfg.explain.method = ExplainMethod::Permutation;
    cfg.explain.n_permutations = 6;
    cfg.explain.rows = vec![3, 7];
    let a = explain_run(&cfg, &f.dir.path().join("a"), &mut quiet).unwrap();
    let b = explain_run(&cfg, &f.dir.path().join("b"), &mut quiet).unwrap();
    assert_eq!(a.explanations, b.explanations);
    assert_eq!(a.explanations[0].row, Some(3));
}

#[test]
fn benchmark_table_layout() {
    let f = fixture(100);
    let out = f.dir.path().join("bench");
    let rows = benchmark_run(&f.cfg, &out, &mut quiet).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(names, BENCHMARK_MODELS);
    let text = std::fs::read_to_string(out.join(BENCHMARK_FILE)).unwrap();
    assert_eq!(text.lines().next(), Some(BENCHMARK_HEADER));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn error_rows_keep_the_column_count() {
    let row = BenchmarkRow {
        model: "KNN".into(),
        outcome: Err("k=\"9\" exceeds rows".into()),
    };
    let line = row.csv_line();
    let record = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(line.as_bytes())
        .records()
        .next()
        .unwrap()
        .unwrap();
    assert_eq!(record.len(), 7);
    assert_eq!(&record[1], "error: k=\"9\" exceeds rows");
}

#[test]
fn a_failing_model_becomes_an_error_row() {
    let mut f = fixture(40);
    f.cfg.baselines.k = 1000;
    let rows = benchmark_run(&f.cfg, &f.dir.path().join("bench"), &mut quiet).unwrap();
    assert!(rows[1].outcome.is_err());
    assert!(rows[0].outcome.is_ok());
}

#[test]
fn missing_inputs_name_the_path() {
    let f = fixture(10);
    let cfg = RunConfig {
        data: Some(f.dir.path().join("nope.csv")),
        ..f.cfg.clone()
    };
    let err = train_run(&cfg, &f.dir.path().join("run"), &mut quiet, &mut |_| {}).unwrap_err();
    assert!(matches!(err.root(), Error::Io { .. }));
    assert!(err.to_string().contains("nope.csv"));
}

#[test]
fn gradcheck_passes_and_is_recorded() {
    let f = fixture(10);
    let out = f.dir.path().join("gc");
    let cases = gradcheck_run(&f.cfg, &out).unwrap();
    assert_eq!(cases.len(), 6);
    assert!(out.join(GRADCHECK_FILE).exists());
}
