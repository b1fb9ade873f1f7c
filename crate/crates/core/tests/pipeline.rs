use std::collections::BTreeMap;

use madcn_core::baselines::{AnyModel, KnnRegressor, LinearRegressor};
use madcn_core::explain::{explained_features, BackgroundSet, Explainer, Sample};
use madcn_core::features::{split, CodeMatrix, RowKey};
use madcn_core::synthetic::{generate, interaction_schema};
use madcn_core::training::{evaluate, train};
use madcn_core::{Dataset, FeatureSchema, MadcnModel, Matrix, ModelConfig, TrainConfig};
use proptest::prelude::*;

fn panel_schema() -> FeatureSchema {
    FeatureSchema::new(
        &[("gdp", "yuan"), ("nqpf", "")],
        &[("city", 6), ("year", 5)],
        &["co2"],
        "city",
        "year",
    )
    .unwrap()
}

fn panel(values: &[(f64, f64, usize, usize, f64)]) -> Dataset {
    let n = values.len();
    let cities = ["Beijing", "Wuhan", "Xi'an", "Lanzhou, Gansu", "Hefei", "Kunming"];
    let years = ["2009", "2010", "2011", "2012", "2013"];
    let mut maps = BTreeMap::new();
    maps.insert("city".to_string(), cities.iter().map(|s| s.to_string()).collect());
    maps.insert("year".to_string(), years.iter().map(|s| s.to_string()).collect());
    Dataset {
        schema: panel_schema(),
        dense: Matrix::new(n, 2, values.iter().flat_map(|v| [v.0, v.1]).collect()).unwrap(),
        sparse_codes: CodeMatrix::new(n, 2, values.iter().flat_map(|v| [v.2, v.3]).collect()).unwrap(),
        targets: Matrix::new(n, 1, values.iter().map(|v| v.4).collect()).unwrap(),
        row_keys: values
            .iter()
            .map(|v| RowKey {
                id: cities[v.2].to_string(),
                year: years[v.3].to_string(),
            })
            .collect(),
        category_maps: maps,
    }
}

proptest! {
    #[test]
    fn csv_round_trip_preserves_every_value(
        rows in prop::collection::vec(
            (-1e12f64..1e12, -1.0f64..1.0, 0usize..6, 0usize..5, -1e6f64..1e6),
            1..30,
        )
    ) {
        let ds = panel(&rows);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let (back, log) = Dataset::ingest_reader(buf.as_slice(), &ds.schema, Some(&ds.category_maps)).unwrap();
        prop_assert_eq!(log.rows_kept, rows.len());
        prop_assert_eq!(back, ds);
    }
}

#[test]
fn fit_evaluate_persist_and_explain() {
    let schema = interaction_schema();
    let ds = generate(&schema, 300, 0.05, 3, |x| 2.0 * x[0] - x[1] + 0.5 * x[2]);
    let parts = split(ds.n_rows(), 0.75, 4).unwrap();

    let linear = LinearRegressor::fit(&ds, &parts.train, 1e-6).unwrap();
    let r2 = evaluate(&linear, &ds, &parts.test).unwrap()[0].r2;
    assert!(r2 > 0.99, "linear fit of a linear target: {r2}");

    let knn = KnnRegressor::fit(&ds, &parts.train, 5).unwrap();
    let knn_r2 = evaluate(&knn, &ds, &parts.test).unwrap()[0].r2;
    assert!(knn_r2 > 0.5 && knn_r2 < r2, "knn {knn_r2}");

    let config = ModelConfig {
        deep_layers: vec![16],
        d_model: 8,
        heads: 2,
        ..ModelConfig::default()
    };
    let model = MadcnModel::for_dataset(&ds, &parts.train, config, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 32,
        learning_rate: 5e-3,
        seed: 6,
        ..TrainConfig::default()
    };
    let (model, report) = train(model, &ds, &parts, &cfg).unwrap();
    assert!(report.test_metrics[0].r2 > 0.9, "{:?}", report.test_metrics);

    // every persisted kind comes back through the shared loader
    for original in [
        AnyModel::Madcn(model.clone()),
        AnyModel::Linear(linear),
        AnyModel::Knn(knn),
    ] {
        let back = AnyModel::from_bytes(&original.to_bytes().unwrap()).unwrap();
        let (a, b) = (original.as_regressor(), back.as_regressor());
        assert_eq!(a.name(), b.name());
        assert_eq!(
            a.predict_rows(&ds, &parts.test).unwrap(),
            b.predict_rows(&ds, &parts.test).unwrap()
        );
    }

    let background = BackgroundSet::sample(&ds, &parts.train, 16, 7).unwrap();
    let features = explained_features::<&str>(&ds.schema, &[]).unwrap();
    let explainer = Explainer::new(&model, &ds.schema, &background, features, 0).unwrap();
    for &row in parts.test.iter().take(5) {
        let e = explainer.shap_exact(&Sample::from_dataset(&ds, row).unwrap()).unwrap();
        let fx = model.predict_rows(&ds, &[row]).unwrap()[(0, 0)];
        assert_eq!(e.fx, fx);
        assert!(e.efficiency_gap().abs() < 1e-8);
        assert_eq!(e.feature_names, ["x1", "x2", "x3"]);
    }
}

#[test]
fn bundled_panel_schema_matches_the_built_in_one() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/carbon_panel_schema.json");
    assert_eq!(FeatureSchema::load(&path).unwrap(), FeatureSchema::carbon_panel());
}
