use rand::Rng as _;
use serde::Serialize;

use super::layers::EmbeddingProbe;
use super::model::{MadcnModel, ModelConfig, ModelKind, ModelProbe, TargetScaler};
use crate::error::Result;
use crate::features::{CodeMatrix, FeatureSchema, FieldStats, StandardizerStats};
use crate::numcore::{grad_check, GradCheckReport, Matrix};
use crate::seeds::{rng_from_seed, Rng};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckCase {
    pub layer: &'static str,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

fn uniform(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).expect("sized by construction")
}

/// Finite-difference checks of every layer type and of the whole infer-mode
/// network, on a small randomly initialized model.
pub fn grad_check_suite(seed: u64, eps: f64) -> Result<Vec<GradCheckCase>> {
    let mut rng = rng_from_seed(seed);
    let schema = FeatureSchema::new(
        &[("a", ""), ("b", ""), ("c", "")],
        &[("city", 4), ("year", 3)],
        &["y"],
        "city",
        "year",
    )?;
    let standardizer = StandardizerStats {
        fields: ["a", "b", "c"]
            .iter()
            .map(|n| FieldStats {
                name: n.to_string(),
                mu: rng.random_range(-1.0..1.0),
                sigma: rng.random_range(0.5..2.0),
                constant: false,
            })
            .collect(),
    };
    let scaler = TargetScaler {
        mu: vec![rng.random_range(-1.0..1.0)],
        sigma: vec![rng.random_range(0.5..2.0)],
    };
    let config = ModelConfig {
        kind: ModelKind::Madcn,
        embed_dim: 3,
        cross_layers: 2,
        deep_layers: vec![6, 4],
        heads: 2,
        d_model: 4,
        d_k: 3,
        ..ModelConfig::default()
    };
    let mut model = MadcnModel::new(schema, standardizer, scaler, config, rng.random())?;
    // nonzero biases so the bias paths are exercised away from zero
    for c in &mut model.params.cross_stack {
        c.b = uniform(1, 1, &mut rng);
    }
    for d in &mut model.params.deep_stack {
        d.bias = uniform(1, d.bias.cols(), &mut rng);
    }
    model.params.output_head.bias = uniform(1, 1, &mut rng);

    let batch = 3;
    let d_in = model.input_dim();
    let mut cases = Vec::new();
    let mut run = |layer: &'static str, report: GradCheckReport| cases.push(GradCheckCase { layer, report });

    let mut emb = EmbeddingProbe {
        table: model.params.embeddings[0].clone(),
        codes: vec![0, 3, 3, 1],
    };
    run("embedding", grad_check(&mut emb, &[], eps)?);

    let mut cross = model.params.cross_stack[0].clone();
    let (x0, xl) = (uniform(batch, d_in, &mut rng), uniform(batch, d_in, &mut rng));
    run("cross", grad_check(&mut cross, &[x0, xl], eps)?);

    let mut dense = model.params.deep_stack[0].clone();
    run("dense", grad_check(&mut dense, &[uniform(batch, d_in, &mut rng)], eps)?);

    let mut attention = model.params.attention.clone().expect("the full model has attention");
    run(
        "attention",
        grad_check(&mut attention, &[uniform(batch, d_in, &mut rng)], eps)?,
    );

    let mut head = model.params.output_head.clone();
    let head_in = head.in_dim();
    run(
        "output_head",
        grad_check(&mut head, &[uniform(batch, head_in, &mut rng)], eps)?,
    );

    let codes = CodeMatrix::new(batch, 2, vec![0, 2, 3, 1, 1, 0])?;
    let dense_in = uniform(batch, 3, &mut rng).scale(2.0);
    let mut probe = ModelProbe { model, codes };
    run("model", grad_check(&mut probe, &[dense_in], eps)?);
    Ok(cases)
}
