use std::cmp::Ordering;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Explanation, Method};
use crate::error::{Error, Result};
use crate::features::{Dataset, RowKey};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub feature: String,
    pub mean_abs_shap: f64,
    /// 1 for the most important feature.
    pub rank: usize,
}

/// Mean `|φ|` per feature, largest first; ties go to the lexicographically
/// smaller name.
pub fn importance_summary(explanations: &[Explanation]) -> Result<Vec<ImportanceRow>> {
    let first = explanations
        .first()
        .ok_or_else(|| Error::Argument("importance needs at least one explanation".into()))?;
    let names = &first.feature_names;
    if let Some(bad) = explanations.iter().find(|e| &e.feature_names != names) {
        return Err(Error::Argument(format!(
            "explanations disagree on features: {:?} vs {:?}",
            names, bad.feature_names
        )));
    }
    let n = explanations.len() as f64;
    let mut rows: Vec<ImportanceRow> = names
        .iter()
        .enumerate()
        .map(|(i, name)| ImportanceRow {
            feature: name.clone(),
            mean_abs_shap: explanations.iter().map(|e| e.phi[i].abs()).sum::<f64>() / n,
            rank: 0,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.mean_abs_shap
            .total_cmp(&a.mean_abs_shap)
            .then_with(|| a.feature.cmp(&b.feature))
    });
    for (r, row) in rows.iter_mut().enumerate() {
        row.rank = r + 1;
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
    #[serde(rename = "0")]
    Zero,
}

impl Direction {
    pub fn of(v: f64) -> Self {
        match v.partial_cmp(&0.0) {
            Some(Ordering::Greater) => Direction::Positive,
            Some(Ordering::Less) => Direction::Negative,
            _ => Direction::Zero,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Positive => "+",
            Direction::Negative => "-",
            Direction::Zero => "0",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceEntry {
    pub feature: String,
    pub phi: f64,
    pub feature_value: f64,
    pub direction: Direction,
}

/// The data behind a force plot: base value, output, and contributions
/// ordered by magnitude.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceRecord {
    pub sample_key: Option<RowKey>,
    pub phi0: f64,
    pub fx: f64,
    pub entries: Vec<ForceEntry>,
}

pub fn force_record(e: &Explanation) -> ForceRecord {
    let mut entries: Vec<ForceEntry> = e
        .feature_names
        .iter()
        .zip(&e.phi)
        .zip(&e.feature_values)
        .map(|((name, &phi), &value)| ForceEntry {
            feature: name.clone(),
            phi,
            feature_value: value,
            direction: Direction::of(phi),
        })
        .collect();
    entries.sort_by(|a, b| {
        b.phi
            .abs()
            .total_cmp(&a.phi.abs())
            .then_with(|| a.feature.cmp(&b.feature))
    });
    ForceRecord {
        sample_key: e.sample_key.clone(),
        phi0: e.phi0,
        fx: e.fx,
        entries,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependenceRecord {
    pub sample_key: Option<RowKey>,
    pub feature_value: f64,
    pub shap_value: f64,
    pub color_feature_value: f64,
}

/// One record per explanation pairing the raw value of `feature`, its `φ`,
/// and the raw value of `color_feature`. Both must be fields of `ds`.
pub fn dependence_export(
    explanations: &[Explanation],
    feature: &str,
    color_feature: &str,
    ds: &Dataset,
) -> Result<Vec<DependenceRecord>> {
    for name in [feature, color_feature] {
        if ds.schema.dense_index(name).is_none() && ds.schema.sparse_index(name).is_none() {
            return Err(Error::Argument(format!("unknown feature `{name}`")));
        }
    }
    dependence_records(explanations, feature, color_feature)
}

/// [`dependence_export`] without a dataset to check names against.
pub fn dependence_records(
    explanations: &[Explanation],
    feature: &str,
    color_feature: &str,
) -> Result<Vec<DependenceRecord>> {
    let position = |e: &Explanation, name: &str| {
        e.feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Argument(format!("feature `{name}` was not explained")))
    };
    explanations
        .iter()
        .map(|e| {
            let i = position(e, feature)?;
            let c = position(e, color_feature)?;
            Ok(DependenceRecord {
                sample_key: e.sample_key.clone(),
                feature_value: e.feature_values[i],
                shap_value: e.phi[i],
                color_feature_value: e.feature_values[c],
            })
        })
        .collect()
}

fn key_fields(key: &Option<RowKey>) -> (&str, &str) {
    key.as_ref().map_or(("", ""), |k| (k.id.as_str(), k.year.as_str()))
}

/// Long format: one line per (sample, feature).
pub fn write_explanations_csv<W: Write>(writer: W, explanations: &[Explanation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "sample_id",
        "year",
        "feature",
        "phi",
        "feature_value",
        "method",
        "n_permutations",
        "phi0",
        "fx",
    ])?;
    for e in explanations {
        let (id, year) = key_fields(&e.sample_key);
        for ((name, phi), value) in e.feature_names.iter().zip(&e.phi).zip(&e.feature_values) {
            w.write_record([
                id,
                year,
                name,
                &phi.to_string(),
                &value.to_string(),
                e.method.as_str(),
                &e.n_permutations.to_string(),
                &e.phi0.to_string(),
                &e.fx.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<explanations>", e))
}

/// Reads back the output of [`write_explanations_csv`]. A sample ends where
/// a feature name repeats.
pub fn read_explanations_csv<R: Read>(reader: R) -> Result<Vec<Explanation>> {
    #[derive(Deserialize)]
    struct Line {
        sample_id: String,
        year: String,
        feature: String,
        phi: f64,
        feature_value: f64,
        method: Method,
        n_permutations: usize,
        phi0: f64,
        fx: f64,
    }

    let mut out: Vec<Explanation> = Vec::new();
    let mut open = false;
    for line in csv::Reader::from_reader(reader).deserialize() {
        let line: Line = line?;
        let starts_new = !open || out.last().is_some_and(|e| e.feature_names.contains(&line.feature));
        if starts_new {
            let key = (!line.sample_id.is_empty() || !line.year.is_empty()).then(|| RowKey {
                id: line.sample_id.clone(),
                year: line.year.clone(),
            });
            out.push(Explanation {
                phi0: line.phi0,
                phi: Vec::new(),
                fx: line.fx,
                method: line.method,
                n_permutations: line.n_permutations,
                feature_names: Vec::new(),
                feature_values: Vec::new(),
                target: String::new(),
                sample_key: key,
                row: None,
                efficiency_enforced: line.method == Method::Permutation,
                residual: 0.0,
            });
            open = true;
        }
        let e = out.last_mut().expect("pushed above");
        e.feature_names.push(line.feature);
        e.phi.push(line.phi);
        e.feature_values.push(line.feature_value);
    }
    for e in &mut out {
        e.residual = e.efficiency_gap();
    }
    Ok(out)
}

pub fn write_importance_csv<W: Write>(writer: W, rows: &[ImportanceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["feature", "mean_abs_shap", "rank"])?;
    for r in rows {
        w.write_record([&r.feature, &r.mean_abs_shap.to_string(), &r.rank.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<importance>", e))
}

pub fn write_dependence_csv<W: Write>(writer: W, records: &[DependenceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "sample_id",
        "year",
        "feature_value",
        "shap_value",
        "color_feature_value",
    ])?;
    for r in records {
        let (id, year) = key_fields(&r.sample_key);
        w.write_record([
            id,
            year,
            &r.feature_value.to_string(),
            &r.shap_value.to_string(),
            &r.color_feature_value.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<dependence>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::{explained_features, BackgroundSet, Explainer, Method, Sample};
    use crate::features::{CodeMatrix, FeatureSchema};
    use crate::numcore::Matrix;
    use crate::regressor::FnRegressor;

    fn expl(names: &[&str], phi: &[f64]) -> Explanation {
        Explanation {
            phi0: 0.0,
            phi: phi.to_vec(),
            fx: phi.iter().sum(),
            method: Method::Exact,
            n_permutations: 0,
            feature_names: names.iter().map(|s| s.to_string()).collect(),
            feature_values: vec![0.0; names.len()],
            target: "y".into(),
            sample_key: None,
            row: None,
            efficiency_enforced: false,
            residual: 0.0,
        }
    }

    fn ranking(rows: &[ImportanceRow]) -> Vec<(&str, f64)> {
        rows.iter().map(|r| (r.feature.as_str(), r.mean_abs_shap)).collect()
    }

    #[test]
    fn importance_examples() {
        let one = importance_summary(&[expl(&["f1", "f2"], &[-2.0, 1.0])]).unwrap();
        assert_eq!(ranking(&one), vec![("f1", 2.0), ("f2", 1.0)]);
        assert_eq!(one[0].rank, 1);

        let two = importance_summary(&[expl(&["f1", "f2"], &[1.0, 0.0]), expl(&["f1", "f2"], &[-3.0, 0.0])]).unwrap();
        assert_eq!(ranking(&two), vec![("f1", 2.0), ("f2", 0.0)]);

        let zeros = importance_summary(&[expl(&["b", "c", "a"], &[0.0, 0.0, 0.0])]).unwrap();
        assert_eq!(ranking(&zeros), vec![("a", 0.0), ("b", 0.0), ("c", 0.0)]);

        assert!(importance_summary(&[]).is_err());
        assert!(importance_summary(&[expl(&["a"], &[1.0]), expl(&["b"], &[1.0])]).is_err());
    }

    #[test]
    fn force_examples() {
        let r = force_record(&expl(&["f1", "f2"], &[0.5, -2.0]));
        let order: Vec<_> = r.entries.iter().map(|e| (e.feature.as_str(), e.direction)).collect();
        assert_eq!(order, vec![("f2", Direction::Negative), ("f1", Direction::Positive)]);
        assert_eq!(r.fx, -1.5);

        let r = force_record(&expl(&["z", "a"], &[0.0, 0.0]));
        let order: Vec<_> = r
            .entries
            .iter()
            .map(|e| (e.feature.as_str(), e.direction.as_str()))
            .collect();
        assert_eq!(order, vec![("a", "0"), ("z", "0")]);
    }

    #[test]
    fn strongest_positive_driver_leads_the_force_record() {
        let names = ["pgdp", "ai_level", "urban_rate"];
        let r = force_record(&expl(&names, &[-0.8, 2.4, 0.3]));
        assert_eq!(r.entries[0].feature, "ai_level");
        assert_eq!(r.entries[0].direction, Direction::Positive);
    }

    fn product_fixture() -> (Dataset, Vec<Explanation>) {
        let schema = FeatureSchema::new(&[("x1", ""), ("x2", "")], &[], &["y"], "id", "year").unwrap();
        let xs = [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
        let ds = crate::synthetic::generate(&schema, 4, 0.0, 0, |_| 0.0);
        let mut ds = ds;
        ds.dense = Matrix::from_rows(&xs).unwrap();
        let model = FnRegressor::new("prod", 2, |x| x[0] * x[1]);
        let bg = BackgroundSet::new(Matrix::from_rows(&[[0.0, 0.0]]).unwrap(), CodeMatrix::zeros(1, 0)).unwrap();
        let ex = Explainer::new(
            &model,
            &schema,
            &bg,
            explained_features::<&str>(&schema, &[]).unwrap(),
            0,
        )
        .unwrap();
        let expls = (0..4)
            .map(|r| ex.shap_exact(&Sample::from_dataset(&ds, r).unwrap()).unwrap())
            .collect();
        (ds, expls)
    }

    #[test]
    fn dependence_examples() {
        let (ds, expls) = product_fixture();
        let recs = dependence_export(&expls[..3], "x1", "x2", &ds).unwrap();
        assert_eq!(recs.len(), 3);
        for (r, row) in recs.iter().zip(0..) {
            assert_eq!(r.sample_key.as_ref(), Some(&ds.row_keys[row]));
        }

        // with a zero background, φ₁ = x₁x₂/2, so its sign is that of x₁·x₂
        let recs = dependence_export(&expls, "x1", "x2", &ds).unwrap();
        for r in &recs {
            let product = r.feature_value * r.color_feature_value;
            assert_eq!(r.shap_value.signum(), product.signum());
            assert!((r.shap_value - product / 2.0).abs() < 1e-12);
        }

        let same = dependence_export(&expls, "x2", "x2", &ds).unwrap();
        assert!(same.iter().all(|r| r.feature_value == r.color_feature_value));
        assert!(dependence_export(&expls, "x9", "x2", &ds).is_err());
    }

    #[test]
    fn csv_exports() {
        let (ds, expls) = product_fixture();
        let mut buf = Vec::new();
        write_explanations_csv(&mut buf, &expls).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "sample_id,year,feature,phi,feature_value,method,n_permutations,phi0,fx"
        );
        assert_eq!(lines.count(), 8);

        let back = read_explanations_csv(text.as_bytes()).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in back.iter().zip(&expls) {
            assert_eq!(
                (&a.phi, &a.feature_names, a.fx, &a.sample_key),
                (&b.phi, &b.feature_names, b.fx, &b.sample_key)
            );
        }

        let mut buf = Vec::new();
        write_importance_csv(&mut buf, &importance_summary(&expls).unwrap()).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("feature,mean_abs_shap,rank\n"));

        let mut buf = Vec::new();
        write_dependence_csv(&mut buf, &dependence_export(&expls, "x1", "x2", &ds).unwrap()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sample_id,year,feature_value,shap_value,color_feature_value\ns0,2009,"));
    }
}
