//! Core types for weakly supervised distributional data and CSV ingestion.
//!
//! A [`Dataset`] holds distributional instances (each an empirical sample
//! matrix) partitioned into labeled bags. Labels live at the bag level only;
//! instance labels are never part of this structure.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An empirical distribution: the sample vectors of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistInstance {
    pub instance_id: String,
    /// r_i rows of d columns; every value finite.
    pub samples: DMatrix<f64>,
}

impl DistInstance {
    pub fn new(instance_id: impl Into<String>, samples: DMatrix<f64>) -> Self {
        Self { instance_id: instance_id.into(), samples }
    }

    /// Number of sample vectors.
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    /// Feature dimension d.
    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    /// Per-feature mean of the samples.
    pub fn mean_vector(&self) -> Vec<f64> {
        let r = self.len() as f64;
        (0..self.dim()).map(|j| self.samples.column(j).sum() / r).collect()
    }
}

/// A labeled top-level group of instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub bag_id: String,
    /// Indices into the dataset's instance list.
    pub instance_indices: Vec<usize>,
    /// Bag label, −1 or +1.
    pub label: i8,
}

impl Bag {
    pub fn is_positive(&self) -> bool {
        self.label > 0
    }
}

/// Instances plus the bag partition over them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub instances: Vec<DistInstance>,
    pub bags: Vec<Bag>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn n_instances(&self) -> usize {
        self.instances.len()
    }

    pub fn n_bags(&self) -> usize {
        self.bags.len()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn total_samples(&self) -> usize {
        self.instances.iter().map(|p| p.len()).sum()
    }

    /// Map from instance index to owning bag index. The partition property
    /// guarantees the map is total and single-valued.
    pub fn bag_of_instance(&self) -> Vec<usize> {
        let mut owner = vec![usize::MAX; self.instances.len()];
        for (b, bag) in self.bags.iter().enumerate() {
            for &i in &bag.instance_indices {
                owner[i] = b;
            }
        }
        owner
    }

    /// Bag label of each instance, as ±1.0.
    pub fn instance_bag_labels(&self) -> Vec<f64> {
        let owner = self.bag_of_instance();
        owner.iter().map(|&b| f64::from(self.bags[b].label)).collect()
    }

    /// Checks the structural invariants: non-empty bags and instances, a
    /// uniform feature dimension, finite values, ±1 labels, and the partition
    /// property (every instance in exactly one bag).
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::Data("dataset has no features".into()));
        }
        if self.instances.is_empty() {
            return Err(Error::NoSamples);
        }
        for inst in &self.instances {
            if inst.is_empty() {
                return Err(Error::Data(format!("instance '{}' has no samples", inst.instance_id)));
            }
            if inst.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: inst.dim() });
            }
            if inst.samples.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "instance '{}' contains a non-finite value",
                    inst.instance_id
                )));
            }
        }
        let mut seen = vec![false; self.instances.len()];
        for bag in &self.bags {
            if bag.instance_indices.is_empty() {
                return Err(Error::Data(format!("bag '{}' is empty", bag.bag_id)));
            }
            if bag.label != 1 && bag.label != -1 {
                return Err(Error::Data(format!("bag '{}' has label {}", bag.bag_id, bag.label)));
            }
            for &i in &bag.instance_indices {
                if i >= self.instances.len() || seen[i] {
                    return Err(Error::Data(format!(
                        "instance index {i} is not assigned to exactly one bag"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::Data("an instance belongs to no bag".into()));
        }
        Ok(())
    }

    /// Restricts the dataset to the given bags (in the given order),
    /// reindexing instances densely.
    pub fn subset_bags(&self, bag_indices: &[usize]) -> Dataset {
        let mut instances = Vec::new();
        let mut bags = Vec::new();
        for &b in bag_indices {
            let src = &self.bags[b];
            let mut idx = Vec::with_capacity(src.instance_indices.len());
            for &i in &src.instance_indices {
                idx.push(instances.len());
                instances.push(self.instances[i].clone());
            }
            bags.push(Bag { bag_id: src.bag_id.clone(), instance_indices: idx, label: src.label });
        }
        Dataset { instances, bags, feature_names: self.feature_names.clone() }
    }
}

fn parse_label(raw: &str, bag_id: &str) -> Result<i8> {
    match raw.trim() {
        "1" | "+1" => Ok(1),
        "-1" => Ok(-1),
        other => Err(Error::Data(format!("bag '{bag_id}' has invalid label '{other}'"))),
    }
}

/// Loads a dataset from CSV with header `bag_id,bag_label,instance_id,<features...>`
/// and one row per sample. Rows are grouped by (bag_id, instance_id); bags and
/// instances keep first-appearance order.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    if headers.len() < 4 {
        return Err(Error::Data(
            "header must be bag_id,bag_label,instance_id followed by at least one feature".into(),
        ));
    }
    for (k, expect) in ["bag_id", "bag_label", "instance_id"].iter().enumerate() {
        if headers.get(k) != Some(expect) {
            return Err(Error::Data(format!("missing column '{expect}' at position {k}")));
        }
    }
    let feature_names: Vec<String> = headers.iter().skip(3).map(str::to_string).collect();
    let d = feature_names.len();

    // (bag_id, instance_id) -> position in `rows`; bag_id -> (label, instance positions)
    let mut inst_key: HashMap<(String, String), usize> = HashMap::new();
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new(); // instance_id, flat samples
    let mut bag_key: HashMap<String, usize> = HashMap::new();
    let mut bag_list: Vec<(String, i8, Vec<usize>)> = Vec::new();

    for (ridx, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 3 + d {
            return Err(Error::Data(format!(
                "row {} has {} fields, expected {}",
                ridx + 2,
                record.len(),
                3 + d
            )));
        }
        let bag_id = record[0].to_string();
        let label = parse_label(&record[1], &bag_id)?;
        let instance_id = record[2].to_string();

        let mut values = Vec::with_capacity(d);
        for (j, raw) in record.iter().skip(3).enumerate() {
            let v: f64 = raw.trim().parse().map_err(|_| Error::NonFinite {
                col: feature_names[j].clone(),
                row: ridx + 2,
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { col: feature_names[j].clone(), row: ridx + 2 });
            }
            values.push(v);
        }

        let bag_pos = match bag_key.get(&bag_id) {
            Some(&p) => {
                if bag_list[p].1 != label {
                    return Err(Error::InconsistentBagLabel(bag_id));
                }
                p
            }
            None => {
                bag_key.insert(bag_id.clone(), bag_list.len());
                bag_list.push((bag_id.clone(), label, Vec::new()));
                bag_list.len() - 1
            }
        };

        let key = (bag_id, instance_id.clone());
        match inst_key.get(&key) {
            Some(&p) => rows[p].1.extend(values),
            None => {
                inst_key.insert(key, rows.len());
                bag_list[bag_pos].2.push(rows.len());
                rows.push((instance_id, values));
            }
        }
    }

    if rows.is_empty() {
        return Err(Error::NoSamples);
    }

    let instances: Vec<DistInstance> = rows
        .into_iter()
        .map(|(id, flat)| {
            let r = flat.len() / d;
            DistInstance::new(id, DMatrix::from_row_slice(r, d, &flat))
        })
        .collect();
    let bags: Vec<Bag> = bag_list
        .into_iter()
        .map(|(bag_id, label, instance_indices)| Bag { bag_id, instance_indices, label })
        .collect();

    let ds = Dataset { instances, bags, feature_names };
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset in the same CSV format accepted by [`load_dataset`].
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["bag_id".to_string(), "bag_label".into(), "instance_id".into()];
    header.extend(ds.feature_names.iter().cloned());
    w.write_record(&header)?;
    for bag in &ds.bags {
        for &i in &bag.instance_indices {
            let inst = &ds.instances[i];
            for r in 0..inst.len() {
                let mut rec = vec![bag.bag_id.clone(), bag.label.to_string(), inst.instance_id.clone()];
                for c in 0..inst.dim() {
                    rec.push(format!("{}", inst.samples[(r, c)]));
                }
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-feature centering and scaling parameters, fit on training data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    /// Indices of retained feature columns (all, unless constants were dropped).
    pub keep: Vec<usize>,
    pub means: Vec<f64>,
    /// Sample standard deviations (n−1 denominator), strictly positive.
    pub sds: Vec<f64>,
    /// Names of dropped zero-variance features, for diagnostics.
    pub dropped: Vec<String>,
}

/// Fits pooled per-feature mean and standard deviation over every sample of
/// every instance. Zero-variance features are an error unless `drop_constant`
/// is set, in which case they are dropped with a warning.
pub fn fit_scaler(ds: &Dataset, drop_constant: bool) -> Result<ScaleParams> {
    let n = ds.total_samples();
    if n < 2 {
        return Err(Error::Data("need at least 2 samples to fit a scaler".into()));
    }
    let d = ds.dim();
    let mut keep = Vec::with_capacity(d);
    let mut means = Vec::with_capacity(d);
    let mut sds = Vec::with_capacity(d);
    let mut dropped = Vec::new();
    for j in 0..d {
        let mut sum = 0.0;
        for inst in &ds.instances {
            sum += inst.samples.column(j).sum();
        }
        let mean = sum / n as f64;
        let mut ss = 0.0;
        for inst in &ds.instances {
            for r in 0..inst.len() {
                let delta = inst.samples[(r, j)] - mean;
                ss += delta * delta;
            }
        }
        let sd = (ss / (n as f64 - 1.0)).sqrt();
        if sd <= 1e-12 * (1.0 + mean.abs()) {
            if drop_constant {
                log::warn!("dropping zero-variance feature '{}'", ds.feature_names[j]);
                dropped.push(ds.feature_names[j].clone());
                continue;
            }
            return Err(Error::ZeroVariance(ds.feature_names[j].clone()));
        }
        keep.push(j);
        means.push(mean);
        sds.push(sd);
    }
    if keep.is_empty() {
        return Err(Error::Data("all features have zero variance".into()));
    }
    Ok(ScaleParams { keep, means, sds, dropped })
}

/// Applies centering/scaling (and any column drops) fit by [`fit_scaler`].
pub fn apply_scaler(ds: &Dataset, params: &ScaleParams) -> Result<Dataset> {
    let d = ds.dim();
    if let Some(&bad) = params.keep.iter().find(|&&j| j >= d) {
        return Err(Error::DimensionMismatch { expected: bad + 1, got: d });
    }
    let instances = ds
        .instances
        .iter()
        .map(|inst| {
            let r = inst.len();
            let mut m = DMatrix::zeros(r, params.keep.len());
            for (jj, &j) in params.keep.iter().enumerate() {
                for i in 0..r {
                    m[(i, jj)] = (inst.samples[(i, j)] - params.means[jj]) / params.sds[jj];
                }
            }
            DistInstance::new(inst.instance_id.clone(), m)
        })
        .collect();
    Ok(Dataset {
        instances,
        bags: ds.bags.clone(),
        feature_names: params.keep.iter().map(|&j| ds.feature_names[j].clone()).collect(),
    })
}

/// Applies a natural-log transform to the named columns. Values must be
/// strictly positive; this is never applied automatically.
pub fn apply_log_transform(ds: &Dataset, columns: &[String]) -> Result<Dataset> {
    let mut idx = Vec::with_capacity(columns.len());
    for c in columns {
        match ds.feature_names.iter().position(|n| n == c) {
            Some(j) => idx.push(j),
            None => return Err(Error::Data(format!("unknown feature '{c}' for log transform"))),
        }
    }
    let instances = ds
        .instances
        .iter()
        .map(|inst| {
            let mut m = inst.samples.clone();
            for &j in &idx {
                for i in 0..m.nrows() {
                    let v = m[(i, j)];
                    if v <= 0.0 {
                        return Err(Error::Data(format!(
                            "log transform of non-positive value {v} in feature '{}'",
                            ds.feature_names[j]
                        )));
                    }
                    m[(i, j)] = v.ln();
                }
            }
            Ok(DistInstance::new(inst.instance_id.clone(), m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { instances, bags: ds.bags.clone(), feature_names: ds.feature_names.clone() })
}

/// Convenience constructor used by generators and tests.
pub fn dataset_from_parts(
    instances: Vec<DistInstance>,
    bags: Vec<Bag>,
    feature_names: Vec<String>,
) -> Result<Dataset> {
    let ds = Dataset { instances, bags, feature_names };
    ds.validate()?;
    Ok(ds)
}

/// Writes generated instance labels next to a dataset file, for diagnostics.
pub fn save_instance_labels(
    labels: &[i8],
    instance_ids: &[String],
    path: impl AsRef<Path>,
) -> Result<()> {
    let obj: Vec<serde_json::Value> = instance_ids
        .iter()
        .zip(labels)
        .map(|(id, &y)| serde_json::json!({ "instance_id": id, "y": y }))
        .collect();
    let mut f = std::fs::File::create(path.as_ref())?;
    writeln!(f, "{}", serde_json::to_string_pretty(&obj)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn groups_rows_into_instances_and_bags() {
        let f = write_csv(
            "bag_id,bag_label,instance_id,f1,f2\n\
             A,1,A.1,0.5,1.0\n\
             A,1,A.1,0.6,1.1\n\
             B,-1,B.1,0.0,0.0\n\
             B,-1,B.2,1.0,2.0\n",
        );
        let ds = load_dataset(f.path()).unwrap();
        assert_eq!(ds.n_bags(), 2);
        assert_eq!(ds.n_instances(), 3);
        let sizes: Vec<usize> = ds.instances.iter().map(|p| p.len()).collect();
        assert_eq!(sizes, vec![2, 1, 1]);
        assert_eq!(ds.bags[0].label, 1);
        assert_eq!(ds.bags[1].label, -1);
        assert_eq!(ds.feature_names, vec!["f1", "f2"]);
    }

    #[test]
    fn accepts_plus_one_label() {
        let f = write_csv("bag_id,bag_label,instance_id,f1\nA,+1,A.1,0.5\n");
        let ds = load_dataset(f.path()).unwrap();
        assert_eq!(ds.bags[0].label, 1);
    }

    #[test]
    fn rejects_inconsistent_bag_label() {
        let f = write_csv(
            "bag_id,bag_label,instance_id,f1\n\
             A,1,A.1,0.5\n\
             A,-1,A.2,0.6\n",
        );
        match load_dataset(f.path()) {
            Err(Error::InconsistentBagLabel(id)) => assert_eq!(id, "A"),
            other => panic!("expected InconsistentBagLabel, got {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_file() {
        let f = write_csv("bag_id,bag_label,instance_id,f1\n");
        assert!(matches!(load_dataset(f.path()), Err(Error::NoSamples)));
    }

    #[test]
    fn rejects_missing_column() {
        let f = write_csv("bag_id,instance_id,f1\nA,A.1,0.5\n");
        assert!(matches!(load_dataset(f.path()), Err(Error::Data(_))));
    }

    #[test]
    fn rejects_non_finite() {
        let f = write_csv("bag_id,bag_label,instance_id,f1\nA,1,A.1,NaN\n");
        assert!(matches!(load_dataset(f.path()), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn round_trip_preserves_content() {
        let f = write_csv(
            "bag_id,bag_label,instance_id,f1,f2\n\
             A,1,A.1,0.5,1\n\
             A,1,A.1,0.625,1.25\n\
             B,-1,B.1,0,0\n",
        );
        let ds = load_dataset(f.path()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        save_dataset(&ds, out.path()).unwrap();
        let ds2 = load_dataset(out.path()).unwrap();
        assert_eq!(ds, ds2);
    }

    #[test]
    fn scaler_matches_hand_values() {
        let samples = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let ds = dataset_from_parts(
            vec![DistInstance::new("i", samples)],
            vec![Bag { bag_id: "b".into(), instance_indices: vec![0], label: 1 }],
            vec!["f1".into()],
        )
        .unwrap();
        let p = fit_scaler(&ds, false).unwrap();
        assert!((p.means[0] - 2.0).abs() < 1e-15);
        assert!((p.sds[0] - 1.0).abs() < 1e-15);
        let scaled = apply_scaler(&ds, &p).unwrap();
        let col: Vec<f64> = scaled.instances[0].samples.column(0).iter().copied().collect();
        assert_eq!(col, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn scaler_refit_is_idempotent() {
        let samples = DMatrix::from_row_slice(4, 2, &[1.0, 10.0, 2.0, 20.0, 3.0, 15.0, 4.0, 5.0]);
        let ds = dataset_from_parts(
            vec![DistInstance::new("i", samples)],
            vec![Bag { bag_id: "b".into(), instance_indices: vec![0], label: 1 }],
            vec!["f1".into(), "f2".into()],
        )
        .unwrap();
        let once = apply_scaler(&ds, &fit_scaler(&ds, false).unwrap()).unwrap();
        let twice = apply_scaler(&once, &fit_scaler(&once, false).unwrap()).unwrap();
        for (a, b) in once.instances[0].samples.iter().zip(twice.instances[0].samples.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_column_errors_or_drops() {
        let samples = DMatrix::from_row_slice(3, 2, &[5.0, 1.0, 5.0, 2.0, 5.0, 3.0]);
        let ds = dataset_from_parts(
            vec![DistInstance::new("i", samples)],
            vec![Bag { bag_id: "b".into(), instance_indices: vec![0], label: 1 }],
            vec!["c".into(), "f".into()],
        )
        .unwrap();
        assert!(matches!(fit_scaler(&ds, false), Err(Error::ZeroVariance(_))));
        let p = fit_scaler(&ds, true).unwrap();
        assert_eq!(p.dropped, vec!["c".to_string()]);
        let scaled = apply_scaler(&ds, &p).unwrap();
        assert_eq!(scaled.feature_names, vec!["f".to_string()]);
        assert_eq!(scaled.dim(), 1);
    }

    #[test]
    fn log_transform_is_explicit_and_checked() {
        let samples = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, std::f64::consts::E, 2.0]);
        let ds = dataset_from_parts(
            vec![DistInstance::new("i", samples)],
            vec![Bag { bag_id: "b".into(), instance_indices: vec![0], label: 1 }],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let t = apply_log_transform(&ds, &["a".to_string()]).unwrap();
        assert!((t.instances[0].samples[(0, 0)] - 0.0).abs() < 1e-15);
        assert!((t.instances[0].samples[(1, 0)] - 1.0).abs() < 1e-15);
        // untouched column
        assert_eq!(t.instances[0].samples[(0, 1)], -1.0);
        assert!(apply_log_transform(&ds, &["b".to_string()]).is_err());
    }

    #[test]
    fn partition_is_enforced() {
        let samples = DMatrix::from_row_slice(1, 1, &[0.0]);
        let ds = Dataset {
            instances: vec![
                DistInstance::new("x", samples.clone()),
                DistInstance::new("y", samples),
            ],
            bags: vec![Bag { bag_id: "b".into(), instance_indices: vec![0], label: 1 }],
            feature_names: vec!["f".into()],
        };
        assert!(ds.validate().is_err());
    }
}
