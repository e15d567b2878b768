//! Tabular CSV ingestion: missing-value column dropping, min-max
//! normalization, one-hot encoding and a seeded train/test split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use thiserror::Error;

use crate::model::{FeatureKind, FeatureSchema, FeatureSpec, ModelError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("CSV is missing column {0:?}")]
    MissingColumn(String),
    #[error("row {row}: column {column:?} value {value:?} is not a number")]
    NotNumeric { row: usize, column: String, value: String },
    #[error("row {row}: column {column:?} has undeclared level {value:?}")]
    UnknownLevel { row: usize, column: String, value: String },
    #[error("row {row}: label is missing")]
    MissingLabel { row: usize },
    #[error("no feature column survived missing-value filtering")]
    NoFeatures,
    #[error("dataset has no rows")]
    Empty,
    #[error(transparent)]
    Schema(#[from] ModelError),
}

/// Raw column kinds of a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RawKind {
    Continuous,
    /// Levels are inferred (sorted) from the data when not declared.
    Categorical {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<String>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawColumn {
    pub name: String,
    #[serde(flatten)]
    pub kind: RawKind,
    #[serde(default)]
    pub sensitive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub name: String,
    /// Cell value meaning the positive class; labels are parsed as numbers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<String>,
}

/// Description of a raw CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSchema {
    pub features: Vec<RawColumn>,
    pub label: LabelSpec,
}

impl DataSchema {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(path, e))
    }
}

fn io_err(path: &Path, e: impl ToString) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Normalized feature matrix with labels and the resulting input schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub schema: FeatureSchema,
    /// Raw columns removed because they contained missing values.
    pub dropped: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            schema: self.schema.clone(),
            dropped: self.dropped.clone(),
        }
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "?" | "NA" | "NaN" | "nan" | "null")
}

pub fn ingest_csv(path: impl AsRef<Path>, schema: &DataSchema) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    ingest_csv_str(&text, schema).map_err(|e| match e {
        DatasetError::Io { message, .. } => io_err(path, message),
        other => other,
    })
}

pub fn ingest_csv_str(text: &str, schema: &DataSchema) -> Result<Dataset, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| DatasetError::Io {
            path: String::new(),
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_owned()))
    };
    let label_col = column(&schema.label.name)?;
    let cols: Vec<usize> = schema.features.iter().map(|f| column(&f.name)).collect::<Result<_, _>>()?;
    let mut records: Vec<Vec<String>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| DatasetError::Io {
            path: String::new(),
            message: e.to_string(),
        })?;
        records.push(rec.iter().map(str::to_owned).collect());
    }
    if records.is_empty() {
        return Err(DatasetError::Empty);
    }
    // data rows are reported 1-based after the header line
    let row_no = |r: usize| r + 2;

    let y = records
        .iter()
        .enumerate()
        .map(|(r, rec)| {
            let cell = &rec[label_col];
            if is_missing(cell) {
                return Err(DatasetError::MissingLabel { row: row_no(r) });
            }
            match &schema.label.positive {
                Some(pos) => Ok(if cell == pos { 1.0 } else { 0.0 }),
                None => cell.parse::<f64>().map_err(|_| DatasetError::NotNumeric {
                    row: row_no(r),
                    column: schema.label.name.clone(),
                    value: cell.clone(),
                }),
            }
        })
        .collect::<Result<Vec<f64>, _>>()?;

    let mut x: Vec<Vec<f64>> = vec![Vec::new(); records.len()];
    let mut specs: Vec<FeatureSpec> = Vec::new();
    let mut dropped = Vec::new();
    for (raw, &c) in schema.features.iter().zip(&cols) {
        if records.iter().any(|rec| is_missing(&rec[c])) {
            dropped.push(raw.name.clone());
            continue;
        }
        match &raw.kind {
            RawKind::Continuous => {
                let vals = records
                    .iter()
                    .enumerate()
                    .map(|(r, rec)| {
                        rec[c].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                            DatasetError::NotNumeric {
                                row: row_no(r),
                                column: raw.name.clone(),
                                value: rec[c].clone(),
                            }
                        })
                    })
                    .collect::<Result<Vec<f64>, _>>()?;
                let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for (row, v) in x.iter_mut().zip(&vals) {
                    row.push(if max > min { (v - min) / (max - min) } else { 0.0 });
                }
                specs.push(FeatureSpec {
                    name: raw.name.clone(),
                    kind: FeatureKind::Continuous {
                        lo: 0.0,
                        hi: 1.0,
                        raw_range: Some([min, max]),
                    },
                    sensitive: raw.sensitive,
                });
            }
            RawKind::Categorical { levels } => {
                let levels: Vec<String> = match levels {
                    Some(l) => l.clone(),
                    None => records
                        .iter()
                        .map(|rec| rec[c].clone())
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .collect(),
                };
                for (r, (row, rec)) in x.iter_mut().zip(&records).enumerate() {
                    let k = levels.iter().position(|l| *l == rec[c]).ok_or_else(|| DatasetError::UnknownLevel {
                        row: row_no(r),
                        column: raw.name.clone(),
                        value: rec[c].clone(),
                    })?;
                    row.extend((0..levels.len()).map(|i| if i == k { 1.0 } else { 0.0 }));
                }
                if levels.len() == 1 {
                    // a single level carries no information; keep it as a constant column
                    specs.push(FeatureSpec {
                        name: format!("{}={}", raw.name, levels[0]),
                        kind: FeatureKind::Continuous {
                            lo: 0.0,
                            hi: 1.0,
                            raw_range: None,
                        },
                        sensitive: raw.sensitive,
                    });
                    continue;
                }
                specs.extend(levels.iter().map(|l| FeatureSpec {
                    name: format!("{}={l}", raw.name),
                    kind: FeatureKind::Categorical {
                        group: raw.name.clone(),
                    },
                    sensitive: raw.sensitive,
                }));
            }
        }
    }
    if specs.is_empty() {
        return Err(DatasetError::NoFeatures);
    }
    Ok(Dataset {
        x,
        y,
        schema: FeatureSchema::new(specs)?,
        dropped,
    })
}

/// Seeded shuffle split; returns `(train, test)` row indices.
pub fn train_test_split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64) * train_fraction).round() as usize;
    let test = idx.split_off(cut.min(n));
    (idx, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> DataSchema {
        serde_json::from_str(
            r#"{"features":[
                {"name":"age","kind":"continuous"},
                {"name":"sex","kind":"categorical","sensitive":true},
                {"name":"zip","kind":"continuous"}],
              "label":{"name":"y","positive":"yes"}}"#,
        )
        .unwrap()
    }

    #[test]
    fn normalizes_and_one_hot_encodes() {
        let csv = "age,sex,zip,y\n0,a,1,yes\n5,b,,no\n10,a,3,no\n";
        let d = ingest_csv_str(csv, &schema()).unwrap();
        assert_eq!(d.dropped, vec!["zip".to_string()]);
        assert_eq!(d.x, vec![vec![0.0, 1.0, 0.0], vec![0.5, 0.0, 1.0], vec![1.0, 1.0, 0.0]]);
        assert_eq!(d.y, vec![1.0, 0.0, 0.0]);
        assert_eq!(d.schema.groups(), vec![("sex".to_string(), vec![1, 2])]);
        assert_eq!(d.schema.sensitive_indices(), vec![1, 2]);
        let back = d.schema.denormalize(&d.x[1]);
        assert!((back[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn denormalize_round_trip() {
        let csv = "age,sex,zip,y\n-3.25,a,1,yes\n17.5,b,2,no\n2.125,a,3,no\n";
        let d = ingest_csv_str(csv, &schema()).unwrap();
        for (row, raw) in d.x.iter().zip([-3.25, 17.5, 2.125]) {
            assert!((d.schema.denormalize(row)[0] - raw).abs() <= 1e-12);
        }
    }

    #[test]
    fn reports_bad_cells() {
        let csv = "age,sex,zip,y\nold,a,1,yes\n";
        assert!(matches!(
            ingest_csv_str(csv, &schema()),
            Err(DatasetError::NotNumeric { row: 2, .. })
        ));
        let csv = "age,zip,y\n1,1,yes\n";
        assert!(matches!(ingest_csv_str(csv, &schema()), Err(DatasetError::MissingColumn(_))));
        let mut s = schema();
        s.features[1].kind = RawKind::Categorical {
            levels: Some(vec!["a".into(), "b".into()]),
        };
        let csv = "age,sex,zip,y\n1,a,1,yes\n2,c,1,no\n";
        assert!(matches!(
            ingest_csv_str(csv, &s),
            Err(DatasetError::UnknownLevel { row: 3, .. })
        ));
    }

    #[test]
    fn split_is_seeded_partition() {
        let (a, b) = train_test_split(10, 0.8, 3);
        assert_eq!((a.len(), b.len()), (8, 2));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(train_test_split(10, 0.8, 3), (a, b));
    }
}
