//! Schema metadata and tabular data ingestion.
//!
//! A [`SchemaDescriptor`] carries, per feature column, the refined
//! human-readable description that prefixes every statement built from that
//! column, the categorical vocabulary (code to display string), and the
//! numeric statistics used for value normalization.

use std::collections::HashSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical,
    Numerical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub refined_description: String,
    /// Code as it appears in the data file mapped to its display string.
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub vocabulary: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<f64>,
}

impl ColumnSpec {
    pub fn categorical(
        name: impl Into<String>,
        refined_description: impl Into<String>,
        vocabulary: impl IntoIterator<Item = (String, String)>,
    ) -> Self {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Categorical,
            refined_description: refined_description.into(),
            vocabulary: vocabulary.into_iter().collect(),
            mean: None,
            range: None,
        }
    }

    pub fn numerical(
        name: impl Into<String>,
        refined_description: impl Into<String>,
        mean: f64,
        range: f64,
    ) -> Self {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Numerical,
            refined_description: refined_description.into(),
            vocabulary: IndexMap::new(),
            mean: Some(mean),
            range: Some(range),
        }
    }

    /// `(mean, range)` for numerical columns.
    pub fn stats(&self) -> Option<(f64, f64)> {
        match (self.kind, self.mean, self.range) {
            (ColumnKind::Numerical, Some(m), Some(r)) => Some((m, r)),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Validation("column with empty name".into()));
        }
        if self.refined_description.trim().is_empty() {
            return Err(Error::Validation(format!(
                "column `{}` has an empty refined_description",
                self.name
            )));
        }
        match self.kind {
            ColumnKind::Categorical => {
                if self.vocabulary.is_empty() {
                    return Err(Error::Validation(format!(
                        "categorical column `{}` has an empty vocabulary",
                        self.name
                    )));
                }
                if let Some((code, _)) = self.vocabulary.iter().find(|(_, d)| d.is_empty()) {
                    return Err(Error::Validation(format!(
                        "categorical column `{}` maps code `{code}` to an empty display",
                        self.name
                    )));
                }
            }
            ColumnKind::Numerical => {
                let (Some(mean), Some(range)) = (self.mean, self.range) else {
                    return Err(Error::Validation(format!(
                        "numerical column `{}` is missing mean/range statistics",
                        self.name
                    )));
                };
                if !mean.is_finite() || !range.is_finite() || range < 0.0 {
                    return Err(Error::Validation(format!(
                        "numerical column `{}` has invalid statistics (mean {mean}, range {range})",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaDescriptor {
    /// Feature columns in their canonical order.
    pub columns: Vec<ColumnSpec>,
    pub subject_id_column: String,
    pub label_columns: Vec<String>,
}

impl SchemaDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::Validation("schema has no feature columns".into()));
        }
        if self.label_columns.is_empty() {
            return Err(Error::Validation("schema has no label columns".into()));
        }
        let mut seen = HashSet::new();
        for col in &self.columns {
            col.validate()?;
            if !seen.insert(col.name.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate column name `{}`",
                    col.name
                )));
            }
        }
        let mut labels = HashSet::new();
        for label in &self.label_columns {
            if seen.contains(label.as_str()) {
                return Err(Error::Validation(format!(
                    "label column `{label}` is also a feature column"
                )));
            }
            if !labels.insert(label.as_str()) {
                return Err(Error::Validation(format!("duplicate label column `{label}`")));
            }
        }
        if seen.contains(self.subject_id_column.as_str())
            || labels.contains(self.subject_id_column.as_str())
        {
            return Err(Error::Validation(format!(
                "subject id column `{}` overlaps a feature or label column",
                self.subject_id_column
            )));
        }
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        self.label_columns.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serialization is infallible")
    }
}

/// Parse and validate a schema metadata document.
pub fn parse_schema(metadata_document: &str) -> Result<SchemaDescriptor> {
    let schema: SchemaDescriptor = serde_json::from_str(metadata_document)
        .map_err(|e| Error::parse("schema metadata", e))?;
    schema.validate()?;
    Ok(schema)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Missing,
    Categorical { code: String, display: String },
    Numerical(f64),
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub subject_id: String,
    /// Aligned with `SchemaDescriptor::columns`.
    pub cells: Vec<Cell>,
    /// Aligned with `SchemaDescriptor::label_columns`; `None` is a missing label.
    pub labels: Vec<Option<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMatrix {
    pub rows: Vec<Row>,
    pub schema: SchemaDescriptor,
}

impl DatasetMatrix {
    pub fn new(rows: Vec<Row>, schema: SchemaDescriptor) -> Result<Self> {
        let data = DatasetMatrix { rows, schema };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let ncol = self.schema.columns.len();
        let nlab = self.schema.label_columns.len();
        for (i, row) in self.rows.iter().enumerate() {
            if row.cells.len() != ncol || row.labels.len() != nlab {
                return Err(Error::structure(
                    "dataset",
                    format!(
                        "row {i} has {} cells / {} labels, schema expects {ncol} / {nlab}",
                        row.cells.len(),
                        row.labels.len()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row-major `N x L` label matrix with missing labels as `None`.
    pub fn label_matrix(&self) -> Vec<Vec<Option<bool>>> {
        self.rows.iter().map(|r| r.labels.clone()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> DatasetMatrix {
        DatasetMatrix {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            schema: self.schema.clone(),
        }
    }

    /// Serialize back to CSV with the header order
    /// `subject id, feature columns..., label columns...`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let mut header = vec![self.schema.subject_id_column.clone()];
        header.extend(self.schema.columns.iter().map(|c| c.name.clone()));
        header.extend(self.schema.label_columns.iter().cloned());
        w.write_record(&header).expect("in-memory csv write");
        for row in &self.rows {
            let mut rec = vec![row.subject_id.clone()];
            for cell in &row.cells {
                rec.push(match cell {
                    Cell::Missing => String::new(),
                    Cell::Categorical { code, .. } => code.clone(),
                    Cell::Numerical(v) => format!("{v}"),
                });
            }
            for l in &row.labels {
                rec.push(match l {
                    None => String::new(),
                    Some(true) => "1".into(),
                    Some(false) => "0".into(),
                });
            }
            w.write_record(&rec).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("csv output is utf-8")
    }
}

enum Slot {
    Subject,
    Feature(usize),
    Label(usize),
}

/// Parse an RFC-4180 CSV document against `schema`. Header columns may appear
/// in any order but must match the schema exactly.
pub fn parse_dataset(data_document: &str, schema: &SchemaDescriptor) -> Result<DatasetMatrix> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(data_document.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::parse("csv header", e))?
        .clone();

    let mut slots = Vec::with_capacity(header.len());
    let mut seen = HashSet::new();
    for name in header.iter() {
        if !seen.insert(name.to_string()) {
            return Err(Error::structure(
                "parse_dataset",
                format!("header repeats column `{name}`"),
            ));
        }
        let slot = if name == schema.subject_id_column {
            Slot::Subject
        } else if let Some(i) = schema.column_index(name) {
            Slot::Feature(i)
        } else if let Some(k) = schema.label_columns.iter().position(|l| l == name) {
            Slot::Label(k)
        } else {
            return Err(Error::structure(
                "parse_dataset",
                format!("header column `{name}` is not in the schema"),
            ));
        };
        slots.push(slot);
    }
    let expected = schema.columns.len() + schema.label_columns.len() + 1;
    if slots.len() != expected {
        let missing: Vec<&str> = std::iter::once(schema.subject_id_column.as_str())
            .chain(schema.columns.iter().map(|c| c.name.as_str()))
            .chain(schema.label_columns.iter().map(String::as_str))
            .filter(|n| !seen.contains(*n))
            .collect();
        return Err(Error::structure(
            "parse_dataset",
            format!("header is missing schema columns: {}", missing.join(", ")),
        ));
    }

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(format!("csv row {i}"), e))?;
        let mut subject_id = String::new();
        let mut cells = vec![Cell::Missing; schema.columns.len()];
        let mut labels = vec![None; schema.label_columns.len()];
        for (slot, raw) in slots.iter().zip(record.iter()) {
            match *slot {
                Slot::Subject => subject_id = raw.to_string(),
                Slot::Feature(c) => cells[c] = parse_cell(i, &schema.columns[c], raw)?,
                Slot::Label(k) => {
                    labels[k] = match raw.trim() {
                        "" => None,
                        "0" => Some(false),
                        "1" => Some(true),
                        other => {
                            return Err(Error::Validation(format!(
                                "row {i}: label `{}` must be 0 or 1, got `{other}`",
                                schema.label_columns[k]
                            )))
                        }
                    }
                }
            }
        }
        if subject_id.is_empty() {
            return Err(Error::Validation(format!("row {i}: empty subject id")));
        }
        rows.push(Row {
            subject_id,
            cells,
            labels,
        });
    }
    Ok(DatasetMatrix {
        rows,
        schema: schema.clone(),
    })
}

fn parse_cell(row: usize, spec: &ColumnSpec, raw: &str) -> Result<Cell> {
    if raw.is_empty() {
        return Ok(Cell::Missing);
    }
    match spec.kind {
        ColumnKind::Categorical => match spec.vocabulary.get(raw) {
            Some(display) => Ok(Cell::Categorical {
                code: raw.to_string(),
                display: display.clone(),
            }),
            None => Err(Error::UnknownCategory {
                row,
                column: spec.name.clone(),
                value: raw.to_string(),
            }),
        },
        ColumnKind::Numerical => {
            let v: f64 = raw.trim().parse().map_err(|_| {
                Error::Validation(format!(
                    "row {row}: column `{}` expects a number, got `{raw}`",
                    spec.name
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "row {row}: column `{}` holds a non-finite value",
                    spec.name
                )));
            }
            Ok(Cell::Numerical(v))
        }
    }
}

/// Recompute mean and range (max - min) for every numerical column from the
/// rows in `split` only.
pub fn compute_numeric_stats(data: &DatasetMatrix, split: &[usize]) -> Result<SchemaDescriptor> {
    if split.is_empty() {
        return Err(Error::Precondition("training split is empty".into()));
    }
    let mut idx = split.to_vec();
    idx.sort_unstable();
    idx.dedup();
    if let Some(&bad) = idx.iter().find(|&&i| i >= data.rows.len()) {
        return Err(Error::Precondition(format!(
            "split index {bad} out of bounds for {} rows",
            data.rows.len()
        )));
    }

    let mut schema = data.schema.clone();
    for (c, spec) in schema.columns.iter_mut().enumerate() {
        if spec.kind != ColumnKind::Numerical {
            continue;
        }
        let mut values: Vec<f64> = idx
            .iter()
            .filter_map(|&i| match data.rows[i].cells[c] {
                Cell::Numerical(v) => Some(v),
                _ => None,
            })
            .collect();
        if values.is_empty() {
            return Err(Error::Validation(format!(
                "numerical column `{}` has no non-missing training values",
                spec.name
            )));
        }
        // Sorted summation keeps the mean bit-identical under row reordering.
        values.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let range = values[values.len() - 1] - values[0];
        spec.mean = Some(mean);
        spec.range = Some(range);
    }
    Ok(schema)
}
