//! Tabular data: CSV ingestion, summaries, imputation, standardization and
//! deterministic stratified partitioning.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Row-major samples x features table with binary labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    values: Vec<f64>,
    n_cols: usize,
    labels: Vec<u8>,
    column_names: Vec<String>,
    label_name: String,
}

impl FeatureMatrix {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<u8>, column_names: Vec<String>) -> Result<Self> {
        let n_cols = column_names.len();
        let mut values = Vec::with_capacity(rows.len() * n_cols);
        for row in &rows {
            if row.len() != n_cols {
                return Err(Error::DimensionMismatch {
                    expected: n_cols,
                    found: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::from_flat(values, labels, column_names)
    }

    pub fn from_flat(values: Vec<f64>, labels: Vec<u8>, column_names: Vec<String>) -> Result<Self> {
        let n_cols = column_names.len();
        if n_cols == 0 || values.len() != labels.len() * n_cols {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * n_cols,
                found: values.len(),
            });
        }
        if let Some(row) = labels.iter().position(|&l| l > 1) {
            return Err(Error::BadLabel {
                row: row + 1,
                value: labels[row].to_string(),
            });
        }
        Ok(Self {
            values,
            n_cols,
            labels,
            column_names,
            label_name: "label".to_string(),
        })
    }

    /// Builds a matrix from unlabeled rows; every label is set to 0.
    pub fn unlabeled(rows: Vec<Vec<f64>>, column_names: Vec<String>) -> Result<Self> {
        let labels = vec![0; rows.len()];
        Self::new(rows, labels, column_names)
    }

    pub fn with_label_name(mut self, name: impl Into<String>) -> Self {
        self.label_name = name.into();
        self
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_cols)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn label_name(&self) -> &str {
        &self.label_name
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    /// Labels mapped to {-1, +1}.
    pub fn signed_labels(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (self.labels.len() - pos, pos)
    }

    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(indices.len() * self.n_cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            values,
            n_cols: self.n_cols,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            column_names: self.column_names.clone(),
            label_name: self.label_name.clone(),
        }
    }

    pub fn select_columns(&self, columns: &[usize]) -> Result<FeatureMatrix> {
        if columns.is_empty() {
            return Err(Error::Config("no feature columns selected".into()));
        }
        for &c in columns {
            if c >= self.n_cols {
                return Err(Error::UnknownColumn(format!("#{c}")));
            }
        }
        let values = self.rows().flat_map(|r| columns.iter().map(move |&c| r[c])).collect();
        Ok(FeatureMatrix {
            values,
            n_cols: columns.len(),
            labels: self.labels.clone(),
            column_names: columns.iter().map(|&c| self.column_names[c].clone()).collect(),
            label_name: self.label_name.clone(),
        })
    }

    /// Replaces every cell with `f(column, value)`.
    pub(crate) fn map_cells(&self, mut f: impl FnMut(usize, f64) -> f64) -> FeatureMatrix {
        let n_cols = self.n_cols;
        let values = self.values.iter().enumerate().map(|(k, &v)| f(k % n_cols, v)).collect();
        FeatureMatrix { values, ..self.clone() }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(k) => Err(Error::NonFinite {
                row: k / self.n_cols + 1,
                column: k % self.n_cols + 1,
            }),
            None => Ok(()),
        }
    }
}

fn parse_cell(cell: &str, row: usize, column: usize) -> Result<f64> {
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::NonNumeric {
            row,
            column,
            value: cell.to_string(),
        }),
    }
}

fn parse_label(cell: &str, row: usize) -> Result<u8> {
    match cell.trim().parse::<f64>() {
        Ok(0.0) => Ok(0),
        Ok(1.0) => Ok(1),
        _ => Err(Error::BadLabel {
            row,
            value: cell.to_string(),
        }),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Loads a labeled dataset. The last column is the label; every other column
/// is a feature. Positions in error messages are 1-based, counting data rows
/// only (the header is not row 1).
pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let mut records = csv_reader(path)?.into_records();

    let mut header: Option<Vec<String>> = None;
    if has_header {
        match records.next() {
            Some(rec) => {
                let rec = rec.map_err(|e| csv_error(path, e))?;
                header = Some(rec.iter().map(str::to_string).collect());
            }
            None => return Err(Error::EmptyDataset),
        }
    }

    let mut expected = header.as_ref().map(Vec::len);
    if let Some(n) = expected {
        if n < 2 {
            return Err(Error::TooFewColumns(n));
        }
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (k, rec) in records.enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() == 1 && rec.get(0).is_some_and(str::is_empty) {
            continue;
        }
        let n = *expected.get_or_insert(rec.len());
        if n < 2 {
            return Err(Error::TooFewColumns(n));
        }
        if rec.len() != n {
            return Err(Error::RaggedRow {
                row,
                expected: n,
                found: rec.len(),
            });
        }
        for (c, cell) in rec.iter().take(n - 1).enumerate() {
            values.push(parse_cell(cell, row, c + 1)?);
        }
        labels.push(parse_label(&rec[n - 1], row)?);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = expected.unwrap_or(0);
    let (names, label_name) = match header {
        Some(mut h) => {
            let label = h.pop().unwrap_or_default();
            (h, label)
        }
        None => ((0..n - 1).map(|i| format!("col_{i}")).collect(), "label".to_string()),
    };
    Ok(FeatureMatrix::from_flat(values, labels, names)?.with_label_name(label_name))
}

/// Reads the named feature columns from a headed CSV, in the order given.
/// Other columns (including any label column) are ignored. A file with no
/// data rows yields an empty list.
pub fn load_feature_rows(path: impl AsRef<Path>, columns: &[String]) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let mut records = csv_reader(path)?.into_records();
    let header: Vec<String> = match records.next() {
        Some(rec) => rec
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(str::to_string)
            .collect(),
        None => return Ok(Vec::new()),
    };
    let missing: Vec<String> = columns.iter().filter(|c| !header.contains(c)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing));
    }
    let positions: Vec<usize> = columns
        .iter()
        .map(|c| header.iter().position(|h| h == c).unwrap())
        .collect();

    let mut rows = Vec::new();
    for (k, rec) in records.enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() == 1 && rec.get(0).is_some_and(str::is_empty) {
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::RaggedRow {
                row,
                expected: header.len(),
                found: rec.len(),
            });
        }
        rows.push(
            positions
                .iter()
                .map(|&p| parse_cell(&rec[p], row, p + 1))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(rows)
}

/// Writes a matrix as a headed CSV with the label in the last column.
pub fn write_csv(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(&m.column_names.join(","));
    out.push(',');
    out.push_str(&m.label_name);
    out.push('\n');
    for (row, label) in m.rows().zip(&m.labels) {
        for v in row {
            out.push_str(&v.to_string());
            out.push(',');
        }
        out.push_str(&label.to_string());
        out.push('\n');
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub columns: Vec<ColumnSummary>,
}

/// Counts and per-column statistics. Zeros in `zero_as_missing` columns are
/// counted as missing.
pub fn summarize(m: &FeatureMatrix, zero_as_missing: &[usize]) -> Result<DatasetSummary> {
    if m.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (n_negative, n_positive) = m.class_counts();
    let columns = (0..m.n_cols())
        .map(|j| {
            let col = m.column(j);
            let missing = if zero_as_missing.contains(&j) {
                col.iter().filter(|&&v| v == 0.0).count()
            } else {
                0
            };
            ColumnSummary {
                name: m.column_names[j].clone(),
                min: col.iter().copied().fold(f64::INFINITY, f64::min),
                max: col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean: col.iter().sum::<f64>() / col.len() as f64,
                missing,
            }
        })
        .collect();
    Ok(DatasetSummary {
        n_samples: m.n_rows(),
        n_features: m.n_cols(),
        n_positive,
        n_negative,
        columns,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Zero-as-missing median imputation, fitted on one matrix and reusable on
/// unseen rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    pub columns: Vec<usize>,
    pub medians: Vec<f64>,
}

impl Imputer {
    pub fn fit(m: &FeatureMatrix, columns: &[usize]) -> Result<Self> {
        let mut medians = Vec::with_capacity(columns.len());
        for &c in columns {
            if c >= m.n_cols() {
                return Err(Error::UnknownColumn(format!("#{c}")));
            }
            let mut present: Vec<f64> = m.column(c).into_iter().filter(|&v| v != 0.0).collect();
            if present.is_empty() {
                return Err(Error::AllMissing(m.column_names[c].clone()));
            }
            medians.push(median(&mut present));
        }
        Ok(Self {
            columns: columns.to_vec(),
            medians,
        })
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for (&c, &med) in self.columns.iter().zip(&self.medians) {
            if row[c] == 0.0 {
                row[c] = med;
            }
        }
    }

    pub fn transform(&self, m: &FeatureMatrix) -> FeatureMatrix {
        m.map_cells(|c, v| match self.columns.iter().position(|&k| k == c) {
            Some(k) if v == 0.0 => self.medians[k],
            _ => v,
        })
    }
}

/// Replaces zeros in the listed columns by the median of that column's
/// non-zero entries.
pub fn impute_missing(m: &FeatureMatrix, zero_as_missing_columns: &[usize]) -> Result<FeatureMatrix> {
    Ok(Imputer::fit(m, zero_as_missing_columns)?.transform(m))
}

/// Per-column affine normalization `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Population statistics; constant columns get scale 1.
    pub fn fit(m: &FeatureMatrix) -> Result<Self> {
        if m.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = m.n_rows() as f64;
        let mut mean = Vec::with_capacity(m.n_cols());
        let mut scale = Vec::with_capacity(m.n_cols());
        for j in 0..m.n_cols() {
            let col = m.column(j);
            if col.iter().all(|&v| v == col[0]) {
                mean.push(col[0]);
                scale.push(1.0);
                continue;
            }
            let mu = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let sd = var.sqrt();
            mean.push(mu);
            scale.push(if sd > 0.0 { sd } else { 1.0 });
        }
        Ok(Self { mean, scale })
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, mu), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = (*v - mu) / s;
        }
    }

    pub fn transform(&self, m: &FeatureMatrix) -> FeatureMatrix {
        m.map_cells(|c, v| (v - self.mean[c]) / self.scale[c])
    }
}

pub fn standardize(m: &FeatureMatrix) -> Result<(FeatureMatrix, Standardizer)> {
    let stats = Standardizer::fit(m)?;
    Ok((stats.transform(m), stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            seed: 42,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0,1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

fn class_indices(labels: &[u8]) -> [Vec<usize>; 2] {
    let mut classes = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        classes[l as usize].push(i);
    }
    classes
}

/// Train/test index partition. Both lists are sorted ascending.
pub fn split_indices(labels: &[u8], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        let classes = class_indices(labels);
        for (label, members) in classes.iter().enumerate() {
            if members.len() < 2 {
                return Err(Error::ClassTooSmall {
                    label: label as u8,
                    count: members.len(),
                    required: 2,
                });
            }
        }
        classes.into()
    } else {
        if labels.len() < 2 {
            return Err(Error::EmptyDataset);
        }
        vec![(0..labels.len()).collect()]
    };

    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut group in groups {
        rng::shuffle(&mut group, &mut rng);
        let n = group.len();
        let take = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        train.extend_from_slice(&group[..take]);
        test.extend_from_slice(&group[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn stratified_split(m: &FeatureMatrix, spec: &SplitSpec) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let (train, test) = split_indices(m.labels(), spec)?;
    Ok((m.select_rows(&train), m.select_rows(&test)))
}

/// Stratified k-fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Each class is shuffled and dealt round-robin across folds; the deal for
/// class 1 continues where class 0 stopped so overall sizes stay within one.
pub fn make_folds(labels: &[u8], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be at least 2, got {k}")));
    }
    let classes = class_indices(labels);
    let minority = classes[0].len().min(classes[1].len());
    if minority < k {
        return Err(Error::TooManyFolds { folds: k, minority });
    }
    let mut rng = rng::seeded(seed);
    let mut fold_of = vec![0; labels.len()];
    let mut next = 0;
    for mut members in classes {
        rng::shuffle(&mut members, &mut rng);
        for i in members {
            fold_of[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { k, fold_of })
}

/// Two isotropic unit-variance Gaussian clouds whose means lie `separation`
/// apart along the all-ones diagonal.
pub fn synth_dataset(
    n: usize,
    n_features: usize,
    positive_fraction: f64,
    separation: f64,
    seed: u64,
) -> Result<FeatureMatrix> {
    if n < 4 {
        return Err(Error::Config(format!("synthetic dataset needs n >= 4, got {n}")));
    }
    if n_features == 0 {
        return Err(Error::Config("synthetic dataset needs at least one feature".into()));
    }
    if !(positive_fraction > 0.0 && positive_fraction < 1.0) {
        return Err(Error::Config(format!(
            "positive_fraction must lie in (0,1), got {positive_fraction}"
        )));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::Config(format!(
            "separation must be finite and >= 0, got {separation}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let n_pos = ((n as f64 * positive_fraction).round() as usize).clamp(1, n - 1);
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_pos)).collect();
    rng::shuffle(&mut labels, &mut rng);

    let offset = separation / 2.0 / (n_features as f64).sqrt();
    let mut values = Vec::with_capacity(n * n_features);
    for &label in &labels {
        let shift = if label == 1 { offset } else { -offset };
        for _ in 0..n_features {
            let z: f64 = StandardNormal.sample(&mut rng);
            values.push(z + shift);
        }
    }
    let names = (1..=n_features).map(|j| format!("x{j}")).collect();
    FeatureMatrix::from_flat(values, labels, names)
}
