//! Tabular data: CSV ingestion, schema inference, encoding into the model's
//! real-valued space, MCAR missingness simulation and train/test splitting.
//!
//! Continuous columns are standardized with statistics from observed cells.
//! Categorical columns become one-hot blocks. A missing raw cell encodes as
//! zeros across its block with mask 0.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Numeric columns with at most this many distinct integer values are
/// treated as categorical.
pub const DEFAULT_MAX_CATEGORIES: usize = 20;

pub fn default_missing_tokens() -> Vec<String> {
    ["", "NA", "NaN", "?"].iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical,
}

impl std::str::FromStr for ColumnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "continuous" => Ok(ColumnKind::Continuous),
            "categorical" => Ok(ColumnKind::Categorical),
            other => Err(Error::param(format!("unknown column kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Encoding {
    Continuous { mean: f64, std: f64 },
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(flatten)]
    pub encoding: Encoding,
    /// First encoded index of this column.
    pub offset: usize,
}

impl Column {
    pub fn width(&self) -> usize {
        match &self.encoding {
            Encoding::Continuous { .. } => 1,
            Encoding::Categorical { categories } => categories.len(),
        }
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.width()
    }

    pub fn kind(&self) -> ColumnKind {
        match self.encoding {
            Encoding::Continuous { .. } => ColumnKind::Continuous,
            Encoding::Categorical { .. } => ColumnKind::Categorical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<Column>,
    pub d_enc: usize,
    pub hash: String,
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        let mut offset = 0;
        let mut seen = HashSet::new();
        for c in &columns {
            if c.offset != offset {
                return Err(Error::Schema(format!(
                    "column '{}' starts at encoded index {} (expected {offset})",
                    c.name, c.offset
                )));
            }
            match &c.encoding {
                Encoding::Continuous { std, mean } => {
                    if !(*std > 0.0) || !std.is_finite() || !mean.is_finite() {
                        return Err(Error::Schema(format!(
                            "column '{}' has invalid statistics (mean {mean}, std {std})",
                            c.name
                        )));
                    }
                }
                Encoding::Categorical { categories } => {
                    let distinct: HashSet<_> = categories.iter().collect();
                    if categories.is_empty() || distinct.len() != categories.len() {
                        return Err(Error::Schema(format!(
                            "column '{}' needs a non-empty duplicate-free category list",
                            c.name
                        )));
                    }
                }
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name '{}'", c.name)));
            }
            offset += c.width();
        }
        let hash = hash_columns(&columns);
        Ok(Self {
            columns,
            d_enc: offset,
            hash,
        })
    }

    /// Verifies the stored hash against the column definitions.
    pub fn verify(&self) -> Result<()> {
        let rebuilt = Schema::new(self.columns.clone())?;
        if rebuilt.hash != self.hash || rebuilt.d_enc != self.d_enc {
            return Err(Error::Schema("schema hash does not match its columns".into()));
        }
        Ok(())
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let schema: Schema = serde_json::from_reader(std::fs::File::open(path)?)?;
        schema.verify()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// Encodes one raw row. Missing cells give zeros with mask 0.
    pub fn encode_row(&self, row: &[Option<String>]) -> Result<(Vec<f64>, Vec<f64>)> {
        if row.len() != self.columns.len() {
            return Err(Error::Shape {
                what: "raw row arity".into(),
                expected: self.columns.len(),
                actual: row.len(),
            });
        }
        let mut values = vec![0.0; self.d_enc];
        let mut mask = vec![0.0; self.d_enc];
        for (col, cell) in self.columns.iter().zip(row) {
            let Some(cell) = cell else { continue };
            match &col.encoding {
                Encoding::Continuous { mean, std } => {
                    let v = parse_number(cell).ok_or_else(|| {
                        Error::Schema(format!(
                            "non-numeric value '{cell}' in continuous column '{}'",
                            col.name
                        ))
                    })?;
                    values[col.offset] = (v - mean) / std;
                }
                Encoding::Categorical { categories } => {
                    let idx = categories.iter().position(|c| c == cell).ok_or_else(|| {
                        Error::Schema(format!(
                            "unseen category '{cell}' in column '{}'",
                            col.name
                        ))
                    })?;
                    values[col.offset + idx] = 1.0;
                }
            }
            mask[col.range()].iter_mut().for_each(|m| *m = 1.0);
        }
        Ok((values, mask))
    }

    /// Continuous: `v * std + mean`. Categorical: argmax, lowest index on ties.
    pub fn decode_row(&self, encoded: &[f64]) -> Result<Vec<String>> {
        if encoded.len() != self.d_enc {
            return Err(Error::Shape {
                what: "encoded row width".into(),
                expected: self.d_enc,
                actual: encoded.len(),
            });
        }
        if let Some(i) = encoded.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "decode",
                format!("non-finite encoded value at index {i}"),
            ));
        }
        Ok(self
            .columns
            .iter()
            .map(|col| match &col.encoding {
                Encoding::Continuous { mean, std } => {
                    format_number(encoded[col.offset] * std + mean)
                }
                Encoding::Categorical { categories } => {
                    categories[argmax(&encoded[col.range()])].clone()
                }
            })
            .collect())
    }
}

fn hash_columns(columns: &[Column]) -> String {
    let bytes = serde_json::to_vec(columns).expect("schema columns serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn format_number(v: f64) -> String {
    format!("{v}")
}

/// Raw CSV contents; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<String>>>,
}

#[derive(Debug, Clone)]
pub struct ReadOptions {
    /// Case-insensitive spellings of a missing cell (after trimming).
    pub missing_tokens: Vec<String>,
}

impl Default for ReadOptions {
    fn default() -> Self {
        Self {
            missing_tokens: default_missing_tokens(),
        }
    }
}

impl RawTable {
    pub fn read<R: Read>(reader: R, opts: &ReadOptions) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if header.is_empty() {
            return Err(Error::Schema("CSV has no header".into()));
        }
        let tokens: Vec<String> = opts
            .missing_tokens
            .iter()
            .map(|t| t.trim().to_ascii_lowercase())
            .collect();
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let row = record
                .iter()
                .map(|cell| {
                    let cell = cell.trim();
                    if tokens.iter().any(|t| *t == cell.to_ascii_lowercase()) {
                        None
                    } else {
                        Some(cell.to_string())
                    }
                })
                .collect();
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn read_path(path: &Path, opts: &ReadOptions) -> Result<Self> {
        Self::read(std::fs::File::open(path)?, opts)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.header)?;
        for row in &self.rows {
            wtr.write_record(row.iter().map(|c| c.as_deref().unwrap_or("")))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_path(&self, path: &Path) -> Result<()> {
        self.write(std::fs::File::create(path)?)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }
}

/// Infers column kinds and statistics from the observed cells of `table`.
///
/// A column is categorical when any observed cell is non-numeric, or when it
/// has at most `max_categories` distinct values that are all integers.
/// Entries in `overrides` (by column name) take precedence.
pub fn infer_schema(
    table: &RawTable,
    overrides: &HashMap<String, ColumnKind>,
    max_categories: usize,
) -> Result<Schema> {
    if table.rows.len() < 2 {
        return Err(Error::Schema(format!(
            "need at least 2 data rows to infer a schema (got {})",
            table.rows.len()
        )));
    }
    for name in overrides.keys() {
        if !table.header.contains(name) {
            return Err(Error::Schema(format!("type override for unknown column '{name}'")));
        }
    }
    let mut columns = Vec::with_capacity(table.header.len());
    let mut offset = 0;
    for (j, name) in table.header.iter().enumerate() {
        let observed: Vec<&str> = table
            .rows
            .iter()
            .filter_map(|r| r.get(j).and_then(|c| c.as_deref()))
            .collect();
        if observed.is_empty() {
            return Err(Error::Schema(format!("column '{name}' has no observed values")));
        }
        let numeric: Option<Vec<f64>> = observed.iter().map(|s| parse_number(s)).collect();
        let kind = match overrides.get(name) {
            Some(&k) => k,
            None => match &numeric {
                None => ColumnKind::Categorical,
                Some(vals) => {
                    let all_int = vals.iter().all(|v| v.fract() == 0.0);
                    let distinct: HashSet<u64> = vals.iter().map(|v| v.to_bits()).collect();
                    if all_int && distinct.len() <= max_categories {
                        ColumnKind::Categorical
                    } else {
                        ColumnKind::Continuous
                    }
                }
            },
        };
        let encoding = match kind {
            ColumnKind::Continuous => {
                let vals = numeric.ok_or_else(|| {
                    Error::Schema(format!(
                        "column '{name}' declared continuous but has non-numeric values"
                    ))
                })?;
                let (mean, std) = mean_std(&vals);
                if !(std > 0.0) {
                    return Err(Error::Schema(format!(
                        "continuous column '{name}' is constant and cannot be standardized"
                    )));
                }
                Encoding::Continuous { mean, std }
            }
            ColumnKind::Categorical => {
                let mut categories: Vec<String> = Vec::new();
                for s in &observed {
                    if !categories.iter().any(|c| c == s) {
                        categories.push(s.to_string());
                    }
                }
                Encoding::Categorical { categories }
            }
        };
        let col = Column {
            name: name.clone(),
            encoding,
            offset,
        };
        offset += col.width();
        columns.push(col);
    }
    Schema::new(columns)
}

/// Population mean and standard deviation.
pub fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-cell provenance of a missing value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingStatus {
    Native,
    Simulated,
}

impl MissingStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            MissingStatus::Native => "native",
            MissingStatus::Simulated => "simulated",
        }
    }
}

/// A table bound to a schema, with native and simulated missingness tracked
/// separately.
#[derive(Debug, Clone)]
pub struct TabularDataset {
    schema: Schema,
    /// Current view of the data; `None` for both native and simulated gaps.
    cells: Vec<Vec<Option<String>>>,
    native_missing: Vec<Vec<bool>>,
    simulated_missing: Vec<Vec<bool>>,
    ground_truth: BTreeMap<(usize, usize), String>,
    /// Row index in the originating table.
    row_ids: Vec<usize>,
    encoded: Array2<f64>,
    encoded_mask: Array2<f64>,
}

impl TabularDataset {
    /// Binds `table` to `schema`; every missing cell is considered native.
    pub fn from_table(table: &RawTable, schema: Schema) -> Result<Self> {
        let names = schema.names();
        if table.header != names {
            return Err(Error::Schema(format!(
                "CSV header {:?} does not match schema columns {:?}",
                table.header, names
            )));
        }
        let native_missing = table
            .rows
            .iter()
            .map(|r| r.iter().map(Option::is_none).collect())
            .collect();
        let n = table.rows.len();
        let d = table.header.len();
        Self::assemble(
            schema,
            table.rows.clone(),
            native_missing,
            vec![vec![false; d]; n],
            BTreeMap::new(),
            (0..n).collect(),
        )
    }

    /// Infers a schema from `table` and binds it.
    pub fn from_table_inferred(
        table: &RawTable,
        overrides: &HashMap<String, ColumnKind>,
    ) -> Result<Self> {
        let schema = infer_schema(table, overrides, DEFAULT_MAX_CATEGORIES)?;
        Self::from_table(table, schema)
    }

    fn assemble(
        schema: Schema,
        cells: Vec<Vec<Option<String>>>,
        native_missing: Vec<Vec<bool>>,
        simulated_missing: Vec<Vec<bool>>,
        ground_truth: BTreeMap<(usize, usize), String>,
        row_ids: Vec<usize>,
    ) -> Result<Self> {
        let n = cells.len();
        let mut encoded = Array2::zeros((n, schema.d_enc));
        let mut encoded_mask = Array2::zeros((n, schema.d_enc));
        for (i, row) in cells.iter().enumerate() {
            let (v, m) = schema.encode_row(row).map_err(|e| match e {
                Error::Schema(msg) => Error::Schema(format!("row {i}: {msg}")),
                other => other,
            })?;
            encoded.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
            encoded_mask.row_mut(i).assign(&ndarray::ArrayView1::from(&m));
        }
        Ok(Self {
            schema,
            cells,
            native_missing,
            simulated_missing,
            ground_truth,
            row_ids,
            encoded,
            encoded_mask,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.cells.len()
    }

    pub fn n_columns(&self) -> usize {
        self.schema.n_columns()
    }

    pub fn cells(&self) -> &[Vec<Option<String>>] {
        &self.cells
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    /// Standardized / one-hot matrix, `n x d_enc`.
    pub fn encoded(&self) -> &Array2<f64> {
        &self.encoded
    }

    /// 1 where the encoded entry is observed.
    pub fn encoded_mask(&self) -> &Array2<f64> {
        &self.encoded_mask
    }

    pub fn is_native_missing(&self, row: usize, col: usize) -> bool {
        self.native_missing[row][col]
    }

    pub fn is_simulated_missing(&self, row: usize, col: usize) -> bool {
        self.simulated_missing[row][col]
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.cells[row][col].is_none()
    }

    pub fn ground_truth(&self) -> &BTreeMap<(usize, usize), String> {
        &self.ground_truth
    }

    /// Raw column indices observed in `row`.
    pub fn observed_columns(&self, row: usize) -> Vec<usize> {
        (0..self.n_columns())
            .filter(|&c| self.cells[row][c].is_some())
            .collect()
    }

    pub fn row_has_missing(&self, row: usize) -> bool {
        self.cells[row].iter().any(Option::is_none)
    }

    /// All missing cells with their status, row-major.
    pub fn missing_cells(&self) -> Vec<(usize, usize, MissingStatus)> {
        let mut out = Vec::new();
        for i in 0..self.n_rows() {
            for j in 0..self.n_columns() {
                if self.native_missing[i][j] {
                    out.push((i, j, MissingStatus::Native));
                } else if self.simulated_missing[i][j] {
                    out.push((i, j, MissingStatus::Simulated));
                }
            }
        }
        out
    }

    /// Simulated-missing cells, row-major.
    pub fn simulated_cells(&self) -> Vec<(usize, usize)> {
        self.ground_truth.keys().copied().collect()
    }

    pub fn to_table(&self) -> RawTable {
        RawTable {
            header: self.schema.names(),
            rows: self.cells.clone(),
        }
    }

    /// Encoded ground truth for a simulated cell, standardized or one-hot.
    /// `None` if the cell has no ground truth or the category is unknown.
    pub fn encoded_truth(&self, row: usize, col: usize) -> Option<Vec<f64>> {
        let truth = self.ground_truth.get(&(row, col))?;
        let column = &self.schema.columns[col];
        match &column.encoding {
            Encoding::Continuous { mean, std } => {
                parse_number(truth).map(|v| vec![(v - mean) / std])
            }
            Encoding::Categorical { categories } => {
                let idx = categories.iter().position(|c| c == truth)?;
                let mut one_hot = vec![0.0; categories.len()];
                one_hot[idx] = 1.0;
                Some(one_hot)
            }
        }
    }

    /// Replaces the continuous statistics with those of the currently observed
    /// cells; kinds and category lists are kept.
    pub fn refit_statistics(&self) -> Result<Self> {
        let mut columns = self.schema.columns.clone();
        for (j, col) in columns.iter_mut().enumerate() {
            if let Encoding::Continuous { mean, std } = &mut col.encoding {
                let vals: Vec<f64> = self
                    .cells
                    .iter()
                    .filter_map(|r| r[j].as_deref().and_then(parse_number))
                    .collect();
                if vals.is_empty() {
                    return Err(Error::Schema(format!(
                        "column '{}' has no observed values",
                        col.name
                    )));
                }
                let (m, s) = mean_std(&vals);
                if !(s > 0.0) {
                    return Err(Error::Schema(format!(
                        "continuous column '{}' is constant and cannot be standardized",
                        col.name
                    )));
                }
                *mean = m;
                *std = s;
            }
        }
        self.with_schema(Schema::new(columns)?)
    }

    /// Re-encodes the same cells under another schema with identical columns.
    pub fn with_schema(&self, schema: Schema) -> Result<Self> {
        if schema.names() != self.schema.names() {
            return Err(Error::Schema("schema columns differ from the dataset's".into()));
        }
        Self::assemble(
            schema,
            self.cells.clone(),
            self.native_missing.clone(),
            self.simulated_missing.clone(),
            self.ground_truth.clone(),
            self.row_ids.clone(),
        )
    }

    /// Cellwise-independent MCAR masking over all originally observed cells.
    pub fn simulate_mcar(&self, rate: f64, seed: u64) -> Result<Self> {
        let all: Vec<usize> = (0..self.n_columns()).collect();
        self.simulate_mcar_columns(rate, seed, &all)
    }

    /// MCAR masking restricted to `columns`. Each eligible cell is masked with
    /// probability `rate`; a row that would lose every observed cell keeps one
    /// uniformly chosen cell. Statistics are refit on what stays observed.
    pub fn simulate_mcar_columns(&self, rate: f64, seed: u64, columns: &[usize]) -> Result<Self> {
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::param(format!(
                "missing rate must lie in (0, 1) (got {rate})"
            )));
        }
        if let Some(&c) = columns.iter().find(|&&c| c >= self.n_columns()) {
            return Err(Error::param(format!("column index {c} out of range")));
        }
        let mut cells = self.cells.clone();
        let mut simulated = self.simulated_missing.clone();
        let mut truth = self.ground_truth.clone();
        for i in 0..self.n_rows() {
            let mut rng = rng::stream(seed, Domain::Mask, self.row_ids[i] as u64);
            let mut masked = Vec::new();
            for &j in columns {
                // Uniform draw for every listed column keeps masks stable when
                // other cells change.
                let u: f64 = rng.gen();
                if cells[i][j].is_some() && u < rate {
                    masked.push(j);
                }
            }
            let observed = cells[i].iter().filter(|c| c.is_some()).count();
            if !masked.is_empty() && masked.len() == observed {
                let keep = rng.gen_range(0..masked.len());
                masked.remove(keep);
            }
            for j in masked {
                let value = cells[i][j].take().expect("masked cells were observed");
                simulated[i][j] = true;
                truth.insert((i, j), value);
            }
        }
        Self::assemble(
            self.schema.clone(),
            cells,
            self.native_missing.clone(),
            simulated,
            truth,
            self.row_ids.clone(),
        )?
        .refit_statistics()
    }

    /// Uniform row split without replacement. Statistics are refit on the
    /// training fold and applied to both folds.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::param(format!(
                "test fraction must lie in (0, 1) (got {test_fraction})"
            )));
        }
        let n = self.n_rows();
        let n_test = (n as f64 * test_fraction).round() as usize;
        if n_test < 2 || n - n_test < 2 {
            return Err(Error::param(format!(
                "split of {n} rows at {test_fraction} leaves a fold with fewer than 2 rows"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, Domain::Split, 0));
        let mut test_rows = order[..n_test].to_vec();
        let mut train_rows = order[n_test..].to_vec();
        test_rows.sort_unstable();
        train_rows.sort_unstable();
        let train = self.subset(&train_rows)?.refit_statistics()?;
        let test = self.subset(&test_rows)?.with_schema(train.schema.clone())?;
        Ok((train, test))
    }

    /// Rows `rows` (indices into this dataset) as a new dataset.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let pick = |v: &Vec<Vec<bool>>| rows.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let mut truth = BTreeMap::new();
        for (new_i, &old_i) in rows.iter().enumerate() {
            for j in 0..self.n_columns() {
                if let Some(v) = self.ground_truth.get(&(old_i, j)) {
                    truth.insert((new_i, j), v.clone());
                }
            }
        }
        Self::assemble(
            self.schema.clone(),
            rows.iter().map(|&i| self.cells[i].clone()).collect(),
            pick(&self.native_missing),
            pick(&self.simulated_missing),
            truth,
            rows.iter().map(|&i| self.row_ids[i]).collect(),
        )
    }

    /// Marks the listed currently-missing cells as simulated with the given
    /// ground truth (used when loading sidecars).
    pub fn with_simulated_truth(&self, truth: &[(usize, usize, String)]) -> Result<Self> {
        let mut native = self.native_missing.clone();
        let mut simulated = self.simulated_missing.clone();
        let mut gt = self.ground_truth.clone();
        for (i, j, v) in truth {
            let (i, j) = (*i, *j);
            if i >= self.n_rows() || j >= self.n_columns() {
                return Err(Error::param(format!("truth cell ({i}, {j}) out of range")));
            }
            if self.cells[i][j].is_some() {
                return Err(Error::Schema(format!(
                    "truth given for observed cell (row {i}, column '{}')",
                    self.schema.columns[j].name
                )));
            }
            native[i][j] = false;
            simulated[i][j] = true;
            gt.insert((i, j), v.clone());
        }
        Self::assemble(
            self.schema.clone(),
            self.cells.clone(),
            native,
            simulated,
            gt,
            self.row_ids.clone(),
        )
    }

    /// `row_index,column_name,status` for every missing cell.
    pub fn write_mask_sidecar(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["row_index", "column_name", "status"])?;
        for (i, j, status) in self.missing_cells() {
            wtr.write_record([
                self.row_ids[i].to_string(),
                self.schema.columns[j].name.clone(),
                status.as_str().to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// `row_index,column_name,value` for every simulated cell.
    pub fn write_truth_sidecar(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["row_index", "column_name", "value"])?;
        for ((i, j), v) in &self.ground_truth {
            wtr.write_record([
                self.row_ids[*i].to_string(),
                self.schema.columns[*j].name.clone(),
                v.clone(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Reads a truth sidecar as `(row_index, column_name, value)`.
pub fn read_truth_sidecar(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Schema(format!("bad row index in truth sidecar: {rec:?}")))?;
        out.push((
            row,
            rec.get(1).unwrap_or_default().to_string(),
            rec.get(2).unwrap_or_default().to_string(),
        ));
    }
    Ok(out)
}

/// Reads a mask sidecar as `(row_index, column_name, status)`.
pub fn read_mask_sidecar(path: &Path) -> Result<Vec<(usize, String, MissingStatus)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Schema(format!("bad row index in mask sidecar: {rec:?}")))?;
        let status = match rec.get(2) {
            Some("native") => MissingStatus::Native,
            Some("simulated") => MissingStatus::Simulated,
            other => {
                return Err(Error::Schema(format!("bad mask status {other:?}")));
            }
        };
        out.push((row, rec.get(1).unwrap_or_default().to_string(), status));
    }
    Ok(out)
}
