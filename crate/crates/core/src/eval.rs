//! Reconstruction metrics, baselines, stability and the benchmark grid.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    format_number, mean_std, parse_number, ColumnKind, Encoding, RawTable, Schema, TabularDataset,
};
use crate::error::{Error, Result};
use crate::predictor::NoiseModel;
use crate::rng::{self, Domain};
use crate::sampler::{impute_dataset, ImputationResult, Provenance, SamplerConfig};
use crate::schedule::NoiseSchedule;

/// `sqrt(mean((a - b)^2))`; `None` for empty input.
pub fn rmse(imputed: &[f64], truth: &[f64]) -> Option<f64> {
    assert_eq!(imputed.len(), truth.len(), "rmse inputs differ in length");
    if imputed.is_empty() {
        return None;
    }
    let sse: f64 = imputed.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Some((sse / imputed.len() as f64).sqrt())
}

/// Mean and population std; exactly zero spread when all values agree.
pub fn spread(values: &[f64]) -> (f64, f64) {
    match values.split_first() {
        Some((first, rest)) if rest.iter().all(|v| v == first) => (*first, 0.0),
        _ => mean_std(values),
    }
}

/// Errors on simulated-missing cells, continuous in standardized units.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellScores {
    pub continuous_errors: Vec<f64>,
    pub categorical_hits: Vec<bool>,
}

impl CellScores {
    pub fn rmse(&self) -> Option<f64> {
        rmse(&self.continuous_errors, &vec![0.0; self.continuous_errors.len()])
    }

    pub fn cat_error_rate(&self) -> Option<f64> {
        if self.categorical_hits.is_empty() {
            return None;
        }
        let wrong = self.categorical_hits.iter().filter(|h| !**h).count();
        Some(wrong as f64 / self.categorical_hits.len() as f64)
    }
}

/// Scores `completed` against `truth` given as `(row position, column, value)`.
pub fn score_cells<'a>(
    schema: &Schema,
    completed: &RawTable,
    truth: impl IntoIterator<Item = (usize, usize, &'a str)>,
) -> Result<CellScores> {
    let mut scores = CellScores::default();
    for (i, j, want) in truth {
        let got = completed
            .rows
            .get(i)
            .and_then(|r| r.get(j))
            .and_then(|c| c.as_deref())
            .ok_or_else(|| Error::Schema(format!("completed table has no value at row {i}, column {j}")))?;
        match &schema.columns[j].encoding {
            Encoding::Continuous { std, .. } => {
                let parse = |s: &str| {
                    parse_number(s).ok_or_else(|| {
                        Error::Schema(format!("non-numeric value '{s}' in continuous column '{}'", schema.columns[j].name))
                    })
                };
                scores.continuous_errors.push((parse(got)? - parse(want)?) / std);
            }
            Encoding::Categorical { .. } => scores.categorical_hits.push(got == want),
        }
    }
    Ok(scores)
}

/// Scores a completed table against the dataset's recorded ground truth.
pub fn score_dataset(dataset: &TabularDataset, completed: &RawTable) -> Result<CellScores> {
    score_cells(
        dataset.schema(),
        completed,
        dataset.ground_truth().iter().map(|((i, j), v)| (*i, *j, v.as_str())),
    )
}

/// Scores CSV artifacts: truth sidecar rows are `(row_index, column, value)`,
/// and `completed` row `k` holds original row index `k`.
pub fn score_files(schema: &Schema, completed: &RawTable, truth: &[(usize, String, String)]) -> Result<CellScores> {
    if completed.header != schema.names() {
        return Err(Error::Schema("completed CSV header does not match the schema".into()));
    }
    let cells = truth
        .iter()
        .map(|(row, name, value)| {
            let j = schema
                .column_index(name)
                .ok_or_else(|| Error::Schema(format!("truth sidecar names unknown column '{name}'")))?;
            Ok((*row, j, value.as_str()))
        })
        .collect::<Result<Vec<_>>>()?;
    score_cells(schema, completed, cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Standardized units; `None` when no continuous cell was masked.
    pub rmse_continuous: Option<f64>,
    pub n_continuous: usize,
    pub cat_error_rate: Option<f64>,
    pub n_categorical: usize,
    pub wall_time_s: Option<f64>,
    pub rmse_runs: Vec<f64>,
    pub rmse_std_across_runs: f64,
    pub config: serde_json::Value,
}

impl MetricsReport {
    /// Report for one or more runs scored on the same cells; the headline
    /// numbers are those of the first run.
    pub fn from_runs(runs: &[CellScores], wall_time_s: Option<f64>, config: serde_json::Value) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::param("metrics need at least one run"))?;
        let rmse_runs: Vec<f64> = runs.iter().filter_map(CellScores::rmse).collect();
        Ok(Self {
            rmse_continuous: first.rmse(),
            n_continuous: first.continuous_errors.len(),
            cat_error_rate: first.cat_error_rate(),
            n_categorical: first.categorical_hits.len(),
            wall_time_s,
            rmse_std_across_runs: if rmse_runs.is_empty() { 0.0 } else { spread(&rmse_runs).1 },
            rmse_runs,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Column mean (continuous) or mode (categorical) of a fitting fold.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanModeBaseline {
    schema: Schema,
    fills: Vec<String>,
}

impl MeanModeBaseline {
    pub fn fit(train: &TabularDataset) -> Result<Self> {
        let schema = train.schema().clone();
        let fills = schema
            .columns
            .iter()
            .enumerate()
            .map(|(j, col)| match &col.encoding {
                Encoding::Continuous { mean, .. } => format_number(*mean),
                Encoding::Categorical { categories } => {
                    let mut counts = vec![0usize; categories.len()];
                    for row in train.cells() {
                        if let Some(k) = row[j].as_ref().and_then(|v| categories.iter().position(|c| c == v)) {
                            counts[k] += 1;
                        }
                    }
                    // First category wins ties.
                    let best = counts
                        .iter()
                        .enumerate()
                        .fold(0, |b, (k, &c)| if c > counts[b] { k } else { b });
                    categories[best].clone()
                }
            })
            .collect();
        Ok(Self { schema, fills })
    }

    pub fn fills(&self) -> &[String] {
        &self.fills
    }

    pub fn impute(&self, dataset: &TabularDataset) -> Result<ImputationResult> {
        if dataset.schema().hash != self.schema.hash {
            return Err(Error::Schema("baseline was fitted on a different schema".into()));
        }
        let started = Instant::now();
        let mut table = dataset.to_table();
        let mut provenance = vec![vec![Provenance::Observed; dataset.n_columns()]; dataset.n_rows()];
        let mut encoded = Array2::zeros((dataset.n_rows(), self.schema.d_enc));
        let mut rows_imputed = 0;
        for (i, row) in table.rows.iter_mut().enumerate() {
            let mut touched = false;
            for (j, cell) in row.iter_mut().enumerate() {
                if cell.is_none() {
                    *cell = Some(self.fills[j].clone());
                    provenance[i][j] = Provenance::Generated;
                    touched = true;
                }
            }
            rows_imputed += usize::from(touched);
            let (v, _) = self.schema.encode_row(row)?;
            encoded.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(ImputationResult {
            encoded,
            table,
            provenance,
            row_ids: dataset.row_ids().to_vec(),
            rows_imputed,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Population std over runs, per generated encoded entry (row-major).
    pub per_cell_std: Vec<f64>,
    pub mean_std: f64,
    pub n_runs: usize,
}

/// Runs `imputer` once per seed and measures the spread of generated values.
pub fn stability(
    dataset: &TabularDataset,
    seeds: &[u64],
    mut imputer: impl FnMut(u64) -> Result<ImputationResult>,
) -> Result<StabilityReport> {
    if seeds.len() < 2 {
        return Err(Error::param("stability needs at least two runs"));
    }
    let runs = seeds.iter().map(|&s| imputer(s)).collect::<Result<Vec<_>>>()?;
    let mask = dataset.encoded_mask();
    let mut per_cell_std = Vec::new();
    let mut column = vec![0.0; runs.len()];
    for ((i, j), &m) in mask.indexed_iter() {
        if m == 1.0 {
            continue;
        }
        for (k, run) in runs.iter().enumerate() {
            column[k] = run.encoded[[i, j]];
        }
        per_cell_std.push(spread(&column).1);
    }
    let mean_std = if per_cell_std.is_empty() {
        0.0
    } else {
        per_cell_std.iter().sum::<f64>() / per_cell_std.len() as f64
    };
    Ok(StabilityReport {
        per_cell_std,
        mean_std,
        n_runs: runs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub eta: f64,
    pub steps: usize,
    pub n_samples: usize,
    pub rmse_mean: Option<f64>,
    pub rmse_std: Option<f64>,
    pub cat_error: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub etas: Vec<f64>,
    pub steps: Vec<usize>,
    pub repeats: usize,
    /// Repeat `r` uses `init_seed + r` instead of the base seed.
    pub vary_seed: bool,
}

/// Full factorial `eta x steps` sweep. Each cell reports the mean and spread
/// of RMSE over repeats and the mean sampling time.
pub fn benchmark_grid<M: NoiseModel>(
    dataset: &TabularDataset,
    model: &M,
    schema_hash: &str,
    schedule: &NoiseSchedule,
    base: &SamplerConfig,
    grid: &GridSpec,
) -> Result<Vec<GridRow>> {
    if grid.repeats == 0 || grid.etas.is_empty() || grid.steps.is_empty() {
        return Err(Error::param("grid needs at least one eta, one step count and one repeat"));
    }
    let mut out = Vec::new();
    for &eta in &grid.etas {
        for &steps in &grid.steps {
            let mut rmses = Vec::new();
            let mut cat = Vec::new();
            let mut time = 0.0;
            for r in 0..grid.repeats {
                let cfg = SamplerConfig {
                    eta,
                    steps,
                    init_seed: if grid.vary_seed { base.init_seed + r as u64 } else { base.init_seed },
                    ..base.clone()
                };
                let res = impute_dataset(dataset, model, schema_hash, schedule, &cfg)?;
                let scores = score_dataset(dataset, &res.table)?;
                rmses.extend(scores.rmse());
                cat.extend(scores.cat_error_rate());
                time += res.wall_time_s;
            }
            let summary = |v: &[f64]| (!v.is_empty()).then(|| spread(v));
            out.push(GridRow {
                eta,
                steps,
                n_samples: base.n_samples,
                rmse_mean: summary(&rmses).map(|s| s.0),
                rmse_std: summary(&rmses).map(|s| s.1),
                cat_error: summary(&cat).map(|s| s.0),
                wall_time_s: time / grid.repeats as f64,
            });
        }
    }
    Ok(out)
}

pub fn write_grid(rows: &[GridRow], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["eta", "steps", "n_samples", "rmse_mean", "rmse_std", "cat_error", "wall_time_s"])?;
    let opt = |v: Option<f64>| v.map(format_number).unwrap_or_default();
    for r in rows {
        wtr.write_record([
            format_number(r.eta),
            r.steps.to_string(),
            r.n_samples.to_string(),
            opt(r.rmse_mean),
            opt(r.rmse_std),
            opt(r.cat_error),
            format!("{:.6}", r.wall_time_s),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// `n` rows of a bivariate standard normal `(x1, x2)` with correlation `rho`.
pub fn make_synthetic_gaussian(n: usize, rho: f64, seed: u64) -> Result<TabularDataset> {
    if !(rho.abs() < 1.0) {
        return Err(Error::param(format!("rho must satisfy |rho| < 1 (got {rho})")));
    }
    if n < 2 {
        return Err(Error::param("synthetic data needs at least two rows"));
    }
    let mut rng = rng::stream(seed, Domain::Synthetic, 0);
    let c = (1.0 - rho * rho).sqrt();
    let rows = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            vec![Some(format_number(a)), Some(format_number(rho * a + c * b))]
        })
        .collect();
    let table = RawTable {
        header: vec!["x1".into(), "x2".into()],
        rows,
    };
    let overrides = HashMap::from([
        ("x1".to_string(), ColumnKind::Continuous),
        ("x2".to_string(), ColumnKind::Continuous),
    ]);
    TabularDataset::from_table_inferred(&table, &overrides)
}

/// RMSE of the Gaussian conditional mean `E[x2 | x1] = rho * x1` on the
/// simulated-missing `x2` cells, in standardized units.
pub fn conditional_mean_rmse(dataset: &TabularDataset, rho: f64) -> Option<f64> {
    let enc = dataset.encoded();
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for &(i, j) in dataset.ground_truth().keys() {
        if j != 1 || dataset.is_missing(i, 0) {
            continue;
        }
        pred.push(rho * enc[[i, 0]]);
        truth.push(dataset.encoded_truth(i, 1)?[0]);
    }
    rmse(&pred, &truth)
}

/// Sample Pearson correlation of two equally long series.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    cov / (sa * sb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ReadOptions;

    #[test]
    fn rmse_examples() {
        assert!((rmse(&[1.0, 4.0], &[1.0, 2.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&[3.0], &[3.0]), Some(0.0));
        assert_eq!(rmse(&[], &[]), None);
    }

    #[test]
    fn synthetic_correlation() {
        for (rho, seed) in [(0.8, 1), (0.0, 2), (-0.5, 3)] {
            let ds = make_synthetic_gaussian(10_000, rho, seed).unwrap();
            let x = ds.encoded();
            let r = correlation(&x.column(0).to_vec(), &x.column(1).to_vec());
            assert!((r - rho).abs() < 0.03, "rho {rho}: sample {r}");
        }
        assert!(make_synthetic_gaussian(10, 1.0, 0).is_err());
    }

    #[test]
    fn mean_baseline_rmse_near_one() {
        let ds = make_synthetic_gaussian(10_000, 0.8, 4).unwrap();
        let masked = ds.simulate_mcar(0.3, 5).unwrap();
        let base = MeanModeBaseline::fit(&masked).unwrap();
        let res = base.impute(&masked).unwrap();
        let scores = score_dataset(&masked, &res.table).unwrap();
        let r = scores.rmse().unwrap();
        assert!((r - 1.0).abs() < 0.05, "rmse {r}");
        // Standardized fill is the column mean.
        for (i, j) in masked.simulated_cells() {
            assert!(res.encoded[[i, masked.schema().columns[j].offset]].abs() < 1e-12);
        }
        let again = base.impute(&masked).unwrap();
        assert_eq!(again.table, res.table);
    }

    #[test]
    fn conditional_mean_oracle() {
        let ds = make_synthetic_gaussian(10_000, 0.8, 6).unwrap();
        let masked = ds.simulate_mcar_columns(0.5, 7, &[1]).unwrap();
        let r = conditional_mean_rmse(&masked, 0.8).unwrap();
        assert!((r - 0.6).abs() < 0.03, "rmse {r}");
        let ind = make_synthetic_gaussian(10_000, 0.0, 8).unwrap().simulate_mcar_columns(0.5, 9, &[1]).unwrap();
        assert!((conditional_mean_rmse(&ind, 0.0).unwrap() - 1.0).abs() < 0.05);
    }

    #[test]
    fn mode_with_ties_picks_first_category() {
        let t = RawTable::read("c,d\na,p\na,q\nb,q\nb,p\n?,p\n".as_bytes(), &ReadOptions::default()).unwrap();
        let ds = TabularDataset::from_table_inferred(&t, &HashMap::new()).unwrap();
        let base = MeanModeBaseline::fit(&ds).unwrap();
        assert_eq!(base.fills(), ["a", "p"]);
        let res = base.impute(&ds).unwrap();
        assert_eq!(res.table.rows[4][0].as_deref(), Some("a"));
        assert_eq!(res.rows_imputed, 1);
    }

    #[test]
    fn scoring_from_files_matches_dataset_scoring() {
        let ds = make_synthetic_gaussian(200, 0.5, 10).unwrap().simulate_mcar(0.3, 11).unwrap();
        let base = MeanModeBaseline::fit(&ds).unwrap();
        let res = base.impute(&ds).unwrap();
        let truth: Vec<_> = ds
            .ground_truth()
            .iter()
            .map(|((i, j), v)| (*i, ds.schema().columns[*j].name.clone(), v.clone()))
            .collect();
        let a = score_files(ds.schema(), &res.table, &truth).unwrap();
        let b = score_dataset(&ds, &res.table).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cat_error_rate(), None);
    }

    #[test]
    fn stability_of_identical_runs_is_zero() {
        let ds = make_synthetic_gaussian(50, 0.5, 12).unwrap().simulate_mcar(0.3, 13).unwrap();
        let base = MeanModeBaseline::fit(&ds).unwrap();
        let rep = stability(&ds, &[1, 2, 3], |_| base.impute(&ds)).unwrap();
        assert_eq!(rep.mean_std, 0.0);
        assert!(!rep.per_cell_std.is_empty());
        assert!(stability(&ds, &[1], |_| base.impute(&ds)).is_err());
    }

    #[test]
    fn report_std_across_runs() {
        let run = |e: f64| CellScores { continuous_errors: vec![e, -e], categorical_hits: vec![] };
        let rep = MetricsReport::from_runs(&[run(1.0), run(3.0)], None, serde_json::Value::Null).unwrap();
        assert_eq!(rep.rmse_runs, vec![1.0, 3.0]);
        assert_eq!(rep.rmse_std_across_runs, 1.0);
        assert_eq!(rep.rmse_continuous, Some(1.0));
        let same = MetricsReport::from_runs(&[run(2.0), run(2.0)], None, serde_json::Value::Null).unwrap();
        assert_eq!(same.rmse_std_across_runs, 0.0);
    }
}
