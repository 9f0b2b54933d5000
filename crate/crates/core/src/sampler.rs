//! Conditional reverse-process samplers and dataset imputation.
//!
//! Observed positions are clamped to their clean values for the whole walk;
//! only target positions (encoded mask 0) evolve. Every (row, sample) lane
//! owns a noise stream keyed by `(init_seed, row_id, sample)`, and rows are
//! processed in chunks whose composition depends only on the configuration,
//! so results are independent of the thread count.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView1};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{RawTable, TabularDataset};
use crate::error::{Error, Result};
use crate::predictor::NoiseModel;
use crate::rng;
use crate::schedule::{make_subsequence, NoiseSchedule, StepSubsequence};

/// Radicands above this negative threshold are treated as rounding error.
const RADICAND_TOLERANCE: f64 = 1e-12;

/// Target lane count per chunk; chunk sizes never depend on the thread count.
const LANES_PER_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ddim,
    Ddpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Single,
    Median,
}

/// Starting point `x_T` at target positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// `zero` for deterministic sampling (`eta = 0`), `noise` otherwise.
    Auto,
    /// Prior mean of `x_T`.
    Zero,
    /// A standard-normal draw from the lane's stream.
    Noise,
}

macro_rules! lowercase_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::param(format!(
                        concat!("unknown ", stringify!($ty), " '{}' (expected one of: ", $($name, " ",)+ ")"),
                        other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name,)+ })
            }
        }
    };
}

lowercase_enum!(Method { Ddim => "ddim", Ddpm => "ddpm" });
lowercase_enum!(Aggregation { Single => "single", Median => "median" });
lowercase_enum!(InitMode { Auto => "auto", Zero => "zero", Noise => "noise" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub method: Method,
    pub eta: f64,
    /// Subsequence length `S`; must equal `T` for DDPM.
    pub steps: usize,
    pub n_samples: usize,
    pub aggregation: Aggregation,
    pub init_seed: u64,
    pub init: InitMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: Method::Ddim,
            eta: 0.0,
            steps: 100,
            n_samples: 1,
            aggregation: Aggregation::Single,
            init_seed: 0,
            init: InitMode::Auto,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(Error::param(format!("--eta must be finite and >= 0 (got {})", self.eta)));
        }
        if self.n_samples == 0 {
            return Err(Error::param("--samples must be at least 1"));
        }
        match self.aggregation {
            Aggregation::Median if self.n_samples < 2 => {
                return Err(Error::Config("median aggregation needs --samples >= 2".into()));
            }
            Aggregation::Single if self.n_samples != 1 => {
                return Err(Error::Config(format!(
                    "single aggregation needs --samples 1 (got {}); use --agg median",
                    self.n_samples
                )));
            }
            _ => {}
        }
        let sub = self.subsequence(schedule)?;
        if self.method == Method::Ddpm && !sub.is_full(schedule.steps()) {
            return Err(Error::Config(format!(
                "the ddpm sampler walks all {} steps; got --steps {}",
                schedule.steps(),
                self.steps
            )));
        }
        Ok(())
    }

    pub fn subsequence(&self, schedule: &NoiseSchedule) -> Result<StepSubsequence> {
        make_subsequence(schedule.steps(), self.steps)
    }

    /// `init` with `Auto` replaced by the concrete mode.
    pub fn resolved_init(&self) -> InitMode {
        match self.init {
            InitMode::Auto if self.method == Method::Ddim && self.eta == 0.0 => InitMode::Zero,
            InitMode::Auto => InitMode::Noise,
            other => other,
        }
    }

    /// Copy with every automatic choice made explicit.
    pub fn resolved(&self) -> Self {
        Self {
            init: self.resolved_init(),
            ..self.clone()
        }
    }

    fn is_stochastic(&self) -> bool {
        self.method == Method::Ddpm || self.eta > 0.0
    }
}

/// Coefficients of one generalized DDIM jump `t_cur -> t_prev`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoefficients {
    sqrt_one_minus_cur: f64,
    sqrt_cur: f64,
    sqrt_prev: f64,
    direction: f64,
    pub sigma: f64,
}

impl DdimCoefficients {
    pub fn new(alpha_cur: f64, alpha_prev: f64, sigma: f64) -> Result<Self> {
        let radicand = 1.0 - alpha_prev - sigma * sigma;
        if radicand < -RADICAND_TOLERANCE || !radicand.is_finite() {
            return Err(Error::numeric(
                "ddim step",
                format!("1 - alpha_prev - sigma^2 = {radicand:e} (alpha_prev {alpha_prev}, sigma {sigma})"),
            ));
        }
        Ok(Self {
            sqrt_one_minus_cur: (1.0 - alpha_cur).sqrt(),
            sqrt_cur: alpha_cur.sqrt(),
            sqrt_prev: alpha_prev.sqrt(),
            direction: radicand.max(0.0).sqrt(),
            sigma,
        })
    }

    pub fn from_schedule(schedule: &NoiseSchedule, t_cur: usize, t_prev: usize, eta: f64) -> Result<Self> {
        let sigma = schedule.sigma_eta(t_prev, t_cur, eta)?;
        Self::new(schedule.alpha_bar(t_cur), schedule.alpha_bar(t_prev), sigma)
    }

    /// Denoised estimate `x_0` implied by `eps_hat`.
    pub fn x0_hat(&self, x: f64, eps_hat: f64) -> f64 {
        (x - self.sqrt_one_minus_cur * eps_hat) / self.sqrt_cur
    }

    pub fn apply(&self, x: f64, eps_hat: f64, z: f64) -> f64 {
        let mut out = self.sqrt_prev * self.x0_hat(x, eps_hat) + self.direction * eps_hat;
        if self.sigma != 0.0 {
            out += self.sigma * z;
        }
        out
    }
}

/// Coefficients of one ancestral DDPM step `t -> t - 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdpmCoefficients {
    inv_sqrt_alpha: f64,
    eps_scale: f64,
    pub std: f64,
}

impl DdpmCoefficients {
    pub fn new(schedule: &NoiseSchedule, t: usize) -> Result<Self> {
        if t == 0 || t > schedule.steps() {
            return Err(Error::param(format!("ddpm step t = {t} outside 1..={}", schedule.steps())));
        }
        let beta = schedule.beta(t);
        let std = if t == 1 { 0.0 } else { schedule.posterior_variance(t).sqrt() };
        if !std.is_finite() {
            return Err(Error::numeric("ddpm step", format!("posterior variance at t = {t} is not finite")));
        }
        Ok(Self {
            inv_sqrt_alpha: 1.0 / (1.0 - beta).sqrt(),
            eps_scale: beta / (1.0 - schedule.alpha_bar(t)).sqrt(),
            std,
        })
    }

    pub fn mean(&self, x: f64, eps_hat: f64) -> f64 {
        self.inv_sqrt_alpha * (x - self.eps_scale * eps_hat)
    }

    pub fn apply(&self, x: f64, eps_hat: f64, z: f64) -> f64 {
        let mean = self.mean(x, eps_hat);
        if self.std == 0.0 {
            mean
        } else {
            mean + self.std * z
        }
    }
}

/// One row's reverse-process iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    /// Current iterate; conditioning positions hold the clean observed values.
    pub x: Vec<f64>,
    pub t: usize,
    pub cond_mask: Vec<f64>,
}

impl DiffusionState {
    /// `x_T` for an encoded row: observed values kept, targets set to `init`.
    pub fn start(observed: &[f64], cond_mask: &[f64], init: &[f64], t: usize) -> Result<Self> {
        let d = observed.len();
        for (what, len) in [("cond_mask", cond_mask.len()), ("init", init.len())] {
            if len != d {
                return Err(Error::Shape { what: what.into(), expected: d, actual: len });
            }
        }
        let x = (0..d)
            .map(|j| if cond_mask[j] == 1.0 { observed[j] } else { init[j] })
            .collect();
        Ok(Self { x, t, cond_mask: cond_mask.to_vec() })
    }

    fn predict<M: NoiseModel>(&self, model: &M) -> Result<Vec<f64>> {
        let d = self.x.len();
        let x = ArrayView1::from(&self.x).into_shape_with_order((1, d)).expect("row view");
        let m = ArrayView1::from(&self.cond_mask).into_shape_with_order((1, d)).expect("row view");
        Ok(model.predict(x, m, self.t)?.row(0).to_vec())
    }

    fn update(&self, eps: &[f64], z: &[f64], t_next: usize, f: impl Fn(f64, f64, f64) -> f64) -> Result<Self> {
        if z.len() != self.x.len() {
            return Err(Error::Shape { what: "noise vector".into(), expected: self.x.len(), actual: z.len() });
        }
        let x = (0..self.x.len())
            .map(|j| if self.cond_mask[j] == 1.0 { self.x[j] } else { f(self.x[j], eps[j], z[j]) })
            .collect();
        Ok(Self { x, t: t_next, cond_mask: self.cond_mask.clone() })
    }
}

/// One generalized DDIM jump; `z` is ignored when `eta = 0`.
pub fn ddim_step<M: NoiseModel>(
    state: &DiffusionState,
    t_cur: usize,
    t_prev: usize,
    model: &M,
    schedule: &NoiseSchedule,
    eta: f64,
    z: &[f64],
) -> Result<DiffusionState> {
    if state.t != t_cur {
        return Err(Error::State(format!("state is at t = {}, step asked for t = {t_cur}", state.t)));
    }
    let coef = DdimCoefficients::from_schedule(schedule, t_cur, t_prev, eta)?;
    let eps = state.predict(model)?;
    state.update(&eps, z, t_prev, |x, e, z| coef.apply(x, e, z))
}

/// One ancestral DDPM step `t -> t - 1`; no noise is injected at `t = 1`.
pub fn ddpm_step<M: NoiseModel>(
    state: &DiffusionState,
    t: usize,
    model: &M,
    schedule: &NoiseSchedule,
    z: &[f64],
) -> Result<DiffusionState> {
    if state.t != t {
        return Err(Error::State(format!("state is at t = {}, step asked for t = {t}", state.t)));
    }
    let coef = DdpmCoefficients::new(schedule, t)?;
    let eps = state.predict(model)?;
    state.update(&eps, z, t - 1, |x, e, z| coef.apply(x, e, z))
}

/// Elementwise median; even counts average the two middle values.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

enum Step {
    Ddim(DdimCoefficients),
    Ddpm(DdpmCoefficients),
}

impl Step {
    fn sigma(&self) -> f64 {
        match self {
            Step::Ddim(c) => c.sigma,
            Step::Ddpm(c) => c.std,
        }
    }

    fn apply(&self, x: f64, eps: f64, z: f64) -> f64 {
        match self {
            Step::Ddim(c) => c.apply(x, eps, z),
            Step::Ddpm(c) => c.apply(x, eps, z),
        }
    }
}

/// Resolved walk: `(t_cur, coefficients)` from `T` down to the last step.
struct Plan {
    steps: Vec<(usize, Step)>,
    n_samples: usize,
    aggregation: Aggregation,
    init: InitMode,
    init_seed: u64,
}

impl Plan {
    fn new(schedule: &NoiseSchedule, config: &SamplerConfig) -> Result<Self> {
        config.validate(schedule)?;
        let sub = config.subsequence(schedule)?;
        let steps = match config.method {
            Method::Ddim => sub
                .reverse_pairs()
                .map(|(cur, prev)| {
                    DdimCoefficients::from_schedule(schedule, cur, prev, config.eta).map(|c| (cur, Step::Ddim(c)))
                })
                .collect::<Result<Vec<_>>>()?,
            Method::Ddpm => (1..=schedule.steps())
                .rev()
                .map(|t| DdpmCoefficients::new(schedule, t).map(|c| (t, Step::Ddpm(c))))
                .collect::<Result<Vec<_>>>()?,
        };
        debug_assert!(config.is_stochastic() || steps.iter().all(|(_, s)| s.sigma() == 0.0));
        Ok(Self {
            steps,
            n_samples: config.n_samples,
            aggregation: config.aggregation,
            init: config.resolved_init(),
            init_seed: config.init_seed,
        })
    }

    /// Samples every lane of `rows` and aggregates per row.
    ///
    /// `rows` holds `(row_id, values, mask)`; returns one filled row each.
    fn run<M: NoiseModel>(&self, model: &M, rows: &[(usize, Vec<f64>, Vec<f64>)]) -> Result<Vec<Vec<f64>>> {
        let d = model.d_enc();
        let s = self.n_samples;
        let lanes = rows.len() * s;
        let mut x = Array2::zeros((lanes, d));
        let mut mask = Array2::zeros((lanes, d));
        let mut rngs: Vec<ChaCha8Rng> = Vec::with_capacity(lanes);
        let mut buf = vec![0.0; d];
        for (r, (row_id, values, m)) in rows.iter().enumerate() {
            for k in 0..s {
                let lane = r * s + k;
                let mut rng = rng::sampler_stream(self.init_seed, *row_id, k);
                match self.init {
                    InitMode::Noise => rng::fill_standard_normal(&mut rng, &mut buf),
                    _ => buf.fill(0.0),
                }
                for j in 0..d {
                    mask[[lane, j]] = m[j];
                    x[[lane, j]] = if m[j] == 1.0 { values[j] } else { buf[j] };
                }
                rngs.push(rng);
            }
        }

        let mut z = vec![0.0; d];
        for (t, step) in &self.steps {
            let eps = model.predict(x.view(), mask.view(), *t)?;
            let noisy = step.sigma() != 0.0;
            for lane in 0..lanes {
                if noisy {
                    rng::fill_standard_normal(&mut rngs[lane], &mut z);
                }
                for j in 0..d {
                    if mask[[lane, j]] == 0.0 {
                        x[[lane, j]] = step.apply(x[[lane, j]], eps[[lane, j]], z[j]);
                    }
                }
            }
        }
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "sampler output",
                format!("non-finite value for row id {}", rows[bad / d / s].0),
            ));
        }

        let mut out = Vec::with_capacity(rows.len());
        let mut column = vec![0.0; s];
        for r in 0..rows.len() {
            let mut filled = rows[r].1.clone();
            for j in 0..d {
                if rows[r].2[j] == 1.0 {
                    continue;
                }
                filled[j] = match self.aggregation {
                    Aggregation::Single => x[[r * s, j]],
                    Aggregation::Median => {
                        for k in 0..s {
                            column[k] = x[[r * s + k, j]];
                        }
                        median(&mut column)
                    }
                };
            }
            out.push(filled);
        }
        Ok(out)
    }
}

/// Imputes one encoded row. `values` must hold the observed entries where
/// `mask` is 1; other entries are ignored. Rows without targets are returned
/// unchanged without touching the model.
pub fn impute_row<M: NoiseModel>(
    values: &[f64],
    mask: &[f64],
    row_id: usize,
    model: &M,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<Vec<f64>> {
    let d = model.d_enc();
    if values.len() != d || mask.len() != d {
        return Err(Error::Shape { what: "encoded row".into(), expected: d, actual: values.len().max(mask.len()) });
    }
    let plan = Plan::new(schedule, config)?;
    if mask.iter().all(|&m| m == 1.0) {
        return Ok(values.to_vec());
    }
    let mut rows = plan.run(model, &[(row_id, values.to_vec(), mask.to_vec())])?;
    Ok(rows.pop().expect("one row in, one row out"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Observed,
    Generated,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Observed => "observed",
            Provenance::Generated => "generated",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImputationResult {
    /// Encoded matrix with every missing entry filled.
    pub encoded: Array2<f64>,
    /// Completed table; observed cells are copied verbatim.
    pub table: RawTable,
    /// Per raw cell, `n x d_raw`.
    pub provenance: Vec<Vec<Provenance>>,
    /// Row index in the originating table, per row.
    pub row_ids: Vec<usize>,
    pub rows_imputed: usize,
    /// Sampling loop only; excludes I/O and model loading.
    pub wall_time_s: f64,
}

impl ImputationResult {
    /// `row_index,column_name,status` for every cell.
    pub fn write_provenance(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["row_index", "column_name", "status"])?;
        for (i, row) in self.provenance.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                wtr.write_record([self.row_ids[i].to_string(), self.table.header[j].clone(), p.as_str().into()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Imputes every row with a missing cell. Rows are sampled in parallel on the
/// current rayon pool.
pub fn impute_dataset<M: NoiseModel>(
    dataset: &TabularDataset,
    model: &M,
    schema_hash: &str,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<ImputationResult> {
    let schema = dataset.schema();
    if schema.hash != schema_hash {
        return Err(Error::Schema(format!(
            "dataset schema hash {} does not match the checkpoint's {}",
            schema.hash, schema_hash
        )));
    }
    if model.d_enc() != schema.d_enc {
        return Err(Error::Shape { what: "model width vs dataset encoding".into(), expected: schema.d_enc, actual: model.d_enc() });
    }
    let plan = Plan::new(schedule, config)?;

    let targets: Vec<usize> = (0..dataset.n_rows()).filter(|&i| dataset.row_has_missing(i)).collect();
    let encoded = dataset.encoded();
    let mask = dataset.encoded_mask();
    let rows_per_chunk = (LANES_PER_CHUNK / config.n_samples).max(1);

    let started = Instant::now();
    let chunks: Vec<Vec<Vec<f64>>> = targets
        .par_chunks(rows_per_chunk)
        .map(|chunk| {
            let rows: Vec<_> = chunk
                .iter()
                .map(|&i| (dataset.row_ids()[i], encoded.row(i).to_vec(), mask.row(i).to_vec()))
                .collect();
            plan.run(model, &rows)
        })
        .collect::<Result<_>>()?;
    let wall_time_s = started.elapsed().as_secs_f64();

    let mut filled = encoded.clone();
    let mut table = dataset.to_table();
    let mut provenance = vec![vec![Provenance::Observed; dataset.n_columns()]; dataset.n_rows()];
    for (&i, row) in targets.iter().zip(chunks.into_iter().flatten()) {
        let decoded = schema.decode_row(&row)?;
        for j in 0..dataset.n_columns() {
            if table.rows[i][j].is_none() {
                table.rows[i][j] = Some(decoded[j].clone());
                provenance[i][j] = Provenance::Generated;
            }
        }
        filled.row_mut(i).assign(&ArrayView1::from(&row));
    }
    Ok(ImputationResult {
        encoded: filled,
        table,
        provenance,
        row_ids: dataset.row_ids().to_vec(),
        rows_imputed: targets.len(),
        wall_time_s,
    })
}
