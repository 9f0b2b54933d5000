//! Self-masked training of the noise predictor.
//!
//! Each row's observed cells are split at random into conditioning inputs and
//! pseudo-targets. Targets are diffused to a uniformly drawn step `t`, and the
//! network is trained to recover the injected noise on target positions only.
//! Natively missing cells are zero-filled with mask 0 and never supervised.

use ndarray::Array2;
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Schema, TabularDataset};
use crate::error::{Error, Result};
use crate::predictor::{Architecture, ConditioningBatch, ConditioningInput, Gradients, NoisePredictor};
use crate::rng::{self, Domain};
use crate::schedule::NoiseSchedule;

/// Partition of a row's indices for one training draw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelfMaskSplit {
    pub cond_idx: Vec<usize>,
    pub target_idx: Vec<usize>,
    pub native_missing_idx: Vec<usize>,
}

impl SelfMaskSplit {
    /// Maps a split over raw columns onto encoded indices, so that a
    /// categorical block is always entirely conditioning or entirely target.
    pub fn expand(&self, schema: &Schema) -> SelfMaskSplit {
        let grow = |idx: &[usize]| -> Vec<usize> {
            idx.iter()
                .flat_map(|&c| schema.columns[c].range())
                .collect()
        };
        SelfMaskSplit {
            cond_idx: grow(&self.cond_idx),
            target_idx: grow(&self.target_idx),
            native_missing_idx: grow(&self.native_missing_idx),
        }
    }
}

/// Draws `ceil(ratio * |observed|)` observed indices as targets; the rest of
/// `observed` conditions, everything in `0..width` outside `observed` is
/// natively missing. Returns `None` when nothing is observed.
pub fn self_mask<R: Rng>(
    observed: &[usize],
    width: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<Option<SelfMaskSplit>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::param(format!("mask ratio must lie in [0, 1] (got {ratio})")));
    }
    if observed.is_empty() {
        return Ok(None);
    }
    let n_target = ((ratio * observed.len() as f64).ceil() as usize).min(observed.len());
    let mut picked: Vec<usize> = index::sample(rng, observed.len(), n_target).into_vec();
    picked.sort_unstable();
    let mut is_target = vec![false; observed.len()];
    for &p in &picked {
        is_target[p] = true;
    }
    let target_idx: Vec<usize> = picked.iter().map(|&p| observed[p]).collect();
    let cond_idx: Vec<usize> = observed
        .iter()
        .zip(&is_target)
        .filter(|(_, &t)| !t)
        .map(|(&o, _)| o)
        .collect();
    let mut in_observed = vec![false; width];
    for &o in observed {
        if o >= width {
            return Err(Error::param(format!("observed index {o} outside width {width}")));
        }
        in_observed[o] = true;
    }
    let native_missing_idx = (0..width).filter(|&i| !in_observed[i]).collect();
    Ok(Some(SelfMaskSplit {
        cond_idx,
        target_idx,
        native_missing_idx,
    }))
}

/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`; `t = 0` is the
/// clean-data convention and returns `x0`.
pub fn forward_corrupt(
    x0: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    eps: &[f64],
) -> Result<Vec<f64>> {
    if t > schedule.steps() {
        return Err(Error::param(format!(
            "timestep {t} outside 0..={}",
            schedule.steps()
        )));
    }
    if eps.len() != x0.len() {
        return Err(Error::Shape {
            what: "noise vector".into(),
            expected: x0.len(),
            actual: eps.len(),
        });
    }
    let a = schedule.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect())
}

/// One row's training draw.
#[derive(Debug, Clone)]
pub struct TrainItem {
    /// Encoded clean row (native-missing positions are ignored).
    pub row: Vec<f64>,
    pub split: SelfMaskSplit,
    pub t: usize,
    pub eps: Vec<f64>,
}

impl TrainItem {
    /// Network input: clean values on conditioning positions, diffused values
    /// on targets, zeros elsewhere.
    pub fn conditioning_input(&self, schedule: &NoiseSchedule) -> Result<ConditioningInput> {
        if !(1..=schedule.steps()).contains(&self.t) {
            return Err(Error::param(format!(
                "training timestep {} outside 1..={}",
                self.t,
                schedule.steps()
            )));
        }
        let d = self.row.len();
        if self.eps.len() != d {
            return Err(Error::Shape {
                what: "noise vector".into(),
                expected: d,
                actual: self.eps.len(),
            });
        }
        let mut x = vec![0.0; d];
        let mut mask = vec![0.0; d];
        for &i in &self.split.cond_idx {
            x[i] = self.row[i];
            mask[i] = 1.0;
        }
        let a = schedule.alpha_bar(self.t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        for &i in &self.split.target_idx {
            x[i] = sa * self.row[i] + sn * self.eps[i];
        }
        Ok(ConditioningInput {
            x_noisy_full: x,
            cond_mask: mask,
            t: self.t,
        })
    }
}

/// Mean squared error between `eps` and the predicted noise over
/// `split.target_idx`. `None` when there are no targets.
pub fn loss(model: &NoisePredictor, item: &TrainItem, schedule: &NoiseSchedule) -> Result<Option<f64>> {
    if item.split.target_idx.is_empty() {
        return Ok(None);
    }
    let pred = model.forward(&item.conditioning_input(schedule)?)?;
    Ok(Some(masked_mse(&pred, &item.eps, &item.split.target_idx)))
}

pub fn masked_mse(pred: &[f64], eps: &[f64], target_idx: &[usize]) -> f64 {
    target_idx
        .iter()
        .map(|&i| (pred[i] - eps[i]).powi(2))
        .sum::<f64>()
        / target_idx.len() as f64
}

/// Mean per-row loss over `items` and its parameter gradient. Items without
/// targets are skipped; `None` if every item was skipped.
pub fn batch_loss_and_grad(
    model: &NoisePredictor,
    items: &[TrainItem],
    schedule: &NoiseSchedule,
) -> Result<Option<(f64, Gradients)>> {
    let live: Vec<&TrainItem> = items.iter().filter(|it| !it.split.target_idx.is_empty()).collect();
    if live.is_empty() {
        return Ok(None);
    }
    let inputs = live
        .iter()
        .map(|it| it.conditioning_input(schedule))
        .collect::<Result<Vec<_>>>()?;
    let batch = ConditioningBatch::from_rows(&inputs)?;
    let (pred, trace) = model.forward_trace(&batch)?;
    let n = live.len() as f64;
    let mut out_grad = Array2::zeros(pred.dim());
    let mut total = 0.0;
    for (b, it) in live.iter().enumerate() {
        let k = it.split.target_idx.len() as f64;
        let mut row_loss = 0.0;
        for &i in &it.split.target_idx {
            let r = pred[[b, i]] - it.eps[i];
            row_loss += r * r;
            out_grad[[b, i]] = 2.0 * r / (k * n);
        }
        total += row_loss / k;
    }
    let grads = model.backward(&trace, out_grad.view())?;
    Ok(Some((total / n, grads)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub mask_ratio_min: f64,
    pub mask_ratio_max: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables periodic saves.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            mask_ratio_min: 0.1,
            mask_ratio_max: 0.9,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.mask_ratio_min
            && self.mask_ratio_min <= self.mask_ratio_max
            && self.mask_ratio_max <= 1.0)
        {
            return Err(Error::Config(format!(
                "mask ratios must satisfy 0 <= min <= max <= 1 (got {}, {})",
                self.mask_ratio_min, self.mask_ratio_max
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive (got {})",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update of `model` in place.
pub fn adam_step(
    model: &mut NoisePredictor,
    grads: &Gradients,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    let n = model.param_count();
    if grads.values.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape {
            what: "optimizer buffers".into(),
            expected: n,
            actual: grads.values.len().min(state.m.len()).min(state.v.len()),
        });
    }
    if let Some(i) = grads.values.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(
            model.tensor_name(i).to_string(),
            format!("non-finite gradient {}", grads.values[i]),
        ));
    }
    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let lr = config.learning_rate;
    let eps = config.adam_eps;
    let params = model.params_mut();
    for i in 0..n {
        let g = grads.values[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::numeric(
            model.tensor_name(i).to_string(),
            "parameter became non-finite after update",
        ));
    }
    Ok(())
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub model: NoisePredictor,
    pub optimizer: AdamState,
    pub epochs_completed: usize,
    /// Mean loss per completed epoch.
    pub loss_history: Vec<f64>,
}

impl TrainingState {
    pub fn fresh(arch: Architecture, seed: u64) -> Result<Self> {
        let model = NoisePredictor::init(arch, seed)?;
        let optimizer = AdamState::new(model.param_count());
        Ok(Self {
            model,
            optimizer,
            epochs_completed: 0,
            loss_history: Vec::new(),
        })
    }
}

/// Trains from a fresh initialization seeded by `config.seed`.
pub fn train(
    dataset: &TabularDataset,
    schedule: &NoiseSchedule,
    arch: Architecture,
    config: &TrainConfig,
    on_epoch: impl FnMut(&TrainingState) -> Result<()>,
) -> Result<TrainingState> {
    let arch = Architecture {
        d_enc: dataset.schema().d_enc,
        ..arch
    };
    train_from(
        TrainingState::fresh(arch, config.seed)?,
        dataset,
        schedule,
        config,
        on_epoch,
    )
}

/// Continues training `state` up to `config.epochs` total epochs, calling
/// `on_epoch` after each one.
///
/// Epoch `e` draws all of its randomness from its own stream, so a run
/// resumed from a checkpoint follows the uninterrupted trajectory exactly.
pub fn train_from(
    mut state: TrainingState,
    dataset: &TabularDataset,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainingState) -> Result<()>,
) -> Result<TrainingState> {
    config.validate()?;
    let schema = dataset.schema();
    if state.model.architecture().d_enc != schema.d_enc {
        return Err(Error::Shape {
            what: "model width vs dataset encoding".into(),
            expected: schema.d_enc,
            actual: state.model.architecture().d_enc,
        });
    }
    let trainable: Vec<usize> = (0..dataset.n_rows())
        .filter(|&i| !dataset.observed_columns(i).is_empty())
        .collect();
    let enough = (0..dataset.n_rows()).any(|i| {
        dataset.encoded_mask().row(i).iter().filter(|&&m| m == 1.0).count() >= 2
    });
    if trainable.is_empty() || !enough {
        return Err(Error::Config(
            "no trainable rows: need at least one row with two observed encoded entries".into(),
        ));
    }

    let d = schema.d_enc;
    let n_cols = schema.n_columns();
    let encoded = dataset.encoded();
    while state.epochs_completed < config.epochs {
        let epoch = state.epochs_completed;
        let mut rng = rng::stream(config.seed, Domain::Epoch, epoch as u64);
        let mut order = trainable.clone();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut loss_rows = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut items = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ratio = if config.mask_ratio_max > config.mask_ratio_min {
                    rng.gen_range(config.mask_ratio_min..=config.mask_ratio_max)
                } else {
                    config.mask_ratio_min
                };
                let observed = dataset.observed_columns(i);
                let Some(raw_split) = self_mask(&observed, n_cols, ratio, &mut rng)? else {
                    continue;
                };
                let t = rng.gen_range(1..=schedule.steps());
                let mut eps = vec![0.0; d];
                rng::fill_standard_normal(&mut rng, &mut eps);
                items.push(TrainItem {
                    row: encoded.row(i).to_vec(),
                    split: raw_split.expand(schema),
                    t,
                    eps,
                });
            }
            let Some((batch_loss, grads)) = batch_loss_and_grad(&state.model, &items, schedule)? else {
                continue;
            };
            let live = items.iter().filter(|it| !it.split.target_idx.is_empty()).count();
            loss_sum += batch_loss * live as f64;
            loss_rows += live;
            adam_step(&mut state.model, &grads, &mut state.optimizer, config)?;
        }
        state.loss_history.push(if loss_rows > 0 {
            loss_sum / loss_rows as f64
        } else {
            f64::NAN
        });
        state.epochs_completed += 1;
        on_epoch(&state)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_schedule, ScheduleKind, ScheduleParams};
    use proptest::prelude::*;

    fn rng0() -> rand_chacha::ChaCha8Rng {
        rng::stream(0, Domain::Mask, 0)
    }

    #[test]
    fn self_mask_partition_examples() {
        let s = self_mask(&[0, 1, 2, 3], 4, 0.5, &mut rng0()).unwrap().unwrap();
        assert_eq!(s.target_idx.len(), 2);
        let mut all: Vec<usize> = s.cond_idx.iter().chain(&s.target_idx).copied().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(s.native_missing_idx.is_empty());

        let s = self_mask(&[0, 1, 2, 3], 4, 0.0, &mut rng0()).unwrap().unwrap();
        assert!(s.target_idx.is_empty());

        let obs: Vec<usize> = (0..10).collect();
        let s = self_mask(&obs, 10, 0.3, &mut rng0()).unwrap().unwrap();
        assert_eq!(s.target_idx.len(), 3);

        assert!(self_mask(&[], 4, 0.5, &mut rng0()).unwrap().is_none());
        assert!(self_mask(&[0], 4, 1.5, &mut rng0()).is_err());
    }

    proptest! {
        #[test]
        fn self_mask_invariants(
            width in 1usize..24,
            bits in proptest::collection::vec(any::<bool>(), 24),
            ratio in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let observed: Vec<usize> = (0..width).filter(|&i| bits[i]).collect();
            let mut r = rng::stream(seed, Domain::Mask, 1);
            match self_mask(&observed, width, ratio, &mut r).unwrap() {
                None => prop_assert!(observed.is_empty()),
                Some(s) => {
                    for c in &s.cond_idx {
                        prop_assert!(!s.target_idx.contains(c));
                    }
                    let mut union: Vec<usize> = s.cond_idx.iter().chain(&s.target_idx).copied().collect();
                    union.sort_unstable();
                    prop_assert_eq!(&union, &observed);
                    for n in &s.native_missing_idx {
                        prop_assert!(!union.contains(n));
                    }
                    prop_assert_eq!(s.native_missing_idx.len() + union.len(), width);
                    let expect = (ratio * observed.len() as f64).ceil() as usize;
                    prop_assert_eq!(s.target_idx.len(), expect.min(observed.len()));
                }
            }
        }
    }

    #[test]
    fn forward_corrupt_examples() {
        // alpha_bar = 0.64 after one linear step of beta = 0.36
        let s = build_schedule(ScheduleKind::Linear, 1, 0.36, 0.36).unwrap();
        let x = forward_corrupt(&[2.0], 1, &s, &[0.5]).unwrap();
        assert!((x[0] - 1.9).abs() < 1e-12);
        assert_eq!(forward_corrupt(&[2.0], 0, &s, &[0.0]).unwrap(), vec![2.0]);
        assert!(forward_corrupt(&[2.0], 2, &s, &[0.0]).is_err());
        assert!(forward_corrupt(&[2.0], 1, &s, &[0.0, 1.0]).is_err());
    }

    fn tiny_model(d: usize, seed: u64) -> NoisePredictor {
        NoisePredictor::init(
            Architecture {
                d_enc: d,
                depth: 1,
                width: 8,
                time_embed_dim: 4,
            },
            seed,
        )
        .unwrap()
    }

    fn item(split: SelfMaskSplit, t: usize, eps: Vec<f64>) -> TrainItem {
        TrainItem {
            row: vec![0.3, -1.2, 0.8, 2.0],
            split,
            t,
            eps,
        }
    }

    fn split(cond: &[usize], target: &[usize], native: &[usize]) -> SelfMaskSplit {
        SelfMaskSplit {
            cond_idx: cond.to_vec(),
            target_idx: target.to_vec(),
            native_missing_idx: native.to_vec(),
        }
    }

    #[test]
    fn loss_with_zero_model_is_mean_square_noise() {
        let arch = Architecture {
            d_enc: 4,
            depth: 1,
            width: 8,
            time_embed_dim: 4,
        };
        let zero = NoisePredictor::from_parts(arch, vec![0.0; arch.param_count()], 0).unwrap();
        let s = ScheduleParams::default().build().unwrap();
        let it = item(split(&[0], &[1, 2], &[3]), 10, vec![9.0, 1.0, 2.0, 9.0]);
        assert!((loss(&zero, &it, &s).unwrap().unwrap() - 2.5).abs() < 1e-15);
        let empty = item(split(&[0, 1], &[], &[2, 3]), 10, vec![0.0; 4]);
        assert!(loss(&zero, &empty, &s).unwrap().is_none());
    }

    #[test]
    fn masked_reduction_only_sees_targets() {
        let eps = [5.0, 0.2, -0.4, -7.0];
        assert_eq!(masked_mse(&[0.0, 0.2, -0.4, 0.0], &eps, &[1, 2]), 0.0);
        assert_eq!(masked_mse(&[100.0, 0.2, -0.4, -100.0], &eps, &[1, 2]), 0.0);
        assert!((masked_mse(&[5.0, 1.2, -0.4, -7.0], &eps, &[1, 2]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn native_missing_values_do_not_affect_loss() {
        let model = tiny_model(4, 2);
        let s = ScheduleParams::default().build().unwrap();
        let mut a = item(split(&[0], &[1], &[2, 3]), 30, vec![0.1, 0.4, -0.3, 0.9]);
        let la = loss(&model, &a, &s).unwrap().unwrap();
        a.row[2] = 1e6;
        a.row[3] = -1e6;
        a.eps[2] = 77.0;
        assert_eq!(loss(&model, &a, &s).unwrap().unwrap(), la);
    }

    #[test]
    fn batch_gradient_is_mean_of_row_gradients() {
        let model = tiny_model(4, 3);
        let s = ScheduleParams::default().build().unwrap();
        let items = vec![
            item(split(&[0], &[1, 2], &[3]), 5, vec![0.2, -0.4, 1.1, 0.0]),
            item(split(&[1, 2], &[0], &[3]), 60, vec![-1.0, 0.3, 0.5, 0.7]),
            item(split(&[], &[0, 3], &[1, 2]), 99, vec![0.6, 0.0, 0.0, -0.2]),
        ];
        let (l, g) = batch_loss_and_grad(&model, &items, &s).unwrap().unwrap();
        let mut mean = Gradients::zeros(model.param_count());
        let mut lsum = 0.0;
        for it in &items {
            let (li, gi) = batch_loss_and_grad(&model, std::slice::from_ref(it), &s).unwrap().unwrap();
            lsum += li;
            mean.add_assign(&gi);
        }
        mean.scale(1.0 / 3.0);
        assert!((l - lsum / 3.0).abs() < 1e-12);
        for (a, b) in g.values.iter().zip(&mean.values) {
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut model = tiny_model(3, 4);
        let before = model.params().to_vec();
        let mut st = AdamState::new(model.param_count());
        let g = Gradients::zeros(model.param_count());
        adam_step(&mut model, &g, &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(model.params(), before.as_slice());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2  =>  update = lr * g / (|g| + eps)
        let mut model = tiny_model(3, 5);
        let before = model.params().to_vec();
        let mut st = AdamState::new(model.param_count());
        let g = Gradients {
            values: vec![0.37; model.param_count()],
        };
        let cfg = TrainConfig::default();
        adam_step(&mut model, &g, &mut st, &cfg).unwrap();
        let expected = cfg.learning_rate * 0.37 / (0.37 + cfg.adam_eps);
        for (a, b) in model.params().iter().zip(&before) {
            assert!(((b - a) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_tensor() {
        let mut model = tiny_model(3, 6);
        let mut st = AdamState::new(model.param_count());
        let mut g = Gradients::zeros(model.param_count());
        let last = model.param_count() - 1;
        g.values[last] = f64::INFINITY;
        let err = adam_step(&mut model, &g, &mut st, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("output.bias"), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.mask_ratio_min = 0.95;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
