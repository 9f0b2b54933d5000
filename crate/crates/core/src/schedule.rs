//! Diffusion noise schedule: per-step betas, cumulative alpha products, step
//! subsequences for accelerated sampling and the eta-parameterized per-step
//! standard deviation.
//!
//! Timesteps are 1-based. `alpha_bar(0) == 1` denotes the clean data, so a
//! reverse step landing on `t_prev = 0` returns the denoised estimate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// beta interpolates linearly between the bounds.
    Linear,
    /// sqrt(beta) interpolates linearly between the square roots of the bounds.
    Quadratic,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(ScheduleKind::Linear),
            "quadratic" => Ok(ScheduleKind::Quadratic),
            other => Err(Error::param(format!("unknown schedule kind '{other}'"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Linear => f.write_str("linear"),
            ScheduleKind::Quadratic => f.write_str("quadratic"),
        }
    }
}

/// The serializable description of a schedule, as stored in checkpoints and
/// run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Quadratic,
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.3,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.kind, self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    /// `beta[t - 1]` is the variance added at step `t`.
    beta: Vec<f64>,
    /// `alpha_bar[t]` for `t` in `0..=T`.
    alpha_bar: Vec<f64>,
}

pub fn build_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::param("schedule needs T >= 1"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::param(format!(
            "schedule bounds must satisfy 0 < beta_min <= beta_max < 1 (got {beta_min}, {beta_max})"
        )));
    }

    let frac = |t: usize| -> f64 {
        if steps == 1 {
            0.0
        } else {
            t as f64 / (steps - 1) as f64
        }
    };
    let beta: Vec<f64> = (0..steps)
        .map(|i| match kind {
            ScheduleKind::Linear => beta_min + frac(i) * (beta_max - beta_min),
            ScheduleKind::Quadratic => {
                let lo = beta_min.sqrt();
                let hi = beta_max.sqrt();
                let s = lo + frac(i) * (hi - lo);
                s * s
            }
        })
        .collect();

    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }

    Ok(NoiseSchedule {
        params: ScheduleParams {
            kind,
            steps,
            beta_min,
            beta_max,
        },
        beta,
        alpha_bar,
    })
}

impl NoiseSchedule {
    /// Schedule with hand-picked `alpha_bar[0..=T]`, for tests.
    #[cfg(test)]
    pub(crate) fn from_alpha_bars(alpha_bar: Vec<f64>) -> Result<Self> {
        let beta: Vec<f64> = alpha_bar.windows(2).map(|w| 1.0 - w[1] / w[0]).collect();
        if alpha_bar.first() != Some(&1.0) || beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::param("alpha_bar must start at 1 and strictly decrease"));
        }
        let fold = |f: fn(f64, f64) -> f64| beta.iter().copied().reduce(f).unwrap();
        Ok(Self {
            params: ScheduleParams {
                kind: ScheduleKind::Linear,
                steps: beta.len(),
                beta_min: fold(f64::min),
                beta_max: fold(f64::max),
            },
            beta,
            alpha_bar,
        })
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// beta at step `t` (1-based). Panics if `t` is outside `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "timestep {t} outside 1..={}", self.steps());
        self.beta[t - 1]
    }

    /// Cumulative product of `1 - beta` up to step `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// DDPM posterior variance `beta_t (1 - alpha_bar[t-1]) / (1 - alpha_bar[t])`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Per-step standard deviation of the generalized (eta-interpolated)
    /// reverse process for a jump from `t_cur` down to `t_prev`.
    pub fn sigma_eta(&self, t_prev: usize, t_cur: usize, eta: f64) -> Result<f64> {
        if t_prev >= t_cur {
            return Err(Error::param(format!(
                "sigma_eta needs t_prev < t_cur (got {t_prev} >= {t_cur})"
            )));
        }
        if t_cur > self.steps() {
            return Err(Error::param(format!(
                "timestep {t_cur} exceeds T = {}",
                self.steps()
            )));
        }
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::param(format!("eta must be finite and >= 0 (got {eta})")));
        }
        Ok(sigma_from_alphas(
            self.alpha_bar(t_prev),
            self.alpha_bar(t_cur),
            eta,
        ))
    }
}

/// `eta * sqrt((1 - a_prev) / (1 - a_cur)) * sqrt(1 - a_cur / a_prev)`.
pub fn sigma_from_alphas(alpha_prev: f64, alpha_cur: f64, eta: f64) -> f64 {
    eta * ((1.0 - alpha_prev) / (1.0 - alpha_cur)).sqrt() * (1.0 - alpha_cur / alpha_prev).sqrt()
}

/// Strictly increasing steps in `[1, T]` ending at `T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSubsequence(Vec<usize>);

impl StepSubsequence {
    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("subsequence is never empty")
    }

    /// `(t_cur, t_prev)` pairs walked by the reverse process, from `T` down to 0.
    pub fn reverse_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.0.len())
            .rev()
            .map(move |i| (self.0[i], if i == 0 { 0 } else { self.0[i - 1] }))
    }

    /// True when the subsequence visits every step `1..=T`.
    pub fn is_full(&self, steps: usize) -> bool {
        self.0.len() == steps && self.last() == steps
    }
}

/// `S` evenly spaced steps `round(i * T / S)`, `i = 1..=S`.
pub fn make_subsequence(total: usize, count: usize) -> Result<StepSubsequence> {
    if count == 0 || count > total {
        return Err(Error::param(format!(
            "subsequence length must satisfy 1 <= S <= T (got S = {count}, T = {total})"
        )));
    }
    // round half up, in integers
    let mut tau: Vec<usize> = (1..=count)
        .map(|i| (2 * i * total + count) / (2 * count))
        .collect();
    // Keep the last occurrence of any repeated value so tau still ends at T.
    let mut deduped: Vec<usize> = Vec::with_capacity(tau.len());
    for (i, &t) in tau.iter().enumerate() {
        if tau.get(i + 1) != Some(&t) {
            deduped.push(t);
        }
    }
    tau = deduped;
    debug_assert_eq!(*tau.last().unwrap(), total);
    Ok(StepSubsequence(tau))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn linear_two_steps() {
        let s = build_schedule(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
        let ab = s.alpha_bars();
        assert_eq!(ab[0], 1.0);
        assert!(close(ab[1], 0.9, 1e-15));
        assert!(close(ab[2], 0.72, 1e-15));
    }

    #[test]
    fn linear_single_step() {
        let s = build_schedule(ScheduleKind::Linear, 1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert_eq!(s.alpha_bars(), &[1.0, 0.9]);
    }

    #[test]
    fn quadratic_default_regression() {
        // Running product computed independently in double precision.
        let s = ScheduleParams::default().build().unwrap();
        let last = s.alpha_bar(100);
        assert!(last > 0.0 && last < 0.01);
        assert!((last - 1.2022639600949675e-05).abs() / 1.2022639600949675e-05 < 1e-10);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(build_schedule(ScheduleKind::Linear, 0, 0.1, 0.2).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.0, 0.2).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.3, 0.2).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.1, 1.0).is_err());
        assert!("cosine".parse::<ScheduleKind>().is_err());
        assert_eq!("Quadratic".parse::<ScheduleKind>().unwrap(), ScheduleKind::Quadratic);
    }

    #[test]
    fn sigma_hand_values() {
        assert_eq!(sigma_from_alphas(0.64, 0.25, 0.0), 0.0);
        let s1 = sigma_from_alphas(0.64, 0.25, 1.0);
        let expected = (0.36f64 / 0.75).sqrt() * (1.0f64 - 0.25 / 0.64).sqrt();
        assert!((s1 - expected).abs() < 1e-15);
        assert!((s1 - 0.540833).abs() < 1e-6);
        assert!((sigma_from_alphas(0.64, 0.25, 0.5) - 0.270416).abs() < 1e-6);
    }

    #[test]
    fn sigma_rejects_bad_order() {
        let s = ScheduleParams::default().build().unwrap();
        assert!(s.sigma_eta(5, 5, 1.0).is_err());
        assert!(s.sigma_eta(6, 5, 1.0).is_err());
        assert!(s.sigma_eta(5, 101, 1.0).is_err());
        assert!(s.sigma_eta(4, 5, -0.1).is_err());
        assert_eq!(s.sigma_eta(4, 5, 0.0).unwrap(), 0.0);
        assert_eq!(s.sigma_eta(0, 5, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn sigma_one_matches_posterior_variance() {
        let s = ScheduleParams::default().build().unwrap();
        for t in 1..=s.steps() {
            let sig = s.sigma_eta(t - 1, t, 1.0).unwrap();
            assert!((sig * sig - s.posterior_variance(t)).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn subsequences() {
        assert_eq!(make_subsequence(100, 4).unwrap().steps(), &[25, 50, 75, 100]);
        let full = make_subsequence(100, 100).unwrap();
        assert_eq!(full.steps(), (1..=100).collect::<Vec<_>>().as_slice());
        assert!(full.is_full(100));
        let s20 = make_subsequence(100, 20).unwrap();
        assert_eq!(s20.steps(), (1..=20).map(|i| 5 * i).collect::<Vec<_>>().as_slice());
        assert_eq!(make_subsequence(7, 1).unwrap().steps(), &[7]);
        assert!(make_subsequence(10, 11).is_err());
        assert!(make_subsequence(10, 0).is_err());
    }

    #[test]
    fn reverse_pairs_end_at_zero() {
        let tau = make_subsequence(100, 4).unwrap();
        let pairs: Vec<_> = tau.reverse_pairs().collect();
        assert_eq!(pairs, vec![(100, 75), (75, 50), (50, 25), (25, 0)]);
    }

    proptest::proptest! {
        #[test]
        fn schedule_properties(
            quadratic in proptest::bool::ANY,
            steps in 1usize..300,
            lo in 1e-5f64..0.2,
            span in 0.0f64..0.7,
            eta in 0.0f64..3.0,
            picks in (0usize..1000, 0usize..1000),
        ) {
            let kind = if quadratic { ScheduleKind::Quadratic } else { ScheduleKind::Linear };
            let s = build_schedule(kind, steps, lo, lo + span).unwrap();
            for t in 1..=steps {
                let ratio = s.alpha_bar(t) / s.alpha_bar(t - 1);
                let beta = s.betas()[t - 1];
                proptest::prop_assert!((ratio - (1.0 - beta)).abs() <= 1e-12 * (1.0 - beta));
                let sig = s.sigma_eta(t - 1, t, 1.0).unwrap();
                proptest::prop_assert!((sig * sig - s.posterior_variance(t)).abs() < 1e-12);
            }
            let a = picks.0 % steps;
            let b = a + 1 + picks.1 % (steps - a);
            let one = s.sigma_eta(a, b, eta).unwrap();
            proptest::prop_assert_eq!(s.sigma_eta(a, b, 2.0 * eta).unwrap(), 2.0 * one);
            let single = make_subsequence(steps, 1).unwrap();
            proptest::prop_assert_eq!(single.steps(), &[steps]);
            proptest::prop_assert!(make_subsequence(steps, steps).unwrap().is_full(steps));
        }
    }
}
