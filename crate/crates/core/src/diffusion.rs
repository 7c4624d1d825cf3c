//! Noise schedule, forward noising and reverse-process samplers.
//!
//! Step indices are 1-based: `t ∈ 1..=T`, with the boundary convention
//! `ᾱ_0 = 1`. Every source of randomness is either passed in explicitly or
//! drawn from a generator seeded by the caller.

use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditions::Condition;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// The persisted form of a schedule. Coefficient arrays are never stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, kind: ScheduleKind::Linear, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Discrete variance-preserving schedule `{β_t, ᾱ_t}` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleConfig", into = "ScheduleConfig")]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl TryFrom<ScheduleConfig> for NoiseSchedule {
    type Error = Error;

    fn try_from(cfg: ScheduleConfig) -> Result<Self> {
        NoiseSchedule::new(cfg.steps, cfg.beta_start, cfg.beta_end, cfg.kind)
    }
}

impl From<NoiseSchedule> for ScheduleConfig {
    fn from(s: NoiseSchedule) -> Self {
        s.config
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::try_from(ScheduleConfig::default()).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear if steps == 1 => vec![beta_start],
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, &b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            config: ScheduleConfig { steps, kind, beta_start, beta_end },
            betas,
            alpha_bars,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `ᾱ_t` for `t ∈ 0..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.len() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::Index { index: t, max: self.len() }),
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            Err(Error::Index { index: t, max: self.len() })
        } else {
            Ok(())
        }
    }

    /// `(β_t, σ_t)` recovered from the cumulative products:
    /// `β_t = 1 − ᾱ_t/ᾱ_{t−1}` and `σ_t = (1−ᾱ_{t−1})/(1−ᾱ_t)·β_t`.
    ///
    /// `σ_t` is the posterior variance of the one-step reverse kernel; it is
    /// exactly zero at `t = 1`.
    pub fn derived_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar(t - 1)?;
        let beta = 1.0 - ab / ab_prev;
        let sigma = (1.0 - ab_prev) / (1.0 - ab) * beta;
        Ok((beta, sigma))
    }
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·η`.
pub fn forward_sample(z0: &[f64], t: usize, eta: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if z0.len() != eta.len() {
        return Err(Error::shape(format!("noise of length {}", z0.len()), eta.len()));
    }
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.iter().zip(eta).map(|(z, e)| a * z + b * e).collect())
}

/// Forward sample with noise drawn from `rng`; returns `(z_t, η)`.
pub fn forward_sample_rng<R: Rng + ?Sized>(
    z0: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let eta: Vec<f64> = (0..z0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let zt = forward_sample(z0, t, &eta, sched)?;
    Ok((zt, eta))
}

/// Row-wise forward noising with a per-row step index.
pub fn forward_batch(
    z0: ArrayView2<f64>,
    ts: &[usize],
    eta: ArrayView2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if z0.dim() != eta.dim() || ts.len() != z0.nrows() {
        return Err(Error::shape(format!("{:?} with {} steps", z0.dim(), z0.nrows()), format!("{:?} with {} steps", eta.dim(), ts.len())));
    }
    let mut out = Array2::zeros(z0.dim());
    for (i, &t) in ts.iter().enumerate() {
        sched.check_step(t)?;
        let ab = sched.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Zip::from(out.row_mut(i)).and(z0.row(i)).and(eta.row(i)).for_each(|o, &z, &e| *o = a * z + b * e);
    }
    Ok(out)
}

/// Which prefactor the ancestral update applies to the denoised mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AncestralForm {
    /// `1/√(1−β_t)` mean prefactor with noise standard deviation `√σ_t`.
    #[default]
    Standard,
    /// `1/(1−β_t)` prefactor with noise scaled by `σ_t` directly, as the
    /// update is sometimes written. Kept for side-by-side comparison only.
    Printed,
}

fn ancestral_update(
    z_t: &[f64],
    eps_hat: &[f64],
    eta: &[f64],
    ab_t: f64,
    ab_prev: f64,
    form: AncestralForm,
) -> Vec<f64> {
    let beta = 1.0 - ab_t / ab_prev;
    let sigma = (1.0 - ab_prev) / (1.0 - ab_t) * beta;
    let (pre, noise) = match form {
        AncestralForm::Standard => (1.0 / (1.0 - beta).sqrt(), sigma.sqrt()),
        AncestralForm::Printed => (1.0 / (1.0 - beta), sigma),
    };
    let c = beta / (1.0 - ab_t).sqrt();
    z_t.iter()
        .zip(eps_hat)
        .zip(eta)
        .map(|((z, e), n)| pre * (z - c * e) + noise * n)
        .collect()
}

fn check_same_len(expected: usize, others: &[&[f64]]) -> Result<()> {
    for o in others {
        if o.len() != expected {
            return Err(Error::shape(format!("vector of length {expected}"), o.len()));
        }
    }
    Ok(())
}

/// One ancestral step `t → t−1`.
pub fn ddpm_step(
    z_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    eta: &[f64],
) -> Result<Vec<f64>> {
    ddpm_step_with(z_t, t, eps_hat, sched, eta, AncestralForm::Standard)
}

pub fn ddpm_step_with(
    z_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    eta: &[f64],
    form: AncestralForm,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_same_len(z_t.len(), &[eps_hat, eta])?;
    Ok(ancestral_update(z_t, eps_hat, eta, sched.alpha_bar(t)?, sched.alpha_bar(t - 1)?, form))
}

/// Deterministic implicit step `t → t_prev` (any `t_prev < t`, `t_prev = 0` allowed).
pub fn ddim_step(
    z_t: &[f64],
    t: usize,
    t_prev: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if t_prev >= t {
        return Err(Error::Parameter(format!("ddim step needs t_prev < t, got {t_prev} >= {t}")));
    }
    check_same_len(z_t.len(), &[eps_hat])?;
    Ok(ddim_update(z_t, eps_hat, sched.alpha_bar(t)?, sched.alpha_bar(t_prev)?))
}

fn ddim_update(z_t: &[f64], eps_hat: &[f64], ab_t: f64, ab_prev: f64) -> Vec<f64> {
    let (s_t, n_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (s_p, n_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    z_t.iter()
        .zip(eps_hat)
        .map(|(z, e)| {
            let z0 = (z - n_t * e) / s_t;
            s_p * z0 + n_p * e
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    #[serde(default)]
    pub form: AncestralForm,
}

impl SamplerConfig {
    pub fn ddim(steps: usize) -> Self {
        Self { kind: SamplerKind::Ddim, steps, form: AncestralForm::Standard }
    }

    pub fn ddpm(steps: usize) -> Self {
        Self { kind: SamplerKind::Ddpm, steps, form: AncestralForm::Standard }
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::ddim(50)
    }
}

/// Uniform-stride visiting order in ascending order, ending at `T`.
///
/// `steps = T` visits every step; `steps = 50, T = 1000` gives `20, 40, …, 1000`.
pub fn timestep_sequence(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Parameter(format!("sampler steps must be in 1..={total}, got {steps}")));
    }
    Ok((1..=steps).map(|i| i * total / steps).collect())
}

/// Runs the reverse chain from `z_T ~ N(0, I)` for `n` points of dimension `dim`.
///
/// `denoise` receives a batch of states, the current step index and the
/// condition and must return a same-shaped batch of noise predictions.
/// The ancestral sampler with `steps < T` uses the respaced kernel obtained by
/// replacing `t−1` with the previous visited step.
pub fn sample<F>(
    denoise: F,
    sched: &NoiseSchedule,
    n: usize,
    dim: usize,
    condition: Option<&Condition>,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Array2<f64>>
where
    F: Fn(ArrayView2<f64>, usize, Option<&Condition>) -> Result<Array2<f64>>,
{
    let ts = timestep_sequence(sched.len(), sampler.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Array2::from_shape_simple_fn((n, dim), || rng.sample::<f64, _>(StandardNormal));
    if n == 0 {
        return Ok(z);
    }
    for (k, &t) in ts.iter().enumerate().rev() {
        let t_prev = if k == 0 { 0 } else { ts[k - 1] };
        let eps = denoise(z.view(), t, condition)?;
        if eps.dim() != z.dim() {
            return Err(Error::shape(format!("{:?}", z.dim()), format!("{:?}", eps.dim())));
        }
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { location: format!("denoiser output at step {t}") });
        }
        let ab_t = sched.alpha_bar(t)?;
        let ab_prev = sched.alpha_bar(t_prev)?;
        let mut next = Array2::zeros(z.dim());
        for i in 0..n {
            let zi = z.row(i).to_vec();
            let ei = eps.row(i).to_vec();
            let row = match sampler.kind {
                SamplerKind::Ddim => ddim_update(&zi, &ei, ab_t, ab_prev),
                SamplerKind::Ddpm => {
                    let eta: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    ancestral_update(&zi, &ei, &eta, ab_t, ab_prev, sampler.form)
                }
            };
            next.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
        z = next;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    fn two_step() -> NoiseSchedule {
        NoiseSchedule::new(2, 0.1, 0.3, ScheduleKind::Linear).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::new(1, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn two_step_schedule_products() {
        let s = two_step();
        assert!(close(s.alpha_bars()[0], 0.9, 1e-12));
        assert!(close(s.alpha_bars()[1], 0.63, 1e-12));
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::new(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::new(10, 0.0, 0.2, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::new(10, 0.3, 0.2, ScheduleKind::Linear).is_err());
        assert!(NoiseSchedule::new(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn derived_coefficients_two_step() {
        let s = two_step();
        let (b1, s1) = s.derived_coefficients(1).unwrap();
        assert!(close(b1, 0.1, 1e-12));
        assert_eq!(s1, 0.0);
        let (b2, s2) = s.derived_coefficients(2).unwrap();
        assert!(close(b2, 0.3, 1e-10));
        // hand arithmetic: (1 - 0.9) / (1 - 0.63) * 0.3 = 0.03 / 0.37
        assert!(close(s2, 0.081_081_081_081_081_08, 1e-10));
        assert!(matches!(s.derived_coefficients(0), Err(Error::Index { .. })));
        assert!(matches!(s.derived_coefficients(3), Err(Error::Index { .. })));
    }

    #[test]
    fn forward_without_noise_scales_input() {
        let s = two_step();
        let z = forward_sample(&[1.0, -2.0], 2, &[0.0, 0.0], &s).unwrap();
        let a = 0.63f64.sqrt();
        assert!(close(z[0], a, 1e-12) && close(z[1], -2.0 * a, 1e-12));
        assert!(matches!(forward_sample(&[1.0], 1, &[0.0, 1.0], &s), Err(Error::Shape { .. })));
    }

    #[test]
    fn forward_identity_limit() {
        let s = NoiseSchedule::new(1, 1e-12, 1e-12, ScheduleKind::Linear).unwrap();
        let z = forward_sample(&[1.0, 2.0], 1, &[0.7, -1.3], &s).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-5 && (z[1] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn ddpm_step_reductions() {
        let s = two_step();
        let z = ddpm_step(&[1.0, 2.0], 2, &[0.0, 0.0], &s, &[0.0, 0.0]).unwrap();
        let f = 1.0 / (1.0f64 - 0.3).sqrt();
        assert!(close(z[0], f, 1e-10) && close(z[1], 2.0 * f, 1e-10));
        // σ_1 = 0: the final step ignores the noise draw.
        let a = ddpm_step(&[0.3, 0.4], 1, &[0.1, 0.2], &s, &[0.0, 0.0]).unwrap();
        let b = ddpm_step(&[0.3, 0.4], 1, &[0.1, 0.2], &s, &[5.0, -7.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn printed_form_differs_from_standard() {
        let s = two_step();
        let a = ddpm_step_with(&[1.0], 2, &[0.0], &s, &[0.0], AncestralForm::Standard).unwrap();
        let b = ddpm_step_with(&[1.0], 2, &[0.0], &s, &[0.0], AncestralForm::Printed).unwrap();
        assert!(close(b[0], 1.0 / 0.7, 1e-10));
        assert!(a[0] < b[0]);
    }

    #[test]
    fn ddim_step_reductions() {
        let s = two_step();
        let z = ddim_step(&[1.0, -1.0], 2, 1, &[0.0, 0.0], &s).unwrap();
        let f = (0.9f64 / 0.63).sqrt();
        assert!(close(z[0], f, 1e-12) && close(z[1], -f, 1e-12));
        assert!(ddim_step(&[1.0], 1, 1, &[0.0], &s).is_err());
        assert!(ddim_step(&[1.0], 1, 2, &[0.0], &s).is_err());
    }

    #[test]
    fn ddim_degenerate_pair_is_identity() {
        // consecutive steps with β ≈ 0 leave ᾱ unchanged to double precision
        let s = NoiseSchedule::new(2, 1e-300, 1e-300, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), s.alpha_bar(2).unwrap());
        let z = ddim_step(&[0.25, -3.0], 2, 1, &[0.5, 0.1], &s).unwrap();
        assert!(close(z[0], 0.25, 1e-12) && close(z[1], -3.0, 1e-12));
    }

    #[test]
    fn timestep_sequences() {
        assert_eq!(timestep_sequence(4, 4).unwrap(), vec![1, 2, 3, 4]);
        let ts = timestep_sequence(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (20, 1000));
        assert!(timestep_sequence(10, 11).is_err());
        assert!(timestep_sequence(10, 0).is_err());
    }

    #[test]
    fn sample_empty_and_deterministic() {
        let s = NoiseSchedule::default();
        let zero = |z: ArrayView2<f64>, _: usize, _: Option<&Condition>| Ok(Array2::zeros(z.dim()));
        let e = sample(zero, &s, 0, 2, None, &SamplerConfig::ddim(10), 1).unwrap();
        assert_eq!(e.nrows(), 0);
        for cfg in [SamplerConfig::ddim(20), SamplerConfig::ddpm(1000)] {
            let a = sample(zero, &s, 16, 2, None, &cfg, 9).unwrap();
            let b = sample(zero, &s, 16, 2, None, &cfg, 9).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sample_reports_failing_step() {
        let s = NoiseSchedule::default();
        let bad = |z: ArrayView2<f64>, t: usize, _: Option<&Condition>| {
            let mut e = Array2::zeros(z.dim());
            if t == 500 {
                e[[0, 0]] = f64::NAN;
            }
            Ok(e)
        };
        let err = sample(bad, &s, 4, 2, None, &SamplerConfig::ddpm(1000), 0).unwrap_err();
        assert!(err.to_string().contains("step 500"), "{err}");
    }

    #[test]
    fn schedule_serializes_as_record() {
        let s = NoiseSchedule::default();
        let json = serde_json::to_string(&s).unwrap();
        assert!(!json.contains("alpha_bars"));
        let back: NoiseSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
