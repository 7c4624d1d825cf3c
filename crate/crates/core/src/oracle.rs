//! Closed-form scores of isotropic Gaussian mixtures under the forward
//! process.
//!
//! Component `k` with mean `μ_k` and variance `σ_k²` diffuses at step `t` to
//! `N(√ᾱ_t μ_k, (ᾱ_t σ_k² + 1 − ᾱ_t) I)`. The component index plays the role
//! of the condition, so `p(c | z_t)` is the posterior responsibility and the
//! steering term is `−√(1−ᾱ_t) ∇ log p(c | z_t)`.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{GaussianComponent, GaussianMixtureSpec};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

const DENSITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusedMixture {
    pub base: GaussianMixtureSpec,
    pub sched: NoiseSchedule,
}

/// Mean and variance of one component at step `t`.
#[derive(Debug, Clone, Copy)]
struct Diffused<'a> {
    mean: &'a [f64],
    scale: f64,
    var: f64,
}

impl Diffused<'_> {
    fn log_density(&self, z: &[f64]) -> f64 {
        let d = z.len() as f64;
        let sq: f64 = z.iter().zip(self.mean).map(|(zi, mi)| (zi - self.scale * mi).powi(2)).sum();
        -0.5 * sq / self.var - 0.5 * d * (2.0 * std::f64::consts::PI * self.var).ln()
    }

    fn score(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(self.mean).map(|(zi, mi)| -(zi - self.scale * mi) / self.var).collect()
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl DiffusedMixture {
    pub fn new(base: GaussianMixtureSpec, sched: NoiseSchedule) -> Result<Self> {
        base.validate()?;
        Ok(Self { base, sched })
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn components(&self) -> usize {
        self.base.components.len()
    }

    fn diffused(&self, t: usize) -> Result<Vec<Diffused<'_>>> {
        let ab = self.sched.alpha_bar(t)?;
        Ok(self
            .base
            .components
            .iter()
            .map(|c| Diffused { mean: &c.mean, scale: ab.sqrt(), var: ab * c.variance + 1.0 - ab })
            .collect())
    }

    fn check_point(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::shape(self.dim(), z.len()));
        }
        Ok(())
    }

    fn check_component(&self, c: usize) -> Result<()> {
        if c >= self.components() {
            return Err(Error::Index { index: c, max: self.components().saturating_sub(1) });
        }
        Ok(())
    }

    /// `log π_k + log N_k(z)` for every component.
    fn joint_logs(&self, z: &[f64], t: usize) -> Result<(Vec<Diffused<'_>>, Vec<f64>)> {
        self.check_point(z)?;
        let comps = self.diffused(t)?;
        let logs = comps
            .iter()
            .zip(&self.base.weights)
            .map(|(c, w)| w.max(DENSITY_FLOOR).ln() + c.log_density(z))
            .collect();
        Ok((comps, logs))
    }

    /// `log p(z_t)`, floored at `ln 1e-300`.
    pub fn log_density(&self, z: &[f64], t: usize) -> Result<f64> {
        let (_, logs) = self.joint_logs(z, t)?;
        Ok(log_sum_exp(&logs).max(DENSITY_FLOOR.ln()))
    }

    /// `log p(z_t | c)`.
    pub fn conditional_log_density(&self, z: &[f64], t: usize, c: usize) -> Result<f64> {
        self.check_point(z)?;
        self.check_component(c)?;
        Ok(self.diffused(t)?[c].log_density(z).max(DENSITY_FLOOR.ln()))
    }

    /// Posterior component probabilities `p(k | z_t)`, computed in log space.
    pub fn responsibilities(&self, z: &[f64], t: usize) -> Result<Vec<f64>> {
        let (_, logs) = self.joint_logs(z, t)?;
        let lse = log_sum_exp(&logs);
        Ok(logs.iter().map(|l| (l - lse).exp()).collect())
    }

    /// `ε*(z, t) = −√(1−ᾱ_t) ∇ log p(z_t)`.
    pub fn denoiser(&self, z: &[f64], t: usize) -> Result<Vec<f64>> {
        let k = (1.0 - self.sched.alpha_bar(t)?).sqrt();
        Ok(gm_score(self, z, t)?.into_iter().map(|s| -k * s).collect())
    }

    /// `ε̄*(z, t, c) = −√(1−ᾱ_t) ∇ log p(z_t | c)`.
    pub fn conditional_denoiser(&self, z: &[f64], t: usize, c: usize) -> Result<Vec<f64>> {
        let k = (1.0 - self.sched.alpha_bar(t)?).sqrt();
        Ok(gm_conditional_score(self, z, t, c)?.into_iter().map(|s| -k * s).collect())
    }

    /// Batched [`DiffusedMixture::denoiser`], or the conditional one when
    /// `component` is given.
    pub fn denoise_batch(&self, z: ArrayView2<f64>, t: usize, component: Option<usize>) -> Result<Array2<f64>> {
        let rows: Vec<Vec<f64>> = (0..z.nrows())
            .into_par_iter()
            .map(|i| {
                let row = z.row(i).to_vec();
                match component {
                    Some(c) => self.conditional_denoiser(&row, t, c),
                    None => self.denoiser(&row, t),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Array2::from_shape_vec(z.dim(), rows.concat()).expect("row lengths match input"))
    }
}

/// `∇ log p(z_t)`: responsibility-weighted component scores.
pub fn gm_score(m: &DiffusedMixture, z: &[f64], t: usize) -> Result<Vec<f64>> {
    let (comps, logs) = m.joint_logs(z, t)?;
    let lse = log_sum_exp(&logs);
    let mut out = vec![0.0; z.len()];
    for (c, l) in comps.iter().zip(&logs) {
        let r = (l - lse).exp();
        for (o, s) in out.iter_mut().zip(c.score(z)) {
            *o += r * s;
        }
    }
    Ok(out)
}

/// `∇ log p(z_t | c)` for component `c`.
pub fn gm_conditional_score(m: &DiffusedMixture, z: &[f64], t: usize, c: usize) -> Result<Vec<f64>> {
    m.check_point(z)?;
    m.check_component(c)?;
    Ok(m.diffused(t)?[c].score(z))
}

/// `−√(1−ᾱ_t) ∇ log p(c | z_t)`.
///
/// Uses the log-odds form `∇ log p(c|z) = Σ_{k≠c} p(k|z) (s_c − s_k)`, which
/// never forms the marginal score, so comparing against
/// `ε̄* − ε*` is a genuine check of the decomposition.
pub fn steering_residual(m: &DiffusedMixture, z: &[f64], t: usize, c: usize) -> Result<Vec<f64>> {
    m.check_component(c)?;
    let resp = m.responsibilities(z, t)?;
    let comps = m.diffused(t)?;
    let sc = comps[c].score(z);
    let mut grad = vec![0.0; z.len()];
    for (k, comp) in comps.iter().enumerate() {
        if k == c {
            continue;
        }
        for (g, (a, b)) in grad.iter_mut().zip(sc.iter().zip(comp.score(z))) {
            *g += resp[k] * (a - b);
        }
    }
    let scale = (1.0 - m.sched.alpha_bar(t)?).sqrt();
    Ok(grad.into_iter().map(|g| -scale * g).collect())
}

/// Max over points, steps and components of `|ε̄* − (M + ε*)|`.
pub fn check_bayes_identity(m: &DiffusedMixture, points: ArrayView2<f64>, ts: &[usize]) -> Result<f64> {
    if points.nrows() == 0 {
        return Err(Error::Parameter("empty evaluation grid".into()));
    }
    let cells: Vec<(usize, usize)> = (0..points.nrows()).flat_map(|i| ts.iter().map(move |&t| (i, t))).collect();
    let errs: Vec<f64> = cells
        .par_iter()
        .map(|&(i, t)| {
            let z = points.row(i).to_vec();
            let eps = m.denoiser(&z, t)?;
            let mut worst = 0.0f64;
            for c in 0..m.components() {
                let cond = m.conditional_denoiser(&z, t, c)?;
                let res = steering_residual(m, &z, t, c)?;
                for j in 0..z.len() {
                    worst = worst.max((cond[j] - (res[j] + eps[j])).abs());
                }
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// `n × n` grid of 2D points spanning `[x0, x1] × [y0, y1]`, row-major in y.
pub fn grid_2d(x: (f64, f64), y: (f64, f64), n: usize) -> Array2<f64> {
    let at = |(a, b): (f64, f64), i: usize| if n == 1 { 0.5 * (a + b) } else { a + (b - a) * i as f64 / (n - 1) as f64 };
    let mut g = Array2::zeros((n * n, 2));
    for iy in 0..n {
        for ix in 0..n {
            g[[iy * n + ix, 0]] = at(x, ix);
            g[[iy * n + ix, 1]] = at(y, iy);
        }
    }
    g
}

/// Two components placed like the ring task: means (0,0) and (5,0).
pub fn default_oracle_mixture() -> GaussianMixtureSpec {
    GaussianMixtureSpec {
        components: vec![
            GaussianComponent { mean: vec![0.0, 0.0], variance: 0.25 },
            GaussianComponent { mean: vec![5.0, 0.0], variance: 0.25 },
        ],
        weights: vec![0.7, 0.3],
    }
}

/// Mixtures exercised by the identity check: the default pair, a symmetric
/// pair with unequal variances, and a three-component mixture.
pub fn oracle_mixture_suite() -> Vec<(&'static str, GaussianMixtureSpec)> {
    let comp = |x: f64, y: f64, v: f64| GaussianComponent { mean: vec![x, y], variance: v };
    vec![
        ("default", default_oracle_mixture()),
        (
            "symmetric",
            GaussianMixtureSpec { components: vec![comp(-2.0, 0.0, 0.5), comp(2.0, 0.0, 0.1)], weights: vec![0.5, 0.5] },
        ),
        (
            "triple",
            GaussianMixtureSpec {
                components: vec![comp(0.0, 3.0, 0.3), comp(-2.5, -1.5, 1.0), comp(2.5, -1.5, 0.05)],
                weights: vec![0.2, 0.5, 0.3],
            },
        ),
    ]
}

/// Timesteps spread across a schedule of length `total`.
pub fn oracle_timesteps(total: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = [1, total / 4, total / 2, 3 * total / 4, total].into_iter().map(|t| t.max(1)).collect();
    ts.dedup();
    ts
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub mixture: String,
    pub grid_points: usize,
    pub timesteps: Vec<usize>,
    pub max_error: f64,
}

/// Runs the identity check for every mixture in [`oracle_mixture_suite`] on
/// a 21×21 grid covering the component means.
pub fn run_oracle_suite(sched: &NoiseSchedule) -> Result<Vec<OracleReport>> {
    let ts = oracle_timesteps(sched.len());
    oracle_mixture_suite()
        .into_iter()
        .map(|(name, spec)| {
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for c in &spec.components {
                for j in 0..2 {
                    lo[j] = lo[j].min(c.mean[j]);
                    hi[j] = hi[j].max(c.mean[j]);
                }
            }
            let grid = grid_2d((lo[0] - 3.0, hi[0] + 3.0), (lo[1] - 3.0, hi[1] + 3.0), 21);
            let m = DiffusedMixture::new(spec, sched.clone())?;
            Ok(OracleReport {
                mixture: name.to_string(),
                grid_points: grid.nrows(),
                timesteps: ts.clone(),
                max_error: check_bayes_identity(&m, grid.view(), &ts)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap()
    }

    fn single(mean: [f64; 2], var: f64) -> DiffusedMixture {
        let spec = GaussianMixtureSpec { components: vec![GaussianComponent { mean: mean.to_vec(), variance: var }], weights: vec![1.0] };
        DiffusedMixture::new(spec, sched()).unwrap()
    }

    #[test]
    fn single_component_score() {
        let m = single([1.0, -2.0], 0.5);
        let t = 300;
        let ab = m.sched.alpha_bar(t).unwrap();
        let z = [0.3, 0.7];
        let s = gm_score(&m, &z, t).unwrap();
        let var = ab * 0.5 + 1.0 - ab;
        assert!((s[0] + (0.3 - ab.sqrt()) / var).abs() < 1e-14);
        assert!((s[1] + (0.7 + 2.0 * ab.sqrt()) / var).abs() < 1e-14);
        assert_eq!(s, gm_conditional_score(&m, &z, t, 0).unwrap());
        assert!(steering_residual(&m, &z, t, 0).unwrap().iter().all(|&r| r == 0.0));
        assert!(check_bayes_identity(&m, grid_2d((-2.0, 2.0), (-2.0, 2.0), 5).view(), &[1, 500]).unwrap() <= 1e-12);
    }

    #[test]
    fn symmetric_midpoint() {
        let spec = GaussianMixtureSpec {
            components: vec![
                GaussianComponent { mean: vec![-1.0, 0.0], variance: 0.3 },
                GaussianComponent { mean: vec![1.0, 0.0], variance: 0.3 },
            ],
            weights: vec![0.5, 0.5],
        };
        let m = DiffusedMixture::new(spec, sched()).unwrap();
        let t = 100;
        let s = gm_score(&m, &[0.0, 0.4], t).unwrap();
        assert!(s[0].abs() < 1e-14);
        let ab = m.sched.alpha_bar(t).unwrap();
        let var = ab * 0.3 + 1.0 - ab;
        // r = 1/2 at the midpoint, so ∇ log r_1 = (1/2)(m_1 − m_0)/var along x.
        let expected = -(1.0 - ab).sqrt() * 0.5 * (2.0 * ab.sqrt()) / var;
        let r = steering_residual(&m, &[0.0, 0.0], t, 1).unwrap();
        assert!((r[0] - expected).abs() < 1e-12 && r[1].abs() < 1e-14);
    }

    #[test]
    fn responsibilities_sum_to_one_far_away() {
        let m = DiffusedMixture::new(default_oracle_mixture(), sched()).unwrap();
        for z in [[0.0, 0.0], [300.0, -400.0], [2.5, 0.0]] {
            let r = m.responsibilities(&z, 1).unwrap();
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(gm_score(&m, &z, 1).unwrap().iter().all(|s| s.is_finite()));
        }
    }

    #[test]
    fn component_index_checked() {
        let m = DiffusedMixture::new(default_oracle_mixture(), sched()).unwrap();
        assert!(matches!(gm_conditional_score(&m, &[0.0, 0.0], 5, 2), Err(Error::Index { .. })));
        assert!(steering_residual(&m, &[0.0, 0.0], 5, 9).is_err());
        assert!(gm_score(&m, &[0.0], 5).is_err());
    }

    #[test]
    fn grid_layout() {
        let g = grid_2d((0.0, 1.0), (10.0, 20.0), 3);
        assert_eq!(g.nrows(), 9);
        assert_eq!(g.row(5).to_vec(), vec![1.0, 15.0]);
    }

    #[test]
    fn suite_passes() {
        for r in run_oracle_suite(&sched()).unwrap() {
            assert_eq!(r.grid_points, 441);
            assert_eq!(r.timesteps.len(), 5);
            assert!(r.max_error <= 1e-8, "{}: {}", r.mixture, r.max_error);
        }
    }
}
