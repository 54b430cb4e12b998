//! Subject deformation: partially noise the subject image and denoise it under the
//! subject prompt and a depth control derived from the subject itself.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backends::{DenoiserBackend, UNCONDITIONAL};
use crate::error::{Error, Result};
use crate::glyph::to_depth;
use crate::imageops;
use crate::sampler::compose::Observer;
use crate::sampler::{add_noise, denoise_from, gaussian_noise, harmonize, BetaSpec, DiffusionSchedule, LatentState};

pub const DEFAULT_STRENGTH: f64 = 0.85;
pub const DEFAULT_STEPS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemTypoParams {
    /// Share of the inference steps that are re-run; 0 leaves the input untouched.
    pub strength: f64,
    pub steps: usize,
    pub seed: u64,
    pub guidance_scale: f64,
    /// Strength of the depth control.
    pub control_scale: f64,
    pub train_steps: usize,
    pub beta: BetaSpec,
}

impl Default for SemTypoParams {
    fn default() -> Self {
        Self {
            strength: DEFAULT_STRENGTH,
            steps: DEFAULT_STEPS,
            seed: 0,
            guidance_scale: crate::sampler::compose::DEFAULT_GUIDANCE_SCALE,
            control_scale: 1.0,
            train_steps: crate::sampler::schedule::DEFAULT_TRAIN_STEPS,
            beta: BetaSpec::default(),
        }
    }
}

impl SemTypoParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::invalid(format!("strength {} outside [0, 1]", self.strength)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("SemTypo needs at least one step"));
        }
        if !self.guidance_scale.is_finite() || !self.control_scale.is_finite() {
            return Err(Error::invalid("guidance and control scales must be finite"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.train_steps, self.steps, self.beta)
    }

    /// Number of denoising steps actually run: `⌈strength · steps⌉`.
    pub fn active_steps(&self) -> usize {
        let raw = self.strength * self.steps as f64;
        // Absorb rounding so that e.g. 0.1 · 30 counts as 3, not 4.
        ((raw - 1e-9).ceil().max(0.0) as usize).min(self.steps)
    }
}

pub fn sem_typo(
    i_sub: &Array2<f64>,
    p_sub: &str,
    params: &SemTypoParams,
    backend: &dyn DenoiserBackend,
) -> Result<Array2<f64>> {
    sem_typo_observed(i_sub, p_sub, params, backend, None)
}

pub fn sem_typo_observed(
    i_sub: &Array2<f64>,
    p_sub: &str,
    params: &SemTypoParams,
    backend: &dyn DenoiserBackend,
    observer: Observer,
) -> Result<Array2<f64>> {
    params.validate()?;
    if !imageops::in_unit_range(i_sub) {
        return Err(Error::invalid("subject image must lie in [0, 1]"));
    }
    let schedule = params.schedule()?;
    let x0 = backend.encode(i_sub)?;
    let n = params.active_steps();
    if n == 0 {
        return Ok(backend.decode(&x0)?.mapv(|v| v.clamp(0.0, 1.0)));
    }
    let start = params.steps - n;
    let t_start = schedule.timesteps()[start];
    let noise = gaussian_noise(x0.dim(), params.seed, 0);
    let x = add_noise(&x0, &noise, t_start, &schedule);
    let control = to_depth(i_sub).with_scale(params.control_scale);
    let out = denoise_from(
        LatentState {
            latent: x,
            step_index: start,
        },
        &schedule,
        |t, x| {
            let cond = backend.predict_noise(x, t, p_sub, Some(&control), None)?;
            if params.guidance_scale == 1.0 {
                return Ok(cond);
            }
            let uc = backend.predict_noise(x, t, UNCONDITIONAL, None, None)?;
            harmonize(&uc, &cond, params.guidance_scale)
        },
        observer,
    )?;
    Ok(backend.decode(&out)?.mapv(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::AnalyticGaussianBackend;
    use ndarray::Array3;

    fn blob(hw: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(hw, |(r, c)| if (r + 2 * c) % 5 < 2 { 1.0 } else { 0.0 })
    }

    fn params(strength: f64) -> SemTypoParams {
        SemTypoParams {
            strength,
            steps: 30,
            seed: 11,
            guidance_scale: 1.0,
            control_scale: 0.0,
            ..SemTypoParams::default()
        }
    }

    fn backend(sigma0: f64, mu: f64) -> AnalyticGaussianBackend {
        let p = params(1.0);
        AnalyticGaussianBackend::new((16, 16, 1), sigma0, p.schedule().unwrap())
            .unwrap()
            .with_constant_target("subject", mu)
            .unwrap()
    }

    #[test]
    fn zero_strength_is_identity() {
        let img = blob((16, 16));
        let out = sem_typo(&img, "subject", &params(0.0), &backend(0.1, 0.5)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn full_strength_reaches_target() {
        let out = sem_typo(&blob((16, 16)), "subject", &params(1.0), &backend(0.0, 0.37)).unwrap();
        assert!(out.iter().all(|v| (v - 0.37).abs() < 1e-4));
    }

    #[test]
    fn half_strength_matches_linear_recursion() {
        // Oracle: each step maps x to a·x + b·μ with c = √(1−ᾱ)/(ᾱσ₀² + 1 − ᾱ);
        // evaluate that recursion from the noised input.
        let p = params(0.5);
        let s = p.schedule().unwrap();
        let mu = 0.6;
        let img = blob((16, 16));
        let out = sem_typo(&img, "subject", &p, &backend(0.3, mu)).unwrap();

        let sigma2 = 0.09;
        let start = p.steps - p.active_steps();
        let ts = s.timesteps();
        let noise = gaussian_noise((16, 16, 1), p.seed, 0);
        let ab0 = s.alpha_bar(ts[start]);
        let mut x: Array3<f64> = Array3::from_shape_fn((16, 16, 1), |(r, c, k)| {
            ab0.sqrt() * img[[r, c]] + (1.0 - ab0).sqrt() * noise[[r, c, k]]
        });
        for (i, &t) in ts.iter().enumerate().skip(start) {
            let ab = s.alpha_bar(t);
            let abp = s.alpha_bar_prev(s.next_timestep(i));
            let c = (1.0 - ab).sqrt() / (ab * sigma2 + 1.0 - ab);
            let a = abp.sqrt() * (1.0 - (1.0 - ab).sqrt() * c) / ab.sqrt() + (1.0 - abp).sqrt() * c;
            let b = abp.sqrt() * (1.0 - ab).sqrt() * c - (1.0 - abp).sqrt() * c * ab.sqrt();
            x.mapv_inplace(|v| a * v + b * mu);
        }
        for ((r, col), v) in out.indexed_iter() {
            assert!((v - x[[r, col, 0]].clamp(0.0, 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn strength_validated() {
        let img = blob((16, 16));
        let err = sem_typo(&img, "subject", &params(1.5), &backend(0.1, 0.5)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        let bad = img.mapv(|v| v * 2.0);
        assert!(sem_typo(&bad, "subject", &params(0.5), &backend(0.1, 0.5)).is_err());
    }

    #[test]
    fn step_count_rounds_up() {
        assert_eq!(params(0.85).active_steps(), 26);
        assert_eq!(params(0.1).active_steps(), 3);
        assert_eq!(params(0.01).active_steps(), 1);
        assert_eq!(params(1.0).active_steps(), 30);
    }

    #[test]
    fn deterministic_and_shape_preserving() {
        let img = blob((16, 16));
        let b = backend(0.2, 0.5);
        let a = sem_typo(&img, "subject", &params(0.85), &b).unwrap();
        assert_eq!(a, sem_typo(&img, "subject", &params(0.85), &b).unwrap());
        assert_eq!(a.dim(), img.dim());
        assert!(imageops::in_unit_range(&a));
    }
}
