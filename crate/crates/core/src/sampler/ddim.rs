//! Deterministic (η = 0) DDIM update and the noise sources feeding it.

use ndarray::{Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};

/// The latent at one position of the inference sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub latent: Array3<f64>,
    /// Position in `DiffusionSchedule::timesteps`; equals the step count once finished.
    pub step_index: usize,
}

impl LatentState {
    pub fn is_finite(&self) -> bool {
        self.latent.iter().all(|v| v.is_finite())
    }
}

/// Clean-sample estimate `x̂₀ = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &Array3<f64>, eps_hat: &Array3<f64>, alpha_bar_t: f64) -> Array3<f64> {
    let (a, b) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    Zip::from(x_t).and(eps_hat).map_collect(|&x, &e| (x - b * e) / a)
}

/// One DDIM step from `t` to `t_prev` (`None` = the final step, which returns `x̂₀`).
pub fn ddim_step(
    x_t: &Array3<f64>,
    eps_hat: &Array3<f64>,
    t: usize,
    t_prev: Option<usize>,
    schedule: &DiffusionSchedule,
) -> Result<Array3<f64>> {
    if x_t.dim() != eps_hat.dim() {
        return Err(Error::shape(format!(
            "latent {:?} vs noise {:?}",
            x_t.dim(),
            eps_hat.dim()
        )));
    }
    if let Some(p) = t_prev {
        if p >= t {
            return Err(Error::invalid(format!("DDIM must move backwards: {t} -> {p}")));
        }
    }
    let alpha_t = schedule.alpha_bar(t);
    let x0 = predict_x0(x_t, eps_hat, alpha_t);
    let Some(p) = t_prev else {
        return Ok(x0);
    };
    let alpha_prev = schedule.alpha_bar(p);
    if alpha_prev == alpha_t {
        return Ok(x_t.clone());
    }
    let (a, b) = (alpha_prev.sqrt(), (1.0 - alpha_prev).sqrt());
    Ok(Zip::from(&x0).and(eps_hat).map_collect(|&x, &e| a * x + b * e))
}

/// Forward-diffuses a clean sample to timestep `t`.
pub fn add_noise(x0: &Array3<f64>, noise: &Array3<f64>, t: usize, schedule: &DiffusionSchedule) -> Array3<f64> {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Zip::from(x0).and(noise).map_collect(|&x, &n| a * x + b * n)
}

/// Standard-normal tensor; `stream` selects an independent sequence for the same seed.
pub fn gaussian_noise(shape: (usize, usize, usize), seed: u64, stream: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n = shape.0 * shape.1 * shape.2;
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Array3::from_shape_vec(shape, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::schedule::BetaSpec;

    fn schedule() -> DiffusionSchedule {
        DiffusionSchedule::new(1000, 50, BetaSpec::default()).unwrap()
    }

    #[test]
    fn exact_noise_recovers_clean_sample() {
        let s = schedule();
        let x0 = Array3::from_shape_fn((4, 4, 2), |(a, b, c)| (a as f64 - b as f64) * 0.1 + c as f64);
        let eps = gaussian_noise((4, 4, 2), 3, 0);
        let xt = add_noise(&x0, &eps, 600, &s);
        let back = ddim_step(&xt, &eps, 600, None, &s).unwrap();
        for (a, b) in back.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_noise_lands_on_forward_marginal() {
        let s = schedule();
        let x0 = Array3::from_elem((2, 2, 1), 0.7);
        let eps = gaussian_noise((2, 2, 1), 5, 0);
        let xt = add_noise(&x0, &eps, 800, &s);
        let prev = ddim_step(&xt, &eps, 800, Some(300), &s).unwrap();
        let direct = add_noise(&x0, &eps, 300, &s);
        for (a, b) in prev.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_alpha_is_a_noop() {
        // A flat schedule segment: β tiny enough that ᾱ underflows to equality is not
        // reachable with real schedules, so exercise the rule through t -> t_prev with
        // a schedule whose two entries coincide.
        let mut s = schedule();
        let x = gaussian_noise((3, 3, 1), 1, 0);
        let e = gaussian_noise((3, 3, 1), 2, 0);
        let ab = s.alpha_bar(10);
        s = s.with_alpha_bar_override(9, ab);
        assert_eq!(ddim_step(&x, &e, 10, Some(9), &s).unwrap(), x);
    }

    #[test]
    fn must_move_backwards() {
        let s = schedule();
        let x = Array3::zeros((1, 1, 1));
        assert!(ddim_step(&x, &x, 10, Some(10), &s).is_err());
        assert!(ddim_step(&x, &Array3::zeros((1, 2, 1)), 10, Some(5), &s).is_err());
    }

    #[test]
    fn noise_streams_are_reproducible_and_independent() {
        let a = gaussian_noise((8, 8, 1), 42, 0);
        assert_eq!(a, gaussian_noise((8, 8, 1), 42, 0));
        assert_ne!(a, gaussian_noise((8, 8, 1), 42, 1));
        assert_ne!(a, gaussian_noise((8, 8, 1), 43, 0));
    }
}
