//! Closed-form denoiser for Gaussian data.
//!
//! For `x₀ ~ N(μ, σ₀²·I)` and `x_t = √ᾱ·x₀ + √(1−ᾱ)·ε`, the posterior mean of `x₀`
//! given `x_t` is available in closed form, which makes this backend's noise
//! prediction the exact minimum-MSE predictor. DDIM driven by it follows an
//! affine recursion that tests can evaluate independently.

use std::collections::HashMap;

use ndarray::{Array2, Array3, Zip};
use sha2::{Digest, Sha256};

use super::{control_latent, identity_decode, identity_encode, DenoiserBackend, HookHandle, UNCONDITIONAL};
use crate::error::{Error, Result};
use crate::glyph::ControlSignal;
use crate::sampler::DiffusionSchedule;

#[derive(Debug, Clone)]
pub struct AnalyticGaussianBackend {
    shape: (usize, usize, usize),
    targets: HashMap<String, Array3<f64>>,
    sigma0: f64,
    schedule: DiffusionSchedule,
}

impl AnalyticGaussianBackend {
    /// `shape` is the latent shape; the codec is the identity, so `(h, w)` is also the image size.
    pub fn new(shape: (usize, usize, usize), sigma0: f64, schedule: DiffusionSchedule) -> Result<Self> {
        if !(sigma0 >= 0.0 && sigma0.is_finite()) {
            return Err(Error::invalid(format!("sigma0 {sigma0} must be finite and >= 0")));
        }
        if shape.0 == 0 || shape.1 == 0 || shape.2 == 0 {
            return Err(Error::invalid("empty latent shape"));
        }
        Ok(Self {
            shape,
            targets: HashMap::new(),
            sigma0,
            schedule,
        })
    }

    pub fn with_target(mut self, prompt: impl Into<String>, mean: Array3<f64>) -> Result<Self> {
        if mean.dim() != self.shape {
            return Err(Error::shape(format!(
                "target {:?} vs latent {:?}",
                mean.dim(),
                self.shape
            )));
        }
        self.targets.insert(prompt.into(), mean);
        Ok(self)
    }

    pub fn with_constant_target(self, prompt: impl Into<String>, level: f64) -> Result<Self> {
        let mean = Array3::from_elem(self.shape, level);
        self.with_target(prompt, mean)
    }

    /// Registers a constant target for each prompt, at a level in [0.2, 0.8] derived
    /// from a hash of the prompt text.
    pub fn with_hashed_targets<'p>(mut self, prompts: impl IntoIterator<Item = &'p str>) -> Result<Self> {
        for p in prompts {
            if p == UNCONDITIONAL || self.targets.contains_key(p) {
                continue;
            }
            self = self.with_constant_target(p, hashed_level(p))?;
        }
        Ok(self)
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    /// Data mean for `prompt`; the unconditional prompt maps to zero.
    pub fn target(&self, prompt: &str) -> Result<Array3<f64>> {
        if let Some(mu) = self.targets.get(prompt) {
            return Ok(mu.clone());
        }
        if prompt == UNCONDITIONAL {
            return Ok(Array3::zeros(self.shape));
        }
        Err(Error::invalid(format!("no target registered for prompt {prompt:?}")))
    }

    /// `μ + CS·(c − μ)`, where `c` is the control image on the latent grid.
    pub fn effective_target(&self, prompt: &str, control: Option<&ControlSignal>) -> Result<Array3<f64>> {
        let mut mu = self.target(prompt)?;
        if let Some(control) = control {
            let cs = control.conditioning_scale;
            if cs != 0.0 {
                let c = control_latent(control, (self.shape.0, self.shape.1));
                Zip::indexed(&mut mu).for_each(|(r, col, _), m| *m += cs * (c[[r, col]] - *m));
            }
        }
        Ok(mu)
    }

    /// `E[x₀ | x_t] = μ + √ᾱ·σ₀² / (ᾱ·σ₀² + 1 − ᾱ) · (x_t − √ᾱ·μ)`.
    pub fn posterior_mean(&self, x_t: &Array3<f64>, t: usize, mu: &Array3<f64>) -> Array3<f64> {
        let ab = self.schedule.alpha_bar(t);
        let s2 = self.sigma0 * self.sigma0;
        let gain = ab.sqrt() * s2 / (ab * s2 + 1.0 - ab);
        Zip::from(x_t)
            .and(mu)
            .map_collect(|&x, &m| m + gain * (x - ab.sqrt() * m))
    }
}

pub fn hashed_level(prompt: &str) -> f64 {
    let digest = Sha256::digest(prompt.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    0.2 + 0.6 * (u64::from_le_bytes(head) as f64 / u64::MAX as f64)
}

impl DenoiserBackend for AnalyticGaussianBackend {
    fn id(&self) -> String {
        format!("toy-analytic(sigma0={})", self.sigma0)
    }

    fn latent_shape(&self, image_hw: (usize, usize)) -> Result<(usize, usize, usize)> {
        if image_hw != (self.shape.0, self.shape.1) {
            return Err(Error::shape(format!(
                "backend built for {}x{}, got {image_hw:?}",
                self.shape.0, self.shape.1
            )));
        }
        Ok(self.shape)
    }

    fn encode(&self, image: &Array2<f64>) -> Result<Array3<f64>> {
        self.latent_shape(image.dim())?;
        Ok(identity_encode(image, self.shape.2))
    }

    fn decode(&self, latent: &Array3<f64>) -> Result<Array2<f64>> {
        if latent.dim() != self.shape {
            return Err(Error::shape(format!("latent {:?} vs {:?}", latent.dim(), self.shape)));
        }
        Ok(identity_decode(latent))
    }

    fn predict_noise(
        &self,
        x_t: &Array3<f64>,
        t: usize,
        prompt: &str,
        control: Option<&ControlSignal>,
        hooks: Option<&HookHandle>,
    ) -> Result<Array3<f64>> {
        if hooks.is_some() {
            return Err(Error::Capability(format!("{} has no attention hooks", self.id())));
        }
        if x_t.dim() != self.shape {
            return Err(Error::shape(format!("latent {:?} vs {:?}", x_t.dim(), self.shape)));
        }
        if t >= self.schedule.train_steps() {
            return Err(Error::invalid(format!("timestep {t} outside schedule")));
        }
        let mu = self.effective_target(prompt, control)?;
        let m_post = self.posterior_mean(x_t, t, &mu);
        let ab = self.schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(Zip::from(x_t).and(&m_post).map_collect(|&x, &m| (x - a * m) / b))
    }
}
