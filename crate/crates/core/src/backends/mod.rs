//! Backend contracts for the three external capabilities the pipeline needs
//! (noise prediction, open-vocabulary detection, prompt generation) and the
//! offline implementations used by tests and the toy CLI modes.

pub mod analytic;
pub mod detector;
pub mod http;
pub mod llm;
pub mod micro;

use std::sync::Mutex;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionCapture;
use crate::error::{Error, Result};
use crate::glyph::ControlSignal;
use crate::imageops;

pub use analytic::AnalyticGaussianBackend;
pub use detector::{DetectorBackend, HttpDetector, ToyDetector};
pub use http::HttpDenoiser;
pub use llm::{FixtureLlm, HttpLlm, LlmBackend, LlmRequest};
pub use micro::{MicroAttentionBackend, MicroConfig};

/// Prompt used for the unconditional prediction.
pub const UNCONDITIONAL: &str = "";

pub const DENOISER_URL_ENV: &str = "GLYPHFORGE_DENOISER_URL";
pub const DETECTOR_URL_ENV: &str = "GLYPHFORGE_DETECTOR_URL";
pub const LLM_URL_ENV: &str = "GLYPHFORGE_LLM_URL";
pub const LLM_KEY_ENV: &str = "GLYPHFORGE_LLM_KEY";

/// A control-conditioned noise predictor with its latent codec.
///
/// `predict_noise` must be a pure function of its arguments so that branch
/// predictions can run concurrently and runs are bitwise repeatable.
pub trait DenoiserBackend: Send + Sync {
    fn id(&self) -> String;

    /// Latent shape `(h, w, channels)` for an image of the given size.
    fn latent_shape(&self, image_hw: (usize, usize)) -> Result<(usize, usize, usize)>;

    fn encode(&self, image: &Array2<f64>) -> Result<Array3<f64>>;

    fn decode(&self, latent: &Array3<f64>) -> Result<Array2<f64>>;

    /// Predicts the noise in `x_t` at training timestep `t`. `control` carries its own
    /// conditioning scale; `hooks` must be `None` for backends without hook support.
    fn predict_noise(
        &self,
        x_t: &Array3<f64>,
        t: usize,
        prompt: &str,
        control: Option<&ControlSignal>,
        hooks: Option<&HookHandle>,
    ) -> Result<Array3<f64>>;

    fn supports_hooks(&self) -> bool {
        false
    }
}

/// Which attention layers receive the key substitution.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerFilter {
    #[default]
    All,
    Only(Vec<usize>),
}

impl LayerFilter {
    pub fn contains(&self, layer: usize) -> bool {
        match self {
            LayerFilter::All => true,
            LayerFilter::Only(layers) => layers.contains(&layer),
        }
    }
}

/// Replace a layer's keys with `α·k + (1 − α)·k_sub`.
#[derive(Debug, Clone)]
pub struct KeySubstitution {
    pub alpha: f64,
    /// `subject_keys[concept][layer]`, captured from the subject branches this step.
    pub subject_keys: Vec<Vec<Array2<f64>>>,
    /// Concept masks at latent resolution; decide which concept each query token mixes.
    pub concept_masks: Vec<Array2<f64>>,
    pub layers: LayerFilter,
}

impl KeySubstitution {
    /// Subject keys of every concept for one layer.
    pub fn keys_for_layer(&self, layer: usize) -> Result<Vec<&Array2<f64>>> {
        self.subject_keys
            .iter()
            .enumerate()
            .map(|(c, layers)| {
                layers
                    .get(layer)
                    .ok_or_else(|| Error::shape(format!("concept {c} has no keys for layer {layer}")))
            })
            .collect()
    }
}

/// Per-run hook state. Owned by one branch pass at a time.
#[derive(Debug)]
pub struct HookHandle {
    substitution: Option<KeySubstitution>,
    capture: bool,
    captures: Mutex<Vec<AttentionCapture>>,
}

impl HookHandle {
    pub fn substitution(&self) -> Option<&KeySubstitution> {
        self.substitution.as_ref()
    }

    pub fn captures_enabled(&self) -> bool {
        self.capture
    }

    pub fn record(&self, capture: AttentionCapture) {
        if self.capture {
            self.captures.lock().expect("capture store poisoned").push(capture);
        }
    }

    pub fn take_captures(&self) -> Vec<AttentionCapture> {
        std::mem::take(&mut *self.captures.lock().expect("capture store poisoned"))
    }

    /// Uninstalls the hooks; later passes run without them.
    pub fn remove(self) -> Vec<AttentionCapture> {
        self.captures.into_inner().unwrap_or_default()
    }
}

/// Creates hooks for `backend`, failing if it cannot honor them.
pub fn install_hooks(
    backend: &dyn DenoiserBackend,
    substitution: Option<KeySubstitution>,
    capture: bool,
) -> Result<HookHandle> {
    if !backend.supports_hooks() {
        return Err(Error::Capability(format!("{} has no attention hooks", backend.id())));
    }
    if let Some(s) = &substitution {
        if !(0.0..=1.0).contains(&s.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", s.alpha)));
        }
        if s.subject_keys.is_empty() {
            return Err(Error::invalid("key substitution without subject keys"));
        }
    }
    Ok(HookHandle {
        substitution,
        capture,
        captures: Mutex::new(Vec::new()),
    })
}

/// Identity codec: the image becomes every channel of the latent.
pub fn identity_encode(image: &Array2<f64>, channels: usize) -> Array3<f64> {
    let (h, w) = image.dim();
    Array3::from_shape_fn((h, w, channels), |(r, c, _)| image[[r, c]])
}

/// Inverse of [`identity_encode`]: the channel mean (exact for one channel).
pub fn identity_decode(latent: &Array3<f64>) -> Array2<f64> {
    let (h, w, ch) = latent.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        (0..ch).map(|k| latent[[r, c, k]]).sum::<f64>() / ch as f64
    })
}

/// Control image resampled to the latent grid by area averaging.
pub fn control_latent(control: &ControlSignal, latent_hw: (usize, usize)) -> Array2<f64> {
    imageops::area_resize(&control.image, latent_hw)
}
