use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_INFERENCE_STEPS: usize = 50;

/// How β evolves over the training timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSpec {
    /// β interpolated linearly in √β space, then squared.
    ScaledLinear {
        start: f64,
        end: f64,
    },
    Linear {
        start: f64,
        end: f64,
    },
}

impl Default for BetaSpec {
    fn default() -> Self {
        BetaSpec::ScaledLinear {
            start: 0.00085,
            end: 0.012,
        }
    }
}

impl BetaSpec {
    fn betas(&self, train_steps: usize) -> Vec<f64> {
        let lerp = |a: f64, b: f64, i: usize| {
            if train_steps == 1 {
                a
            } else {
                a + (b - a) * i as f64 / (train_steps - 1) as f64
            }
        };
        match *self {
            BetaSpec::ScaledLinear { start, end } => (0..train_steps)
                .map(|i| lerp(start.sqrt(), end.sqrt(), i).powi(2))
                .collect(),
            BetaSpec::Linear { start, end } => (0..train_steps).map(|i| lerp(start, end, i)).collect(),
        }
    }
}

/// Serializable description of a schedule; enough to rebuild it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub train_steps: usize,
    pub inference_steps: usize,
    pub beta: BetaSpec,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            train_steps: DEFAULT_TRAIN_STEPS,
            inference_steps: DEFAULT_INFERENCE_STEPS,
            beta: BetaSpec::default(),
        }
    }
}

/// Cumulative ᾱ table plus the evenly spaced inference timesteps (descending).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    spec: ScheduleSpec,
    alphas_bar: Vec<f64>,
    timesteps: Vec<usize>,
}

impl DiffusionSchedule {
    pub fn new(train_steps: usize, inference_steps: usize, beta: BetaSpec) -> Result<Self> {
        Self::from_spec(ScheduleSpec {
            train_steps,
            inference_steps,
            beta,
        })
    }

    pub fn from_spec(spec: ScheduleSpec) -> Result<Self> {
        let ScheduleSpec {
            train_steps,
            inference_steps,
            beta,
        } = spec;
        if train_steps == 0 || inference_steps == 0 || inference_steps > train_steps {
            return Err(Error::invalid(format!(
                "need 1 <= inference_steps ({inference_steps}) <= train_steps ({train_steps})"
            )));
        }
        let betas = beta.betas(train_steps);
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("betas must lie in (0, 1)"));
        }
        let mut alphas_bar = Vec::with_capacity(train_steps);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            alphas_bar.push(acc);
        }
        let ratio = train_steps / inference_steps;
        let timesteps = (0..inference_steps).rev().map(|i| i * ratio).collect();
        Ok(Self {
            spec,
            alphas_bar,
            timesteps,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn train_steps(&self) -> usize {
        self.alphas_bar.len()
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    /// ᾱ at training timestep `t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }

    /// ᾱ of a DDIM target: `None` is the clean sample (ᾱ = 1).
    pub fn alpha_bar_prev(&self, t_prev: Option<usize>) -> f64 {
        t_prev.map_or(1.0, |t| self.alphas_bar[t])
    }

    /// Inference timesteps, strictly decreasing.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// The timestep after position `i` in the inference sequence, `None` after the last.
    pub fn next_timestep(&self, i: usize) -> Option<usize> {
        self.timesteps.get(i + 1).copied()
    }

    #[cfg(test)]
    pub(crate) fn with_alpha_bar_override(mut self, t: usize, value: f64) -> Self {
        self.alphas_bar[t] = value;
        self
    }
}
