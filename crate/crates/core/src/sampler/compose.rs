//! The dual-branch sampling loop and its single-branch reference.

use std::thread;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use super::ddim::{ddim_step, gaussian_noise, LatentState};
use super::fusion::{check_disjoint, fuse_noise, fuse_noise_multi, harmonize};
use super::schedule::DiffusionSchedule;
use crate::attention::{
    aggregate_attention, default_sketch_sigma, fuse_control, neural_sketch, NeuralSketch, DEFAULT_ALPHA,
};
use crate::backends::{install_hooks, DenoiserBackend, HookHandle, KeySubstitution, LayerFilter, UNCONDITIONAL};
use crate::error::{Error, Result};
use crate::glyph::ControlSignal;
use crate::imageops;

pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;

/// Whether all branches start from one initial noise draw.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSharing {
    #[default]
    Shared,
    /// Every branch draws its own noise and denoises its own latent; the branch
    /// results are composited by mask only at the end.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub alpha: f64,
    pub guidance_scale: f64,
    pub seed: u64,
    pub noise: NoiseSharing,
    pub cross_branch_attention: bool,
    pub control_fusion: bool,
    /// Sketch blur in image pixels; defaults to a value scaled with the canvas.
    pub sketch_sigma: Option<f64>,
    pub attention_layers: LayerFilter,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            seed: 0,
            noise: NoiseSharing::Shared,
            cross_branch_attention: true,
            control_fusion: true,
            sketch_sigma: None,
            attention_layers: LayerFilter::All,
        }
    }
}

impl SamplerParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::invalid("guidance scale must be finite"));
        }
        if let Some(s) = self.sketch_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("sketch sigma {s} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// One subject concept: its prompt, its (segmentation) control and its image-space mask.
#[derive(Debug, Clone)]
pub struct SubjectBranch {
    pub prompt: String,
    pub control: Option<ControlSignal>,
    pub mask: Array2<f64>,
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub struct SurroundingBranch {
    pub prompt: String,
    pub control: Option<ControlSignal>,
}

#[derive(Debug, Clone)]
pub struct DualBranchSpec {
    pub image_hw: (usize, usize),
    pub subjects: Vec<SubjectBranch>,
    pub surrounding: SurroundingBranch,
}

#[derive(Clone, Copy)]
pub struct BranchBackends<'a> {
    pub subject: &'a dyn DenoiserBackend,
    pub surrounding: &'a dyn DenoiserBackend,
}

impl<'a> BranchBackends<'a> {
    pub fn same(backend: &'a dyn DenoiserBackend) -> Self {
        Self {
            subject: backend,
            surrounding: backend,
        }
    }
}

/// What actually ran, for the run manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerReport {
    pub timesteps: Vec<usize>,
    pub noise: NoiseSharing,
    pub cross_branch_attention: bool,
    pub control_fusion: bool,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Decoded result clipped to [0, 1].
    pub image: Array2<f64>,
    pub latent: Array3<f64>,
    pub report: SamplerReport,
}

/// State after one denoising step, handed to an observer.
pub struct StepRecord<'a> {
    pub index: usize,
    pub t: usize,
    pub t_prev: Option<usize>,
    /// One latent in shared mode; surrounding then subjects in independent mode.
    pub latents: &'a [Array3<f64>],
    pub sketch: Option<&'a NeuralSketch>,
    pub surrounding_control: Option<&'a ControlSignal>,
}

pub type Observer<'o> = Option<&'o mut dyn FnMut(&StepRecord)>;

fn check_finite(x: &Array3<f64>, step: usize, t: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical { step, timestep: t })
    }
}

/// Runs DDIM from position `start` of the schedule. `predict(t, x)` returns the noise
/// estimate used for the update.
pub fn denoise_from(
    init: LatentState,
    schedule: &DiffusionSchedule,
    mut predict: impl FnMut(usize, &Array3<f64>) -> Result<Array3<f64>>,
    mut observer: Observer,
) -> Result<Array3<f64>> {
    let ts = schedule.timesteps();
    let mut x = init.latent;
    for (i, &t) in ts.iter().enumerate().skip(init.step_index) {
        let t_prev = schedule.next_timestep(i);
        let eps = predict(t, &x)?;
        x = ddim_step(&x, &eps, t, t_prev, schedule)?;
        check_finite(&x, i, t)?;
        if let Some(obs) = observer.as_mut() {
            obs(&StepRecord {
                index: i,
                t,
                t_prev,
                latents: std::slice::from_ref(&x),
                sketch: None,
                surrounding_control: None,
            });
        }
    }
    Ok(x)
}

/// Classifier-free guided prediction for one branch.
fn guided(
    backend: &dyn DenoiserBackend,
    x: &Array3<f64>,
    t: usize,
    prompt: &str,
    control: Option<&ControlSignal>,
    scale: f64,
) -> Result<Array3<f64>> {
    let cond = backend.predict_noise(x, t, prompt, control, None)?;
    if scale == 1.0 {
        return Ok(cond);
    }
    let uc = backend.predict_noise(x, t, UNCONDITIONAL, None, None)?;
    harmonize(&uc, &cond, scale)
}

fn finish(backend: &dyn DenoiserBackend, latent: Array3<f64>, report: SamplerReport) -> Result<SampleOutput> {
    let image = backend.decode(&latent)?.mapv(|v| v.clamp(0.0, 1.0));
    Ok(SampleOutput { image, latent, report })
}

/// Plain guided DDIM sampling of one prompt from the seeded initial noise.
#[allow(clippy::too_many_arguments)]
pub fn sample_single(
    backend: &dyn DenoiserBackend,
    image_hw: (usize, usize),
    prompt: &str,
    control: Option<&ControlSignal>,
    guidance_scale: f64,
    seed: u64,
    schedule: &DiffusionSchedule,
    observer: Observer,
) -> Result<SampleOutput> {
    let shape = backend.latent_shape(image_hw)?;
    let init = LatentState {
        latent: gaussian_noise(shape, seed, 0),
        step_index: 0,
    };
    let latent = denoise_from(
        init,
        schedule,
        |t, x| guided(backend, x, t, prompt, control, guidance_scale),
        observer,
    )?;
    let report = SamplerReport {
        timesteps: schedule.timesteps().to_vec(),
        noise: NoiseSharing::Shared,
        ..SamplerReport::default()
    };
    finish(backend, latent, report)
}

/// Guided subject noise, captured subject keys per layer, and the unconditional
/// prediction when this pass computed it.
type SubjectPass = (Array3<f64>, Vec<Array2<f64>>, Option<Array3<f64>>);

fn latent_mask(mask: &Array2<f64>, latent_hw: (usize, usize)) -> Array2<f64> {
    imageops::threshold(&imageops::area_resize(mask, latent_hw), 0.5)
}

/// Subject keys per layer, ordered by layer id.
fn keys_by_layer(hooks: HookHandle) -> Vec<Array2<f64>> {
    let mut caps = hooks.remove();
    caps.sort_by_key(|c| c.layer_id);
    caps.into_iter().map(|c| c.k).collect()
}

/// Composite generation: subject and surrounding branches predict noise on the same
/// latent, the predictions are fused by mask, guided against one shared
/// unconditional prediction and fed to DDIM.
pub fn run_dual_branch(
    spec: &DualBranchSpec,
    params: &SamplerParams,
    backends: BranchBackends,
    schedule: &DiffusionSchedule,
    mut observer: Observer,
) -> Result<SampleOutput> {
    params.validate()?;
    if spec.subjects.is_empty() {
        return Err(Error::invalid("at least one subject branch is required"));
    }
    let shape = backends.surrounding.latent_shape(spec.image_hw)?;
    let sub_shape = backends.subject.latent_shape(spec.image_hw)?;
    if shape != sub_shape {
        return Err(Error::shape(format!(
            "subject latent {sub_shape:?} vs surrounding latent {shape:?}"
        )));
    }
    for s in &spec.subjects {
        if s.mask.dim() != spec.image_hw {
            return Err(Error::shape(format!(
                "mask {:?} vs image {:?}",
                s.mask.dim(),
                spec.image_hw
            )));
        }
        if !(s.gamma > 0.0 && s.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma {} outside (0, 1]", s.gamma)));
        }
    }
    let masks: Vec<Array2<f64>> = spec
        .subjects
        .iter()
        .map(|s| latent_mask(&s.mask, (shape.0, shape.1)))
        .collect();
    check_disjoint(&masks)?;
    let gammas: Vec<f64> = spec.subjects.iter().map(|s| s.gamma).collect();

    let mut report = SamplerReport {
        timesteps: schedule.timesteps().to_vec(),
        noise: params.noise,
        ..SamplerReport::default()
    };
    let hooks_ok = backends.subject.supports_hooks() && backends.surrounding.supports_hooks();
    let cross = params.cross_branch_attention && hooks_ok;
    let fusion = params.control_fusion && backends.surrounding.supports_hooks() && spec.surrounding.control.is_some();
    if params.cross_branch_attention && !cross {
        report
            .notes
            .push("cross-branch attention disabled: backend has no attention hooks".into());
    }
    if params.control_fusion && !fusion {
        report.notes.push(if spec.surrounding.control.is_none() {
            "control fusion disabled: surrounding branch has no control".into()
        } else {
            "control fusion disabled: backend has no attention hooks".into()
        });
    }
    report.cross_branch_attention = cross;
    report.control_fusion = fusion;

    let n = spec.subjects.len();
    let mut latents: Vec<Array3<f64>> = match params.noise {
        NoiseSharing::Shared => vec![gaussian_noise(shape, params.seed, 0)],
        NoiseSharing::Independent => (0..=n as u64).map(|i| gaussian_noise(shape, params.seed, i)).collect(),
    };
    let sigma = params
        .sketch_sigma
        .unwrap_or_else(|| default_sketch_sigma(spec.image_hw));
    let pristine = spec.surrounding.control.clone();
    let mut surr_control = pristine.clone();
    let ts = schedule.timesteps();

    for (i, &t) in ts.iter().enumerate() {
        let t_prev = schedule.next_timestep(i);
        let surr_x = &latents[0];
        let sub_x = |c: usize| match params.noise {
            NoiseSharing::Shared => &latents[0],
            NoiseSharing::Independent => &latents[1 + c],
        };

        // Subject branches and the unconditional pass only read x_t, so they run together.
        let need_uc = params.guidance_scale != 1.0;
        let (sub_out, uc_out) = thread::scope(|scope| {
            let handles: Vec<_> = spec
                .subjects
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    let x = sub_x(c);
                    scope.spawn(move || -> Result<SubjectPass> {
                        let hooks = if cross {
                            Some(install_hooks(backends.subject, None, true)?)
                        } else {
                            None
                        };
                        let eps =
                            backends
                                .subject
                                .predict_noise(x, t, &s.prompt, s.control.as_ref(), hooks.as_ref())?;
                        let keys = hooks.map(keys_by_layer).unwrap_or_default();
                        // Independent latents each need their own unconditional prediction.
                        let uc = if need_uc && params.noise == NoiseSharing::Independent {
                            Some(backends.surrounding.predict_noise(x, t, UNCONDITIONAL, None, None)?)
                        } else {
                            None
                        };
                        Ok((eps, keys, uc))
                    })
                })
                .collect();
            let uc = scope.spawn(|| -> Result<Option<Array3<f64>>> {
                if need_uc {
                    Ok(Some(backends.surrounding.predict_noise(
                        surr_x,
                        t,
                        UNCONDITIONAL,
                        None,
                        None,
                    )?))
                } else {
                    Ok(None)
                }
            });
            let subs: Vec<_> = handles
                .into_iter()
                .map(|h| h.join().expect("subject branch panicked"))
                .collect();
            (subs, uc.join().expect("unconditional pass panicked"))
        });
        let uc_surr = uc_out?;
        let mut eps_subs = Vec::with_capacity(n);
        let mut sub_keys = Vec::with_capacity(n);
        let mut uc_subs = Vec::with_capacity(n);
        for r in sub_out {
            let (eps, keys, uc) = r?;
            eps_subs.push(eps);
            sub_keys.push(keys);
            uc_subs.push(uc);
        }

        let surr_hooks = if cross || fusion {
            let substitution = cross.then(|| KeySubstitution {
                alpha: params.alpha,
                subject_keys: sub_keys,
                concept_masks: masks.clone(),
                layers: params.attention_layers.clone(),
            });
            Some(install_hooks(backends.surrounding, substitution, fusion)?)
        } else {
            None
        };
        let eps_surr = backends.surrounding.predict_noise(
            surr_x,
            t,
            &spec.surrounding.prompt,
            surr_control.as_ref(),
            surr_hooks.as_ref(),
        )?;

        let mut sketch = None;
        if let (true, Some(hooks), Some(base)) = (fusion, surr_hooks, pristine.as_ref()) {
            let captures = hooks.remove();
            let raw = aggregate_attention(&captures, (shape.0, shape.1))?;
            let mut s = neural_sketch(&raw, sigma, spec.image_hw);
            s.source_steps = vec![t];
            surr_control = Some(fuse_control(&s, base)?);
            sketch = Some(s);
        }

        match params.noise {
            NoiseSharing::Shared => {
                let fused = if n == 1 {
                    fuse_noise(&eps_subs[0], &eps_surr, &masks[0], gammas[0])?
                } else {
                    fuse_noise_multi(&eps_subs, &masks, &gammas, &eps_surr)?
                };
                let eps = match &uc_surr {
                    Some(uc) => harmonize(uc, &fused, params.guidance_scale)?,
                    None => fused,
                };
                latents[0] = ddim_step(&latents[0], &eps, t, t_prev, schedule)?;
            }
            NoiseSharing::Independent => {
                let eps_s = match &uc_surr {
                    Some(uc) => harmonize(uc, &eps_surr, params.guidance_scale)?,
                    None => eps_surr,
                };
                latents[0] = ddim_step(&latents[0], &eps_s, t, t_prev, schedule)?;
                for (c, eps) in eps_subs.iter().enumerate() {
                    let eps = match &uc_subs[c] {
                        Some(uc) => harmonize(uc, eps, params.guidance_scale)?,
                        None => eps.clone(),
                    };
                    latents[1 + c] = ddim_step(&latents[1 + c], &eps, t, t_prev, schedule)?;
                }
            }
        }
        for x in &latents {
            check_finite(x, i, t)?;
        }
        if let Some(obs) = observer.as_mut() {
            obs(&StepRecord {
                index: i,
                t,
                t_prev,
                latents: &latents,
                sketch: sketch.as_ref(),
                surrounding_control: surr_control.as_ref(),
            });
        }
    }

    let latent = match params.noise {
        NoiseSharing::Shared => latents.swap_remove(0),
        NoiseSharing::Independent => {
            let mut out = latents[0].clone();
            for (c, m) in masks.iter().enumerate() {
                Zip::indexed(&mut out).for_each(|(r, col, k), o| {
                    if m[[r, col]] > 0.0 {
                        *o = latents[1 + c][[r, col, k]];
                    }
                });
            }
            out
        }
    };
    finish(backends.surrounding, latent, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{AnalyticGaussianBackend, MicroAttentionBackend, MicroConfig};
    use crate::glyph::{to_scribble, to_segmentation};
    use crate::sampler::schedule::BetaSpec;

    fn schedule(steps: usize) -> DiffusionSchedule {
        DiffusionSchedule::new(1000, steps, BetaSpec::default()).unwrap()
    }

    fn analytic(sigma0: f64, steps: usize) -> AnalyticGaussianBackend {
        AnalyticGaussianBackend::new((8, 8, 2), sigma0, schedule(steps))
            .unwrap()
            .with_constant_target("sub", 0.8)
            .unwrap()
            .with_constant_target("surr", 0.2)
            .unwrap()
    }

    fn left_half(hw: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(hw, |(_, c)| if c < hw.1 / 2 { 1.0 } else { 0.0 })
    }

    fn spec(mask: Array2<f64>, gamma: f64, sub: &str, surr: &str) -> DualBranchSpec {
        DualBranchSpec {
            image_hw: mask.dim(),
            subjects: vec![SubjectBranch {
                prompt: sub.into(),
                control: None,
                mask,
                gamma,
            }],
            surrounding: SurroundingBranch {
                prompt: surr.into(),
                control: None,
            },
        }
    }

    fn plain_params(seed: u64) -> SamplerParams {
        SamplerParams {
            guidance_scale: 1.0,
            seed,
            ..SamplerParams::default()
        }
    }

    #[test]
    fn full_mask_matches_single_branch() {
        let s = schedule(20);
        let b = analytic(0.3, 20);
        let dual = run_dual_branch(
            &spec(Array2::ones((8, 8)), 1.0, "sub", "surr"),
            &plain_params(5),
            BranchBackends::same(&b),
            &s,
            None,
        )
        .unwrap();
        let single = sample_single(&b, (8, 8), "sub", None, 1.0, 5, &s, None).unwrap();
        assert_eq!(dual.latent, single.latent);
        assert!(!dual.report.cross_branch_attention);
        assert!(!dual.report.notes.is_empty());
    }

    #[test]
    fn composite_of_point_masses() {
        let s = schedule(20);
        let b = analytic(0.0, 20);
        let mask = left_half((8, 8));
        let out = run_dual_branch(
            &spec(mask.clone(), 1.0, "sub", "surr"),
            &plain_params(1),
            BranchBackends::same(&b),
            &s,
            None,
        )
        .unwrap();
        for ((r, c), &v) in out.image.indexed_iter() {
            let expect = if mask[[r, c]] > 0.0 { 0.8 } else { 0.2 };
            assert!((v - expect).abs() < 1e-9, "{r},{c}: {v}");
        }
    }

    #[test]
    fn independent_noise_differs() {
        let s = schedule(20);
        let b = analytic(0.3, 20);
        let sp = spec(left_half((8, 8)), 1.0, "sub", "sub");
        let shared = run_dual_branch(&sp, &plain_params(2), BranchBackends::same(&b), &s, None).unwrap();
        let mut p = plain_params(2);
        p.noise = NoiseSharing::Independent;
        let indep = run_dual_branch(&sp, &p, BranchBackends::same(&b), &s, None).unwrap();
        let single = sample_single(&b, (8, 8), "sub", None, 1.0, 2, &s, None).unwrap();
        assert_eq!(shared.latent, single.latent);
        let diff = (&indep.latent - &single.latent)
            .mapv(f64::abs)
            .fold(0.0f64, |m, &v| m.max(v));
        assert!(diff > 1e-6);
    }

    #[test]
    fn overlapping_masks_rejected() {
        let s = schedule(5);
        let b = analytic(0.3, 5);
        let mut sp = spec(left_half((8, 8)), 1.0, "sub", "surr");
        sp.subjects.push(sp.subjects[0].clone());
        let err = run_dual_branch(&sp, &plain_params(0), BranchBackends::same(&b), &s, None).unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)));
    }

    #[test]
    fn guidance_with_shared_unconditional() {
        // With s ≠ 1 the update uses ε_uc + s·(ε_overall − ε_uc); check the first step by hand.
        let s = schedule(10);
        let b = analytic(0.5, 10);
        let mask = left_half((8, 8));
        let mut p = plain_params(3);
        p.guidance_scale = 3.0;
        let mut first = None;
        let mut obs = |rec: &StepRecord| {
            if rec.index == 0 {
                first = Some(rec.latents[0].clone());
            }
        };
        run_dual_branch(
            &spec(mask.clone(), 0.8, "sub", "surr"),
            &p,
            BranchBackends::same(&b),
            &s,
            Some(&mut obs),
        )
        .unwrap();
        let x = gaussian_noise((8, 8, 2), 3, 0);
        let t = s.timesteps()[0];
        let e_sub = b.predict_noise(&x, t, "sub", None, None).unwrap();
        let e_surr = b.predict_noise(&x, t, "surr", None, None).unwrap();
        let e_uc = b.predict_noise(&x, t, "", None, None).unwrap();
        let fused = fuse_noise(&e_sub, &e_surr, &mask.mapv(|v| v), 0.8).unwrap();
        let eps = harmonize(&e_uc, &fused, 3.0).unwrap();
        let expect = ddim_step(&x, &eps, t, s.next_timestep(0), &s).unwrap();
        assert_eq!(first.unwrap(), expect);
    }

    #[test]
    fn micro_backend_runs_attention_and_fusion() {
        let s = schedule(4);
        let b = MicroAttentionBackend::new(MicroConfig::default(), s.clone()).unwrap();
        let img = Array2::from_shape_fn((32, 32), |(r, c)| ((r / 4 + c / 4) % 2) as f64);
        let mask = left_half((32, 32));
        let sp = DualBranchSpec {
            image_hw: (32, 32),
            subjects: vec![SubjectBranch {
                prompt: "sub".into(),
                control: Some(to_segmentation(&(&img * &mask))),
                mask: mask.clone(),
                gamma: 0.8,
            }],
            surrounding: SurroundingBranch {
                prompt: "surr".into(),
                control: Some(to_scribble(&(&img * &mask.mapv(|m| 1.0 - m)))),
            },
        };
        let mut fused_ok = true;
        let mut sketches = 0;
        let base = sp.surrounding.control.clone().unwrap();
        let mut obs = |rec: &StepRecord| {
            if let (Some(sk), Some(ctrl)) = (rec.sketch, rec.surrounding_control) {
                sketches += 1;
                fused_ok &= Zip::from(&ctrl.image).and(&base.image).all(|&f, &b| f >= b);
                fused_ok &= Zip::from(&ctrl.image).and(&sk.map).all(|&f, &m| f >= m);
            }
        };
        let out = run_dual_branch(
            &sp,
            &SamplerParams::default(),
            BranchBackends::same(&b),
            &s,
            Some(&mut obs),
        )
        .unwrap();
        assert!(out.report.cross_branch_attention && out.report.control_fusion);
        assert_eq!(sketches, 4);
        assert!(fused_ok);
        assert!(imageops::in_unit_range(&out.image));
        let again = run_dual_branch(&sp, &SamplerParams::default(), BranchBackends::same(&b), &s, None).unwrap();
        assert_eq!(out.latent, again.latent);
    }

    #[test]
    fn non_finite_latent_reports_step() {
        let s = schedule(5).with_alpha_bar_override(600, f64::NAN);
        let b = analytic(0.3, 5);
        let err = sample_single(&b, (8, 8), "sub", None, 1.0, 0, &s, None).unwrap_err();
        assert!(matches!(err, Error::Numerical { step: 0, timestep: 800 }), "{err:?}");
    }
}
