//! End-to-end orchestration: glyph, prompts, regions, subject deformation and
//! dual-branch sampling, with artifacts and a replayable run manifest.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backends::{
    identity_decode, AnalyticGaussianBackend, DenoiserBackend, DetectorBackend, FixtureLlm, HttpDenoiser, HttpDetector,
    HttpLlm, LlmBackend, MicroAttentionBackend, MicroConfig, ToyDetector, UNCONDITIONAL,
};
use crate::error::{Error, Result, StageExt};
use crate::glyph::{rasterize, to_scribble, to_segmentation, FontLibrary, GlyphImage, DEFAULT_FONT, DEFAULT_SIZE_PX};
use crate::imageops;
use crate::knowledge::{acquire_prompts, PromptCache, PromptPair, PromptSource, QueryTemplate};
use crate::region::{
    detect, filter_and_rank, select_regions_multi, DetectionBox, MultiRegionSplit, RegionThresholds, DEFAULT_GAMMA,
};
use crate::sampler::compose::DEFAULT_GUIDANCE_SCALE;
use crate::sampler::{
    run_dual_branch, BetaSpec, BranchBackends, DiffusionSchedule, DualBranchSpec, NoiseSharing, SampleOutput,
    SamplerParams, SamplerReport, ScheduleSpec, StepRecord, SubjectBranch, SurroundingBranch,
};
use crate::semtypo::{sem_typo, SemTypoParams, DEFAULT_STEPS as SEMTYPO_STEPS, DEFAULT_STRENGTH};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// Closed-form Gaussian denoiser, fixture prompts, fixture/component detector.
    #[default]
    ToyAnalytic,
    /// Fixed-weight attention denoiser with the same offline prompt and detector sources.
    ToyMicro,
    /// HTTP services named by the environment.
    External,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::ToyAnalytic => "toy-analytic",
            BackendKind::ToyMicro => "toy-micro",
            BackendKind::External => "external",
        }
    }
}

/// Subject prominence: one value for every concept or one per concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaSpec {
    Scalar(f64),
    PerConcept(Vec<f64>),
}

impl Default for GammaSpec {
    fn default() -> Self {
        GammaSpec::Scalar(DEFAULT_GAMMA)
    }
}

impl GammaSpec {
    pub fn resolve(&self, concepts: usize) -> Result<Vec<f64>> {
        let gammas = match self {
            GammaSpec::Scalar(g) => vec![*g; concepts],
            GammaSpec::PerConcept(v) if v.len() == 1 => vec![v[0]; concepts],
            GammaSpec::PerConcept(v) if v.len() == concepts => v.clone(),
            GammaSpec::PerConcept(v) => {
                return Err(Error::invalid(format!(
                    "{} gamma values for {concepts} concepts",
                    v.len()
                )))
            }
        };
        if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && **g <= 1.0)) {
            return Err(Error::invalid(format!("gamma {g} outside (0, 1]")));
        }
        Ok(gammas)
    }
}

/// Every knob of a run. Serialized into the manifest and accepted back as a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "char")]
    pub text: String,
    pub font: String,
    /// Directory fonts are resolved in; the bundled fonts when absent.
    pub font_dir: Option<PathBuf>,
    pub size_px: usize,
    pub subject_prompt: Option<String>,
    pub surrounding_prompt: Option<String>,
    /// Concepts for multi-concept runs; the text itself when empty.
    pub concepts: Vec<String>,
    pub thresholds: RegionThresholds,
    pub strength: f64,
    pub semtypo_steps: usize,
    pub depth_control_scale: f64,
    pub subject_control_scale: f64,
    pub surrounding_control_scale: f64,
    pub gamma: GammaSpec,
    pub alpha: f64,
    pub guidance_scale: f64,
    pub steps: usize,
    pub train_steps: usize,
    pub beta: BetaSpec,
    pub seed: u64,
    pub noise: NoiseSharing,
    pub cross_branch_attention: bool,
    pub control_fusion: bool,
    pub sketch_sigma: Option<f64>,
    pub backend: BackendKind,
    /// Spread of the toy analytic denoiser's data distribution.
    pub analytic_sigma0: f64,
    pub micro: MicroConfig,
    pub llm_fixture: Option<PathBuf>,
    pub detector_fixture: Option<PathBuf>,
    pub timeout_secs: u64,
    /// Not recorded in manifests, so that a replay may write elsewhere.
    pub out_dir: Option<PathBuf>,
    pub dump_intermediates: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sampler = SamplerParams::default();
        Self {
            text: String::new(),
            font: DEFAULT_FONT.into(),
            font_dir: None,
            size_px: DEFAULT_SIZE_PX,
            subject_prompt: None,
            surrounding_prompt: None,
            concepts: Vec::new(),
            thresholds: RegionThresholds::default(),
            strength: DEFAULT_STRENGTH,
            semtypo_steps: SEMTYPO_STEPS,
            depth_control_scale: 1.0,
            subject_control_scale: 1.0,
            surrounding_control_scale: 1.0,
            gamma: GammaSpec::default(),
            alpha: sampler.alpha,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            steps: crate::sampler::schedule::DEFAULT_INFERENCE_STEPS,
            train_steps: crate::sampler::schedule::DEFAULT_TRAIN_STEPS,
            beta: BetaSpec::default(),
            seed: 0,
            noise: NoiseSharing::Shared,
            cross_branch_attention: true,
            control_fusion: true,
            sketch_sigma: None,
            backend: BackendKind::ToyAnalytic,
            analytic_sigma0: 0.1,
            micro: MicroConfig::default(),
            llm_fixture: None,
            detector_fixture: None,
            timeout_secs: 120,
            out_dir: None,
            dump_intermediates: false,
        }
    }
}

impl RunConfig {
    /// Reads a config file; a run manifest is accepted too and its recorded config used.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let config = match value.get("config") {
            Some(inner) if value.get("manifest_version").is_some() => inner.clone(),
            _ => value,
        };
        Ok(serde_json::from_value(config)?)
    }

    pub fn concepts(&self) -> Vec<String> {
        if self.concepts.is_empty() {
            vec![self.text.clone()]
        } else {
            self.concepts.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::invalid("no character given"));
        }
        if self.concepts.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::invalid("empty concept name"));
        }
        if self.concepts.len() > 1 && (self.subject_prompt.is_some() || self.surrounding_prompt.is_some()) {
            return Err(Error::invalid("prompt overrides apply to single-concept runs only"));
        }
        self.thresholds.validate()?;
        self.gamma.resolve(self.concepts().len())?;
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::invalid(format!("strength {} outside [0, 1]", self.strength)));
        }
        for (name, cs) in [
            ("depth", self.depth_control_scale),
            ("subject", self.subject_control_scale),
            ("surrounding", self.surrounding_control_scale),
        ] {
            if !(cs >= 0.0 && cs.is_finite()) {
                return Err(Error::invalid(format!("{name} control scale {cs} must be >= 0")));
            }
        }
        if self.steps == 0 || self.semtypo_steps == 0 {
            return Err(Error::invalid("step counts must be positive"));
        }
        if !(self.analytic_sigma0 >= 0.0 && self.analytic_sigma0.is_finite()) {
            return Err(Error::invalid("analytic sigma0 must be >= 0"));
        }
        self.sampler_params().validate()?;
        self.schedule()?;
        if self.backend == BackendKind::ToyMicro && !self.size_px.is_multiple_of(self.micro.grid) {
            return Err(Error::invalid(format!(
                "size {} is not a multiple of the micro token grid {}",
                self.size_px, self.micro.grid
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::from_spec(ScheduleSpec {
            train_steps: self.train_steps,
            inference_steps: self.steps,
            beta: self.beta,
        })
    }

    pub fn sampler_params(&self) -> SamplerParams {
        SamplerParams {
            alpha: self.alpha,
            guidance_scale: self.guidance_scale,
            seed: self.seed,
            noise: self.noise,
            cross_branch_attention: self.cross_branch_attention,
            control_fusion: self.control_fusion,
            sketch_sigma: self.sketch_sigma,
            attention_layers: Default::default(),
        }
    }

    pub fn semtypo_params(&self) -> SemTypoParams {
        SemTypoParams {
            strength: self.strength,
            steps: self.semtypo_steps,
            seed: self.seed,
            guidance_scale: self.guidance_scale,
            control_scale: self.depth_control_scale,
            train_steps: self.train_steps,
            beta: self.beta,
        }
    }

    fn fonts(&self) -> FontLibrary {
        match &self.font_dir {
            Some(dir) => FontLibrary::new(dir),
            None => FontLibrary::default(),
        }
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs.max(1))
    }

    fn llm(&self) -> Result<Box<dyn LlmBackend>> {
        Ok(match self.backend {
            BackendKind::External => Box::new(HttpLlm::from_env(self.timeout())?),
            _ => Box::new(match &self.llm_fixture {
                Some(p) => FixtureLlm::from_file(p)?,
                None => FixtureLlm::bundled()?,
            }),
        })
    }

    fn detector(&self) -> Result<Box<dyn DetectorBackend>> {
        Ok(match self.backend {
            BackendKind::External => Box::new(HttpDetector::from_env(self.timeout())?),
            _ => Box::new(match &self.detector_fixture {
                Some(p) => ToyDetector::from_file(p)?,
                None => ToyDetector::bundled()?,
            }),
        })
    }

    /// The denoiser; the toy analytic one needs every prompt it will be asked about.
    fn denoiser(&self, prompts: &[String]) -> Result<Box<dyn DenoiserBackend>> {
        let schedule = self.schedule()?;
        Ok(match self.backend {
            BackendKind::ToyAnalytic => {
                let shape = (self.size_px, self.size_px, 1);
                Box::new(
                    AnalyticGaussianBackend::new(shape, self.analytic_sigma0, schedule)?
                        .with_hashed_targets(prompts.iter().map(String::as_str))?,
                )
            }
            BackendKind::ToyMicro => Box::new(MicroAttentionBackend::new(self.micro.clone(), schedule)?),
            BackendKind::External => Box::new(HttpDenoiser::from_env(self.timeout())?),
        })
    }
}

/// Prompt pair obtained for one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPrompts {
    pub concept: String,
    pub subject: String,
    pub surrounding: String,
    pub source: PromptSource,
}

pub fn render_glyph(config: &RunConfig) -> Result<GlyphImage> {
    rasterize(&config.text, &config.font, config.size_px, &config.fonts()).stage("glyph")
}

/// Prompts for every concept, honoring manual overrides.
pub fn prompts_stage(config: &RunConfig) -> Result<Vec<ConceptPrompts>> {
    let concepts = config.concepts();
    let pair_of = |concept: &str, pair: PromptPair| ConceptPrompts {
        concept: concept.to_owned(),
        subject: pair.subject,
        surrounding: pair.surrounding,
        source: pair.source,
    };
    if let (Some(sub), Some(surr)) = (&config.subject_prompt, &config.surrounding_prompt) {
        let pair = PromptPair::manual(sub.clone(), surr.clone()).stage("knowledge")?;
        return Ok(vec![pair_of(&concepts[0], pair)]);
    }
    let llm = config.llm().stage("knowledge")?;
    let template = QueryTemplate::default();
    let cache = PromptCache::default();
    concepts
        .iter()
        .map(|c| {
            let mut pair = acquire_prompts(c, llm.as_ref(), &template, Some(&cache)).stage("knowledge")?;
            if let Some(s) = &config.subject_prompt {
                pair.subject = s.clone();
            }
            if let Some(s) = &config.surrounding_prompt {
                pair.surrounding = s.clone();
            }
            Ok(pair_of(c, pair))
        })
        .collect()
}

/// Ranked detections of one concept, as seen by the region stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedDetections {
    pub prompt: String,
    pub raw: Vec<DetectionBox>,
    pub ranked: Vec<DetectionBox>,
}

pub struct RegionsOutput {
    pub split: MultiRegionSplit,
    pub detections: Vec<RankedDetections>,
}

pub fn regions_stage(config: &RunConfig, glyph: &GlyphImage, prompts: &[ConceptPrompts]) -> Result<RegionsOutput> {
    let detector = config.detector().stage("region")?;
    let subject_prompts: Vec<&str> = prompts.iter().map(|p| p.subject.as_str()).collect();
    let split = select_regions_multi(glyph, &subject_prompts, detector.as_ref(), &config.thresholds)
        .and_then(|s| s.with_gammas(config.gamma.resolve(prompts.len())?))
        .stage("region")?;
    // Detections on the full glyph, for reporting only.
    let detections = subject_prompts
        .iter()
        .map(|p| {
            let raw = detect(glyph, p, detector.as_ref())?;
            let ranked = filter_and_rank(&raw, &config.thresholds);
            Ok(RankedDetections {
                prompt: p.to_string(),
                raw,
                ranked,
            })
        })
        .collect::<Result<_>>()
        .stage("region")?;
    Ok(RegionsOutput { split, detections })
}

fn all_prompts(prompts: &[ConceptPrompts]) -> Vec<String> {
    let mut out = vec![UNCONDITIONAL.to_owned()];
    out.extend(prompts.iter().map(|p| p.subject.clone()));
    out.push(surrounding_prompt(prompts));
    out
}

/// Deformed subject image per concept.
pub fn semtypo_stage(
    config: &RunConfig,
    split: &MultiRegionSplit,
    prompts: &[ConceptPrompts],
    denoiser: &dyn DenoiserBackend,
) -> Result<Vec<Array2<f64>>> {
    let params = config.semtypo_params();
    split
        .splits
        .iter()
        .zip(prompts)
        .map(|(s, p)| sem_typo(&s.subject_image, &p.subject, &params, denoiser))
        .collect::<Result<_>>()
        .stage("semtypo")
}

fn surrounding_prompt(prompts: &[ConceptPrompts]) -> String {
    // One surrounding branch serves every concept; it carries each distinct style once.
    let mut parts: Vec<&str> = Vec::new();
    for p in prompts {
        if !parts.contains(&p.surrounding.as_str()) {
            parts.push(&p.surrounding);
        }
    }
    parts.join(", ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionRecord {
    pub bbox: DetectionBox,
    pub fallback: bool,
    pub gamma: f64,
    pub mask_pixels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendIds {
    pub denoiser: String,
    pub detector: String,
    pub llm: String,
}

/// Replayable record of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub config: RunConfig,
    pub glyph_ink_fraction: f64,
    pub prompts: Vec<ConceptPrompts>,
    pub surrounding_prompt: String,
    pub regions: Vec<RegionRecord>,
    pub schedule: ScheduleSpec,
    pub semtypo: SemTypoParams,
    pub sampler: SamplerParams,
    pub sampler_report: SamplerReport,
    pub backends: BackendIds,
    /// File name → sha256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

pub struct GenerateOutput {
    pub manifest: RunManifest,
    pub final_image: Array2<f64>,
    pub out_dir: PathBuf,
}

struct ArtifactWriter {
    dir: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl ArtifactWriter {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hashes: BTreeMap::new(),
        })
    }

    fn png(&mut self, name: &str, image: &Array2<f64>) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let hash = imageops::write_png(&path, image)?;
        self.hashes.insert(name.to_owned(), hash);
        Ok(())
    }
}

fn out_dir(config: &RunConfig) -> PathBuf {
    config.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

/// Writes one PNG per step for the latent preview and, when present, the sketch and fused control.
fn dump_step(writer: &mut ArtifactWriter, rec: &StepRecord) -> Result<()> {
    let i = rec.index;
    let preview = identity_decode(&rec.latents[0]).mapv(|v| v.clamp(0.0, 1.0));
    writer.png(&format!("steps/{i:03}_latent.png"), &preview)?;
    if let Some(s) = rec.sketch {
        writer.png(&format!("steps/{i:03}_sketch.png"), &s.map)?;
    }
    if let Some(c) = rec.surrounding_control {
        writer.png(&format!("steps/{i:03}_control.png"), &c.image)?;
    }
    Ok(())
}

/// The complete pipeline. Artifacts go to the configured output directory.
pub fn generate(config: &RunConfig) -> Result<GenerateOutput> {
    config.validate().stage("config")?;
    let glyph = render_glyph(config)?;
    let prompts = prompts_stage(config)?;
    let regions = regions_stage(config, &glyph, &prompts)?;
    let split = &regions.split;
    let denoiser = config.denoiser(&all_prompts(&prompts)).stage("sampler")?;
    let subjects_star = semtypo_stage(config, split, &prompts, denoiser.as_ref())?;

    let dir = out_dir(config);
    let mut writer = ArtifactWriter::new(&dir).stage("io")?;
    let hw = glyph.pixels.dim();
    let spec = DualBranchSpec {
        image_hw: hw,
        subjects: split
            .splits
            .iter()
            .zip(&prompts)
            .zip(&subjects_star)
            .zip(&split.gammas)
            .map(|(((s, p), star), &gamma)| SubjectBranch {
                prompt: p.subject.clone(),
                control: Some(to_segmentation(star).with_scale(config.subject_control_scale)),
                mask: s.mask.clone(),
                gamma,
            })
            .collect(),
        surrounding: SurroundingBranch {
            prompt: surrounding_prompt(&prompts),
            control: Some(to_scribble(&surrounding_image(split, &glyph)).with_scale(config.surrounding_control_scale)),
        },
    };
    let schedule = config.schedule().stage("sampler")?;
    let params = config.sampler_params();
    let SampleOutput { image, report, .. } = if config.dump_intermediates {
        let cell = RefCell::new((&mut writer, Ok(())));
        let mut obs = |rec: &StepRecord| {
            let mut guard = cell.borrow_mut();
            let (w, status) = &mut *guard;
            if status.is_ok() {
                *status = dump_step(w, rec);
            }
        };
        let out = run_dual_branch(
            &spec,
            &params,
            BranchBackends::same(denoiser.as_ref()),
            &schedule,
            Some(&mut obs),
        )
        .stage("sampler")?;
        let (_, status) = cell.into_inner();
        status.stage("io")?;
        out
    } else {
        run_dual_branch(&spec, &params, BranchBackends::same(denoiser.as_ref()), &schedule, None).stage("sampler")?
    };

    let write_all = |writer: &mut ArtifactWriter| -> Result<()> {
        writer.png("glyph.png", &glyph.pixels)?;
        let mut union = Array2::<f64>::zeros(hw);
        for (i, s) in split.splits.iter().enumerate() {
            union += &s.mask;
            writer.png(&format!("mask_{i}.png"), &s.mask)?;
            writer.png(&format!("subject_{i}.png"), &s.subject_image)?;
            writer.png(&format!("subject_star_{i}.png"), &subjects_star[i])?;
        }
        writer.png("mask.png", &union)?;
        writer.png("surrounding.png", &surrounding_image(split, &glyph))?;
        writer.png("final.png", &image)?;
        Ok(())
    };
    write_all(&mut writer).stage("io")?;

    let mut recorded = config.clone();
    recorded.out_dir = None;
    let detector_id = config.detector().map(|d| d.id()).unwrap_or_default();
    let llm_id = if prompts.iter().all(|p| p.source == PromptSource::Manual) {
        "none".to_owned()
    } else {
        config.llm().map(|l| l.id()).unwrap_or_default()
    };
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        config: recorded,
        glyph_ink_fraction: glyph.ink_fraction(),
        surrounding_prompt: surrounding_prompt(&prompts),
        prompts,
        regions: split
            .splits
            .iter()
            .zip(&split.gammas)
            .map(|(s, &gamma)| RegionRecord {
                bbox: s.bbox.clone(),
                fallback: s.fallback,
                gamma,
                mask_pixels: s.mask.iter().filter(|&&v| v > 0.0).count(),
            })
            .collect(),
        schedule: schedule.spec(),
        semtypo: config.semtypo_params(),
        sampler: params,
        sampler_report: report,
        backends: BackendIds {
            denoiser: denoiser.id(),
            detector: detector_id,
            llm: llm_id,
        },
        artifacts: writer.hashes.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(Error::from)
        .stage("io")?;
    std::fs::write(dir.join(MANIFEST_FILE), text + "\n")
        .map_err(Error::from)
        .stage("io")?;
    Ok(GenerateOutput {
        manifest,
        final_image: image,
        out_dir: dir,
    })
}

/// The glyph with every subject region removed.
fn surrounding_image(split: &MultiRegionSplit, glyph: &GlyphImage) -> Array2<f64> {
    let mut out = glyph.pixels.clone();
    for s in &split.splits {
        out.zip_mut_with(&s.mask, |v, &m| {
            if m > 0.0 {
                *v = 0.0;
            }
        });
    }
    out
}

/// Region stage on its own: ranked detections plus mask previews.
pub fn run_regions(config: &RunConfig) -> Result<RegionsOutput> {
    config.validate().stage("config")?;
    let glyph = render_glyph(config)?;
    let prompts = prompts_stage(config)?;
    let out = regions_stage(config, &glyph, &prompts)?;
    if let Some(dir) = &config.out_dir {
        let mut writer = ArtifactWriter::new(dir).stage("io")?;
        for (i, s) in out.split.splits.iter().enumerate() {
            writer.png(&format!("mask_{i}.png"), &s.mask).stage("io")?;
        }
    }
    Ok(out)
}

/// Subject deformation stage on its own; writes `subject_star_{i}.png` when an output
/// directory is configured.
pub fn run_semtypo(config: &RunConfig) -> Result<Vec<Array2<f64>>> {
    config.validate().stage("config")?;
    let glyph = render_glyph(config)?;
    let prompts = prompts_stage(config)?;
    let regions = regions_stage(config, &glyph, &prompts)?;
    let denoiser = config.denoiser(&all_prompts(&prompts)).stage("semtypo")?;
    let stars = semtypo_stage(config, &regions.split, &prompts, denoiser.as_ref())?;
    if let Some(dir) = &config.out_dir {
        let mut writer = ArtifactWriter::new(dir).stage("io")?;
        for (i, s) in stars.iter().enumerate() {
            writer.png(&format!("subject_star_{i}.png"), s).stage("io")?;
        }
    }
    Ok(stars)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(text: &str) -> RunConfig {
        RunConfig {
            text: text.into(),
            size_px: 64,
            steps: 8,
            semtypo_steps: 6,
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_are_valid_once_text_is_set() {
        assert!(RunConfig::default().validate().is_err());
        small("rose").validate().unwrap();
    }

    #[test]
    fn gamma_forms() {
        assert_eq!(GammaSpec::Scalar(0.5).resolve(2).unwrap(), vec![0.5, 0.5]);
        assert_eq!(
            GammaSpec::PerConcept(vec![0.3, 0.9]).resolve(2).unwrap(),
            vec![0.3, 0.9]
        );
        assert!(GammaSpec::PerConcept(vec![0.3, 0.9]).resolve(3).is_err());
        assert!(GammaSpec::Scalar(0.0).resolve(1).is_err());
        let parsed: RunConfig = serde_json::from_str(r#"{"char": "a", "gamma": [0.4, 0.6]}"#).unwrap();
        assert_eq!(parsed.gamma, GammaSpec::PerConcept(vec![0.4, 0.6]));
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"char": "a", "gama": 0.4}"#).is_err());
    }

    #[test]
    fn overrides_skip_the_llm() {
        let mut c = small("kiwi");
        c.subject_prompt = Some("a kiwi fruit".into());
        c.surrounding_prompt = Some("fuzzy skin".into());
        let p = prompts_stage(&c).unwrap();
        assert_eq!(p[0].source, PromptSource::Manual);
        // Without overrides the unknown concept has no fixture.
        c.subject_prompt = None;
        c.surrounding_prompt = None;
        let err = prompts_stage(&c).unwrap_err();
        assert!(err.to_string().starts_with("[knowledge]"));
    }

    #[test]
    fn bad_config_is_stage_tagged() {
        let mut c = small("rose");
        c.strength = 2.0;
        let err = generate(&c).err().unwrap();
        assert!(err.to_string().starts_with("[config]"));
        assert!(matches!(err.root(), Error::InvalidInput(_)));
    }
}
