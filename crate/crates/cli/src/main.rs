use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use glyphforge_core::pipeline::{self, BackendKind, GammaSpec, RunConfig};
use glyphforge_core::sampler::NoiseSharing;

#[derive(Parser)]
#[command(name = "glyphforge", version, about = "Turn a single glyph into artistic typography")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline and write images plus a manifest.
    Generate(RunArgs),
    /// Detect, filter and rank subject boxes; write mask previews.
    Regions(RunArgs),
    /// Obtain the subject and surrounding prompts.
    Prompts(RunArgs),
    /// Deform the subject region and write the result.
    Semtypo(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    ToyAnalytic,
    ToyMicro,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Shared,
    Independent,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file (or a previous run's manifest). Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "char")]
    text: Option<String>,
    #[arg(long)]
    font: Option<String>,
    #[arg(long)]
    font_dir: Option<PathBuf>,
    /// Canvas side in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    subject_prompt: Option<String>,
    #[arg(long)]
    surrounding_prompt: Option<String>,
    /// Comma-separated concepts for a multi-concept run.
    #[arg(long, value_delimiter = ',')]
    concepts: Option<Vec<String>>,
    #[arg(long)]
    conf_min: Option<f64>,
    #[arg(long)]
    area_lo: Option<f64>,
    #[arg(long)]
    area_hi: Option<f64>,
    /// Subject deformation strength in [0, 1].
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long)]
    semtypo_steps: Option<usize>,
    /// Control scale for every branch; the per-branch flags take precedence.
    #[arg(long)]
    control_scale: Option<f64>,
    #[arg(long)]
    depth_control_scale: Option<f64>,
    #[arg(long)]
    subject_control_scale: Option<f64>,
    #[arg(long)]
    surrounding_control_scale: Option<f64>,
    /// Subject prominence: one value, or one per concept separated by commas.
    #[arg(long, value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
    #[arg(long)]
    no_cross_attention: bool,
    #[arg(long)]
    no_control_fusion: bool,
    #[arg(long)]
    sketch_sigma: Option<f64>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    llm_fixture: Option<PathBuf>,
    #[arg(long)]
    detector_fixture: Option<PathBuf>,
    /// Per-request timeout for external services, in seconds.
    #[arg(long)]
    timeout: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-step latent, sketch and control previews.
    #[arg(long)]
    dump_intermediates: bool,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl RunArgs {
    /// Defaults, then the config file, then flags.
    fn resolve(self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path).map_err(|e| anyhow!("reading config {}: {e}", path.display()))?,
            None => RunConfig::default(),
        };
        set(&mut c.text, self.text);
        set(&mut c.font, self.font);
        if self.font_dir.is_some() {
            c.font_dir = self.font_dir;
        }
        set(&mut c.size_px, self.size);
        if self.subject_prompt.is_some() {
            c.subject_prompt = self.subject_prompt;
        }
        if self.surrounding_prompt.is_some() {
            c.surrounding_prompt = self.surrounding_prompt;
        }
        set(&mut c.concepts, self.concepts);
        set(&mut c.thresholds.conf_min, self.conf_min);
        set(&mut c.thresholds.area_lo, self.area_lo);
        set(&mut c.thresholds.area_hi, self.area_hi);
        set(&mut c.strength, self.strength);
        set(&mut c.semtypo_steps, self.semtypo_steps);
        if let Some(cs) = self.control_scale {
            c.depth_control_scale = cs;
            c.subject_control_scale = cs;
            c.surrounding_control_scale = cs;
        }
        set(&mut c.depth_control_scale, self.depth_control_scale);
        set(&mut c.subject_control_scale, self.subject_control_scale);
        set(&mut c.surrounding_control_scale, self.surrounding_control_scale);
        if let Some(g) = self.gamma {
            c.gamma = match g.as_slice() {
                [one] => GammaSpec::Scalar(*one),
                _ => GammaSpec::PerConcept(g),
            };
        }
        set(&mut c.alpha, self.alpha);
        set(&mut c.guidance_scale, self.guidance_scale);
        set(&mut c.steps, self.steps);
        set(&mut c.train_steps, self.train_steps);
        set(&mut c.seed, self.seed);
        set(
            &mut c.noise,
            self.noise.map(|n| match n {
                NoiseArg::Shared => NoiseSharing::Shared,
                NoiseArg::Independent => NoiseSharing::Independent,
            }),
        );
        if self.no_cross_attention {
            c.cross_branch_attention = false;
        }
        if self.no_control_fusion {
            c.control_fusion = false;
        }
        if self.sketch_sigma.is_some() {
            c.sketch_sigma = self.sketch_sigma;
        }
        set(
            &mut c.backend,
            self.backend.map(|b| match b {
                BackendArg::ToyAnalytic => BackendKind::ToyAnalytic,
                BackendArg::ToyMicro => BackendKind::ToyMicro,
                BackendArg::External => BackendKind::External,
            }),
        );
        if self.llm_fixture.is_some() {
            c.llm_fixture = self.llm_fixture;
        }
        if self.detector_fixture.is_some() {
            c.detector_fixture = self.detector_fixture;
        }
        set(&mut c.timeout_secs, self.timeout);
        if self.out.is_some() {
            c.out_dir = self.out;
        }
        if self.dump_intermediates {
            c.dump_intermediates = true;
        }
        if c.text.is_empty() {
            bail!("--char is required (directly or through --config)");
        }
        Ok(c)
    }
}

fn fmt_box(b: &glyphforge_core::region::DetectionBox) -> String {
    format!(
        "[{:.3}, {:.3}, {:.3}, {:.3}]  conf {:.3}  area {:.3}  {}",
        b.x0,
        b.y0,
        b.x1,
        b.y1,
        b.confidence,
        b.area(),
        b.phrase
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let mut config = args.resolve()?;
            config.out_dir.get_or_insert_with(|| PathBuf::from("out"));
            let out = pipeline::generate(&config)?;
            for note in &out.manifest.sampler_report.notes {
                eprintln!("note: {note}");
            }
            for (name, hash) in &out.manifest.artifacts {
                if !name.starts_with("steps/") {
                    println!("{}  {}", hash, out.out_dir.join(name).display());
                }
            }
            println!("{}", out.out_dir.join(pipeline::MANIFEST_FILE).display());
        }
        Command::Regions(args) => {
            let mut config = args.resolve()?;
            config.out_dir.get_or_insert_with(|| PathBuf::from("out"));
            let out = pipeline::run_regions(&config)?;
            for (i, (det, split)) in out.detections.iter().zip(&out.split.splits).enumerate() {
                println!("concept {i}: {:?}", det.prompt);
                if det.ranked.is_empty() {
                    println!(
                        "  no detection passed the filters ({} raw); fallback box used",
                        det.raw.len()
                    );
                }
                for (rank, b) in det.ranked.iter().enumerate() {
                    println!("  {:>2}. {}", rank + 1, fmt_box(b));
                }
                let tag = if split.fallback { "fallback" } else { "selected" };
                println!("  {tag}: {}", fmt_box(&split.bbox));
            }
        }
        Command::Prompts(args) => {
            let config = args.resolve()?;
            config.validate()?;
            let prompts = pipeline::prompts_stage(&config)?;
            println!("{}", serde_json::to_string_pretty(&prompts)?);
        }
        Command::Semtypo(args) => {
            let mut config = args.resolve()?;
            let dir = config.out_dir.get_or_insert_with(|| PathBuf::from("out")).clone();
            let stars = pipeline::run_semtypo(&config)?;
            for i in 0..stars.len() {
                println!("{}", dir.join(format!("subject_star_{i}.png")).display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Stage errors already carry their cause in the message.
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
