//! `autosplat`: scene generation, the three training stages, rendering,
//! simulation, evaluation and the render service.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error (bad scene,
//! checkpoint, config or edits), 3 runtime failure. File layouts are
//! described in docs/formats.md.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use autosplat_core::background::train_background;
use autosplat_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
use autosplat_core::config::PipelineConfig;
use autosplat_core::foreground::{init_objects, train_foreground, TemplateModel};
use autosplat_core::fusion::{fuse_finetune, FusedScene};
use autosplat_core::scenario::{mean_metrics, render_frame, simulate, ScenarioEdit, SimRequest};
use autosplat_core::CoreError;
use autosplat_scene::synth::{generate_synthetic_scene, GeneratorConfig};
use autosplat_scene::{load_scene, save_scene, SceneBundle, SceneError, Split};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "autosplat", version, about = "Constrained Gaussian splatting for driving scenes", after_help = "Bundle, checkpoint and scenario layouts: docs/formats.md")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Scene bundle directory.
    #[arg(long, global = true)]
    scene: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Multiplies every stage's iteration count (15K+15K, 5K, 10K at 1.0).
    #[arg(long, global = true, default_value_t = 1.0)]
    iters_scale: f64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON file overriding loss weights, densification, learning rates and
    /// stage settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    Street,
    OneSidedCar,
    BlinkingLight,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic scene bundle with analytic ground truth to --out.
    GenerateScene {
        #[arg(long, value_enum, default_value_t = Preset::Street)]
        preset: Preset,
        /// Generator settings as JSON (replaces the preset).
        #[arg(long)]
        generator: Option<PathBuf>,
    },
    /// Trains the background (two phases) and writes a checkpoint to --out.
    TrainBackground,
    /// Trains every foreground object against the checkpoint's background.
    TrainForeground {
        /// Template point container; a procedural car when omitted.
        #[arg(long)]
        template: Option<PathBuf>,
    },
    /// Joint fine-tuning with per-object pose corrections.
    Fuse,
    /// Renders one frame to a PNG at --out.
    Render {
        #[arg(long)]
        frame: usize,
        /// JSON array of scenario edits.
        #[arg(long)]
        edits: Option<PathBuf>,
        #[arg(long)]
        width: Option<u32>,
        #[arg(long)]
        height: Option<u32>,
    },
    /// Renders every frame under a scenario into --out (PNGs + metrics.json).
    Simulate {
        /// JSON array of scenario edits applied to every frame.
        #[arg(long)]
        edits: Option<PathBuf>,
    },
    /// Prints per-frame and mean PSNR/SSIM as JSON.
    Eval {
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Serves the fused scene over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

/// Failure in user-supplied input, reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Invalid(String);

/// Missing or inconsistent arguments, reported with exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if cause.is::<Invalid>() || cause.is::<serde_json::Error>() {
            return 2;
        }
        if let Some(s) = cause.downcast_ref::<SceneError>() {
            return if matches!(s, SceneError::Io { .. }) { 3 } else { 2 };
        }
        if let Some(c) = cause.downcast_ref::<CoreError>() {
            return match c {
                CoreError::Io { .. } | CoreError::DegenerateCovariance { .. } | CoreError::EmptyRegion { .. } => 3,
                CoreError::Scene(SceneError::Io { .. }) => 3,
                _ => 2,
            };
        }
    }
    3
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| Usage(format!("{flag} is required for this command")).into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Invalid(format!("{}: {}: {}", path.display(), e.path(), e.inner())).into())
}

fn pipeline_config(g: &Global) -> Result<PipelineConfig> {
    let base = match &g.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PipelineConfig::from_json(&text).map_err(|e| Invalid(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    Ok(base.scaled(g.iters_scale).map_err(|e| Invalid(e.to_string()))?)
}

fn config_echo(cfg: &PipelineConfig, g: &Global, stage: &str, previous: Option<&serde_json::Value>) -> serde_json::Value {
    let mut echo = previous.cloned().unwrap_or_else(|| json!({}));
    echo[stage] = json!({"config": cfg, "seed": g.seed, "iters_scale": g.iters_scale});
    echo
}

fn load_inputs(g: &Global) -> Result<(SceneBundle, Checkpoint)> {
    let scene = load_scene(required(&g.scene, "--scene")?)?;
    let ck = load_checkpoint(required(&g.checkpoint, "--checkpoint")?)?;
    Ok((scene, ck))
}

fn fused_from(ck: Checkpoint, bundle: &SceneBundle) -> Result<FusedScene> {
    let mut fused = FusedScene::new(ck.background, ck.objects, bundle)?;
    fused.corrections = ck.corrections;
    Ok(fused)
}

fn read_edits(path: &Option<PathBuf>) -> Result<Vec<ScenarioEdit>> {
    path.as_deref().map_or(Ok(Vec::new()), read_json)
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::GenerateScene { preset, generator } => {
            let out = required(&g.out, "--out")?;
            let cfg = match generator {
                Some(p) => read_json(p)?,
                None => match preset {
                    Preset::Street => GeneratorConfig::street(),
                    Preset::OneSidedCar => GeneratorConfig::one_sided_car(),
                    Preset::BlinkingLight => GeneratorConfig::blinking_light(),
                },
            };
            let bundle = generate_synthetic_scene(&cfg, g.seed);
            save_scene(&bundle, out)?;
            info!("wrote {} frames to {}", bundle.frames.len(), out.display());
        }
        Command::TrainBackground => {
            let bundle = load_scene(required(&g.scene, "--scene")?)?;
            let out = required(&g.out, "--out")?;
            let cfg = pipeline_config(g)?;
            let r = train_background(&bundle, &cfg.background, &cfg.settings(), g.seed)?;
            let ck = Checkpoint {
                stage: Stage::Background,
                background: r.cloud,
                objects: Vec::new(),
                corrections: Vec::new(),
                config: config_echo(&cfg, g, "background", None),
            };
            save_checkpoint(&ck, out)?;
            info!("background: {} Gaussians -> {}", ck.background.len(), out.display());
        }
        Command::TrainForeground { template } => {
            let (bundle, ck) = load_inputs(g)?;
            let out = required(&g.out, "--out")?;
            let cfg = pipeline_config(g)?;
            let template = match template {
                Some(p) => TemplateModel::load(p)?,
                None => TemplateModel::procedural_car(cfg.foreground.template_points, g.seed),
            };
            let objects = init_objects(&bundle, &template, &cfg.foreground, g.seed)?;
            let r = train_foreground(&bundle, &ck.background, objects, &cfg.foreground, &cfg.settings(), g.seed)?;
            let n = r.objects.len();
            let next = Checkpoint {
                stage: Stage::Foreground,
                background: ck.background,
                objects: r.objects,
                corrections: vec![Default::default(); n],
                config: config_echo(&cfg, g, "foreground", Some(&ck.config)),
            };
            save_checkpoint(&next, out)?;
            info!("foreground: {n} objects ({} skipped) -> {}", r.skipped.len(), out.display());
        }
        Command::Fuse => {
            let (bundle, ck) = load_inputs(g)?;
            if ck.stage < Stage::Foreground {
                return Err(Invalid("fuse needs a checkpoint written by train-foreground or fuse".into()).into());
            }
            let out = required(&g.out, "--out")?;
            let cfg = pipeline_config(g)?;
            let echo = config_echo(&cfg, g, "fusion", Some(&ck.config));
            let r = fuse_finetune(fused_from(ck, &bundle)?, &bundle, &cfg.fusion, &cfg.settings(), g.seed)?;
            let next = Checkpoint {
                stage: Stage::Fused,
                background: r.fused.background,
                objects: r.fused.objects,
                corrections: r.fused.corrections,
                config: echo,
            };
            save_checkpoint(&next, out)?;
            info!("fused checkpoint -> {}", out.display());
        }
        Command::Render { frame, edits, width, height } => {
            let (bundle, ck) = load_inputs(g)?;
            let out = required(&g.out, "--out")?;
            let fused = fused_from(ck, &bundle)?;
            let edits = read_edits(edits)?;
            let cam = fused.cameras.get(*frame).ok_or_else(|| CoreError::FrameOutOfRange { frame: *frame, count: fused.frame_count() })?;
            let size = match (width, height) {
                (None, None) => None,
                (w, h) => Some((w.unwrap_or(cam.width), h.unwrap_or(cam.height))),
            };
            render_frame(&fused, *frame, &edits, None, size)?.save_png(out)?;
        }
        Command::Simulate { edits } => {
            let (bundle, ck) = load_inputs(g)?;
            let out = required(&g.out, "--out")?;
            let fused = fused_from(ck, &bundle)?;
            let edits = read_edits(edits)?;
            let requests: Vec<SimRequest> = (0..fused.frame_count()).map(|t| SimRequest { t, edits: edits.clone() }).collect();
            let frames = simulate(&fused, &requests, Some(&bundle))?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let mut per_frame = Vec::new();
            for f in &frames {
                let name = format!("frame_{:04}.png", f.t);
                f.image.save_png(&out.join(&name))?;
                per_frame.push(json!({"frame": f.t, "image": name, "psnr": f.psnr, "ssim": f.ssim}));
            }
            write_json(&out.join("metrics.json"), &json!({"edits": edits, "frames": per_frame, "mean": mean_metrics(&frames)}))?;
            info!("wrote {} frames to {}", frames.len(), out.display());
        }
        Command::Eval { split } => {
            let (bundle, ck) = load_inputs(g)?;
            let fused = fused_from(ck, &bundle)?;
            let mut idx = match split {
                SplitArg::Train => bundle.frames_in(Split::Train),
                SplitArg::Test => bundle.frames_in(Split::Test),
                SplitArg::All => (0..bundle.frames.len()).collect(),
            };
            if idx.is_empty() && *split == SplitArg::Test {
                log::warn!("scene has no test frames; evaluating the training frames");
                idx = bundle.frames_in(Split::Train);
            }
            let requests: Vec<SimRequest> = idx.iter().map(|&t| SimRequest { t, edits: Vec::new() }).collect();
            let frames = simulate(&fused, &requests, Some(&bundle))?;
            let per_frame: Vec<serde_json::Value> =
                frames.iter().map(|f| json!({"frame": f.t, "split": bundle.frames[f.t].split, "psnr": f.psnr, "ssim": f.ssim})).collect();
            let report = json!({"frames": per_frame, "mean": mean_metrics(&frames)});
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(out) = &g.out {
                write_json(out, &report)?;
            }
        }
        Command::Serve { port, host } => {
            let (bundle, ck) = load_inputs(g)?;
            let fused = fused_from(ck, &bundle)?;
            let addr: SocketAddr = format!("{host}:{port}").parse().map_err(|e| Usage(format!("bad --host/--port: {e}")))?;
            autosplat_service::serve(fused, bundle, addr).map_err(|e| anyhow!("service stopped: {e}"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
