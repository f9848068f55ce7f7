//! Command-line entry points: dataset synthesis, SLAM runs,
//! tracking-only runs, evaluation, re-rendering, and the ablation grid.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use rayon::prelude::*;

use evsplat_core::config::{Profile, RunConfig};
use evsplat_core::crf::CrfNodes;
use evsplat_core::dataset::{load_png, read_intrinsics, read_trajectory, Dataset};
use evsplat_core::metrics::{compute_ate, compute_psnr, compute_ssim, MetricsReport, PSNR_CAP};
use evsplat_core::oracle::{
    emit_dataset, ColorScheme, CrfProfile, Layout, OracleOptions, SceneSpec, TrajectorySpec,
};
use evsplat_core::render::render;
use evsplat_core::scene::GaussianScene;
use evsplat_core::slam::{emit_outputs, run_sequence, track_sequence};
use evsplat_core::CameraIntrinsics;

#[derive(Parser)]
#[command(name = "evsplat", about = "Event-aided blur-aware RGB-D Gaussian splatting SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ground-truthed dataset.
    Synth(SynthArgs),
    /// Run the full SLAM pipeline on a dataset.
    Slam(RunArgs),
    /// Run tracking only, against a fixed scene checkpoint.
    Track(TrackArgs),
    /// Compare trajectories and/or render directories against ground truth.
    Eval(EvalArgs),
    /// Re-render a checkpoint along a trajectory to PNGs.
    Render(RenderArgs),
    /// Run the four-way event on/off ablation grid.
    Ablate(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 200)]
    gaussians: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Blur severity; scales the camera sweep.
    #[arg(long, default_value_t = 1.0)]
    motion: f64,
    #[arg(long, default_value = "textured-planes")]
    layout: String,
    #[arg(long, default_value = "vivid")]
    color_scheme: String,
    #[arg(long, default_value_t = 1.5)]
    extent: f64,
    #[arg(long, default_value_t = 0.04)]
    exposure: f64,
    /// Sharp renders per exposure for the oracle integrator.
    #[arg(long, default_value_t = 16)]
    supersample: usize,
    #[arg(long, default_value_t = 0.25)]
    theta: f64,
    /// identity or gamma22.
    #[arg(long, default_value = "identity")]
    crf_profile: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run config; profile defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "synthetic")]
    profile: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation toggles, e.g. --toggle event_tracking=off (repeatable).
    #[arg(long = "toggle")]
    toggles: Vec<String>,
}

#[derive(Args)]
struct TrackArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Scene checkpoint to track against.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional CRF checkpoint (identity when absent).
    #[arg(long)]
    crf: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    est_traj: Option<PathBuf>,
    #[arg(long)]
    gt_traj: Option<PathBuf>,
    /// Directory of rendered PNGs to score.
    #[arg(long)]
    renders: Option<PathBuf>,
    /// Directory of ground-truth PNGs.
    #[arg(long)]
    gt_renders: Option<PathBuf>,
    /// Report file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    crf: Option<PathBuf>,
    /// TUM trajectory file; one PNG per line.
    #[arg(long)]
    traj: PathBuf,
    /// intrinsics.txt path.
    #[arg(long)]
    intrinsics: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(args) => synth(args),
        Command::Slam(args) => slam(args),
        Command::Track(args) => track(args),
        Command::Eval(args) => eval(args),
        Command::Render(args) => render_cmd(args),
        Command::Ablate(args) => ablate(args),
    }
}

fn default_intrinsics(width: usize, height: usize) -> Result<CameraIntrinsics> {
    let f = 1.25 * width as f64;
    Ok(CameraIntrinsics::new(
        f,
        f,
        width as f64 / 2.0,
        height as f64 / 2.0,
        width,
        height,
    )?)
}

fn synth(args: SynthArgs) -> Result<()> {
    let intr = default_intrinsics(args.width, args.height)?;
    let scene_spec = SceneSpec {
        layout: Layout::parse(&args.layout)?,
        gaussian_count: args.gaussians,
        color_scheme: match args.color_scheme.as_str() {
            "vivid" => ColorScheme::Vivid,
            "pastel" => ColorScheme::Pastel,
            "mono" => ColorScheme::Mono,
            other => bail!("unknown color scheme {other:?}"),
        },
        extent: args.extent,
        seed: args.seed,
    };
    let traj_spec = TrajectorySpec::sweep(args.frames, args.exposure, args.motion, args.extent);
    let opts = OracleOptions {
        supersample: args.supersample,
        theta: args.theta,
        log_eps: 1e-3,
        crf_profile: CrfProfile::parse(&args.crf_profile)?,
    };
    let events = emit_dataset(&scene_spec, &traj_spec, &opts, &intr, &args.out)
        .context("dataset synthesis failed")?;
    println!(
        "wrote {} frames, {events} events to {}",
        args.frames,
        args.out.display()
    );
    Ok(())
}

fn build_config(args: &RunArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::from_profile(args.profile.parse::<Profile>()?),
    };
    if let Some(dataset) = &args.dataset {
        config.dataset = dataset.display().to_string();
    }
    if let Some(out) = &args.out {
        config.out_dir = out.display().to_string();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    for toggle in &args.toggles {
        config.apply_toggle(toggle)?;
    }
    if config.dataset.is_empty() {
        bail!("no dataset given (use --dataset or set it in the config)");
    }
    if config.out_dir.is_empty() {
        bail!("no output directory given (use --out or set it in the config)");
    }
    Ok(config)
}

fn slam(args: RunArgs) -> Result<()> {
    let config = build_config(&args)?;
    let dataset = Dataset::load(Path::new(&config.dataset))?;
    let out_dir = PathBuf::from(&config.out_dir);
    let (state, report) = run_sequence(&dataset, config).context("slam run failed")?;
    emit_outputs(&state, &report, &out_dir)?;
    println!(
        "slam done: {} frames, {} keyframes, {} gaussians -> {}",
        state.trajectory_log.len(),
        state.next_kf_id,
        state.scene.len(),
        out_dir.display()
    );
    if let Some(ate) = report.get("ate_rmse") {
        println!("ate_rmse = {ate}");
    }
    if let Some(psnr) = report.get("mean_psnr") {
        println!("mean_psnr = {psnr}");
    }
    Ok(())
}

fn track(args: TrackArgs) -> Result<()> {
    let config = build_config(&args.run)?;
    let dataset = Dataset::load(Path::new(&config.dataset))?;
    let scene = GaussianScene::load(&args.checkpoint)?;
    let crf = match &args.crf {
        Some(path) => CrfNodes::load(path)?,
        None => CrfNodes::identity(config.crf_nodes),
    };
    let out_dir = PathBuf::from(&config.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let (log, stats) = track_sequence(&dataset, config.clone(), scene, crf)?;
    let mut lines = Vec::with_capacity(2 * log.len());
    for l in &log {
        lines.push((l.t_start, l.start));
        lines.push((l.t_end, l.end));
    }
    evsplat_core::dataset::write_trajectory(&out_dir.join("trajectory_est.txt"), &lines)?;
    let mut report = MetricsReport::new();
    report.set("seed", config.seed);
    report.set("mode", "track-only");
    report.set("lost_frames", stats.lost_frames);
    report.set_f64("runtime_tracking_s", stats.tracking_seconds);
    if let Some(gt) = &dataset.gt_traj {
        let est: Vec<Vector3<f64>> = log.iter().map(|l| l.end.camera_center()).collect();
        let gt_pos: Vec<Vector3<f64>> = gt.iter().map(|(_, e)| e.camera_center()).collect();
        if est.len() >= 3 && est.len() == gt_pos.len() {
            report.set_f64("ate_rmse", compute_ate(&est, &gt_pos)?);
        }
    }
    report.save(&out_dir.join("metrics.txt"))?;
    println!("track done: {} frames -> {}", log.len(), out_dir.display());
    Ok(())
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

fn eval(args: EvalArgs) -> Result<()> {
    let mut report = MetricsReport::new();
    report.set("lpips", "unavailable");
    if let (Some(est_path), Some(gt_path)) = (&args.est_traj, &args.gt_traj) {
        let est = read_trajectory(est_path)?;
        let gt = read_trajectory(gt_path)?;
        let positions = |lines: &[(f64, evsplat_core::Pose)]| -> Vec<Vector3<f64>> {
            lines.iter().map(|(_, p)| p.camera_center()).collect()
        };
        // When one file has twice the other's lines (start+end vs single
        // pose per frame), compare exposure-end entries.
        let (est_pos, gt_pos) = if est.len() == gt.len() {
            (positions(&est), positions(&gt))
        } else if est.len() == 2 * gt.len() {
            (
                positions(&est.iter().skip(1).step_by(2).cloned().collect::<Vec<_>>()),
                positions(&gt),
            )
        } else if gt.len() == 2 * est.len() {
            (
                positions(&est),
                positions(&gt.iter().skip(1).step_by(2).cloned().collect::<Vec<_>>()),
            )
        } else {
            bail!(
                "trajectory length mismatch: {} vs {} lines",
                est.len(),
                gt.len()
            );
        };
        report.set_f64("ate_rmse", compute_ate(&est_pos, &gt_pos)?);
        report.set("trajectory_frames", gt_pos.len());
    }
    if let (Some(renders), Some(gt_renders)) = (&args.renders, &args.gt_renders) {
        let ra = list_pngs(renders)?;
        let rb = list_pngs(gt_renders)?;
        if ra.len() != rb.len() || ra.is_empty() {
            bail!(
                "render directories hold {} vs {} PNGs",
                ra.len(),
                rb.len()
            );
        }
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        for (pa, pb) in ra.iter().zip(rb.iter()) {
            let a = load_png(pa)?;
            let b = load_png(pb)?;
            psnr_sum += compute_psnr(&a, &b)?;
            ssim_sum += compute_ssim(&a, &b)?;
        }
        report.set_f64("mean_psnr", psnr_sum / ra.len() as f64);
        report.set_f64("mean_ssim", ssim_sum / ra.len() as f64);
        report.set("render_frames", ra.len());
    }
    if args.est_traj.is_none() && args.renders.is_none() {
        bail!("nothing to evaluate: pass --est-traj/--gt-traj and/or --renders/--gt-renders");
    }
    match &args.out {
        Some(path) => report.save(path)?,
        None => print!("{}", report.to_text()),
    }
    Ok(())
}

fn render_cmd(args: RenderArgs) -> Result<()> {
    let scene = GaussianScene::load(&args.checkpoint)?;
    let crf = match &args.crf {
        Some(path) => CrfNodes::load(path)?,
        None => CrfNodes::identity(32),
    };
    let intr = read_intrinsics(&args.intrinsics)?;
    let traj = read_trajectory(&args.traj)?;
    std::fs::create_dir_all(&args.out)?;
    let settings = evsplat_core::RasterSettings::default();
    for (i, (_, pose)) in traj.iter().enumerate() {
        let out = render(&scene, pose, &intr, &settings)?;
        let mut ldr = crf.apply_image(&out.color);
        for px in ldr.data.iter_mut() {
            for c in 0..3 {
                px[c] = px[c].clamp(0.0, 1.0);
            }
        }
        evsplat_core::dataset::save_png(&args.out.join(format!("{i:06}.png")), &ldr)?;
    }
    println!("rendered {} poses -> {}", traj.len(), args.out.display());
    Ok(())
}

/// The four-way event ablation grid of the tracking/mapping toggles.
pub const ABLATION_GRID: [(&str, bool, bool); 4] = [
    ("no_events", false, false),
    ("event_mapping_only", false, true),
    ("event_tracking_only", true, false),
    ("full", true, true),
];

fn ablate(args: RunArgs) -> Result<()> {
    let base = build_config(&args)?;
    let dataset = Dataset::load(Path::new(&base.dataset))?;
    let out_root = PathBuf::from(&base.out_dir);
    std::fs::create_dir_all(&out_root)?;

    let results: Vec<(String, MetricsReport)> = ABLATION_GRID
        .par_iter()
        .map(|(name, et, em)| -> Result<(String, MetricsReport)> {
            let mut config = base.clone();
            config.toggles.event_tracking = *et;
            config.toggles.event_mapping = *em;
            config.out_dir = out_root.join(name).display().to_string();
            let (state, report) = run_sequence(&dataset, config)?;
            emit_outputs(&state, &report, &out_root.join(name))?;
            Ok((name.to_string(), report))
        })
        .collect::<Result<_>>()?;

    let mut table = String::new();
    table.push_str(&format!(
        "{:<22} {:>12} {:>12} {:>12}\n",
        "configuration", "ate_rmse", "mean_psnr", "mean_ssim"
    ));
    for (name, report) in &results {
        table.push_str(&format!(
            "{:<22} {:>12} {:>12} {:>12}\n",
            name,
            report.get("ate_rmse").unwrap_or("-"),
            report.get("mean_psnr").unwrap_or("-"),
            report.get("mean_ssim").unwrap_or("-"),
        ));
    }
    std::fs::write(out_root.join("ablation.txt"), &table)?;
    print!("{table}");

    let full_ate = results
        .iter()
        .find(|(n, _)| n == "full")
        .and_then(|(_, r)| r.get_f64("ate_rmse"))
        .unwrap_or(f64::NAN);
    let none_ate = results
        .iter()
        .find(|(n, _)| n == "no_events")
        .and_then(|(_, r)| r.get_f64("ate_rmse"))
        .unwrap_or(f64::NAN);
    if full_ate.is_finite() && none_ate.is_finite() && full_ate < none_ate {
        println!("full system improves ATE over no-events ({full_ate:.4} < {none_ate:.4})");
    }
    let _ = PSNR_CAP;
    Ok(())
}
