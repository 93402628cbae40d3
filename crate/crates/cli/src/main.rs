use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dynsplat::bench::{bench_render, with_threads};
use dynsplat::fdm::DEFAULT_NUM_BASES;
use dynsplat::init::DEFAULT_TAU;
use dynsplat::io::{
    load_checkpoint, load_dataset, loss_csv, save_checkpoint, write_color_png, write_dataset, write_depth_png,
    Checkpoint,
};
use dynsplat::metrics::evaluate;
use dynsplat::synth::{generate_synthetic, SyntheticSpec};
use dynsplat::train::{RngState, Trainer};
use dynsplat::{render, BasisKind, TrainConfig};

#[derive(Parser)]
#[command(name = "dynsplat", version, about = "Dynamic Gaussian splatting for deforming RGB-D scenes")]
struct Cli {
    /// Worker threads for rendering (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a deformable cloud to a dataset directory.
    Train(TrainArgs),
    /// Render one time instant from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint on the held-out frames.
    Eval(EvalArgs),
    /// Write a synthetic deforming dataset.
    Synth(SynthArgs),
    /// Measure rendering throughput.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Basis {
    Gaussian,
    FourierPoly,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    iters: usize,
    #[arg(long, default_value_t = 1.6e-3)]
    lr: f64,
    #[arg(long, default_value_t = DEFAULT_NUM_BASES)]
    bases: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initialize from the canonical frame only.
    #[arg(long)]
    no_mapf: bool,
    #[arg(long, value_enum, default_value_t = Basis::Gaussian)]
    basis: Basis,
    /// Also write a checkpoint every N iterations (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset providing the camera.
    #[arg(long)]
    data: PathBuf,
    /// Normalized time; uses the pose of the nearest frame.
    #[arg(long, conflicts_with = "frame", required_unless_present = "frame")]
    time: Option<f64>,
    #[arg(long)]
    frame: Option<usize>,
    /// Directory receiving color.png and depth.png.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving metrics.txt and metrics.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON scene description; omitted fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset providing the cameras.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    reps: usize,
}

fn checkpoint_of(t: &Trainer) -> Checkpoint {
    Checkpoint {
        cloud: t.cloud.clone(),
        config: t.cfg.clone(),
        iteration: t.iteration as u64,
        rng: RngState::capture(&t.rng),
    }
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let mut cfg = TrainConfig {
        iterations: a.iters,
        lr_initial: a.lr,
        num_bases: a.bases,
        tau: a.tau,
        seed: a.seed,
        mapf: !a.no_mapf,
        basis: match a.basis {
            Basis::Gaussian => BasisKind::LearnableGaussian,
            Basis::FourierPoly => BasisKind::FourierPolynomial,
        },
        ..Default::default()
    };
    if cfg.iterations > 0 && cfg.iterations < cfg.densify_freeze_iters {
        log::warn!("{} iterations end inside the densification freeze; densification is disabled", cfg.iterations);
        cfg.densify_freeze_iters = cfg.iterations;
        cfg.densify_until_iter = 0;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;

    let start = Instant::now();
    let mut t = Trainer::new(&data, cfg)?;
    log::info!(
        "{} train / {} test frames, {} initial Gaussians ({} fused)",
        data.train.len(),
        data.test.len(),
        t.cloud.len(),
        t.init.fused_points
    );
    while t.iteration < t.cfg.iterations {
        let r = t.step()?;
        if r.iteration % 100 == 0 {
            log::info!(
                "iteration {}: L_C {:.5} L_D {:.5} N {}",
                r.iteration,
                r.loss.color,
                r.loss.depth,
                r.num_gaussians
            );
        }
        if a.checkpoint_every > 0 && r.iteration % a.checkpoint_every == 0 && r.iteration < t.cfg.iterations {
            save_checkpoint(&a.out.join(format!("checkpoint_{:06}.bin", r.iteration)), &checkpoint_of(&t))?;
        }
    }
    let train_time = start.elapsed().as_secs_f64();
    save_checkpoint(&a.out.join("checkpoint.bin"), &checkpoint_of(&t))?;
    fs::write(a.out.join("loss.csv"), loss_csv(&t.history))?;
    println!("trained {} iterations in {train_time:.1} s, {} Gaussians", t.iteration, t.cloud.len());

    if !data.test.is_empty() {
        let mut report = evaluate(&t.cloud, &data, &data.test, t.cfg.background)?;
        report.train_time = Some(train_time);
        write_report(&a.out, &report)?;
        print!("{}", report.to_text());
    }
    Ok(())
}

fn write_report(dir: &Path, report: &dynsplat::metrics::MetricReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.txt"), report.to_text())?;
    fs::write(dir.join("metrics.csv"), report.to_csv())?;
    Ok(())
}

fn run_render(a: &RenderArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let cam = match (a.frame, a.time) {
        (Some(i), _) => {
            data.cameras.get(i).with_context(|| format!("frame {i} out of range ({} frames)", data.len()))?.clone()
        }
        (None, Some(t)) => {
            if !(0.0..=1.0).contains(&t) {
                bail!("time must lie in [0, 1], got {t}");
            }
            let nearest = data
                .cameras
                .iter()
                .min_by(|x, y| (x.time - t).abs().total_cmp(&(y.time - t).abs()))
                .context("dataset has no frames")?;
            nearest.with_time(t)
        }
        (None, None) => bail!("either --time or --frame is required"),
    };
    let out = render(&ckpt.cloud, &cam, ckpt.config.background)?;
    write_color_png(&a.out.join("color.png"), &out.color)?;
    write_depth_png(&a.out.join("depth.png"), &out.depth, data.depth_scale)?;
    println!("rendered t={} to {}", cam.time, a.out.display());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let report = evaluate(&ckpt.cloud, &data, &data.test, ckpt.config.background)?;
    if let Some(dir) = &a.out {
        write_report(dir, &report)?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    let spec: SyntheticSpec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticSpec::default(),
    };
    let scene = generate_synthetic(&spec)?;
    write_dataset(&a.out, &scene.dataset)?;
    fs::write(a.out.join("spec.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    println!("wrote {} frames to {}", scene.dataset.len(), a.out.display());
    Ok(())
}

fn run_bench(a: &BenchArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let r = bench_render(&ckpt.cloud, &data.cameras, a.reps)?;
    println!("gaussians={}", ckpt.cloud.len());
    println!("fps_single_thread={:.3} std={:.3}", r.single_thread.mean, r.single_thread.std_dev);
    println!("fps_multi_thread={:.3} std={:.3} threads={}", r.multi_thread.mean, r.multi_thread.std_dev, r.threads);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = with_threads(cli.threads, || match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Render(a) => run_render(a),
        Command::Eval(a) => run_eval(a),
        Command::Synth(a) => run_synth(a),
        Command::Bench(a) => run_bench(a),
    });
    match result.map_err(anyhow::Error::from).and_then(|r| r) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
