use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};

use edge_odometry::config::RunConfig;
use edge_odometry::dataset::{load_sequence, load_trajectory, write_trajectory};
use edge_odometry::evaluation::{compute_ate, timing_summary, FrameTiming};
use edge_odometry::geometry::{CameraIntrinsics, Pose};
use edge_odometry::imaging::preprocess;
use edge_odometry::selection::{cell_side, select_edges};
use edge_odometry::synthetic::{generate_trajectory, write_sequence, SyntheticScene, TrajectoryKind};
use edge_odometry::system::{write_diagnostics, Odometry};
use edge_odometry::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_TRACKING: u8 = 3;

#[derive(Parser)]
#[command(name = "edge-odometry", version, about = "Edge-based RGB-D visual odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track a TUM-layout sequence and write trajectories and diagnostics.
    Run(RunArgs),
    /// Absolute trajectory error of an estimate against ground truth.
    Eval(EvalArgs),
    /// Render a synthetic sequence in the TUM layout.
    Synth(SynthArgs),
    /// Dump every selection candidate of one frame as CSV, flagging the
    /// selected ones.
    SelectDebug(SelectArgs),
}

#[derive(Args)]
struct Overrides {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Track every edge with depth.
    #[arg(long)]
    no_selection: bool,
    #[arg(long)]
    single_thread: bool,
    #[arg(long)]
    window_size: Option<usize>,
    #[arg(long)]
    edges_k: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    estimated: PathBuf,
    ground_truth: PathBuf,
    /// Append a summary row (sequence,rmse,mean,median,max,hz) to this CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write per-pose errors (timestamp,error) to this CSV.
    #[arg(long)]
    errors: Option<PathBuf>,
    /// Diagnostics CSV of the run, used for the timing summary.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    #[arg(long, default_value = "sequence")]
    sequence: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Static,
    Line,
    Orbit,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(value_enum)]
    kind: Kind,
    output: PathBuf,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    /// Meters per frame for a line, radians per frame for an orbit.
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Index of the associated frame to select from.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Output CSV (stdout when absent).
    #[arg(long)]
    output: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn classify(e: Error) -> Failure {
    let code = match &e {
        Error::TrackingLost(_) | Error::DegenerateSystem(_) | Error::SelectionImpossible | Error::NoEdges => {
            EXIT_TRACKING
        }
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    };
    fail(code, e.to_string())
}

fn load_config(o: &Overrides) -> Result<RunConfig, Failure> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p).map_err(|e| fail(EXIT_USAGE, e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(d) = &o.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if o.no_selection {
        cfg.selection_enabled = false;
    }
    if o.single_thread {
        cfg.single_thread = true;
    }
    if let Some(w) = o.window_size {
        cfg.pipeline.window.capacity = w;
    }
    if let Some(k) = o.edges_k {
        cfg.pipeline.selection.get_or_insert_with(Default::default).k = k;
    }
    cfg.validate().map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.overrides)?;
    if let Some(o) = args.output {
        cfg.output = o;
    }
    let dataset = cfg
        .dataset
        .clone()
        .ok_or_else(|| fail(EXIT_USAGE, "no dataset given (--dataset or 'dataset' key)"))?;
    let mut seq = load_sequence(&dataset).map_err(classify)?;
    if seq.is_empty() {
        return Err(fail(EXIT_DATA, format!("{} has no associated frames", dataset.display())));
    }
    let sequence_camera = seq.intrinsics;
    let mut odometry: Option<Odometry> = None;
    let mut failure = None;
    for record in seq.by_ref() {
        if odometry.is_none() {
            let camera = cfg
                .camera(sequence_camera, record.gray.width(), record.gray.height())
                .map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
            odometry = Some(Odometry::new(cfg.resolved_pipeline(), camera).map_err(classify)?);
        }
        let odo = odometry.as_mut().expect("initialized above");
        if let Err(e) = odo.process(record.timestamp, &record.gray, record.depth) {
            failure = Some((record.timestamp, e));
            break;
        }
    }
    if seq.skipped > 0 {
        warn!("{} frames could not be read", seq.skipped);
    }
    let odometry = odometry.ok_or_else(|| fail(EXIT_DATA, "no readable frames"))?;
    let out = odometry.finish();
    fs::create_dir_all(&cfg.output).map_err(|e| classify(e.into()))?;
    write_trajectory(&out.trajectory, cfg.output.join("trajectory.txt")).map_err(classify)?;
    write_trajectory(&out.keyframes, cfg.output.join("keyframes.txt")).map_err(classify)?;
    write_diagnostics(&out.diagnostics, cfg.output.join("diagnostics.csv")).map_err(classify)?;
    let timing: Vec<FrameTiming> = out.diagnostics.iter().map(|d| d.timing).collect();
    let summary = timing_summary(&timing);
    info!(
        "{} frames, {} keyframes, mean {:.2} ms/frame ({:.1} Hz)",
        out.trajectory.len(),
        out.keyframes.len(),
        summary.total.mean,
        summary.hz
    );
    if let Some((t, e)) = failure {
        return Err(fail(EXIT_TRACKING, format!("tracking failed at frame {t:.6}: {e}")));
    }
    Ok(())
}

/// Per-frame timings read back from a diagnostics CSV.
fn read_timings(path: &Path) -> Result<Vec<FrameTiming>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| fail(EXIT_DATA, format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| fail(EXIT_DATA, format!("{}: missing column {name}", path.display())))
    };
    let cols = [col("preprocess_ms")?, col("track_ms")?, col("select_ms")?, col("map_ms")?];
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let v = |i: usize| -> Result<f64, Failure> {
            f.get(cols[i])
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| fail(EXIT_DATA, format!("{}:{}: bad timing row", path.display(), n + 3)))
        };
        out.push(FrameTiming {
            preprocess: v(0)?,
            track: v(1)?,
            select: v(2)?,
            map: v(3)?,
        });
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let est = load_trajectory(&args.estimated).map_err(classify)?;
    let gt = load_trajectory(&args.ground_truth).map_err(classify)?;
    let report = compute_ate(&est, &gt).map_err(classify)?;
    let hz = match &args.diagnostics {
        Some(p) => {
            let t = read_timings(p)?;
            (!t.is_empty()).then(|| timing_summary(&t))
        }
        None => None,
    };
    println!("matched  {}", report.matched);
    println!("rmse     {:.6} m", report.rmse);
    println!("mean     {:.6} m", report.mean);
    println!("median   {:.6} m", report.median);
    println!("max      {:.6} m", report.max);
    if let Some(s) = &hz {
        println!("frame    {:.3} ms mean, {:.3} ms median, {:.3} ms p95", s.total.mean, s.total.median, s.total.p95);
        println!("rate     {:.1} Hz", s.hz);
    }
    if let Some(path) = &args.csv {
        let exists = path.exists();
        let mut text = if exists {
            fs::read_to_string(path).map_err(|e| classify(e.into()))?
        } else {
            String::from("sequence,rmse,mean,median,max,hz\n")
        };
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            args.sequence,
            report.rmse,
            report.mean,
            report.median,
            report.max,
            hz.map_or(String::new(), |s| format!("{:.2}", s.hz))
        ));
        fs::write(path, text).map_err(|e| classify(e.into()))?;
    }
    if let Some(path) = &args.errors {
        let mut text = String::from("timestamp,error\n");
        for (t, e) in &report.errors {
            text.push_str(&format!("{t:.6},{e:.6}\n"));
        }
        fs::write(path, text).map_err(|e| classify(e.into()))?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    let intr = CameraIntrinsics::tum_default();
    let center = nalgebra::Vector3::new(0.0, 0.0, 2.5);
    let scene = SyntheticScene::random(args.seed, center, 1.0);
    let kind = match args.kind {
        Kind::Static => TrajectoryKind::Static,
        Kind::Line => TrajectoryKind::Line {
            direction: nalgebra::Vector3::x(),
        },
        Kind::Orbit => TrajectoryKind::Orbit { center, radius: 2.5 },
    };
    let poses = generate_trajectory(kind, args.frames, args.step);
    write_sequence(&args.output, &scene, &poses, &intr, 1.0, 30.0).map_err(classify)?;
    info!("wrote {} frames to {}", poses.len(), args.output.display());
    Ok(())
}

fn cmd_select_debug(args: SelectArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.overrides)?;
    let dataset = cfg
        .dataset
        .clone()
        .ok_or_else(|| fail(EXIT_USAGE, "no dataset given (--dataset or 'dataset' key)"))?;
    let seq = load_sequence(&dataset).map_err(classify)?;
    let camera_hint = seq.intrinsics;
    let record = seq
        .into_iter()
        .nth(args.frame)
        .ok_or_else(|| fail(EXIT_DATA, format!("frame {} not available", args.frame)))?;
    let camera = cfg
        .camera(camera_hint, record.gray.width(), record.gray.height())
        .map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    let pipeline = cfg.resolved_pipeline();
    let selection = pipeline.selection.unwrap_or_default();
    let frame = preprocess(record.timestamp, &record.gray, record.depth, &pipeline.preprocess).map_err(classify)?;
    let report = select_edges(&frame.edges, &frame.depth, &Pose::identity(), &camera, &selection).map_err(classify)?;
    let side = cell_side(camera.width, camera.height, selection.k);
    let cols = camera.width.div_ceil(side);
    let mut csv = String::from("x,y,cell,magnitude,probability,selected\n");
    for r in &report.records {
        let cell = (r.y / side) * cols + r.x / side;
        csv.push_str(&format!(
            "{},{},{},{:.3},{:.6},{}\n",
            r.x, r.y, cell, r.magnitude, r.probability, r.selected as u8
        ));
    }
    match &args.output {
        Some(p) => fs::write(p, csv).map_err(|e| classify(e.into()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::SelectDebug(a) => cmd_select_debug(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            error!("{}", f.message);
            ExitCode::from(f.code)
        }
    }
}
