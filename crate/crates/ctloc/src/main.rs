//! Command-line driver: scenario simulation, pipeline runs, trajectory
//! evaluation, and the ablation harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use ctloc::config::RunConfig;
use ctloc::dataset::{load_dataset, save_records};
use ctloc::metrics::{align_trajectories, compute_ape, AlignMode, TimedPosition};
use ctloc::pipeline::{run_pipeline, PipelineError, PipelineOutput};
use ctloc::sim::{
    generate_ground_truth, inject_visibility, synthesize_sensors, truth_records, MotionKind,
    MotionProfile, PathShape, SceneConfig, SensorNoiseConfig, VisibilitySchedule,
};

#[derive(Parser)]
#[command(name = "ctloc", about = "Continuous-time UWB/IMU/odometer localization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Simulate(SimulateArgs),
    /// Run the estimation pipeline on a dataset.
    Run(RunArgs),
    /// Evaluate an estimate against ground truth.
    Eval(EvalArgs),
    /// A/B the adaptive mechanisms over several seeds.
    Ablate(AblateArgs),
    /// Print the default configuration as TOML.
    Config {
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// Motion kind: slow, fast or hybrid.
    #[arg(long, default_value = "slow")]
    kind: String,
    /// Path shape: square, rectangular or wave.
    #[arg(long, default_value = "square")]
    path: String,
    #[arg(long, default_value_t = 120.0)]
    duration: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Disable all sensor noise.
    #[arg(long)]
    zero_noise: bool,
    /// Keep at most this many anchors visible at a time (0 = all).
    #[arg(long, default_value_t = 0)]
    visible: usize,
    /// Visibility switch period, seconds.
    #[arg(long, default_value_t = 20.0)]
    switch_period: f64,
    /// Anchor positions as "x,y,z;x,y,z;…" (default: four corners).
    #[arg(long)]
    anchors: Option<String>,
    #[arg(long, default_value_t = 8.0)]
    side: f64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimate CSV produced by `run` (t,x,y,z,yaw).
    #[arg(long)]
    estimate: PathBuf,
    /// Ground-truth JSON lines produced by `simulate`.
    #[arg(long)]
    truth: PathBuf,
    /// Use full SE(3) alignment instead of planar.
    #[arg(long)]
    se3: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, default_value = "hybrid")]
    kind: String,
    #[arg(long, default_value = "wave")]
    path: String,
    #[arg(long, default_value_t = 180.0)]
    duration: f64,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Run(args) => run(args),
        Command::Eval(args) => eval(args),
        Command::Ablate(args) => ablate(args),
        Command::Config { out } => {
            let text = RunConfig::default().to_toml();
            match out {
                Some(path) => std::fs::write(path, text)
                    .map_err(|e| PipelineError::Data(e.to_string())),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_kind(s: &str) -> Result<MotionKind, PipelineError> {
    match s {
        "slow" => Ok(MotionKind::Slow),
        "fast" => Ok(MotionKind::Fast),
        "hybrid" => Ok(MotionKind::Hybrid),
        other => Err(PipelineError::Config(ctloc::config::ConfigError::Invalid(
            format!("unknown motion kind {other:?}"),
        ))),
    }
}

fn parse_path(s: &str, side: f64) -> Result<PathShape, PipelineError> {
    match s {
        "square" => Ok(PathShape::Square { side }),
        "rectangular" | "rect" => Ok(PathShape::Rectangular {
            width: side,
            height: 0.6 * side,
        }),
        "wave" => Ok(PathShape::Wave {
            width: side,
            height: 0.6 * side,
            wavelength: 0.6,
            amplitude: 0.055,
        }),
        other => Err(PipelineError::Config(ctloc::config::ConfigError::Invalid(
            format!("unknown path shape {other:?}"),
        ))),
    }
}

fn parse_anchors(text: &str) -> Result<ctloc::preprocess::AnchorMap, PipelineError> {
    let mut map = ctloc::preprocess::AnchorMap::new();
    for (i, part) in text.split(';').enumerate() {
        let coords: Vec<f64> = part
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| {
                PipelineError::Config(ctloc::config::ConfigError::Invalid(format!(
                    "anchor {i}: {e}"
                )))
            })?;
        if coords.len() != 3 {
            return Err(PipelineError::Config(ctloc::config::ConfigError::Invalid(
                format!("anchor {i}: expected x,y,z"),
            )));
        }
        map.insert(format!("a{i}"), Vector3::new(coords[0], coords[1], coords[2]));
    }
    Ok(map)
}

fn io_err(e: std::io::Error) -> PipelineError {
    PipelineError::Data(e.to_string())
}

fn write_truth(path: &Path, truth: &ctloc::sim::GroundTruth) -> Result<(), PipelineError> {
    use std::io::Write;
    let f = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(f);
    for s in truth_records(truth, 10.0) {
        writeln!(
            w,
            r#"{{"t":{:.9},"pos":[{},{},{}],"yaw":{},"speed":{},"omega":{}}}"#,
            s.t.seconds(),
            s.position.x,
            s.position.y,
            s.position.z,
            s.yaw,
            s.speed,
            s.yaw_rate
        )
        .map_err(io_err)?;
    }
    Ok(())
}

fn load_truth(path: &Path) -> Result<Vec<TimedPosition>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| PipelineError::Data(format!("truth line {}: {e}", i + 1)))?;
        let t = v["t"]
            .as_f64()
            .ok_or_else(|| PipelineError::Data(format!("truth line {}: missing t", i + 1)))?;
        let pos = v["pos"]
            .as_array()
            .filter(|a| a.len() == 3)
            .ok_or_else(|| PipelineError::Data(format!("truth line {}: missing pos", i + 1)))?;
        out.push(TimedPosition {
            t: t.into(),
            position: Vector3::new(
                pos[0].as_f64().unwrap_or(f64::NAN),
                pos[1].as_f64().unwrap_or(f64::NAN),
                pos[2].as_f64().unwrap_or(f64::NAN),
            ),
        });
    }
    Ok(out)
}

fn write_estimate_csv(path: &Path, out: &PipelineOutput) -> Result<(), PipelineError> {
    use std::io::Write;
    let f = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "t,x,y,z,yaw").map_err(io_err)?;
    for e in &out.estimate {
        writeln!(w, "{:.9},{},{},{},{}", e.t, e.x, e.y, e.z, e.yaw).map_err(io_err)?;
    }
    Ok(())
}

fn load_estimate_csv(path: &Path) -> Result<Vec<TimedPosition>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| PipelineError::Data(format!("estimate line {}: {e}", i + 1)))?;
        if fields.len() < 4 {
            return Err(PipelineError::Data(format!(
                "estimate line {}: expected t,x,y,z[,yaw]",
                i + 1
            )));
        }
        out.push(TimedPosition {
            t: fields[0].into(),
            position: Vector3::new(fields[1], fields[2], fields[3]),
        });
    }
    Ok(out)
}

fn write_run_outputs(dir: &Path, out: &PipelineOutput) -> Result<(), PipelineError> {
    use std::io::Write;
    std::fs::create_dir_all(dir).map_err(io_err)?;
    write_estimate_csv(&dir.join("estimate.csv"), out)?;
    // per-window convergence records, one JSON object per line
    let f = std::fs::File::create(dir.join("windows.jsonl")).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(f);
    for rec in &out.windows {
        writeln!(w, "{}", serde_json::to_string(rec).unwrap()).map_err(io_err)?;
    }
    // knot allocation log
    let f = std::fs::File::create(dir.join("knots.csv")).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "window_start,window_end,delta_v,delta_omega,n_cp").map_err(io_err)?;
    for k in &out.knots {
        writeln!(
            w,
            "{},{},{},{},{}",
            k.window_start, k.window_end, k.delta_v, k.delta_omega, k.n_cp
        )
        .map_err(io_err)?;
    }
    // virtual anchors for debugging
    let f = std::fs::File::create(dir.join("vas.csv")).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "t,anchor,x,y,z,fim_det,range,waypoints").map_err(io_err)?;
    for va in &out.virtual_anchors {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            va.created_at.seconds(),
            va.source_anchor,
            va.position.x,
            va.position.y,
            va.position.z,
            va.fim_det,
            va.range,
            va.waypoint_count
        )
        .map_err(io_err)?;
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), PipelineError> {
    let kind = parse_kind(&args.kind)?;
    let shape = parse_path(&args.path, args.side)?;
    let mut profile = MotionProfile::new(kind, shape, args.duration, args.seed);
    if kind == MotionKind::Hybrid {
        profile.slow_band = (0.08, 0.11);
    }
    let truth = generate_ground_truth(&profile)
        .map_err(|e| PipelineError::Config(ctloc::config::ConfigError::Invalid(e.to_string())))?;
    let mut scene = SceneConfig::default();
    if let Some(text) = &args.anchors {
        scene.anchors = parse_anchors(text)?;
    }
    if args.visible > 0 {
        let ids: Vec<String> = scene.anchors.keys().cloned().collect();
        scene.visibility =
            VisibilitySchedule::alternating(&ids, args.visible, args.switch_period, args.duration);
    }
    let noise = if args.zero_noise {
        SensorNoiseConfig::zero()
    } else {
        SensorNoiseConfig::default()
    };
    let records = synthesize_sensors(&truth, &scene, &noise, args.seed);
    let records = inject_visibility(records, &scene.visibility);
    std::fs::create_dir_all(&args.out).map_err(io_err)?;
    save_records(&args.out.join("dataset.jsonl"), &records)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    write_truth(&args.out.join("truth.jsonl"), &truth)?;
    eprintln!(
        "wrote {} records and ground truth to {}",
        records.len(),
        args.out.display()
    );
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, PipelineError> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn run(args: RunArgs) -> Result<(), PipelineError> {
    let cfg = load_config(&args.config)?;
    let dataset = load_dataset(&args.dataset).map_err(|e| PipelineError::Data(e.to_string()))?;
    let out = run_pipeline(&cfg, &dataset)?;
    write_run_outputs(&args.out, &out)?;
    eprintln!(
        "estimated {} samples over {} windows (accepted {} / rejected {} ranges)",
        out.estimate.len(),
        out.windows.len(),
        out.gates.accepted,
        out.gates.rejected
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), PipelineError> {
    use std::io::Write;
    let estimate = load_estimate_csv(&args.estimate)?;
    let truth = load_truth(&args.truth)?;
    let mode = if args.se3 { AlignMode::Se3 } else { AlignMode::Se2 };
    let (_, aligned) = align_trajectories(&estimate, &truth, mode)
        .map_err(|e| PipelineError::Numerical(e.to_string()))?;
    let report =
        compute_ape(&aligned, &truth).map_err(|e| PipelineError::Numerical(e.to_string()))?;
    std::fs::create_dir_all(&args.out).map_err(io_err)?;
    let summary = serde_json::json!({
        "rmse": report.rmse,
        "mean": report.mean,
        "median": report.median,
        "max": report.max,
        "samples": report.errors.len(),
    });
    std::fs::write(
        args.out.join("ape.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )
    .map_err(io_err)?;
    let f = std::fs::File::create(args.out.join("ape_cdf.csv")).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "error,fraction").map_err(io_err)?;
    for (e, frac) in &report.cdf {
        writeln!(w, "{e},{frac}").map_err(io_err)?;
    }
    let f = std::fs::File::create(args.out.join("ape_errors.csv")).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "t,error").map_err(io_err)?;
    for (t, e) in &report.errors {
        writeln!(w, "{t},{e}").map_err(io_err)?;
    }
    println!(
        "APE rmse {:.4} m, mean {:.4} m, median {:.4} m, max {:.4} m",
        report.rmse, report.mean, report.median, report.max
    );
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<(), PipelineError> {
    use std::io::Write;
    let base = load_config(&args.config)?;
    let kind = parse_kind(&args.kind)?;
    let shape = parse_path(&args.path, 8.0)?;
    std::fs::create_dir_all(&args.out).map_err(io_err)?;
    let f = std::fs::File::create(args.out.join("ablation.csv")).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "seed,arm,rmse,mean_density").map_err(io_err)?;

    for seed in 0..args.seeds {
        let mut profile = MotionProfile::new(kind, shape.clone(), args.duration, seed + 1);
        if kind == MotionKind::Hybrid {
            profile.slow_band = (0.08, 0.11);
        }
        let truth = generate_ground_truth(&profile).map_err(|e| {
            PipelineError::Config(ctloc::config::ConfigError::Invalid(e.to_string()))
        })?;
        let mut scene = SceneConfig::default();
        let ids: Vec<String> = scene.anchors.keys().cloned().collect();
        scene.visibility =
            VisibilitySchedule::alternating(&ids, 1, 15.0, args.duration);
        let records = synthesize_sensors(&truth, &scene, &base.noise, seed + 1);
        let records = inject_visibility(records, &scene.visibility);
        let dataset = ctloc::dataset::Dataset::from_records(records);
        let truth_pos: Vec<TimedPosition> = truth_records(&truth, 10.0)
            .into_iter()
            .map(|s| TimedPosition {
                t: s.t,
                position: s.position,
            })
            .collect();
        let score = |out: &PipelineOutput| -> Result<f64, PipelineError> {
            let (_, aligned) = align_trajectories(&out.timed_positions(), &truth_pos, AlignMode::Se2)
                .map_err(|e| PipelineError::Numerical(e.to_string()))?;
            Ok(compute_ape(&aligned, &truth_pos)
                .map_err(|e| PipelineError::Numerical(e.to_string()))?
                .rmse)
        };

        // full system
        let full_out = run_pipeline(&base, &dataset)?;
        let full_rmse = score(&full_out)?;
        writeln!(w, "{seed},full,{full_rmse},{}", full_out.mean_density).map_err(io_err)?;

        // adaptive knots off, matched mean density
        let mut cfg = base.clone();
        cfg.knots.adaptive = false;
        cfg.knots.uniform_density = full_out.mean_density;
        let out = run_pipeline(&cfg, &dataset)?;
        writeln!(w, "{seed},uniform_knots,{},{}", score(&out)?, out.mean_density)
            .map_err(io_err)?;

        // innovation-adaptive filtering off
        let mut cfg = base.clone();
        cfg.fusion.adaptive = false;
        let out = run_pipeline(&cfg, &dataset)?;
        writeln!(w, "{seed},plain_ekf,{},{}", score(&out)?, out.mean_density).map_err(io_err)?;

        // virtual anchors off
        let mut cfg = base.clone();
        cfg.backend.virtual_anchors = false;
        let out = run_pipeline(&cfg, &dataset)?;
        writeln!(w, "{seed},no_virtual_anchors,{},{}", score(&out)?, out.mean_density)
            .map_err(io_err)?;
    }
    eprintln!("wrote {}", args.out.join("ablation.csv").display());
    Ok(())
}
