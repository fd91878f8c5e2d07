use ctloc::config::RunConfig;
use ctloc::dataset::Dataset;
use ctloc::metrics::{align_trajectories, compute_ape, AlignMode, TimedPosition};
use ctloc::pipeline::run_pipeline;
use ctloc::sim::*;

fn main() {
    let profile = MotionProfile::new(MotionKind::Fast, PathShape::Square { side: 8.0 }, 250.0, 7);
    let truth = generate_ground_truth(&profile).unwrap();
    let mut scene = SceneConfig::default();
    scene.anchors.retain(|id, _| id == "a0" || id == "a2");
    let records = synthesize_sensors(&truth, &scene, &SensorNoiseConfig::default(), 7);
    let dataset = Dataset::from_records(records);
    let cfg = RunConfig::default();
    let out = run_pipeline(&cfg, &dataset).unwrap();
    let est = out.timed_positions();
    let truth_pos: Vec<TimedPosition> = truth_records(&truth, 10.0).into_iter().map(|s| TimedPosition { t: s.t, position: s.position }).collect();
    let (_, aligned) = align_trajectories(&est, &truth_pos, AlignMode::Se2).unwrap();
    let report = compute_ape(&aligned, &truth_pos).unwrap();
    println!("rmse={:.4} mean={:.4} median={:.4} max={:.4}", report.rmse, report.mean, report.median, report.max);
    for (i, (t, e)) in report.errors.iter().enumerate() {
        if i % 100 == 0 { println!("t={t:7.1} e={e:.3}"); }
    }
    // window timing + iterations summary
    let mean_ms: f64 = out.windows.iter().map(|w| w.duration_ms).sum::<f64>() / out.windows.len() as f64;
    let max_ms = out.windows.iter().map(|w| w.duration_ms).fold(0.0, f64::max);
    println!("windows {} mean {:.1} ms max {:.1} ms, density {:.2}", out.windows.len(), mean_ms, max_ms, out.mean_density);
    println!("vas emitted {}", out.virtual_anchors.len());
    let mut worst = report.errors.clone();
    worst.sort_by(|a,b| b.1.partial_cmp(&a.1).unwrap());
    println!("worst: {:?}", &worst[..8.min(worst.len())]);
}
