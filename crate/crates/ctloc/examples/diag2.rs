use ctloc::config::RunConfig;
use ctloc::dataset::Dataset;
use ctloc::pipeline::run_pipeline;
use ctloc::sim::*;

fn main() {
    let profile = MotionProfile::new(MotionKind::Slow, PathShape::Square { side: 8.0 }, 60.0, 1);
    let truth = generate_ground_truth(&profile).unwrap();
    let scene = SceneConfig::default();
    let noise = SensorNoiseConfig::zero();
    let records = synthesize_sensors(&truth, &scene, &noise, 1);
    let dataset = Dataset::from_records(records);
    let mut cfg = RunConfig::default();
    cfg.noise = noise;
    let out = run_pipeline(&cfg, &dataset).unwrap();
    eprintln!("gates {:?}", out.gates);
    // estimate vs truth speed from estimate yaw? print estimate samples
    for e in out.estimate.iter().step_by(50) {
        let ts = truth.state_at(e.t);
        eprintln!("t {:6.1} est ({:+.3},{:+.3}) truth ({:+.3},{:+.3})", e.t, e.x, e.y, ts.position.x, ts.position.y);
    }
}
