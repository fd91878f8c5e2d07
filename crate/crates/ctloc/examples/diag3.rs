use ctloc::sim::*;
fn main() {
    let mut profile = MotionProfile::new(
        MotionKind::Hybrid,
        PathShape::Wave { width: 8.0, height: 4.8, wavelength: 0.8, amplitude: 0.08 },
        120.0, 1);
    profile.slow_band = (0.08, 0.11);
    let truth = generate_ground_truth(&profile).unwrap();
    let mut max_w: f64 = 0.0;
    for s in truth.samples() { max_w = max_w.max(s.yaw_rate.abs()); }
    println!("max |yaw rate| = {max_w:.3}");
    for i in 0..24 {
        let t = i as f64 * 5.0;
        let s = truth.state_at(t);
        println!("t {:5.1} speed {:.3} yaw_rate {:+.3} fastw {:.2} pos ({:+.2},{:+.2})", t, s.speed, s.yaw_rate, truth.fast_weight(t), s.position.x, s.position.y);
    }
}
