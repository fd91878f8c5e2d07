//! End-to-end driver: ingestion → gated fusion → virtual anchors →
//! adaptive knot placement → sliding-window optimization → continuous
//! trajectory export.
//!
//! The fusion filter supplies short-term priors; after each window
//! optimization the filter frame is rigidly re-anchored onto the spline
//! estimate so the priors stay globally consistent over long runs.
//! Ranging outliers are gated against the prior at the previous key-pose
//! epoch, which keeps the gate width proportional to a full epoch of
//! motion rather than collapsing between high-rate updates.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::backend::{
    factors::{preintegrate_imu, preintegrate_odom},
    window_length, BackendError, ResidualBlock, SlidingWindow,
};
use crate::config::{ConfigError, RunConfig};
use crate::dataset::Dataset;
use crate::ekf::{
    form_odom_observation, imu_derived_observation, planar_update, update, FilterState, ImuSample,
    InnovationStats, MotionPrior, OdomSample, OdomUpdateNoise, Snapshot,
};
use crate::geom::{log_map, Pose, Rotation, Timestamp};
use crate::metrics::TimedPosition;
use crate::preprocess::{merge_streams, reject_range_outlier, SensorEvent, UwbRangeMeasurement};
use crate::spline::{
    assign_ncp, compute_motion_variation, split_knot_span, KnotVector, Trajectory,
};
use crate::va::{VaGenerator, VirtualAnchor};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl From<BackendError> for PipelineError {
    fn from(e: BackendError) -> Self {
        PipelineError::Numerical(e.to_string())
    }
}

impl PipelineError {
    /// Process exit code: 1 config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Data(_) => 2,
            PipelineError::Numerical(_) => 3,
        }
    }
}

/// One exported trajectory sample.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EstimateSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl EstimateSample {
    pub fn timed_position(&self) -> TimedPosition {
        TimedPosition {
            t: Timestamp::new(self.t),
            position: Vector3::new(self.x, self.y, self.z),
        }
    }
}

/// Per-window convergence record, one line of the run log.
#[derive(Debug, Clone, Serialize)]
pub struct WindowRecord {
    pub t: f64,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub window_control_points: usize,
    pub inserted_control_points: usize,
    pub blocks: usize,
    pub duration_ms: f64,
    pub rank_deficient: bool,
}

/// Knot allocation record per key-pose window.
#[derive(Debug, Clone, Serialize)]
pub struct KnotRecord {
    pub window_start: f64,
    pub window_end: f64,
    pub delta_v: f64,
    pub delta_omega: f64,
    pub n_cp: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GateStats {
    pub accepted: usize,
    pub rejected: usize,
}

/// One ranging-gate decision, kept for audit.
#[derive(Debug, Clone, Serialize)]
pub struct GateRecord {
    pub t: f64,
    pub anchor_id: String,
    /// Bias-compensated range, meters.
    pub range: f64,
    pub accepted: bool,
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub estimate: Vec<EstimateSample>,
    pub windows: Vec<WindowRecord>,
    pub knots: Vec<KnotRecord>,
    pub virtual_anchors: Vec<VirtualAnchor>,
    pub gates: GateStats,
    pub gate_log: Vec<GateRecord>,
    pub trajectory: Trajectory,
    /// Control points appended per second of data (bootstrap and
    /// trailing points excluded).
    pub mean_density: f64,
}

impl PipelineOutput {
    pub fn timed_positions(&self) -> Vec<TimedPosition> {
        self.estimate.iter().map(|e| e.timed_position()).collect()
    }
}

struct GateReference {
    t: Timestamp,
    position: Vector3<f64>,
    speed: f64,
}

struct Driver<'a> {
    cfg: &'a RunConfig,
    dataset: &'a Dataset,
    t0: Timestamp,
    // fusion
    state: FilterState,
    stats: InnovationStats,
    anchor_pose: Pose,
    anchor_t: Timestamp,
    odom_buf: Vec<OdomSample>,
    prior: MotionPrior,
    odom_noise: OdomUpdateNoise,
    last_imu: Option<ImuSample>,
    // gating
    gate_ref: Option<GateReference>,
    next_gate_ref: Option<GateReference>,
    gates: GateStats,
    // virtual anchors
    generators: BTreeMap<String, VaGenerator>,
    recent_ranges: BTreeMap<String, VecDeque<UwbRangeMeasurement>>,
    // measurement history for pre-integration
    imu_history: VecDeque<ImuSample>,
    odom_history: VecDeque<OdomSample>,
    speed_samples: VecDeque<(Timestamp, f64, f64)>,
    // backend
    window: SlidingWindow,
    staged: Vec<ResidualBlock>,
    last_keypose: Timestamp,
    last_factor_epoch: Timestamp,
    next_uniform_knot: Timestamp,
    // logs
    windows: Vec<WindowRecord>,
    knot_log: Vec<KnotRecord>,
    va_log: Vec<VirtualAnchor>,
    gate_log: Vec<GateRecord>,
}

/// Run the full pipeline on a loaded dataset.
pub fn run_pipeline(cfg: &RunConfig, dataset: &Dataset) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    let (t0, p0, yaw0) = dataset
        .initial
        .ok_or_else(|| PipelineError::Data("dataset carries no init record".into()))?;
    if dataset.anchors.is_empty() {
        return Err(PipelineError::Data("dataset carries no anchor records".into()));
    }
    if dataset.imu.len() < 2 {
        return Err(PipelineError::Data("dataset carries no IMU stream".into()));
    }

    let start = Pose::new(Rotation::from_yaw(yaw0), p0);
    let h = cfg.knots.keypose_interval;
    let boot: Vec<Timestamp> = (0..4)
        .map(|i| Timestamp::new(t0.seconds() - (3 - i) as f64 * h))
        .collect();
    let knots = KnotVector::new(boot).map_err(|e| PipelineError::Numerical(e.to_string()))?;
    let mut window = SlidingWindow::new(
        Trajectory::new(knots, Vec::new(), Vec::new())
            .map_err(|e| PipelineError::Numerical(e.to_string()))?,
    );
    window.huber_delta = cfg
        .backend
        .huber
        .then_some(cfg.backend.huber_delta_factor * cfg.noise.uwb_std.max(1e-3));

    let mut driver = Driver {
        cfg,
        dataset,
        t0,
        state: FilterState::new(t0, start),
        stats: InnovationStats::new(cfg.fusion.innovation_params()),
        anchor_pose: start,
        anchor_t: t0,
        odom_buf: Vec::new(),
        prior: MotionPrior::new(16384),
        odom_noise: OdomUpdateNoise {
            sigma_yaw: cfg.fusion.sigma_yaw,
            sigma_displacement: cfg.fusion.sigma_displacement,
        },
        last_imu: None,
        gate_ref: None,
        next_gate_ref: None,
        gates: GateStats::default(),
        generators: BTreeMap::new(),
        recent_ranges: BTreeMap::new(),
        imu_history: VecDeque::new(),
        odom_history: VecDeque::new(),
        speed_samples: VecDeque::new(),
        window,
        staged: vec![ResidualBlock::Pose {
            t: t0,
            position: p0,
            rotation: start.rotation,
            sigma_pos: 0.02,
            sigma_rot: 0.01,
        }],
        last_keypose: t0,
        last_factor_epoch: t0,
        next_uniform_knot: Timestamp::new(t0.seconds() + 1.0 / cfg.knots.uniform_density.max(1e-3)),
        windows: Vec::new(),
        knot_log: Vec::new(),
        va_log: Vec::new(),
        gate_log: Vec::new(),
    };
    driver.prior.push(Snapshot {
        t: t0,
        rotation: start.rotation,
        position: p0,
        velocity: Vector3::zeros(),
    });

    let events = merge_streams(
        dataset.uwb.clone(),
        dataset.imu.clone(),
        dataset.odom.clone(),
    )
    .map_err(|e| PipelineError::Data(e.to_string()))?;

    let mut next_keypose = Timestamp::new(t0.seconds() + h);
    for event in events {
        while event.t().seconds() >= next_keypose.seconds() {
            driver.process_epoch(next_keypose)?;
            next_keypose = next_keypose.offset(h);
        }
        driver.process_event(event)?;
    }
    driver.finalize(next_keypose)
}

impl<'a> Driver<'a> {
    fn process_event(&mut self, event: SensorEvent) -> Result<(), PipelineError> {
        match event {
            SensorEvent::Imu(s) => self.process_imu(s),
            SensorEvent::Odom(s) => self.process_odom(s),
            SensorEvent::Uwb(m) => self.process_uwb(m),
        }
    }

    fn process_imu(&mut self, s: ImuSample) -> Result<(), PipelineError> {
        if let Some(prev) = self.last_imu {
            let mut dt = s.t.since(prev.t);
            while dt > 1e-9 {
                let step = dt.min(0.05);
                self.state = self
                    .state
                    .predict(&s, step, &self.cfg.noise.imu_noise())
                    .map_err(|e| PipelineError::Numerical(e.to_string()))?;
                dt -= step;
            }
            self.prior.push(Snapshot {
                t: self.state.t,
                rotation: self.state.rotation,
                position: self.state.position,
                velocity: self.state.velocity,
            });
            if std::env::var("CTLOC_DEBUG_EKF").is_ok() {
                let tt = self.state.t.seconds();
                if (tt * 127.0).round() as i64 % 127 == 0 {
                    eprintln!(
                        "ekf t {:6.2} pos ({:+.4},{:+.4}) |v| {:.4} yaw {:+.4} bg_z {:+.2e} ba ({:+.2e},{:+.2e},{:+.2e})",
                        tt, self.state.position.x, self.state.position.y,
                        self.state.velocity.norm(),
                        crate::geom::log_map(&self.state.rotation).z,
                        self.state.gyro_bias.z,
                        self.state.accel_bias.x, self.state.accel_bias.y, self.state.accel_bias.z,
                    );
                }
            }
            let wz = s.gyro.z - self.state.gyro_bias.z;
            self.speed_samples
                .push_back((self.state.t, self.state.velocity.norm(), wz));
            while self
                .speed_samples
                .front()
                .is_some_and(|(t, _, _)| self.state.t.since(*t) > 4.0 * self.cfg.knots.keypose_interval)
            {
                self.speed_samples.pop_front();
            }
        }
        self.last_imu = Some(s);
        self.imu_history.push_back(s);
        Ok(())
    }

    fn process_odom(&mut self, s: OdomSample) -> Result<(), PipelineError> {
        self.odom_history.push_back(s);
        self.odom_buf.push(s);
        let span = s.t.since(self.odom_buf[0].t);
        if self.odom_buf.len() >= 2 && span >= self.cfg.fusion.update_interval {
            let obs = form_odom_observation(&self.odom_buf)
                .map_err(|e| PipelineError::Numerical(e.to_string()))?;
            let predicted = imu_derived_observation(&self.anchor_pose, &self.state, self.anchor_t);
            let outcome = update(
                &self.state,
                &self.anchor_pose,
                &obs,
                &predicted,
                &mut self.stats,
                &self.odom_noise,
            );
            self.state = outcome.state;
            self.state = planar_update(
                &self.state,
                self.cfg.fusion.planar_sigma_z,
                self.cfg.fusion.planar_sigma_tilt_deg.to_radians(),
            );
            self.anchor_pose = self.state.pose();
            self.anchor_t = self.state.t;
            self.odom_buf = vec![s];
        }
        Ok(())
    }

    fn process_uwb(&mut self, mut m: UwbRangeMeasurement) -> Result<(), PipelineError> {
        let Some(anchor_pos) = self.dataset.anchors.get(&m.anchor_id).copied() else {
            return Err(PipelineError::Data(format!(
                "range references unknown anchor {:?}",
                m.anchor_id
            )));
        };
        // compensate the calibrated line-of-sight range bias
        m.range -= self.cfg.noise.uwb_bias;
        let in_warmup = m.t.since(self.t0) < self.cfg.gating.warmup;
        let accepted = if in_warmup {
            true
        } else if let Some(gr) = &self.gate_ref {
            let speed = self
                .prior
                .max_speed_between(gr.t, m.t)
                .max(gr.speed)
                .max(self.cfg.gating.min_speed);
            let decision = reject_range_outlier(
                &m,
                &gr.position,
                speed,
                gr.t,
                &anchor_pos,
                self.cfg.gating.gamma,
            );
            if !decision.accepted && std::env::var("CTLOC_DEBUG_GATE").is_ok() {
                eprintln!(
                    "gate reject t {:.2} anchor {} mismatch {:.3} gate {:.3} speed_ref {:.3} dt {:.3}",
                    m.t.seconds(), m.anchor_id, decision.mismatch, decision.gate,
                    speed, m.t.since(gr.t)
                );
            }
            if !decision.accepted {
                log::debug!(
                    "range to {} at {:.3} rejected: |mismatch| {:.3} ≥ gate {:.3}",
                    m.anchor_id,
                    m.t.seconds(),
                    decision.mismatch,
                    decision.gate
                );
            }
            decision.accepted
        } else {
            true
        };
        self.gate_log.push(GateRecord {
            t: m.t.seconds(),
            anchor_id: m.anchor_id.clone(),
            range: m.range,
            accepted,
        });
        if accepted {
            self.gates.accepted += 1;
            let gen = self
                .generators
                .entry(m.anchor_id.clone())
                .or_insert_with(|| {
                    VaGenerator::new(m.anchor_id.clone(), anchor_pos, self.cfg.virtual_anchor.clone())
                });
            gen.add_range(m.t, m.range, m.sigma);
            let recent = self.recent_ranges.entry(m.anchor_id.clone()).or_default();
            recent.push_back(m);
            while recent.len() > 64 {
                recent.pop_front();
            }
        } else {
            self.gates.rejected += 1;
        }
        Ok(())
    }

    /// Knot allocation, factor staging, sliding-window optimization and
    /// filter re-anchoring at key-pose epoch `t_i`.
    fn process_epoch(&mut self, t_i: Timestamp) -> Result<(), PipelineError> {
        let window_start = self.last_keypose;

        // 1. knot allocation over (T_{i−1}, T_i]
        if self.cfg.knots.adaptive {
            let samples: Vec<(Timestamp, f64, f64)> = self.speed_samples.iter().copied().collect();
            let variation = compute_motion_variation(&samples, window_start, t_i).ok();
            let n_cp = variation
                .as_ref()
                .map(|v| assign_ncp(v, &self.cfg.knots.bins))
                .unwrap_or(1);
            if let Some(v) = &variation {
                self.knot_log.push(KnotRecord {
                    window_start: window_start.seconds(),
                    window_end: t_i.seconds(),
                    delta_v: v.delta_v,
                    delta_omega: v.delta_omega,
                    n_cp,
                });
            }
            for knot in split_knot_span(window_start, t_i, n_cp)
                .map_err(|e| PipelineError::Numerical(e.to_string()))?
            {
                self.append_control_point(knot);
            }
        } else {
            let span = 1.0 / self.cfg.knots.uniform_density.max(1e-3);
            while self.next_uniform_knot.seconds() <= t_i.seconds() {
                let knot = self.next_uniform_knot;
                self.append_control_point(knot);
                self.next_uniform_knot = self.next_uniform_knot.offset(span);
            }
        }

        // 2. measurement factors at the ranging-epoch cadence
        let epoch_dt = 1.0 / self.cfg.backend.range_factor_hz.max(0.1);
        while self.last_factor_epoch.seconds() + epoch_dt <= t_i.seconds() {
            let tau = self.last_factor_epoch.offset(epoch_dt);
            let last_of_window = tau.seconds() + epoch_dt > t_i.seconds();
            self.stage_factors(self.last_factor_epoch, tau, last_of_window);
            self.last_factor_epoch = tau;
        }

        // 3. flush staged blocks that the spline already supports
        let knots = self.window.trajectory.knots();
        let (lo, hi) = (knots.support_start(), knots.support_end());
        if hi.is_finite() {
            let mut staged = std::mem::take(&mut self.staged);
            staged.retain(|b| {
                let (t_start, t_end) = b.times();
                if t_start.seconds() >= lo && t_end.seconds() <= hi {
                    self.window.blocks.push(b.clone());
                    false
                } else {
                    true
                }
            });
            self.staged = staged;
        }

        // 4. optimize the current window (measurements first, then the
        // boundary moves: marginalizing after convergence keeps the prior
        // gradient small)
        let inserted = self.knot_log.last().map(|k| k.n_cp).unwrap_or(0);
        if !self.window.blocks.is_empty() && self.window.active_count() > 0 {
            let started = Instant::now();
            let report = self.window.optimize(&self.cfg.solver)?;
            self.windows.push(WindowRecord {
                t: t_i.seconds(),
                iterations: report.iterations,
                initial_cost: report.initial_cost,
                final_cost: report.final_cost,
                window_control_points: self.window.active_count(),
                inserted_control_points: inserted,
                blocks: self.window.blocks.len(),
                duration_ms: started.elapsed().as_secs_f64() * 1e3,
                rank_deficient: report.rank_deficient,
            });
        }

        // 5. adaptive window sizing from the trailing control-point
        // density, then slide for the next epoch
        let n_cps = self.window.trajectory.control_point_count();
        if hi.is_finite() && t_i.since(self.t0) > self.cfg.backend.init_hold {
            let dt_density = self.cfg.window.density_interval;
            let appended = self
                .window
                .trajectory
                .knots()
                .raw()
                .iter()
                .filter(|&&k| k > hi - dt_density && k <= hi)
                .count();
            let alpha = appended as f64 / dt_density;
            let delta_l = window_length(alpha, &self.cfg.window);
            let new_first = n_cps.saturating_sub(delta_l).max(self.window.first_active);
            self.window.slide_and_marginalize(new_first)?;
        }

        // 6. re-anchor the fusion frame onto the optimized spline (once
        // the early windows have converged)
        if t_i.since(self.t0) > self.cfg.backend.init_hold {
            self.re_anchor();
        }

        // 7. shift the gating reference: gate against the epoch before the
        // most recent one so the gate width never collapses
        let t_q = self
            .prior
            .span()
            .map(|(_, hi)| if hi.seconds() < t_i.seconds() { hi } else { t_i });
        self.gate_ref = self.next_gate_ref.take();
        if let Some(tq) = t_q {
            if let Ok(s) = self.prior.sample(tq) {
                self.next_gate_ref = Some(GateReference {
                    t: tq,
                    position: s.position,
                    speed: s.velocity.norm(),
                });
            }
        }

        // 8. trim measurement histories
        let keep_from = self.last_factor_epoch.seconds() - 2.0 * epoch_dt;
        while self
            .imu_history
            .front()
            .is_some_and(|s| s.t.seconds() < keep_from)
        {
            self.imu_history.pop_front();
        }
        while self
            .odom_history
            .front()
            .is_some_and(|s| s.t.seconds() < keep_from)
        {
            self.odom_history.pop_front();
        }

        self.last_keypose = t_i;
        Ok(())
    }

    fn append_control_point(&mut self, knot: Timestamp) {
        let traj = &mut self.window.trajectory;
        // greville time of the control point this knot finalizes
        let k = traj.knots().raw();
        let n = k.len();
        let g = (k[n - 2] + k[n - 1] + knot.seconds()) / 3.0;
        let snap = if g <= self.t0.seconds() {
            // before the data: hold the initial pose
            let (_, p0, yaw0) = self.dataset.initial.expect("checked at startup");
            Snapshot {
                t: self.t0,
                rotation: Rotation::from_yaw(yaw0),
                position: p0,
                velocity: Vector3::zeros(),
            }
        } else {
            self.prior
                .sample(Timestamp::new(g))
                .or_else(|_| self.prior.sample(self.state.t))
                .unwrap_or(Snapshot {
                    t: self.state.t,
                    rotation: self.state.rotation,
                    position: self.state.position,
                    velocity: self.state.velocity,
                })
        };
        traj.push(knot, snap.position, snap.rotation)
            .expect("knots are appended in order");
    }

    /// Stage range + pre-integration factors for the epoch `(prev, tau]`.
    /// `hypothesis_epoch` marks the last factor epoch of a key-pose
    /// window, where virtual-anchor triples are emitted.
    fn stage_factors(&mut self, prev: Timestamp, tau: Timestamp, hypothesis_epoch: bool) {
        // the prior ends at the last propagated sample; reference epochs
        // beyond it are clamped so virtual anchors stay well-defined
        let tau = match self.prior.span() {
            Some((_, hi)) if hi.seconds() < tau.seconds() => hi,
            _ => tau,
        };
        if tau.seconds() <= prev.seconds() {
            return;
        }
        // fresh direct range per anchor at every factor epoch
        let ids: Vec<String> = self.recent_ranges.keys().cloned().collect();
        for id in &ids {
            if let Some(m) = self.latest_range_in(id, prev, tau) {
                self.staged.push(ResidualBlock::Range {
                    t: m.t,
                    reference: self.dataset.anchors[&m.anchor_id],
                    range: m.range,
                    sigma: m.sigma.max(self.cfg.backend.sigma_range_floor),
                });
            }
        }
        // virtual-anchor trilateration once per key-pose epoch, so each
        // gathered range is reused at most a handful of times
        if self.cfg.backend.virtual_anchors && hypothesis_epoch {
            let mut emitted = Vec::new();
            for gen in self.generators.values() {
                let Some(vas) = gen.generate(&self.prior, tau) else {
                    continue;
                };
                if self.cfg.backend.summed_range_residual {
                    let sigma = vas.iter().map(|v| v.sigma).sum::<f64>() / vas.len() as f64;
                    self.staged.push(ResidualBlock::RangeSummed {
                        t: tau,
                        terms: vas.iter().map(|v| (v.position, v.range)).collect(),
                        sigma,
                    });
                } else {
                    // the newest pick duplicates the direct range above;
                    // stage only the time-shifted references
                    for va in vas.iter().skip(1) {
                        self.staged.push(ResidualBlock::Range {
                            t: tau,
                            reference: va.position,
                            range: va.range,
                            sigma: va.sigma.max(self.cfg.backend.sigma_range_floor),
                        });
                    }
                }
                emitted.extend(vas);
            }
            self.va_log.extend(emitted);
        }

        self.staged.push(ResidualBlock::Planar {
            t: tau,
            sigma_z: self.cfg.backend.planar_sigma_z,
            sigma_tilt: self.cfg.backend.planar_sigma_tilt,
        });

        // pre-integrated IMU block over (prev, tau]
        let imu: Vec<ImuSample> = self
            .imu_history
            .iter()
            .filter(|s| s.t.seconds() >= prev.seconds() && s.t.seconds() <= tau.seconds())
            .copied()
            .collect();
        if imu.len() >= 2 {
            if let Ok(preint) =
                preintegrate_imu(&imu, &self.state.gyro_bias, &self.state.accel_bias)
            {
                let span = preint.duration().max(1e-3);
                let noise = self.cfg.noise.imu_noise();
                self.staged.push(ResidualBlock::Imu {
                    sigma_rot: (noise.gyro_density * span.sqrt())
                        .max(self.cfg.backend.sigma_rot_floor),
                    sigma_vel: (noise.accel_density * span.sqrt())
                        .max(self.cfg.backend.sigma_vel_floor),
                    sigma_pos: (noise.accel_density * span.sqrt() * span / 3.0_f64.sqrt())
                        .max(self.cfg.backend.sigma_pos_floor),
                    preint,
                });
            }
        }

        // pre-integrated odometer block over (prev, tau]
        let odom: Vec<OdomSample> = self
            .odom_history
            .iter()
            .filter(|s| s.t.seconds() >= prev.seconds() && s.t.seconds() <= tau.seconds())
            .copied()
            .collect();
        if odom.len() >= 2 {
            if let Ok(preint) = preintegrate_odom(&odom) {
                let span = (preint.t_end.since(preint.t_start)).max(1e-3);
                let h = span / (preint.sample_count.max(2) - 1) as f64;
                let scale_term = self.cfg.noise.odom_scale_error * preint.delta_d.norm();
                self.staged.push(ResidualBlock::Odom {
                    sigma_yaw: (self.cfg.noise.odom_gyro_std * (span * h).sqrt())
                        .max(self.cfg.backend.sigma_yaw_floor),
                    sigma_disp: (self.cfg.noise.odom_speed_std * (span * h).sqrt() + scale_term)
                        .max(self.cfg.backend.sigma_disp_floor),
                    preint,
                });
            }
        }
    }

    fn latest_range_in(
        &self,
        anchor_id: &str,
        prev: Timestamp,
        tau: Timestamp,
    ) -> Option<UwbRangeMeasurement> {
        self.recent_ranges.get(anchor_id).and_then(|q| {
            q.iter()
                .rev()
                .find(|m| m.t.seconds() > prev.seconds() && m.t.seconds() <= tau.seconds())
                .cloned()
        })
    }

    /// Rigidly map the fusion frame onto the spline estimate at the
    /// evaluable frontier. Relative motion inside the prior history is
    /// untouched.
    fn re_anchor(&mut self) {
        let hi = self.window.trajectory.knots().support_end();
        if !hi.is_finite() {
            return;
        }
        let te = Timestamp::new(hi);
        let Ok(pr) = self.prior.sample(te) else { return };
        let Ok(spline_pose) = self.window.trajectory.pose(te) else {
            return;
        };
        let dyaw = log_map(&spline_pose.rotation).z - log_map(&pr.rotation).z;
        let correction = Rotation::from_yaw(dyaw);
        let pivot = pr.position;
        let dp = spline_pose.translation - pr.position;
        self.prior.re_anchor(&correction, &pivot, &dp);
        self.state.position = correction.apply(&(self.state.position - pivot)) + pivot + dp;
        self.state.rotation = correction.compose(&self.state.rotation);
        self.state.velocity = correction.apply(&self.state.velocity);
        self.anchor_pose = Pose::new(
            correction.compose(&self.anchor_pose.rotation),
            correction.apply(&(self.anchor_pose.translation - pivot)) + pivot + dp,
        );
    }

    fn finalize(mut self, next_keypose: Timestamp) -> Result<PipelineOutput, PipelineError> {
        let data_end = self
            .dataset
            .imu
            .last()
            .map(|s| s.t)
            .unwrap_or(self.last_keypose);
        if data_end.since(self.last_keypose) > 0.2 * self.cfg.knots.keypose_interval {
            self.process_epoch(data_end)?;
        } else if next_keypose.seconds() > data_end.seconds() {
            // run the factor epochs up to the end of data
            let prev = self.last_factor_epoch;
            if data_end.since(prev) > 1e-3 {
                self.stage_factors(prev, data_end, true);
                self.last_factor_epoch = data_end;
            }
        }
        let appended = self.window.trajectory.control_point_count() as f64;
        let duration = data_end.since(self.t0).max(1e-9);
        let mean_density = appended / duration;

        // trailing knots so the spline covers the full data span
        let last_span = {
            let k = self.window.trajectory.knots().raw();
            (k[k.len() - 1] - k[k.len() - 2]).max(0.05)
        };
        for _ in 0..3 {
            let k = self
                .window
                .trajectory
                .knots()
                .raw()
                .last()
                .copied()
                .unwrap();
            self.append_control_point(Timestamp::new(k + last_span));
        }
        // flush whatever is now supported and run the final optimization
        let knots = self.window.trajectory.knots();
        let (lo, hi) = (knots.support_start(), knots.support_end());
        let mut staged = std::mem::take(&mut self.staged);
        staged.retain(|b| {
            let (t_start, t_end) = b.times();
            if t_start.seconds() >= lo && t_end.seconds() <= hi {
                self.window.blocks.push(b.clone());
                false
            } else {
                true
            }
        });
        if !self.window.blocks.is_empty() && self.window.active_count() > 0 {
            let started = Instant::now();
            let report = self.window.optimize(&self.cfg.solver)?;
            self.windows.push(WindowRecord {
                t: data_end.seconds(),
                iterations: report.iterations,
                initial_cost: report.initial_cost,
                final_cost: report.final_cost,
                window_control_points: self.window.active_count(),
                inserted_control_points: 0,
                blocks: self.window.blocks.len(),
                duration_ms: started.elapsed().as_secs_f64() * 1e3,
                rank_deficient: report.rank_deficient,
            });
        }

        // export the continuous estimate
        let knots = self.window.trajectory.knots();
        let lo = knots.support_start().max(self.t0.seconds());
        let hi = knots.support_end().min(data_end.seconds());
        let mut estimate = Vec::new();
        if hi.is_finite() && hi > lo {
            let n = ((hi - lo) * self.cfg.export.query_hz).floor() as usize;
            for i in 0..=n {
                let t = Timestamp::new(lo + i as f64 / self.cfg.export.query_hz);
                if let Ok(pose) = self.window.trajectory.pose(t) {
                    estimate.push(EstimateSample {
                        t: t.seconds(),
                        x: pose.translation.x,
                        y: pose.translation.y,
                        z: pose.translation.z,
                        yaw: log_map(&pose.rotation).z,
                    });
                }
            }
        }
        if estimate.is_empty() {
            return Err(PipelineError::Numerical(
                "no evaluable trajectory span was produced".into(),
            ));
        }
        Ok(PipelineOutput {
            estimate,
            windows: self.windows,
            knots: self.knot_log,
            virtual_anchors: self.va_log,
            gates: self.gates,
            gate_log: self.gate_log,
            trajectory: self.window.trajectory,
            mean_density,
        })
    }
}
