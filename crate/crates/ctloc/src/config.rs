//! Run configuration: every tunable of the pipeline in one TOML tree,
//! shipped with the experiment defaults.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{LmConfig, WindowPolicy};
use crate::ekf::InnovationParams;
use crate::metrics::AlignMode;
use crate::sim::SensorNoiseConfig;
use crate::spline::KnotBinConfig;
use crate::va::VaConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Ranging-gate settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GatingConfig {
    /// Gate width multiplier γ.
    pub gamma: f64,
    /// Accept everything during the first seconds while the filter
    /// converges.
    pub warmup: f64,
    /// Speed floor inside the gate, m/s.
    pub min_speed: f64,
}

impl Default for GatingConfig {
    fn default() -> Self {
        GatingConfig {
            gamma: 1.25,
            warmup: 2.0,
            min_speed: 0.01,
        }
    }
}

/// IMU/odometer fusion settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Innovation-window exponent scale (accelerometer channel).
    pub alpha_acc: f64,
    /// Innovation-window exponent scale (gyro channel); used by the
    /// yaw-dominated odometer observation.
    pub alpha_gyro: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Maximum innovation-window size ξ.
    pub xi: usize,
    /// Chi-square rejection threshold.
    pub thr: f64,
    /// Convergence rate μ of the window law.
    pub mu: f64,
    /// Odometer observation noise floors.
    pub sigma_yaw: f64,
    pub sigma_displacement: f64,
    /// Planar soft-constraint sigmas.
    pub planar_sigma_z: f64,
    pub planar_sigma_tilt_deg: f64,
    /// Odometer integration interval per filter update, s.
    pub update_interval: f64,
    /// Innovation gating on/off (off = conventional EKF).
    pub adaptive: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha_acc: 1.22e-4,
            alpha_gyro: 3.17e-3,
            lambda_min: 0.56,
            lambda_max: 6.52,
            xi: 50,
            thr: 10.85,
            mu: 0.5,
            sigma_yaw: 0.3_f64.to_radians(),
            sigma_displacement: 0.004,
            planar_sigma_z: 0.01,
            planar_sigma_tilt_deg: 0.5,
            update_interval: 0.25,
            adaptive: true,
        }
    }
}

impl FusionConfig {
    pub fn innovation_params(&self) -> InnovationParams {
        InnovationParams {
            alpha: self.alpha_gyro,
            mu: self.mu,
            xi: self.xi,
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
            thr: if self.adaptive { self.thr } else { f64::INFINITY },
        }
    }
}

/// Knot allocation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KnotConfig {
    /// Key-pose window length `T_i − T_{i−1}`, s.
    pub keypose_interval: f64,
    pub bins: KnotBinConfig,
    /// Adaptive allocation on/off.
    pub adaptive: bool,
    /// Fixed control-point density (points/s) when `adaptive` is off.
    pub uniform_density: f64,
}

impl Default for KnotConfig {
    fn default() -> Self {
        KnotConfig {
            keypose_interval: 1.0,
            bins: KnotBinConfig::default(),
            adaptive: true,
            uniform_density: 1.0,
        }
    }
}

/// Backend factor construction settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Robust loss on range factors; δ = huber_delta_factor · σ_r.
    pub huber: bool,
    pub huber_delta_factor: f64,
    /// Sum per-anchor residuals into one scalar before weighting
    /// (compatibility form).
    pub summed_range_residual: bool,
    /// Ranging-epoch decimation for factor construction, Hz.
    pub range_factor_hz: f64,
    /// Virtual anchors on/off (off = direct anchor ranges only).
    pub virtual_anchors: bool,
    /// Residual sigma floors.
    pub sigma_rot_floor: f64,
    pub sigma_vel_floor: f64,
    pub sigma_pos_floor: f64,
    pub sigma_yaw_floor: f64,
    pub sigma_disp_floor: f64,
    pub sigma_range_floor: f64,
    /// Planar-constraint sigmas on the estimated trajectory.
    pub planar_sigma_z: f64,
    pub planar_sigma_tilt: f64,
    /// Hold sliding (keep the full window) for this long after start, s.
    pub init_hold: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            huber: true,
            huber_delta_factor: 3.0,
            summed_range_residual: false,
            range_factor_hz: 4.0,
            virtual_anchors: true,
            sigma_rot_floor: 5e-3,
            sigma_vel_floor: 5e-3,
            sigma_pos_floor: 5e-3,
            sigma_yaw_floor: 5e-3,
            sigma_disp_floor: 5e-3,
            sigma_range_floor: 5e-3,
            planar_sigma_z: 0.02,
            planar_sigma_tilt: 0.01,
            init_hold: 8.0,
        }
    }
}

/// Estimate export settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportConfig {
    /// Trajectory query rate, Hz.
    pub query_hz: f64,
    pub align: AlignMode,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            query_hz: 10.0,
            align: AlignMode::Se2,
        }
    }
}

/// Full run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub gating: GatingConfig,
    pub fusion: FusionConfig,
    pub knots: KnotConfig,
    pub window: WindowPolicy,
    pub solver: LmConfig,
    pub virtual_anchor: VaConfig,
    pub backend: BackendConfig,
    pub export: ExportConfig,
    /// Sensor noise model assumed by the estimator (and used as the
    /// simulator default).
    pub noise: SensorNoiseConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        if self.gating.gamma < 0.0 {
            return inv(format!("gating.gamma = {} must be ≥ 0", self.gating.gamma));
        }
        if self.fusion.lambda_min >= self.fusion.lambda_max {
            return inv("fusion.lambda_min must be below lambda_max".into());
        }
        if !(0.0 < self.fusion.mu && self.fusion.mu < 1.0) {
            return inv(format!("fusion.mu = {} outside (0, 1)", self.fusion.mu));
        }
        if self.fusion.alpha_gyro <= 0.0 || self.fusion.alpha_acc <= 0.0 {
            return inv("fusion alpha constants must be positive".into());
        }
        if self.fusion.xi < 1 {
            return inv("fusion.xi must be ≥ 1".into());
        }
        if self.knots.keypose_interval <= 0.0 {
            return inv("knots.keypose_interval must be positive".into());
        }
        if self.window.l_min >= self.window.l_max {
            return inv("window.l_min must be below l_max".into());
        }
        if self.window.lambda0 >= self.window.lambda1 {
            return inv("window.lambda0 must be below lambda1".into());
        }
        if self.virtual_anchor.hypothesis_count < 3 {
            return inv("virtual_anchor.hypothesis_count must be ≥ 3".into());
        }
        if self.export.query_hz <= 0.0 {
            return inv("export.query_hz must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.noise.outlier_rate) {
            return inv("noise.outlier_rate must be in [0, 1]".into());
        }
        Ok(())
    }

    pub fn normalized(mut self) -> Self {
        self.knots.bins = self.knots.bins.normalized();
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        let cfg = cfg.normalized();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
