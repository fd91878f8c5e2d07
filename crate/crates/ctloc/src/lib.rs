//! Continuous-time UWB/IMU/odometer localization on non-uniform B-splines.
//!
//! The crate estimates a ground robot's trajectory as a split cumulative
//! cubic B-spline (translation in R³, rotation in SO(3)) over knots whose
//! spacing adapts to motion variation. Short-term motion priors come from
//! an innovation-gated IMU/odometer EKF; virtual anchors derived from UWB
//! ranges and those priors restore observability when only one or two
//! physical anchors are reachable; an adaptive sliding-window factor graph
//! refines the control points. A deterministic simulator, dataset format,
//! and APE metrics make the whole pipeline testable without hardware.

pub mod backend;
pub mod baseline;
pub mod config;
pub mod dataset;
pub mod ekf;
pub mod geom;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod sim;
pub mod spline;
pub mod va;
