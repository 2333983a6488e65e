//! Sensor-fusion-in-the-loop simulator for autonomous dozer grading under
//! localization uncertainty.
//!
//! The crate synthesizes ground-truth trajectories and noisy inertial/aiding
//! measurements, fuses them with a strapdown INS and an error-state EKF,
//! drives a heightmap sandbox through a pluggable waypoint policy, and
//! quantifies how localization noise degrades grading performance while
//! exporting uncertainty-augmented observation datasets.
//!
//! Module map:
//! - [`geometry`]: Euler/DCM/quaternion math and attitude interpolation.
//! - [`trajectory`]: ground-truth leg synthesis and IMU increment inversion.
//! - [`noise`]: seeded corruption of increments, initial conditions, and
//!   aiding measurements.
//! - [`ins`]: strapdown mechanization with bias-compensation feedback.
//! - [`eskf`]: the 15-state error-state Kalman filter and rollout fusion.
//! - [`terrain`]: heightmap sandbox, blade-sand interaction, grade metrics.
//! - [`env`]: POMDP assembly — observation rendering, augmentation sampling,
//!   the closed-loop episode, and dataset export.
//! - [`policy`]: the waypoint-policy interface, heuristic baseline, replay
//!   adapter, and the low-level follower.
//! - [`harness`]: scenario presets, seeded batch rollouts, summaries.

pub mod env;
pub mod eskf;
pub mod geometry;
pub mod harness;
pub mod ins;
pub mod noise;
pub mod policy;
pub mod terrain;
pub mod trajectory;

/// Standard gravity (m/s^2) used throughout unless overridden in config.
pub const STANDARD_GRAVITY: f64 = 9.80665;
