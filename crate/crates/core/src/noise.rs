//! Seeded stochastic error injection for IMU increments, initial conditions,
//! and aiding measurements.
//!
//! Increment corruption adds a constant bias scaled by the sample interval
//! plus a random-walk term scaled by sqrt(dt). Initial-condition errors are
//! fixed offsets (additive for position and velocity, a multiplicative DCM
//! composition for attitude). Aiding errors default to zero-mean Gaussians
//! with the configured per-axis standard deviations; a fixed-offset mode
//! reproduces the literal constant-error reading.
//!
//! Reproducibility: each rollout owns a [`RolloutRng`] whose IMU, aiding, and
//! environment streams are independent ChaCha streams derived from one seed,
//! so draw order in one stream never perturbs another.

use crate::geometry::{Dcm, EulerAngles};
use crate::trajectory::{ImuIncrements, Pose};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// How aiding-measurement errors are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AidingNoiseMode {
    /// Zero-mean Gaussian with the configured values as per-axis std.
    #[default]
    Gaussian,
    /// The configured values added as constant offsets every measurement.
    FixedOffset,
}

/// Error magnitudes for one scenario, all SI (m, m/s, m/s^2, rad, rad/s).
///
/// Attitude triples are ordered `(psi, theta, phi)` = yaw, pitch, roll, and
/// gyro quantities refer to the same components of the angular increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Accelerometer constant bias (m/s^2).
    pub accel_bias: Vector3<f64>,
    /// Gyroscope constant bias (rad/s).
    pub gyro_bias: Vector3<f64>,
    /// Accelerometer random-walk density: std of the per-sample velocity
    /// increment noise is `accel_rw * sqrt(dt)` (m/s per sqrt(s)).
    pub accel_rw: Vector3<f64>,
    /// Gyroscope random-walk density (rad per sqrt(s)).
    pub gyro_rw: Vector3<f64>,
    /// Initial position error offset (m).
    pub ic_pos_err: Vector3<f64>,
    /// Initial velocity error offset (m/s).
    pub ic_vel_err: Vector3<f64>,
    /// Initial attitude error `(psi, theta, phi)` (rad).
    pub ic_att_err: Vector3<f64>,
    /// Aiding position noise std (m).
    pub aiding_pos_std: Vector3<f64>,
    /// Aiding attitude noise std `(psi, theta, phi)` (rad).
    pub aiding_att_std: Vector3<f64>,
    pub aiding_mode: AidingNoiseMode,
    /// Base RNG seed for the rollout streams.
    pub seed: u64,
}

impl NoiseConfig {
    /// All-zero noise: every corruption becomes the identity.
    pub fn zero(seed: u64) -> Self {
        NoiseConfig {
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_rw: Vector3::zeros(),
            gyro_rw: Vector3::zeros(),
            ic_pos_err: Vector3::zeros(),
            ic_vel_err: Vector3::zeros(),
            ic_att_err: Vector3::zeros(),
            aiding_pos_std: Vector3::zeros(),
            aiding_att_std: Vector3::zeros(),
            aiding_mode: AidingNoiseMode::Gaussian,
            seed,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.accel_bias == Vector3::zeros()
            && self.gyro_bias == Vector3::zeros()
            && self.accel_rw == Vector3::zeros()
            && self.gyro_rw == Vector3::zeros()
            && self.ic_pos_err == Vector3::zeros()
            && self.ic_vel_err == Vector3::zeros()
            && self.ic_att_err == Vector3::zeros()
            && self.aiding_pos_std == Vector3::zeros()
            && self.aiding_att_std == Vector3::zeros()
    }
}

/// Per-rollout RNG bundle with documented stream order: stream 0 drives IMU
/// corruption, stream 1 aiding corruption, stream 2 the environment
/// (episode spawning and observation sampling).
#[derive(Debug, Clone)]
pub struct RolloutRng {
    pub imu: ChaCha8Rng,
    pub aiding: ChaCha8Rng,
    pub env: ChaCha8Rng,
}

impl RolloutRng {
    pub fn from_seed(seed: u64) -> Self {
        let mk = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng
        };
        RolloutRng {
            imu: mk(0),
            aiding: mk(1),
            env: mk(2),
        }
    }
}

/// Derive the seed of rollout `index` from a scenario base seed
/// (SplitMix64-style mixing so neighbouring indices decorrelate).
pub fn rollout_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian3(std: &Vector3<f64>, rng: &mut impl Rng) -> Vector3<f64> {
    // Always three draws so the stream layout is independent of which axes
    // happen to be zero.
    let w = Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    Vector3::new(std.x * w.x, std.y * w.y, std.z * w.z)
}

/// Corrupt one IMU increment: bias times dt plus random walk times sqrt(dt).
pub fn corrupt_imu(inc: &ImuIncrements, cfg: &NoiseConfig, rng: &mut impl Rng) -> ImuIncrements {
    if cfg.accel_bias == Vector3::zeros()
        && cfg.gyro_bias == Vector3::zeros()
        && cfg.accel_rw == Vector3::zeros()
        && cfg.gyro_rw == Vector3::zeros()
    {
        return *inc;
    }
    let sqrt_dt = inc.dt.sqrt();
    let wv = gaussian3(&cfg.accel_rw, rng);
    let wt = gaussian3(&cfg.gyro_rw, rng);
    ImuIncrements {
        q_v: inc.q_v + cfg.accel_bias * inc.dt + sqrt_dt * wv,
        q_t: inc.q_t + cfg.gyro_bias * inc.dt + sqrt_dt * wt,
        dt: inc.dt,
    }
}

/// Apply the fixed initial-condition errors to a true pose and velocity.
///
/// Position and velocity offsets are additive; the attitude error composes
/// multiplicatively: `att_e = h(F(att) · F(delta))`.
pub fn corrupt_ic(truth: &Pose, v: &Vector3<f64>, cfg: &NoiseConfig) -> (Pose, Vector3<f64>) {
    let att = if cfg.ic_att_err == Vector3::zeros() {
        truth.att
    } else {
        let d = Dcm::from_euler(&truth.att)
            .compose(&Dcm::from_euler(&EulerAngles::from_vector(&cfg.ic_att_err)));
        d.to_euler()
            .expect("IC attitude error pushed pitch into gimbal lock")
    };
    (
        Pose {
            p: truth.p + cfg.ic_pos_err,
            att,
        },
        v + cfg.ic_vel_err,
    )
}

/// Synthesize one noisy aiding pose measurement from the true pose.
///
/// Position noise is additive. Attitude noise composes the same way as the
/// initial-condition error; the published formulation transposes the true
/// attitude there, but doing so negates the measured attitude even at zero
/// noise, so the untransposed composition is used.
pub fn corrupt_aiding(truth: &Pose, cfg: &NoiseConfig, rng: &mut impl Rng) -> Pose {
    let (dp, datt) = match cfg.aiding_mode {
        AidingNoiseMode::Gaussian => (
            gaussian3(&cfg.aiding_pos_std, rng),
            gaussian3(&cfg.aiding_att_std, rng),
        ),
        AidingNoiseMode::FixedOffset => (cfg.aiding_pos_std, cfg.aiding_att_std),
    };
    let att = if datt == Vector3::zeros() {
        truth.att
    } else {
        Dcm::from_euler(&truth.att)
            .compose(&Dcm::from_euler(&EulerAngles::from_vector(&datt)))
            .to_euler()
            .expect("aiding attitude noise pushed pitch into gimbal lock")
    };
    Pose {
        p: truth.p + dp,
        att,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_inc() -> ImuIncrements {
        ImuIncrements {
            q_t: Vector3::new(0.001, -0.002, 0.0005),
            q_v: Vector3::new(0.01, 0.0, -0.098),
            dt: 0.01,
        }
    }

    #[test]
    fn zero_config_is_identity_on_imu() {
        let cfg = NoiseConfig::zero(1);
        let mut rng = RolloutRng::from_seed(1).imu;
        let inc = sample_inc();
        let out = corrupt_imu(&inc, &cfg, &mut rng);
        assert_eq!(out, inc);
    }

    #[test]
    fn constant_bias_shifts_by_bias_times_dt() {
        let mut cfg = NoiseConfig::zero(1);
        cfg.accel_bias = Vector3::new(0.1, 0.0, 0.0);
        let mut rng = RolloutRng::from_seed(1).imu;
        let inc = sample_inc();
        let out = corrupt_imu(&inc, &cfg, &mut rng);
        assert_relative_eq!(out.q_v.x - inc.q_v.x, 0.001, epsilon = 1e-15);
        assert_eq!(out.q_v.y, inc.q_v.y);
        assert_eq!(out.q_t, inc.q_t);
    }

    #[test]
    fn random_walk_empirical_std() {
        let mut cfg = NoiseConfig::zero(7);
        cfg.accel_rw = Vector3::new(0.02, 0.02, 0.02);
        let mut rng = RolloutRng::from_seed(7).imu;
        let inc = sample_inc();
        let n = 100_000;
        let mut sum = Vector3::zeros();
        let mut sum_sq = Vector3::zeros();
        for _ in 0..n {
            let noise = corrupt_imu(&inc, &cfg, &mut rng).q_v - inc.q_v;
            sum += noise;
            sum_sq += noise.component_mul(&noise);
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean.component_mul(&mean);
        let expected = 0.02 * (0.01f64).sqrt();
        for i in 0..3 {
            assert_relative_eq!(var[i].sqrt(), expected, max_relative = 0.03);
            assert!(mean[i].abs() < 3.0 * expected / (n as f64).sqrt() * 3.0);
        }
    }

    #[test]
    fn zero_ic_errors_are_identity() {
        let cfg = NoiseConfig::zero(1);
        let pose = Pose::planar(1.0, 2.0, 0.3);
        let v = Vector3::new(0.4, 0.0, 0.0);
        let (p2, v2) = corrupt_ic(&pose, &v, &cfg);
        assert_eq!(p2, pose);
        assert_eq!(v2, v);
    }

    #[test]
    fn paper_low_noise_ic_values() {
        // (5,5,5) cm, (1,1,1) cm/s, yaw/pitch/roll (5,4,4) deg.
        let mut cfg = NoiseConfig::zero(1);
        cfg.ic_pos_err = Vector3::new(0.05, 0.05, 0.05);
        cfg.ic_vel_err = Vector3::new(0.01, 0.01, 0.01);
        cfg.ic_att_err = Vector3::new(
            5.0f64.to_radians(),
            4.0f64.to_radians(),
            4.0f64.to_radians(),
        );
        let pose = Pose::origin();
        let (p2, v2) = corrupt_ic(&pose, &Vector3::zeros(), &cfg);
        assert_relative_eq!(p2.p.x, 0.05);
        assert_relative_eq!(v2.x, 0.01);
        // On a zero attitude the multiplicative composition is exact.
        assert_relative_eq!(p2.att.psi, 5.0f64.to_radians(), epsilon = 1e-12);
        assert_relative_eq!(p2.att.theta, 4.0f64.to_radians(), epsilon = 1e-12);
        assert_relative_eq!(p2.att.phi, 4.0f64.to_radians(), epsilon = 1e-12);
    }

    #[test]
    fn small_yaw_error_on_zero_attitude() {
        let mut cfg = NoiseConfig::zero(1);
        let eps = 1e-4;
        cfg.ic_att_err = Vector3::new(eps, 0.0, 0.0);
        let (p2, _) = corrupt_ic(&Pose::origin(), &Vector3::zeros(), &cfg);
        assert_relative_eq!(p2.att.psi, eps, epsilon = 1e-12);
        assert!(p2.att.theta.abs() < 1e-12);
        assert!(p2.att.phi.abs() < 1e-12);
    }

    #[test]
    fn yaw_ic_error_adds_on_yaw_only_attitude() {
        let mut cfg = NoiseConfig::zero(1);
        cfg.ic_att_err = Vector3::new(0.1, 0.0, 0.0);
        let (p2, _) = corrupt_ic(&Pose::planar(0.0, 0.0, 0.3), &Vector3::zeros(), &cfg);
        assert_relative_eq!(p2.att.psi, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn zero_aiding_noise_keeps_pose() {
        let cfg = NoiseConfig::zero(1);
        let mut rng = RolloutRng::from_seed(1).aiding;
        let pose = Pose::planar(0.7, -0.2, 1.1);
        assert_eq!(corrupt_aiding(&pose, &cfg, &mut rng), pose);
    }

    #[test]
    fn aiding_noise_empirical_moments() {
        // The low-measurement-noise setting: (5,5,5) cm position,
        // yaw/pitch/roll (5,1,1) deg attitude.
        let mut cfg = NoiseConfig::zero(3);
        cfg.aiding_pos_std = Vector3::new(0.05, 0.05, 0.05);
        cfg.aiding_att_std = Vector3::new(
            5.0f64.to_radians(),
            1.0f64.to_radians(),
            1.0f64.to_radians(),
        );
        let mut rng = RolloutRng::from_seed(3).aiding;
        let pose = Pose::origin();
        let n = 100_000;
        let mut sum_p = Vector3::zeros();
        let mut sq_p = Vector3::zeros();
        let mut sq_yaw = 0.0;
        for _ in 0..n {
            let m = corrupt_aiding(&pose, &cfg, &mut rng);
            sum_p += m.p;
            sq_p += m.p.component_mul(&m.p);
            sq_yaw += m.att.psi * m.att.psi;
        }
        let mean = sum_p / n as f64;
        for i in 0..3 {
            let std = (sq_p[i] / n as f64 - mean[i] * mean[i]).sqrt();
            assert_relative_eq!(std, 0.05, max_relative = 0.03);
        }
        let yaw_std = (sq_yaw / n as f64).sqrt();
        assert_relative_eq!(yaw_std, 5.0f64.to_radians(), max_relative = 0.03);
    }

    #[test]
    fn fixed_offset_mode_adds_constants() {
        let mut cfg = NoiseConfig::zero(1);
        cfg.aiding_pos_std = Vector3::new(0.08, 0.0, 0.0);
        cfg.aiding_mode = AidingNoiseMode::FixedOffset;
        let mut rng = RolloutRng::from_seed(1).aiding;
        let m = corrupt_aiding(&Pose::origin(), &cfg, &mut rng);
        assert_eq!(m.p, Vector3::new(0.08, 0.0, 0.0));
    }

    #[test]
    fn same_seed_same_stream() {
        let mut cfg = NoiseConfig::zero(42);
        cfg.accel_rw = Vector3::new(0.01, 0.01, 0.01);
        cfg.aiding_pos_std = Vector3::new(0.05, 0.05, 0.05);
        let inc = sample_inc();
        let run = |seed| {
            let mut rng = RolloutRng::from_seed(seed);
            let a: Vec<_> = (0..50).map(|_| corrupt_imu(&inc, &cfg, &mut rng.imu)).collect();
            let b: Vec<_> = (0..50)
                .map(|_| corrupt_aiding(&Pose::origin(), &cfg, &mut rng.aiding))
                .collect();
            (a, b)
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42).0, run(43).0);
    }

    #[test]
    fn streams_are_independent_of_draw_order() {
        let mut cfg = NoiseConfig::zero(9);
        cfg.accel_rw = Vector3::new(0.01, 0.01, 0.01);
        cfg.aiding_pos_std = Vector3::new(0.05, 0.05, 0.05);
        let inc = sample_inc();
        // Interleaved vs sequential draws must give identical streams.
        let mut r1 = RolloutRng::from_seed(9);
        let mut imu_a = Vec::new();
        let mut aid_a = Vec::new();
        for _ in 0..10 {
            imu_a.push(corrupt_imu(&inc, &cfg, &mut r1.imu));
            aid_a.push(corrupt_aiding(&Pose::origin(), &cfg, &mut r1.aiding));
        }
        let mut r2 = RolloutRng::from_seed(9);
        let imu_b: Vec<_> = (0..10).map(|_| corrupt_imu(&inc, &cfg, &mut r2.imu)).collect();
        let aid_b: Vec<_> = (0..10)
            .map(|_| corrupt_aiding(&Pose::origin(), &cfg, &mut r2.aiding))
            .collect();
        assert_eq!(imu_a, imu_b);
        assert_eq!(aid_a, aid_b);
    }

    #[test]
    fn rollout_seeds_decorrelate() {
        let s: Vec<u64> = (0..10).map(|i| rollout_seed(123, i)).collect();
        let mut sorted = s.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
    }
}
