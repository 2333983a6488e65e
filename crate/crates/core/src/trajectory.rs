//! Ground-truth trajectory synthesis for grading legs and inversion of those
//! trajectories into clean IMU increments.
//!
//! A leg is either a straight constant-speed drive, a rotation in place at a
//! constant turn rate, or both combined. Positions interpolate linearly along
//! the segment; attitudes interpolate with the endpoint-exact quaternion
//! scheme so a leg actually arrives at its terminal attitude. Increments are
//! obtained by first-order differencing (velocity from positions, rotation
//! from consecutive attitudes) with gravity folded into the velocity
//! increment, which makes the strapdown integration reproduce the inputs
//! exactly when started from the true initial conditions.

use crate::geometry::{
    interpolate_attitude, Dcm, EulerAngles, GeometryError, InterpolationVariant, Quaternion,
};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryError {
    /// Leg with no positional extent and identical attitudes.
    DegenerateLeg,
    /// Sample spacing varies by more than 1e-9 s.
    NonUniformSampling { index: usize, dt: f64, expected: f64 },
    /// Fewer than two samples.
    TooShort,
    Geometry(GeometryError),
}

impl fmt::Display for TrajectoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrajectoryError::DegenerateLeg => {
                write!(f, "leg start and end coincide in position and attitude")
            }
            TrajectoryError::NonUniformSampling {
                index,
                dt,
                expected,
            } => write!(
                f,
                "non-uniform sampling at index {index}: dt = {dt}, expected {expected}"
            ),
            TrajectoryError::TooShort => write!(f, "trajectory needs at least two samples"),
            TrajectoryError::Geometry(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrajectoryError {}

impl From<GeometryError> for TrajectoryError {
    fn from(e: GeometryError) -> Self {
        TrajectoryError::Geometry(e)
    }
}

/// Dozer pose: navigation-frame position (m) plus attitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub p: Vector3<f64>,
    pub att: EulerAngles,
}

impl Pose {
    pub fn new(p: Vector3<f64>, att: EulerAngles) -> Self {
        Pose { p, att }
    }

    pub fn origin() -> Self {
        Pose {
            p: Vector3::zeros(),
            att: EulerAngles::ZERO,
        }
    }

    /// Planar pose helper: position (x, y) at height 0 with the given yaw.
    pub fn planar(x: f64, y: f64, psi: f64) -> Self {
        Pose {
            p: Vector3::new(x, y, 0.0),
            att: EulerAngles::new(psi, 0.0, 0.0),
        }
    }
}

/// One ground-truth sample: time, pose, and navigation-frame velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub pose: Pose,
    pub v: Vector3<f64>,
}

/// Body-frame angular and velocity increments over one sample interval.
///
/// `q_t` is the yaw-pitch-roll triple of the incremental rotation; `q_v` is
/// the integrated specific force (gravity-compensated velocity change).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuIncrements {
    pub q_t: Vector3<f64>,
    pub q_v: Vector3<f64>,
    pub dt: f64,
}

/// Kinematic limits and sampling rate for leg generation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LegSpec {
    /// Drive speed (m/s).
    pub speed: f64,
    /// Rotation-in-place rate (rad/s).
    pub turn_rate: f64,
    /// Sample rate (Hz).
    pub rate: f64,
    /// Positional extent below which a leg counts as rotation-only (m).
    pub min_distance: f64,
}

impl Default for LegSpec {
    fn default() -> Self {
        LegSpec {
            speed: 0.4,
            turn_rate: std::f64::consts::FRAC_PI_2,
            rate: 100.0,
            min_distance: 0.025,
        }
    }
}

/// Generate the samples of one leg from `start` to `end`.
///
/// The returned samples are the half-open interval `(start, end]`: the first
/// sample sits one `dt` after the start so that legs chain without duplicate
/// boundary samples. Duration is `distance/speed` for drives and
/// `|heading change|/turn_rate` for rotation-only legs (the longer of the two
/// when the leg both moves and turns).
pub fn generate_leg_trajectory(
    start: &Pose,
    end: &Pose,
    spec: &LegSpec,
) -> Result<Vec<TrajectorySample>, TrajectoryError> {
    assert!(spec.rate >= 1.0, "rate must be at least 1 Hz");
    assert!(spec.speed > 0.0, "speed must be positive");
    assert!(spec.turn_rate > 0.0, "turn rate must be positive");

    let delta_p = end.p - start.p;
    let distance = delta_p.norm();
    let q1 = Quaternion::from_euler(&start.att);
    let q2 = Quaternion::from_euler(&end.att);
    let same_attitude = (q1.real() - q2.real()).abs() < 1e-12
        && (q1.imaginary() - q2.imaginary()).norm() < 1e-12;
    if distance < spec.min_distance && same_attitude {
        return Err(TrajectoryError::DegenerateLeg);
    }

    let rel = crate::geometry::quat_mul(&q1.conjugate(), &q2);
    let angle = 2.0 * rel.imaginary().norm().atan2(rel.real());
    let duration = (distance / spec.speed).max(angle.abs() / spec.turn_rate);
    let dt = 1.0 / spec.rate;
    let n = (duration * spec.rate).round().max(1.0) as usize;

    // Attitude samples at fractions k/n, k = 0..=n; element 0 is the start
    // attitude and element n lands exactly on the end attitude.
    let quats = interpolate_attitude(&q1, &q2, n + 1, InterpolationVariant::RelativeRotation)?;

    let velocity = if distance > 0.0 {
        delta_p / (n as f64 * dt)
    } else {
        Vector3::zeros()
    };

    let mut samples = Vec::with_capacity(n);
    for k in 1..=n {
        let frac = k as f64 / n as f64;
        samples.push(TrajectorySample {
            t: k as f64 * dt,
            pose: Pose {
                p: start.p + frac * delta_p,
                att: quats[k].to_euler()?,
            },
            v: velocity,
        });
    }
    Ok(samples)
}

/// A multi-leg tour: the initial sample followed by a rotation leg and a
/// drive leg per waypoint, with continuous timestamps.
pub fn plan_tour(
    start: &Pose,
    waypoints: &[(f64, f64)],
    spec: &LegSpec,
) -> Result<Vec<TrajectorySample>, TrajectoryError> {
    let mut out = vec![TrajectorySample {
        t: 0.0,
        pose: *start,
        v: Vector3::zeros(),
    }];
    let mut cursor = *start;
    let mut t0 = 0.0;
    for &(wx, wy) in waypoints {
        let target = Vector3::new(wx, wy, cursor.p.z);
        let heading = (wy - cursor.p.y).atan2(wx - cursor.p.x);
        let faced = Pose::new(cursor.p, EulerAngles::new(heading, 0.0, 0.0));
        // Rotation in place, skipped when already facing the waypoint.
        if (crate::geometry::wrap_angle(heading - cursor.att.psi)).abs() > 1e-9 {
            for s in generate_leg_trajectory(&cursor, &faced, spec)? {
                out.push(TrajectorySample {
                    t: t0 + s.t,
                    ..s
                });
            }
            t0 = out.last().unwrap().t;
            cursor = faced;
        }
        let arrived = Pose::new(target, faced.att);
        if (target - cursor.p).norm() >= spec.min_distance {
            for s in generate_leg_trajectory(&cursor, &arrived, spec)? {
                out.push(TrajectorySample {
                    t: t0 + s.t,
                    ..s
                });
            }
            t0 = out.last().unwrap().t;
            cursor = arrived;
        }
    }
    Ok(out)
}

/// Streaming inversion of trajectory samples into IMU increments.
///
/// Keeps the previous sample and backward-difference velocity so the
/// closed-loop environment can feed it one sample at a time. The velocity at
/// the very first sample is taken from the sample itself; it must match the
/// initial condition handed to the strapdown integrator for exact round
/// trips.
#[derive(Debug, Clone)]
pub struct IncrementGenerator {
    gravity: f64,
    prev: Option<(TrajectorySample, Vector3<f64>)>,
}

impl IncrementGenerator {
    pub fn new(gravity: f64) -> Self {
        IncrementGenerator {
            gravity,
            prev: None,
        }
    }

    /// Push the next sample; returns the increment spanning the previous
    /// sample to this one (`None` for the first sample).
    pub fn push(
        &mut self,
        sample: &TrajectorySample,
    ) -> Result<Option<ImuIncrements>, TrajectoryError> {
        let Some((prev, v_prev)) = self.prev.take() else {
            self.prev = Some((*sample, sample.v));
            return Ok(None);
        };
        let dt = sample.t - prev.t;
        if dt <= 0.0 {
            return Err(TrajectoryError::NonUniformSampling {
                index: 0,
                dt,
                expected: 0.0,
            });
        }
        let v = (sample.pose.p - prev.pose.p) / dt;
        let f_k = Dcm::from_euler(&sample.pose.att);
        let f_prev = Dcm::from_euler(&prev.pose.att);
        let q_t = f_k.compose(&f_prev.transpose()).to_euler()?.as_vector();
        let dv_body = f_k.rotate(&(v - v_prev));
        let q_v = dv_body - f_k.rotate(&Vector3::new(0.0, 0.0, self.gravity * dt));
        self.prev = Some((*sample, v));
        Ok(Some(ImuIncrements { q_t, q_v, dt }))
    }
}

/// Invert a uniformly sampled trajectory into clean IMU increments.
///
/// Output length is `traj.len() - 1`; the sample-0 velocity is carried by the
/// initial conditions, not by an increment.
pub fn generate_imu_increments(
    traj: &[TrajectorySample],
    gravity: f64,
) -> Result<Vec<ImuIncrements>, TrajectoryError> {
    if traj.len() < 2 {
        return Err(TrajectoryError::TooShort);
    }
    let dt0 = traj[1].t - traj[0].t;
    for (i, pair) in traj.windows(2).enumerate() {
        let dt = pair[1].t - pair[0].t;
        if (dt - dt0).abs() > 1e-9 {
            return Err(TrajectoryError::NonUniformSampling {
                index: i + 1,
                dt,
                expected: dt0,
            });
        }
    }
    let mut gen = IncrementGenerator::new(gravity);
    let mut out = Vec::with_capacity(traj.len() - 1);
    for s in traj {
        if let Some(inc) = gen.push(s)? {
            out.push(inc);
        }
    }
    Ok(out)
}

/// Write samples as CSV: `t,x,y,z,psi,theta,phi,vx,vy,vz`, SI units.
pub fn write_trajectory_csv(path: &Path, traj: &[TrajectorySample]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "t,x,y,z,psi,theta,phi,vx,vy,vz")?;
    for s in traj {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            s.t,
            s.pose.p.x,
            s.pose.p.y,
            s.pose.p.z,
            s.pose.att.psi,
            s.pose.att.theta,
            s.pose.att.phi,
            s.v.x,
            s.v.y,
            s.v.z
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::STANDARD_GRAVITY;
    use approx::assert_relative_eq;

    fn spec_100hz() -> LegSpec {
        LegSpec {
            speed: 1.0,
            turn_rate: std::f64::consts::FRAC_PI_2,
            rate: 100.0,
            min_distance: 0.025,
        }
    }

    #[test]
    fn rotation_only_leg() {
        // Pure 90 degree heading change at pi/2 rad/s: one second, 100 samples.
        let start = Pose::planar(1.0, 2.0, 0.0);
        let end = Pose::planar(1.0, 2.0, std::f64::consts::FRAC_PI_2);
        let traj = generate_leg_trajectory(&start, &end, &spec_100hz()).unwrap();
        assert_eq!(traj.len(), 100);
        for s in &traj {
            assert_eq!(s.pose.p, start.p);
            assert_eq!(s.v, Vector3::zeros());
        }
        // Headings strictly increase toward the end attitude.
        let mut prev = start.att.psi;
        for s in &traj {
            assert!(s.pose.att.psi > prev);
            prev = s.pose.att.psi;
        }
        assert_relative_eq!(
            traj.last().unwrap().pose.att.psi,
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn straight_leg_spacing() {
        // 10 m at 1 m/s, 100 Hz: 1000 samples spaced 0.01 m in x.
        let start = Pose::planar(0.0, 0.0, 0.0);
        let end = Pose::planar(10.0, 0.0, 0.0);
        let traj = generate_leg_trajectory(&start, &end, &spec_100hz()).unwrap();
        assert_eq!(traj.len(), 1000);
        for (k, s) in traj.iter().enumerate() {
            assert_relative_eq!(s.pose.p.x, 0.01 * (k + 1) as f64, epsilon = 1e-9);
            assert_relative_eq!(s.v.x, 1.0, epsilon = 1e-12);
        }
        assert_relative_eq!(traj.last().unwrap().t, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_leg_rejected() {
        let p = Pose::planar(1.0, 1.0, 0.3);
        let err = generate_leg_trajectory(&p, &p, &spec_100hz());
        assert!(matches!(err, Err(TrajectoryError::DegenerateLeg)));
    }

    #[test]
    fn stationary_increments_are_gravity_only() {
        let pose = Pose::planar(0.0, 0.0, 0.4);
        let traj: Vec<_> = (0..10)
            .map(|k| TrajectorySample {
                t: k as f64 * 0.01,
                pose,
                v: Vector3::zeros(),
            })
            .collect();
        let incs = generate_imu_increments(&traj, STANDARD_GRAVITY).unwrap();
        assert_eq!(incs.len(), 9);
        let f = Dcm::from_euler(&pose.att);
        let expected = -f.rotate(&Vector3::new(0.0, 0.0, STANDARD_GRAVITY * 0.01));
        for inc in incs {
            assert!(inc.q_t.norm() < 1e-12);
            assert!((inc.q_v - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_velocity_increments_match_stationary_gravity_term() {
        let start = Pose::planar(0.0, 0.0, 0.0);
        let end = Pose::planar(5.0, 0.0, 0.0);
        let traj = generate_leg_trajectory(&start, &end, &spec_100hz()).unwrap();
        let incs = generate_imu_increments(&traj, STANDARD_GRAVITY).unwrap();
        let expected = Vector3::new(0.0, 0.0, -STANDARD_GRAVITY * 0.01);
        for inc in incs {
            assert!(inc.q_t.norm() < 1e-12);
            assert!((inc.q_v - expected).norm() < 1e-10);
        }
    }

    #[test]
    fn non_uniform_sampling_rejected() {
        let pose = Pose::origin();
        let mut traj: Vec<_> = (0..5)
            .map(|k| TrajectorySample {
                t: k as f64 * 0.01,
                pose,
                v: Vector3::zeros(),
            })
            .collect();
        traj[3].t += 1e-6;
        let err = generate_imu_increments(&traj, STANDARD_GRAVITY);
        assert!(matches!(
            err,
            Err(TrajectoryError::NonUniformSampling { .. })
        ));
    }

    #[test]
    fn gravity_term_scales_linearly_with_dt() {
        let pose = Pose::planar(0.0, 0.0, 0.2);
        let make = |dt: f64| {
            let traj: Vec<_> = (0..4)
                .map(|k| TrajectorySample {
                    t: k as f64 * dt,
                    pose,
                    v: Vector3::zeros(),
                })
                .collect();
            generate_imu_increments(&traj, STANDARD_GRAVITY).unwrap()[0]
        };
        let full = make(0.01);
        let half = make(0.005);
        assert_relative_eq!(half.q_v.norm() * 2.0, full.q_v.norm(), epsilon = 1e-9);
    }

    #[test]
    fn tour_timestamps_are_strictly_increasing_and_uniform() {
        let spec = spec_100hz();
        let traj = plan_tour(
            &Pose::planar(0.0, 0.0, 0.0),
            &[(2.0, 0.0), (2.0, 2.0)],
            &spec,
        )
        .unwrap();
        let dt = 1.0 / spec.rate;
        for pair in traj.windows(2) {
            assert_relative_eq!(pair[1].t - pair[0].t, dt, epsilon = 1e-9);
        }
        let last = traj.last().unwrap();
        assert_relative_eq!(last.pose.p.x, 2.0, epsilon = 1e-9);
        assert_relative_eq!(last.pose.p.y, 2.0, epsilon = 1e-9);
    }
}
