//! Strapdown inertial integration: attitude, velocity, and position
//! propagation from body-frame increments, with bias-compensation feedback
//! from the fusion filter.
//!
//! The mechanization is deliberately minimal for short episodes: Earth
//! rotation is neglected and the integration is rectangular (Euler). The
//! attitude matrix is re-orthonormalized every [`REORTHONORMALIZE_EVERY`]
//! steps to hold the orthonormality drift below 1e-9 over long runs.

use crate::eskf::ErrorState;
use crate::geometry::{Dcm, EulerAngles, GeometryError};
use crate::trajectory::{ImuIncrements, Pose};
use nalgebra::Vector3;

/// Steps between symmetric re-orthogonalizations of the attitude matrix.
pub const REORTHONORMALIZE_EVERY: u64 = 100;

/// Full strapdown integrator state.
#[derive(Debug, Clone)]
pub struct StrapdownState {
    /// Navigation->body attitude matrix.
    pub d_nb: Dcm,
    /// Navigation-frame velocity (m/s).
    pub v: Vector3<f64>,
    /// Navigation-frame position (m).
    pub p: Vector3<f64>,
    /// Time (s).
    pub t: f64,
    /// Estimated accelerometer bias, fed back by the filter (m/s^2).
    pub accel_bias_est: Vector3<f64>,
    /// Estimated gyroscope bias, fed back by the filter (rad/s).
    pub gyro_bias_est: Vector3<f64>,
    steps: u64,
}

impl StrapdownState {
    /// Initialize from the (possibly corrupted) initial conditions; bias
    /// estimates start at zero.
    pub fn init(ic_pose: &Pose, ic_v: &Vector3<f64>) -> Self {
        StrapdownState {
            d_nb: Dcm::from_euler(&ic_pose.att),
            v: *ic_v,
            p: ic_pose.p,
            t: 0.0,
            accel_bias_est: Vector3::zeros(),
            gyro_bias_est: Vector3::zeros(),
            steps: 0,
        }
    }

    /// Advance one sample interval.
    ///
    /// Applies bias compensation to the raw increments, then the attitude,
    /// velocity, and position updates in that order. `gravity` is the local
    /// gravity magnitude (z-down navigation frame).
    pub fn step(&mut self, inc: &ImuIncrements, gravity: f64) {
        debug_assert!(inc.dt > 0.0);
        let q_t = inc.q_t - self.gyro_bias_est * inc.dt;
        let q_v = inc.q_v - self.accel_bias_est * inc.dt;

        let f_inc = Dcm::from_euler(&EulerAngles::from_vector(&q_t));
        self.d_nb = f_inc.compose(&self.d_nb);
        self.steps += 1;
        if self.steps % REORTHONORMALIZE_EVERY == 0 {
            self.d_nb.reorthonormalize();
        }

        let d_bn = self.d_nb.transpose();
        self.v += d_bn.rotate(&q_v) + Vector3::new(0.0, 0.0, gravity * inc.dt);
        self.p += self.v * inc.dt;
        self.t += inc.dt;
    }

    /// Fold a filter correction back into the integrator.
    ///
    /// Position and velocity corrections subtract; the attitude correction
    /// left-composes the small-angle DCM of the attitude error (adding the
    /// error angles for a level vehicle); bias corrections accumulate into
    /// the compensation terms.
    pub fn apply_correction(&mut self, dx: &ErrorState) {
        self.p -= dx.dp();
        self.v -= dx.dv();
        let datt = dx.dpsi();
        if datt != Vector3::zeros() {
            let f = Dcm::from_euler(&EulerAngles::from_vector(&datt));
            self.d_nb = f.compose(&self.d_nb);
            self.d_nb.reorthonormalize();
        }
        self.accel_bias_est += dx.db();
        self.gyro_bias_est += dx.dd();
    }

    /// Current pose; fails only at gimbal lock.
    pub fn pose(&self) -> Result<Pose, GeometryError> {
        Ok(Pose {
            p: self.p,
            att: self.d_nb.to_euler()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{
        generate_imu_increments, generate_leg_trajectory, plan_tour, LegSpec, TrajectorySample,
    };
    use crate::STANDARD_GRAVITY;
    use approx::assert_relative_eq;

    fn stationary_increment(att: &EulerAngles, dt: f64) -> ImuIncrements {
        let f = Dcm::from_euler(att);
        ImuIncrements {
            q_t: Vector3::zeros(),
            q_v: -f.rotate(&Vector3::new(0.0, 0.0, STANDARD_GRAVITY * dt)),
            dt,
        }
    }

    #[test]
    fn init_zero_pose() {
        let s = StrapdownState::init(&Pose::origin(), &Vector3::zeros());
        assert_eq!(*s.d_nb.matrix(), nalgebra::Matrix3::identity());
        assert_eq!(s.p, Vector3::zeros());
        assert_eq!(s.v, Vector3::zeros());
        assert_eq!(s.accel_bias_est, Vector3::zeros());
    }

    #[test]
    fn stationary_equilibrium() {
        let att = EulerAngles::new(0.3, 0.05, -0.1);
        let pose = Pose::new(Vector3::new(1.0, 2.0, 0.0), att);
        let mut s = StrapdownState::init(&pose, &Vector3::zeros());
        let inc = stationary_increment(&att, 0.01);
        for _ in 0..1000 {
            s.step(&inc, STANDARD_GRAVITY);
        }
        assert!(s.v.norm() < 1e-10, "v = {:?}", s.v);
        assert!((s.p - pose.p).norm() < 1e-10);
    }

    #[test]
    fn round_trip_straight_leg() {
        let start = Pose::planar(0.0, 0.0, 0.0);
        let end = Pose::planar(12.0, 3.0, 0.0);
        let spec = LegSpec {
            speed: 1.0,
            rate: 100.0,
            ..LegSpec::default()
        };
        let mut traj = vec![TrajectorySample {
            t: 0.0,
            pose: Pose::planar(0.0, 0.0, 0.0),
            v: (end.p - start.p).normalize(),
        }];
        traj.extend(generate_leg_trajectory(&start, &end, &spec).unwrap());
        let incs = generate_imu_increments(&traj, STANDARD_GRAVITY).unwrap();
        let mut s = StrapdownState::init(&Pose::planar(0.0, 0.0, 0.0), &traj[0].v);
        for (inc, sample) in incs.iter().zip(&traj[1..]) {
            s.step(inc, STANDARD_GRAVITY);
            assert!((s.p - sample.pose.p).norm() < 1e-6);
        }
        assert!((s.p - end.p).norm() < 1e-6);
    }

    #[test]
    fn round_trip_tour_with_rotations() {
        let spec = LegSpec {
            speed: 0.5,
            rate: 100.0,
            ..LegSpec::default()
        };
        let traj = plan_tour(
            &Pose::planar(0.2, 0.3, 0.0),
            &[(2.0, 0.3), (2.0, 2.0), (0.5, 1.0)],
            &spec,
        )
        .unwrap();
        let incs = generate_imu_increments(&traj, STANDARD_GRAVITY).unwrap();
        let mut s = StrapdownState::init(&traj[0].pose, &traj[0].v);
        for (inc, sample) in incs.iter().zip(&traj[1..]) {
            s.step(inc, STANDARD_GRAVITY);
            assert!(
                (s.p - sample.pose.p).norm() < 1e-6,
                "position diverged at t={}",
                sample.t
            );
            let att = s.pose().unwrap().att;
            assert!(
                crate::geometry::wrap_angle(att.psi - sample.pose.att.psi).abs() < 1e-8
            );
        }
    }

    #[test]
    fn uncompensated_bias_grows_quadratically() {
        // Position error under a constant accel bias b is b t^2 / 2.
        let att = EulerAngles::ZERO;
        let mut s = StrapdownState::init(&Pose::origin(), &Vector3::zeros());
        let dt = 0.01;
        let bias = 0.1;
        let mut inc = stationary_increment(&att, dt);
        inc.q_v.x += bias * dt;
        let t_end = 10.0;
        let n = (t_end / dt) as usize;
        for _ in 0..n {
            s.step(&inc, STANDARD_GRAVITY);
        }
        let expected = 0.5 * bias * t_end * t_end;
        assert_relative_eq!(s.p.x, expected, max_relative = 0.02);
    }

    #[test]
    fn bias_compensation_cancels_injected_bias() {
        let att = EulerAngles::ZERO;
        let mut s = StrapdownState::init(&Pose::origin(), &Vector3::zeros());
        s.accel_bias_est = Vector3::new(0.1, 0.0, 0.0);
        let dt = 0.01;
        let mut inc = stationary_increment(&att, dt);
        inc.q_v.x += 0.1 * dt;
        for _ in 0..1000 {
            s.step(&inc, STANDARD_GRAVITY);
        }
        assert!(s.p.norm() < 1e-10);
    }

    #[test]
    fn orthonormality_over_long_run() {
        let mut s = StrapdownState::init(&Pose::origin(), &Vector3::zeros());
        let dt = 0.01;
        let inc = ImuIncrements {
            q_t: Vector3::new(0.002, 0.0003, -0.001),
            q_v: Vector3::zeros(),
            dt,
        };
        for _ in 0..100_000 {
            s.step(&inc, 0.0);
            // Attitude wanders but must stay on SO(3).
        }
        assert!(s.d_nb.orthonormality_error() < 1e-9);
    }

    #[test]
    fn euler_integration_first_order_convergence() {
        // Steady circular turn: body specific force (0, R w^2, -g), yaw
        // increment w dt, both exact integrals of the continuous motion.
        let radius = 2.0;
        let w = 0.5;
        let t_end = 8.0;
        let run = |dt: f64| {
            let mut s = StrapdownState::init(
                &Pose::planar(0.0, 0.0, 0.0),
                &Vector3::new(radius * w, 0.0, 0.0),
            );
            let inc = ImuIncrements {
                q_t: Vector3::new(w * dt, 0.0, 0.0),
                q_v: Vector3::new(0.0, radius * w * w * dt, -STANDARD_GRAVITY * dt),
                dt,
            };
            let n = (t_end / dt).round() as usize;
            for _ in 0..n {
                s.step(&inc, STANDARD_GRAVITY);
            }
            let truth = Vector3::new(
                radius * (w * t_end).sin(),
                radius * (1.0 - (w * t_end).cos()),
                0.0,
            );
            (s.p - truth).norm()
        };
        let coarse = run(0.01);
        let fine = run(0.005);
        let ratio = coarse / fine;
        assert!(
            (1.5..3.0).contains(&ratio),
            "expected ~2x error reduction, got {ratio} ({coarse} vs {fine})"
        );
    }

    #[test]
    fn apply_correction_zero_is_noop() {
        let mut s = StrapdownState::init(&Pose::planar(1.0, 2.0, 0.5), &Vector3::new(0.1, 0.0, 0.0));
        let before = s.clone();
        s.apply_correction(&ErrorState::zero());
        assert_eq!(s.p, before.p);
        assert_eq!(s.v, before.v);
        assert_eq!(s.d_nb, before.d_nb);
    }

    #[test]
    fn apply_correction_position_shift() {
        let mut s = StrapdownState::init(&Pose::origin(), &Vector3::zeros());
        let mut dx = ErrorState::zero();
        dx.set_dp(Vector3::new(0.1, 0.0, 0.0));
        s.apply_correction(&dx);
        assert_eq!(s.p, Vector3::new(-0.1, 0.0, 0.0));
    }

    #[test]
    fn apply_correction_yaw_adds_angle() {
        let mut s = StrapdownState::init(&Pose::planar(0.0, 0.0, 0.3), &Vector3::zeros());
        let mut dx = ErrorState::zero();
        dx.set_dpsi(Vector3::new(0.05, 0.0, 0.0));
        s.apply_correction(&dx);
        assert_relative_eq!(s.pose().unwrap().att.psi, 0.35, epsilon = 1e-9);
    }
}
