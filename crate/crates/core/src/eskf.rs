//! Error-state extended Kalman filter fusing high-rate strapdown estimates
//! with low-rate aiding pose measurements.
//!
//! The 15-dimensional error state stacks position, attitude, velocity,
//! accelerometer-bias, and gyroscope-bias errors. Between aiding epochs only
//! the strapdown integrator runs; when an aiding measurement arrives the
//! filter predicts, forms the pose residual, updates with a Joseph-form
//! covariance step, feeds the correction back into the integrator, and resets
//! the error state.
//!
//! Sign conventions: the residual keeps the published forms (position as
//! measurement minus INS, attitude as the transposed-DCM composition, which
//! works out to INS minus measurement). Those two conventions are mutually
//! inverted, so [`fuse_rollout`] negates the residual before the update; with
//! subtractive position/velocity feedback and additive attitude composition
//! in the integrator, both blocks then contract the measured error by the
//! theoretical `I - KH` factor.

use crate::geometry::{Dcm, GeometryError};
use crate::ins::StrapdownState;
use crate::noise::NoiseConfig;
use crate::trajectory::{ImuIncrements, Pose};
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt;

pub type Matrix15 = SMatrix<f64, 15, 15>;
pub type Vector15 = SVector<f64, 15>;
pub type Matrix6x15 = SMatrix<f64, 6, 15>;
pub type Matrix6 = SMatrix<f64, 6, 6>;
pub type Vector6 = SVector<f64, 6>;

/// Innovation covariance condition numbers above this are treated as singular.
const MAX_INNOVATION_CONDITION: f64 = 1e12;

/// Smallest admissible eigenvalue of the error covariance.
const MIN_EIGENVALUE: f64 = -1e-6;

/// Floor applied to measurement-noise standard deviations so a noise-free
/// scenario still yields an invertible innovation covariance.
const R_STD_FLOOR: f64 = 1e-6;

/// Floor applied to initial-uncertainty standard deviations.
const P0_STD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum EskfError {
    /// Covariance developed an eigenvalue below -1e-6.
    NumericalDivergence { min_eigenvalue: f64 },
    /// Innovation covariance condition number exceeded 1e12.
    SingularInnovation { condition: f64 },
    /// Aiding timestamps cross or leave the IMU stream's span.
    StreamMisaligned { t: f64 },
    Geometry(GeometryError),
}

impl fmt::Display for EskfError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EskfError::NumericalDivergence { min_eigenvalue } => {
                write!(f, "covariance lost positive semidefiniteness (min eigenvalue {min_eigenvalue:e})")
            }
            EskfError::SingularInnovation { condition } => {
                write!(f, "innovation covariance ill-conditioned (cond {condition:e})")
            }
            EskfError::StreamMisaligned { t } => {
                write!(f, "aiding timestamp {t} out of order with the IMU stream")
            }
            EskfError::Geometry(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EskfError {}

impl From<GeometryError> for EskfError {
    fn from(e: GeometryError) -> Self {
        EskfError::Geometry(e)
    }
}

/// The stacked 15-vector of estimation errors:
/// `[dp, dpsi, dv, db_accel, db_gyro]`, attitude as `(psi, theta, phi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorState(Vector15);

impl ErrorState {
    pub fn zero() -> Self {
        ErrorState(Vector15::zeros())
    }

    pub fn from_vector(v: Vector15) -> Self {
        ErrorState(v)
    }

    pub fn as_vector(&self) -> &Vector15 {
        &self.0
    }

    pub fn dp(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into()
    }

    pub fn dpsi(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into()
    }

    pub fn dv(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(6).into()
    }

    pub fn db(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(9).into()
    }

    pub fn dd(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(12).into()
    }

    pub fn set_dp(&mut self, v: Vector3<f64>) {
        self.0.fixed_rows_mut::<3>(0).copy_from(&v);
    }

    pub fn set_dpsi(&mut self, v: Vector3<f64>) {
        self.0.fixed_rows_mut::<3>(3).copy_from(&v);
    }
}

/// Stacked 6-vector `[dp_m, dpsi_m]` of the aiding-measurement residual,
/// attitude components wrapped to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementResidual(Vector6);

impl MeasurementResidual {
    pub fn as_vector(&self) -> &Vector6 {
        &self.0
    }

    pub fn position(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into()
    }

    pub fn attitude(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into()
    }

    pub fn negated(&self) -> Self {
        MeasurementResidual(-self.0)
    }
}

/// Position residual is measurement minus INS estimate; attitude residual is
/// the Euler extraction of `F(att_meas)ᵀ · D_nb_ins`, which for small errors
/// equals INS attitude minus measured attitude.
pub fn compute_residual(
    aiding: &Pose,
    ins: &StrapdownState,
) -> Result<MeasurementResidual, GeometryError> {
    let dp = aiding.p - ins.p;
    let datt = Dcm::from_euler(&aiding.att)
        .transpose()
        .compose(&ins.d_nb)
        .to_euler()?
        .as_vector();
    let mut dz = Vector6::zeros();
    dz.fixed_rows_mut::<3>(0).copy_from(&dp);
    dz.fixed_rows_mut::<3>(3).copy_from(&datt);
    Ok(MeasurementResidual(dz))
}

/// Assemble the 15x15 state-transition matrix.
///
/// Block layout (3x3 blocks, state order `[dp, dpsi, dv, db, dd]`):
///
/// ```text
/// [ I        0    I·dt_m  0    0   ]
/// [ 0        I    0       0   -ΣD  ]
/// [ I/dt_m   A_s  I       ΣD   0   ]
/// [ 0        0    0       I    0   ]
/// [ 0        0    0       0    I   ]
/// ```
///
/// `sigma_d` is the accumulated body->nav rotation over the aiding interval
/// and `a_s` the skew of the velocity change between epochs. The `I/dt_m`
/// block coupling position error into velocity error is unusual for this
/// filter family; `zero_pos_vel_coupling` removes it.
pub fn build_system_matrix(
    sigma_d: &Matrix3<f64>,
    a_s: &Matrix3<f64>,
    dt_m: f64,
    zero_pos_vel_coupling: bool,
) -> Matrix15 {
    assert!(dt_m > 0.0, "aiding interval must be positive");
    let mut a = Matrix15::identity();
    let i3 = Matrix3::identity();
    a.fixed_view_mut::<3, 3>(0, 6).copy_from(&(i3 * dt_m));
    a.fixed_view_mut::<3, 3>(3, 12).copy_from(&(-sigma_d));
    if !zero_pos_vel_coupling {
        a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(i3 / dt_m));
    }
    a.fixed_view_mut::<3, 3>(6, 3).copy_from(a_s);
    a.fixed_view_mut::<3, 3>(6, 9).copy_from(sigma_d);
    a
}

/// The 6x15 measurement matrix selecting the position and attitude blocks.
pub fn measurement_matrix() -> Matrix6x15 {
    let mut h = Matrix6x15::zeros();
    h.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&Matrix3::identity());
    h.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&Matrix3::identity());
    h
}

/// Filter tuning: measurement noise, process noise densities, and initial
/// uncertainty. All standard deviations, SI units, attitude `(psi, theta,
/// phi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Nominal aiding interval dt_m (s).
    pub aiding_interval: f64,
    pub r_pos_std: Vector3<f64>,
    pub r_att_std: Vector3<f64>,
    pub q_accel_rw: Vector3<f64>,
    pub q_gyro_rw: Vector3<f64>,
    /// Stabilizing process noise on the bias blocks.
    pub q_bias: f64,
    pub p0_pos_std: Vector3<f64>,
    pub p0_att_std: Vector3<f64>,
    pub p0_vel_std: Vector3<f64>,
    pub p0_accel_bias_std: Vector3<f64>,
    pub p0_gyro_bias_std: Vector3<f64>,
    /// Remove the position->velocity coupling block from the system matrix.
    pub zero_pos_vel_coupling: bool,
}

impl FilterConfig {
    /// Derive measurement noise from the aiding stds, process noise from the
    /// random-walk densities, and initial uncertainty from the IC error
    /// magnitudes (bias priors from the bias magnitudes).
    pub fn from_noise(noise: &NoiseConfig, aiding_interval: f64) -> Self {
        FilterConfig {
            aiding_interval,
            r_pos_std: noise.aiding_pos_std,
            r_att_std: noise.aiding_att_std,
            q_accel_rw: noise.accel_rw,
            q_gyro_rw: noise.gyro_rw,
            q_bias: 1e-12,
            p0_pos_std: noise.ic_pos_err,
            p0_att_std: noise.ic_att_err,
            p0_vel_std: noise.ic_vel_err,
            p0_accel_bias_std: noise.accel_bias,
            p0_gyro_bias_std: noise.gyro_bias,
            zero_pos_vel_coupling: false,
        }
    }

    fn r_matrix(&self) -> Matrix6 {
        let mut r = Matrix6::zeros();
        for i in 0..3 {
            r[(i, i)] = self.r_pos_std[i].max(R_STD_FLOOR).powi(2);
            r[(i + 3, i + 3)] = self.r_att_std[i].max(R_STD_FLOOR).powi(2);
        }
        r
    }

    fn q_matrix(&self) -> Matrix15 {
        let dt = self.aiding_interval;
        let mut q = Matrix15::zeros();
        for i in 0..3 {
            // White accelerometer noise maps into position, attitude noise
            // and velocity noise grow linearly over the aiding interval.
            q[(i, i)] = self.q_accel_rw[i].powi(2) * dt.powi(3) / 3.0;
            q[(i + 3, i + 3)] = self.q_gyro_rw[i].powi(2) * dt;
            q[(i + 6, i + 6)] = self.q_accel_rw[i].powi(2) * dt;
            q[(i + 9, i + 9)] = self.q_bias;
            q[(i + 12, i + 12)] = self.q_bias;
        }
        q
    }

    fn p0_matrix(&self) -> Matrix15 {
        let mut p = Matrix15::zeros();
        for i in 0..3 {
            p[(i, i)] = self.p0_pos_std[i].max(P0_STD_FLOOR).powi(2);
            p[(i + 3, i + 3)] = self.p0_att_std[i].max(P0_STD_FLOOR).powi(2);
            p[(i + 6, i + 6)] = self.p0_vel_std[i].max(P0_STD_FLOOR).powi(2);
            p[(i + 9, i + 9)] = self.p0_accel_bias_std[i].max(P0_STD_FLOOR).powi(2);
            p[(i + 12, i + 12)] = self.p0_gyro_bias_std[i].max(P0_STD_FLOOR).powi(2);
        }
        p
    }
}

/// The error-state filter: covariance, model matrices, and the error state
/// itself (held at zero between updates in closed-loop operation).
#[derive(Debug, Clone)]
pub struct FusionFilter {
    cfg: FilterConfig,
    a: Matrix15,
    h: Matrix6x15,
    q: Matrix15,
    r: Matrix6,
    p: Matrix15,
    x: ErrorState,
}

impl FusionFilter {
    pub fn new(cfg: FilterConfig) -> Self {
        let q = cfg.q_matrix();
        let r = cfg.r_matrix();
        let p = cfg.p0_matrix();
        let a = build_system_matrix(
            &Matrix3::identity(),
            &Matrix3::zeros(),
            cfg.aiding_interval,
            cfg.zero_pos_vel_coupling,
        );
        FusionFilter {
            cfg,
            a,
            h: measurement_matrix(),
            q,
            r,
            p,
            x: ErrorState::zero(),
        }
    }

    pub fn covariance(&self) -> &Matrix15 {
        &self.p
    }

    pub fn measurement_matrix(&self) -> &Matrix6x15 {
        &self.h
    }

    pub fn error_state(&self) -> &ErrorState {
        &self.x
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    /// Rebuild the state-transition matrix for the coming epoch from the
    /// accumulated body->nav rotation and the inter-epoch velocity change.
    pub fn set_epoch_model(&mut self, sigma_d: &Matrix3<f64>, dv: &Vector3<f64>, dt_m: f64) {
        self.a = build_system_matrix(
            sigma_d,
            &crate::geometry::skew(dv),
            dt_m,
            self.cfg.zero_pos_vel_coupling,
        );
    }

    /// Time update: propagate the error state and covariance.
    pub fn predict(&mut self) -> Result<(), EskfError> {
        self.x = ErrorState::from_vector(self.a * self.x.as_vector());
        self.p = self.a * self.p * self.a.transpose() + self.q;
        self.p = (self.p + self.p.transpose()) * 0.5;
        let min_eig = min_eigenvalue(&self.p);
        if min_eig < MIN_EIGENVALUE {
            return Err(EskfError::NumericalDivergence {
                min_eigenvalue: min_eig,
            });
        }
        Ok(())
    }

    /// Measurement update with a Joseph-form covariance step; returns the
    /// correction to feed into the strapdown integrator.
    pub fn update(&mut self, dz: &MeasurementResidual) -> Result<ErrorState, EskfError> {
        let s = self.h * self.p * self.h.transpose() + self.r;
        let cond = condition_number(&s);
        if !cond.is_finite() || cond > MAX_INNOVATION_CONDITION {
            return Err(EskfError::SingularInnovation { condition: cond });
        }
        let s_inv = s
            .try_inverse()
            .ok_or(EskfError::SingularInnovation { condition: cond })?;
        let k = self.p * self.h.transpose() * s_inv;
        let innovation = dz.as_vector() - self.h * self.x.as_vector();
        let dx = ErrorState::from_vector(self.x.as_vector() + k * innovation);
        let ikh = Matrix15::identity() - k * self.h;
        self.p = ikh * self.p * ikh.transpose() + k * self.r * k.transpose();
        self.p = (self.p + self.p.transpose()) * 0.5;
        self.x = dx;
        Ok(dx)
    }

    /// Zero the error state after its content has been fed back.
    pub fn reset_error(&mut self) {
        self.x = ErrorState::zero();
    }
}

fn min_eigenvalue(p: &Matrix15) -> f64 {
    p.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

fn condition_number(s: &Matrix6) -> f64 {
    let sv = s.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// One high-rate fused estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedSample {
    pub t: f64,
    pub pose: Pose,
    pub v: Vector3<f64>,
}

/// Filter bookkeeping at one aiding epoch (state after feedback).
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub t: f64,
    pub pose: Pose,
    pub covariance: Matrix15,
    pub residual: MeasurementResidual,
    pub correction: ErrorState,
}

impl EpochRecord {
    /// Normalized estimation error squared of the position sub-state.
    pub fn position_nees(&self, truth: &Vector3<f64>) -> Option<f64> {
        let e = self.pose.p - truth;
        let p_pos: Matrix3<f64> = self.covariance.fixed_view::<3, 3>(0, 0).into();
        let inv = p_pos.try_inverse()?;
        Some((e.transpose() * inv * e)[(0, 0)])
    }
}

/// Timestamped row-major covariance snapshot for export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceSnapshot {
    pub t: f64,
    /// 225 entries, row-major 15x15.
    pub p: Vec<f64>,
}

impl From<&EpochRecord> for CovarianceSnapshot {
    fn from(e: &EpochRecord) -> Self {
        CovarianceSnapshot {
            t: e.t,
            p: e.covariance.transpose().as_slice().to_vec(),
        }
    }
}

/// Output of a fused rollout: estimates at the IMU rate plus per-epoch
/// filter records.
#[derive(Debug, Clone)]
pub struct RolloutOutput {
    pub samples: Vec<FusedSample>,
    pub epochs: Vec<EpochRecord>,
}

/// Run the full perception loop over pre-generated streams.
///
/// Strapdown integration advances at the IMU rate; whenever the next aiding
/// measurement's timestamp is reached the filter predicts, forms the
/// residual, updates, feeds the correction back, and resets the error state.
pub fn fuse_rollout(
    increments: &[ImuIncrements],
    aiding: &[(f64, Pose)],
    ic_pose: &Pose,
    ic_v: &Vector3<f64>,
    cfg: FilterConfig,
    gravity: f64,
) -> Result<RolloutOutput, EskfError> {
    for pair in aiding.windows(2) {
        if pair[1].0 <= pair[0].0 {
            return Err(EskfError::StreamMisaligned { t: pair[1].0 });
        }
    }

    let mut ins = StrapdownState::init(ic_pose, ic_v);
    let mut filter = FusionFilter::new(cfg);
    let mut samples = Vec::with_capacity(increments.len());
    let mut epochs = Vec::new();

    let mut sigma_d = Matrix3::<f64>::zeros();
    let mut last_epoch_v = *ins_velocity(&ins);
    let mut last_epoch_t = ins.t;
    let mut next_aiding = 0usize;

    for inc in increments {
        ins.step(inc, gravity);
        // Time integral of the body->nav DCM over the epoch.
        sigma_d += ins.d_nb.transpose().matrix() * inc.dt;

        while next_aiding < aiding.len() && aiding[next_aiding].0 <= ins.t + inc.dt * 0.5 {
            let (t_a, meas) = &aiding[next_aiding];
            if *t_a < last_epoch_t - inc.dt * 0.5 {
                return Err(EskfError::StreamMisaligned { t: *t_a });
            }
            let dt_m = (t_a - last_epoch_t).max(inc.dt);
            let dv = ins.v - last_epoch_v;
            filter.set_epoch_model(&sigma_d, &dv, dt_m);
            filter.predict()?;
            let dz = compute_residual(meas, &ins)?;
            // The published position and attitude residual conventions are
            // mutually inverted; negating the stacked residual makes both
            // blocks contract under the integrator's feedback directions.
            let dx = filter.update(&dz.negated())?;
            ins.apply_correction(&dx);
            filter.reset_error();

            epochs.push(EpochRecord {
                t: ins.t,
                pose: ins.pose()?,
                covariance: *filter.covariance(),
                residual: dz,
                correction: dx,
            });

            sigma_d = Matrix3::zeros();
            last_epoch_v = ins.v;
            last_epoch_t = *t_a;
            next_aiding += 1;
        }

        samples.push(FusedSample {
            t: ins.t,
            pose: ins.pose()?,
            v: ins.v,
        });
    }

    Ok(RolloutOutput { samples, epochs })
}

fn ins_velocity(ins: &StrapdownState) -> &Vector3<f64> {
    &ins.v
}

/// Pure dead reckoning over the same increment stream (no aiding updates).
pub fn dead_reckon(
    increments: &[ImuIncrements],
    ic_pose: &Pose,
    ic_v: &Vector3<f64>,
    gravity: f64,
) -> Result<Vec<FusedSample>, EskfError> {
    let mut ins = StrapdownState::init(ic_pose, ic_v);
    let mut samples = Vec::with_capacity(increments.len());
    for inc in increments {
        ins.step(inc, gravity);
        samples.push(FusedSample {
            t: ins.t,
            pose: ins.pose()?,
            v: ins.v,
        });
    }
    Ok(samples)
}
