//! Attitude and pose mathematics: Euler angles, direction-cosine matrices,
//! unit quaternions, and the incremental attitude interpolation used by the
//! trajectory generator.
//!
//! Conventions (shared by every module in this crate):
//! - Navigation frame is x-forward / y-right / z-down.
//! - Euler angles are yaw-pitch-roll `(psi, theta, phi)`, Z-Y-X intrinsic.
//! - `Dcm` holds the navigation->body frame rotation `D_n^b`; the body->nav
//!   matrix is its transpose.
//! - Quaternions use the Hamilton convention, `[r, i]` with the scalar part
//!   first, canonicalized to `r >= 0`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

/// Tolerance below which a quaternion norm is considered degenerate.
const DEGENERATE_NORM: f64 = 1e-12;

/// Pitch is declared gimbal-locked when |D(0,2)| exceeds `1 - GIMBAL_MARGIN`.
const GIMBAL_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometryError {
    /// Pitch at +/-90 degrees: yaw and roll are no longer separable.
    GimbalLock,
    /// A quaternion normalization hit a norm below 1e-12.
    DegenerateRotation,
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::GimbalLock => write!(f, "pitch at +/-90 deg (gimbal lock)"),
            GeometryError::DegenerateRotation => {
                write!(f, "quaternion norm below 1e-12, rotation is degenerate")
            }
        }
    }
}

impl std::error::Error for GeometryError {}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Skew-symmetric cross-product matrix of `v`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Yaw-pitch-roll attitude in radians, Z-Y-X intrinsic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    /// Yaw about z (rad), wrapped to `(-pi, pi]`.
    pub psi: f64,
    /// Pitch about y (rad), in `[-pi/2, pi/2]`.
    pub theta: f64,
    /// Roll about x (rad), wrapped to `(-pi, pi]`.
    pub phi: f64,
}

impl EulerAngles {
    pub fn new(psi: f64, theta: f64, phi: f64) -> Self {
        Self {
            psi: wrap_angle(psi),
            theta,
            phi: wrap_angle(phi),
        }
    }

    pub const ZERO: EulerAngles = EulerAngles {
        psi: 0.0,
        theta: 0.0,
        phi: 0.0,
    };

    /// Componentwise view as a `(psi, theta, phi)` vector.
    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.psi, self.theta, self.phi)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// Navigation->body direction-cosine matrix.
///
/// Orthonormal with determinant +1; constructed only through operations that
/// preserve that invariant (or via [`Dcm::from_matrix`], which checks it).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dcm(Matrix3<f64>);

impl Dcm {
    pub fn identity() -> Self {
        Dcm(Matrix3::identity())
    }

    /// Build a DCM from the yaw-pitch-roll angles: `D = Rx(phi)·Ry(theta)·Rz(psi)`.
    ///
    /// This is the `e2d`/`F(·)` operator; it is total over all finite angles.
    pub fn from_euler(a: &EulerAngles) -> Self {
        let (sp, cp) = a.psi.sin_cos();
        let (st, ct) = a.theta.sin_cos();
        let (sr, cr) = a.phi.sin_cos();
        Dcm(Matrix3::new(
            ct * cp,
            ct * sp,
            -st,
            sr * st * cp - cr * sp,
            sr * st * sp + cr * cp,
            sr * ct,
            cr * st * cp + sr * sp,
            cr * st * sp - sr * cp,
            cr * ct,
        ))
    }

    /// Extract yaw-pitch-roll angles (the `d2e`/`h(·)` operator).
    ///
    /// Fails with [`GeometryError::GimbalLock`] when pitch is within 1e-9 of
    /// +/-90 degrees.
    pub fn to_euler(&self) -> Result<EulerAngles, GeometryError> {
        let m = &self.0;
        if m[(0, 2)].abs() >= 1.0 - GIMBAL_MARGIN {
            return Err(GeometryError::GimbalLock);
        }
        Ok(EulerAngles::new(
            m[(0, 1)].atan2(m[(0, 0)]),
            (-m[(0, 2)]).asin(),
            m[(1, 2)].atan2(m[(2, 2)]),
        ))
    }

    /// Wrap a raw matrix, checking orthonormality and determinant within 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Option<Self> {
        let gram = m.transpose() * m;
        if (gram - Matrix3::identity()).norm() > 1e-9 || (m.determinant() - 1.0).abs() > 1e-9 {
            return None;
        }
        Some(Dcm(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Dcm(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Dcm {
        Dcm(self.0.transpose())
    }

    /// Rotate a navigation-frame vector into the body frame.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Matrix product `self · other`.
    pub fn compose(&self, other: &Dcm) -> Dcm {
        Dcm(self.0 * other.0)
    }

    /// Snap back onto SO(3) by symmetric orthogonalization (polar factor).
    pub fn reorthonormalize(&mut self) {
        let svd = self.0.svd(true, true);
        if let (Some(u), Some(vt)) = (svd.u, svd.v_t) {
            self.0 = u * vt;
        }
    }

    /// Frobenius distance of `MᵀM` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }
}

/// Unit quaternion, Hamilton convention, scalar part first, `r >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    r: f64,
    i: Vector3<f64>,
}

impl Quaternion {
    pub fn identity() -> Self {
        Quaternion {
            r: 1.0,
            i: Vector3::zeros(),
        }
    }

    pub fn real(&self) -> f64 {
        self.r
    }

    pub fn imaginary(&self) -> Vector3<f64> {
        self.i
    }

    pub fn norm(&self) -> f64 {
        (self.r * self.r + self.i.norm_squared()).sqrt()
    }

    fn canonicalized(mut self) -> Self {
        if self.r < 0.0 {
            self.r = -self.r;
            self.i = -self.i;
        }
        self
    }

    /// Normalize an `[r, i]` stack; fails when the norm is below 1e-12.
    fn normalized(r: f64, i: Vector3<f64>) -> Result<Self, GeometryError> {
        let n = (r * r + i.norm_squared()).sqrt();
        if n < DEGENERATE_NORM {
            return Err(GeometryError::DegenerateRotation);
        }
        Ok(Quaternion { r: r / n, i: i / n }.canonicalized())
    }

    /// Quaternion matching [`Dcm::from_euler`]: `qz(psi) ⊗ qy(theta) ⊗ qx(phi)`.
    pub fn from_euler(a: &EulerAngles) -> Self {
        let (sy, cy) = (a.psi / 2.0).sin_cos();
        let (sp, cp) = (a.theta / 2.0).sin_cos();
        let (sr, cr) = (a.phi / 2.0).sin_cos();
        Quaternion {
            r: cy * cp * cr + sy * sp * sr,
            i: Vector3::new(
                cy * cp * sr - sy * sp * cr,
                cy * sp * cr + sy * cp * sr,
                sy * cp * cr - cy * sp * sr,
            ),
        }
        .canonicalized()
    }

    /// Navigation->body DCM of this rotation.
    ///
    /// Note the composition order: `to_dcm(a ⊗ b) = to_dcm(b) · to_dcm(a)`.
    pub fn to_dcm(&self) -> Dcm {
        let (w, x, y, z) = (self.r, self.i.x, self.i.y, self.i.z);
        // Active (body->nav) rotation matrix, transposed into nav->body.
        let active = Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
        Dcm(active.transpose())
    }

    pub fn to_euler(&self) -> Result<EulerAngles, GeometryError> {
        self.to_dcm().to_euler()
    }

    pub fn conjugate(&self) -> Self {
        Quaternion {
            r: self.r,
            i: -self.i,
        }
    }
}

/// Hamilton product of two unit quaternions, renormalized and canonicalized.
pub fn quat_mul(a: &Quaternion, b: &Quaternion) -> Quaternion {
    let r = a.r * b.r - a.i.dot(&b.i);
    let i = a.r * b.i + b.r * a.i + a.i.cross(&b.i);
    // Unit inputs keep the norm within a few ulp of one, so the fallible
    // normalization cannot fail here.
    Quaternion::normalized(r, i).expect("product of unit quaternions")
}

/// Interpolation scheme selector for [`interpolate_attitude`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InterpolationVariant {
    /// Literal transcription of the published increment-quaternion loop:
    /// the increment is built from `q1 ⊗ q2` and the k-th step scales its
    /// imaginary part by `k` before renormalizing. The final element is not
    /// guaranteed to equal `q2`.
    #[default]
    Verbatim,
    /// Interpolates the relative rotation `conj(q1) ⊗ q2` with the imaginary
    /// part scaled by `k/(n_int-1)`, so the sequence starts at `q1` and ends
    /// exactly at `q2`.
    RelativeRotation,
}

/// Produce `n_int` attitudes stepping from `q1` (element 0 is `q1` exactly).
///
/// See [`InterpolationVariant`] for the two schemes. Fails with
/// [`GeometryError::DegenerateRotation`] when a step quaternion cannot be
/// normalized, which happens when the composed rotation is 180 degrees.
pub fn interpolate_attitude(
    q1: &Quaternion,
    q2: &Quaternion,
    n_int: usize,
    variant: InterpolationVariant,
) -> Result<Vec<Quaternion>, GeometryError> {
    assert!(n_int >= 2, "n_int must be at least 2");
    let base = match variant {
        InterpolationVariant::Verbatim => quat_mul(q1, q2),
        InterpolationVariant::RelativeRotation => quat_mul(&q1.conjugate(), q2),
    };
    let n = Quaternion::normalized(base.r, base.i)?;
    // The k = 0 step normalizes the stack [r, 0]; a composed rotation of
    // 180 degrees (r = 0) makes that collapse.
    if n.r.abs() < DEGENERATE_NORM {
        return Err(GeometryError::DegenerateRotation);
    }

    let mut out = Vec::with_capacity(n_int);
    for k in 0..n_int {
        if k == 0 {
            // The k = 0 increment normalizes to the identity, so element 0 is
            // q1 bitwise (after canonicalization).
            out.push(q1.canonicalized());
            continue;
        }
        let scale = match variant {
            // The printed 1/n_int factor on the increment quaternion cancels
            // in the per-step renormalization; scaling the imaginary part by
            // k is all that survives.
            InterpolationVariant::Verbatim => k as f64,
            InterpolationVariant::RelativeRotation => k as f64 / (n_int - 1) as f64,
        };
        let step = Quaternion::normalized(n.r, scale * n.i)?;
        let qi = quat_mul(q1, &step);
        out.push(Quaternion::normalized(qi.r, qi.i)?);
    }
    Ok(out)
}
