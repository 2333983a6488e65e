//! Observation rendering around the estimated pose and uncertainty-sampled
//! observation augmentation.
//!
//! An observation is a heading-aligned height crop centered on the estimated
//! dozer pose: row 0 is the furthest-forward line, columns run left to right
//! across the blade. Rendering resamples the heightmap bilinearly; pixels
//! falling outside the map take the target height, which is neutral for the
//! policy.

use super::EnvError;
use crate::terrain::Heightmap;
use crate::trajectory::Pose;
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Window geometry: pixel counts and metres per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationSpec {
    pub height_px: usize,
    pub width_px: usize,
    pub m_per_px: f64,
}

impl Default for ObservationSpec {
    fn default() -> Self {
        // 64 px at 2.5 cm: a 1.6 m square covering the dozer and lookahead.
        ObservationSpec {
            height_px: 64,
            width_px: 64,
            m_per_px: 0.025,
        }
    }
}

/// A pose-registered heightmap crop plus the pose used for registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Row-major H x W heights (m).
    pub window: Vec<f64>,
    pub spec: ObservationSpec,
    pub est_pose: Pose,
    pub t: f64,
}

impl Observation {
    /// Body-frame coordinates (x forward, y right) of a pixel center.
    pub fn pixel_to_body(&self, row: usize, col: usize) -> Vector2<f64> {
        let half_h = self.spec.height_px as f64 / 2.0;
        let half_w = self.spec.width_px as f64 / 2.0;
        Vector2::new(
            (half_h - (row as f64 + 0.5)) * self.spec.m_per_px,
            ((col as f64 + 0.5) - half_w) * self.spec.m_per_px,
        )
    }

    /// World position of a body-frame point under the registration pose.
    pub fn body_to_world(&self, body: &Vector2<f64>) -> Vector2<f64> {
        body_to_world(&self.est_pose, body)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.window[row * self.spec.width_px + col]
    }
}

pub(crate) fn body_to_world(pose: &Pose, body: &Vector2<f64>) -> Vector2<f64> {
    let (s, c) = pose.att.psi.sin_cos();
    Vector2::new(
        pose.p.x + c * body.x - s * body.y,
        pose.p.y + s * body.x + c * body.y,
    )
}

/// Render the heading-aligned window around `est_pose`.
pub fn render_observation(
    hm: &Heightmap,
    est_pose: &Pose,
    spec: &ObservationSpec,
) -> Result<Observation, EnvError> {
    if !hm.contains(est_pose.p.x, est_pose.p.y) {
        return Err(EnvError::OutOfBounds {
            x: est_pose.p.x,
            y: est_pose.p.y,
        });
    }
    let mut obs = Observation {
        window: vec![0.0; spec.height_px * spec.width_px],
        spec: *spec,
        est_pose: *est_pose,
        t: 0.0,
    };
    for row in 0..spec.height_px {
        for col in 0..spec.width_px {
            let body = obs.pixel_to_body(row, col);
            let world = body_to_world(est_pose, &body);
            obs.window[row * spec.width_px + col] = hm.sample(world.x, world.y);
        }
    }
    Ok(obs)
}

/// Waypoint pair in world coordinates: where to push to, then where to back
/// up to for the next run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaypointAction {
    pub goto: Vector2<f64>,
    pub reverse_to: Vector2<f64>,
}

/// A waypoint action expressed in an observation's body frame (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    pub goto: Vector2<f64>,
    pub reverse_to: Vector2<f64>,
}

/// One augmentation-set element: a rendering at a pose drawn from the filter
/// distribution, with the action labels transformed into that frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedSample {
    pub obs: Observation,
    pub labels: FrameLabels,
    pub sample_pose: Pose,
}

/// Factor a PSD 3x3 covariance into a sampling matrix, tolerating zero or
/// near-singular marginals.
fn sampling_factor(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut l = Matrix3::zeros();
    for i in 0..3 {
        let v = eig.eigenvalues[i].max(0.0).sqrt();
        l.set_column(i, &(eig.eigenvectors.column(i) * v));
    }
    l
}

/// Draw `k` poses from the normal distribution around the estimate with the
/// given `(x, y, psi)` covariance, render each, and transform the action
/// labels into each sampled frame. Out-of-map draws are retried a bounded
/// number of times, then clamped to the map interior.
pub fn sample_observations(
    hm: &Heightmap,
    est_pose: &Pose,
    action: &WaypointAction,
    cov: &Matrix3<f64>,
    k: usize,
    rng: &mut impl Rng,
    spec: &ObservationSpec,
) -> Result<Vec<AugmentedSample>, EnvError> {
    assert!(k >= 1);
    let l = sampling_factor(cov);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut pose = *est_pose;
        for _attempt in 0..16 {
            let w = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            let d = l * w;
            let mut candidate = *est_pose;
            candidate.p.x += d.x;
            candidate.p.y += d.y;
            candidate.att.psi = crate::geometry::wrap_angle(candidate.att.psi + d.z);
            if hm.contains(candidate.p.x, candidate.p.y) {
                pose = candidate;
                break;
            }
            pose = candidate;
        }
        pose.p.x = pose.p.x.clamp(0.0, hm.extent_x());
        pose.p.y = pose.p.y.clamp(0.0, hm.extent_y());
        let obs = render_observation(hm, &pose, spec)?;
        let labels = crate::policy::action_to_frame_labels(action, &pose);
        out.push(AugmentedSample {
            obs,
            labels,
            sample_pose: pose,
        });
    }
    Ok(out)
}
