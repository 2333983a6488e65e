//! Waypoint decision-making: the policy interface, a heuristic baseline that
//! pushes the largest visible pile toward the dump edge, a replay adapter for
//! externally recorded decisions, and the closed-loop follower that drives to
//! waypoints using the *estimated* pose.

use crate::env::{FrameLabels, Observation, WaypointAction};
use crate::trajectory::Pose;
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyError {
    /// The observed window holds no sand above the policy threshold; the
    /// caller should issue a survey move.
    NoSandVisible,
    /// Replay file has no decision recorded for this observation.
    ReplayMiss { hash: u64 },
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyError::NoSandVisible => write!(f, "no sand visible in the observation window"),
            PolicyError::ReplayMiss { hash } => {
                write!(f, "no recorded decision for observation hash {hash:#x}")
            }
        }
    }
}

impl std::error::Error for PolicyError {}

/// Maps observations to waypoint actions. Implementations must be
/// deterministic for a fixed observation (and internal seed).
pub trait Policy {
    fn decide(&mut self, obs: &Observation) -> Result<WaypointAction, PolicyError>;
}

/// Baseline policy: find the largest above-target blob in the window, push
/// it toward the +x (dump) edge, then back up for the next run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicConfig {
    /// Target grade height (m); window cells above `target_h + min_height`
    /// count as sand.
    pub target_h: f64,
    pub min_height: f64,
    /// Minimum blob volume worth pushing (m^3).
    pub min_volume: f64,
    /// How far past the blob's dump-side edge the push continues (m).
    pub push_margin: f64,
    /// Reverse runway behind the push endpoint (m).
    pub runback: f64,
    /// Staging distance behind the blob's near edge when the dozer must
    /// first line up for the push (m).
    pub stage_margin: f64,
    /// Lateral offset from the push line within which the dozer counts as
    /// lined up (m).
    pub lateral_tol: f64,
    /// Map extents for clamping waypoints (m).
    pub map_x: f64,
    pub map_y: f64,
    /// Keep waypoints this far inside the map edge (m).
    pub border: f64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        HeuristicConfig {
            target_h: 0.0,
            min_height: 0.01,
            min_volume: 5e-4,
            push_margin: 0.35,
            runback: 0.35,
            stage_margin: 0.3,
            lateral_tol: 0.1,
            map_x: 2.5,
            map_y: 2.5,
            border: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeuristicPolicy {
    cfg: HeuristicConfig,
}

impl HeuristicPolicy {
    pub fn new(cfg: HeuristicConfig) -> Self {
        HeuristicPolicy { cfg }
    }

    fn clamp(&self, p: Vector2<f64>) -> Vector2<f64> {
        Vector2::new(
            p.x.clamp(self.cfg.border, self.cfg.map_x - self.cfg.border),
            p.y.clamp(self.cfg.border, self.cfg.map_y - self.cfg.border),
        )
    }
}

/// Connected blob of above-threshold window pixels.
struct Blob {
    volume: f64,
    centroid: Vector2<f64>, // body frame (m)
    /// World-x extents of the blob: near (min) and dump-side (max) edges.
    min_world_x: f64,
    max_world_x: f64,
}

impl Policy for HeuristicPolicy {
    fn decide(&mut self, obs: &Observation) -> Result<WaypointAction, PolicyError> {
        let blobs = find_blobs(obs, self.cfg.target_h + self.cfg.min_height);
        let best = blobs
            .into_iter()
            .filter(|b| b.volume >= self.cfg.min_volume)
            .max_by(|a, b| a.volume.total_cmp(&b.volume))
            .ok_or(PolicyError::NoSandVisible)?;

        let centroid_world = obs.body_to_world(&best.centroid);
        let here = Vector2::new(obs.est_pose.p.x, obs.est_pose.p.y);
        let lined_up = here.x < best.min_world_x
            && (here.y - centroid_world.y).abs() <= self.cfg.lateral_tol;

        if lined_up {
            // Push through the blob to just past its dump-side edge, then
            // back up along the push line to set up the next run.
            let goto = self.clamp(Vector2::new(
                best.max_world_x + self.cfg.push_margin,
                centroid_world.y,
            ));
            let dir = goto - here;
            let dir = if dir.norm() > 1e-9 {
                dir.normalize()
            } else {
                Vector2::new(1.0, 0.0)
            };
            let reverse_to = self.clamp(goto - dir * self.cfg.runback);
            Ok(WaypointAction { goto, reverse_to })
        } else {
            // Not behind the pile: stage on the push line at its near edge.
            let staging = self.clamp(Vector2::new(
                best.min_world_x - self.cfg.stage_margin,
                centroid_world.y,
            ));
            Ok(WaypointAction {
                goto: staging,
                reverse_to: staging,
            })
        }
    }
}

/// 4-connected components of above-threshold pixels, with per-blob volume,
/// body-frame centroid, and the dump-side (max world-x) edge.
fn find_blobs(obs: &Observation, threshold: f64) -> Vec<Blob> {
    let (h, w) = (obs.spec.height_px, obs.spec.width_px);
    let px_area = obs.spec.m_per_px * obs.spec.m_per_px;
    let mut visited = vec![false; h * w];
    let mut blobs = Vec::new();
    for start in 0..h * w {
        if visited[start] || obs.window[start] <= threshold {
            continue;
        }
        let mut stack = vec![start];
        visited[start] = true;
        let mut volume = 0.0;
        let mut weighted = Vector2::zeros();
        let mut min_x = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        while let Some(idx) = stack.pop() {
            let (r, c) = (idx / w, idx % w);
            let height = obs.window[idx] - threshold;
            let body = obs.pixel_to_body(r, c);
            volume += height * px_area;
            weighted += body * height * px_area;
            let wx = obs.body_to_world(&body).x;
            min_x = min_x.min(wx);
            max_x = max_x.max(wx);
            let mut push = |rr: isize, cc: isize| {
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    return;
                }
                let j = rr as usize * w + cc as usize;
                if !visited[j] && obs.window[j] > threshold {
                    visited[j] = true;
                    stack.push(j);
                }
            };
            push(r as isize - 1, c as isize);
            push(r as isize + 1, c as isize);
            push(r as isize, c as isize - 1);
            push(r as isize, c as isize + 1);
        }
        if volume > 0.0 {
            blobs.push(Blob {
                volume,
                centroid: weighted / volume,
                max_forward_world_x: max_x,
            });
        }
    }
    blobs
}

/// FNV-1a over the window's f64 bit patterns; keys replay files.
pub fn observation_hash(obs: &Observation) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in &obs.window {
        for b in v.to_bits().to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x1_0000_01b3);
        }
    }
    hash
}

/// One line of a replay-policy file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub observation_hash: u64,
    pub goto: [f64; 2],
    pub reverse_to: [f64; 2],
}

/// Replays recorded decisions keyed by observation hash, so externally
/// trained policies can be evaluated in this harness.
#[derive(Debug, Clone, Default)]
pub struct ReplayPolicy {
    decisions: std::collections::HashMap<u64, WaypointAction>,
}

impl ReplayPolicy {
    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut decisions = std::collections::HashMap::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ReplayEntry = serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            decisions.insert(
                e.observation_hash,
                WaypointAction {
                    goto: Vector2::new(e.goto[0], e.goto[1]),
                    reverse_to: Vector2::new(e.reverse_to[0], e.reverse_to[1]),
                },
            );
        }
        Ok(ReplayPolicy { decisions })
    }

    pub fn record(
        path: &Path,
        entries: impl IntoIterator<Item = (u64, WaypointAction)>,
    ) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (hash, a) in entries {
            let e = ReplayEntry {
                observation_hash: hash,
                goto: [a.goto.x, a.goto.y],
                reverse_to: [a.reverse_to.x, a.reverse_to.y],
            };
            writeln!(f, "{}", serde_json::to_string(&e).unwrap())?;
        }
        Ok(())
    }
}

impl Policy for ReplayPolicy {
    fn decide(&mut self, obs: &Observation) -> Result<WaypointAction, PolicyError> {
        let hash = observation_hash(obs);
        self.decisions
            .get(&hash)
            .copied()
            .ok_or(PolicyError::ReplayMiss { hash })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FollowerError {
    TimeBudgetExceeded,
}

impl fmt::Display for FollowerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "follower time budget exceeded before reaching the waypoint")
    }
}

impl std::error::Error for FollowerError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FollowerPhase {
    Drive,
    Reverse,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FollowerConfig {
    /// Waypoint capture radius (m); default 1.5 cells.
    pub capture_radius: f64,
    /// Heading-error gain (rad/s per rad).
    pub heading_gain: f64,
    /// Turn-rate saturation (rad/s).
    pub max_turn_rate: f64,
    /// Heading error above which the dozer turns in place instead of
    /// driving; keeps the minimum turning radius from orbiting waypoints
    /// smaller than the capture radius.
    pub turn_in_place_threshold: f64,
    /// Per-leg time budget (s).
    pub time_budget: f64,
}

impl Default for FollowerConfig {
    fn default() -> Self {
        FollowerConfig {
            capture_radius: 0.0375,
            heading_gain: 2.0,
            max_turn_rate: 1.5,
            turn_in_place_threshold: 1.2,
            time_budget: 30.0,
        }
    }
}

/// Heading and speed commands for one control tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowCommand {
    /// Turn-rate command (rad/s).
    pub turn_rate: f64,
    /// Signed speed command (m/s), negative in reverse.
    pub speed: f64,
}

/// Proportional waypoint follower consuming only the estimated pose.
#[derive(Debug, Clone)]
pub struct FollowerState {
    action: WaypointAction,
    cfg: FollowerConfig,
    speed: f64,
    pub phase: FollowerPhase,
    pub elapsed: f64,
}

impl FollowerState {
    pub fn new(action: WaypointAction, speed: f64, cfg: FollowerConfig) -> Self {
        FollowerState {
            action,
            cfg,
            speed,
            phase: FollowerPhase::Drive,
            elapsed: 0.0,
        }
    }

    fn target(&self) -> Vector2<f64> {
        match self.phase {
            FollowerPhase::Drive => self.action.goto,
            _ => self.action.reverse_to,
        }
    }

    /// One control tick from the estimated pose. Phase transitions happen on
    /// entering the capture radius; the command for a transition tick is
    /// zero motion.
    pub fn step(&mut self, est_pose: &Pose, dt: f64) -> Result<FollowCommand, FollowerError> {
        assert!(dt > 0.0);
        if self.phase == FollowerPhase::Done {
            return Ok(FollowCommand {
                turn_rate: 0.0,
                speed: 0.0,
            });
        }
        self.elapsed += dt;
        if self.elapsed > self.cfg.time_budget {
            return Err(FollowerError::TimeBudgetExceeded);
        }
        let here = Vector2::new(est_pose.p.x, est_pose.p.y);
        let to_target = self.target() - here;
        if to_target.norm() <= self.cfg.capture_radius {
            self.phase = match self.phase {
                FollowerPhase::Drive => FollowerPhase::Reverse,
                _ => FollowerPhase::Done,
            };
            return Ok(FollowCommand {
                turn_rate: 0.0,
                speed: 0.0,
            });
        }
        let bearing = to_target.y.atan2(to_target.x);
        let (heading_err, speed) = match self.phase {
            FollowerPhase::Drive => (
                crate::geometry::wrap_angle(bearing - est_pose.att.psi),
                self.speed,
            ),
            // Reverse: drive backwards along the line to the target.
            _ => (
                crate::geometry::wrap_angle(bearing + std::f64::consts::PI - est_pose.att.psi),
                -self.speed,
            ),
        };
        let turn_rate = (self.cfg.heading_gain * heading_err)
            .clamp(-self.cfg.max_turn_rate, self.cfg.max_turn_rate);
        let speed = if heading_err.abs() > self.cfg.turn_in_place_threshold {
            0.0
        } else {
            speed
        };
        Ok(FollowCommand { turn_rate, speed })
    }
}

/// Labels expressed in a sampled observation frame.
pub fn action_to_frame_labels(action: &WaypointAction, frame_pose: &Pose) -> FrameLabels {
    FrameLabels {
        goto: world_to_body(frame_pose, &action.goto),
        reverse_to: world_to_body(frame_pose, &action.reverse_to),
    }
}

fn world_to_body(pose: &Pose, world: &Vector2<f64>) -> Vector2<f64> {
    let d = world - Vector2::new(pose.p.x, pose.p.y);
    let (s, c) = pose.att.psi.sin_cos();
    Vector2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{render_observation, ObservationSpec};
    use crate::terrain::Heightmap;
    use approx::assert_relative_eq;

    fn obs_spec() -> ObservationSpec {
        ObservationSpec {
            height_px: 64,
            width_px: 64,
            m_per_px: 0.025,
        }
    }

    fn policy() -> HeuristicPolicy {
        HeuristicPolicy::new(HeuristicConfig::default())
    }

    #[test]
    fn flat_window_reports_no_sand() {
        let hm = Heightmap::flat(100, 100, 0.025, 0.0);
        let obs = render_observation(&hm, &Pose::planar(1.25, 1.25, 0.0), &obs_spec()).unwrap();
        assert_eq!(
            policy().decide(&obs).unwrap_err(),
            PolicyError::NoSandVisible
        );
    }

    #[test]
    fn centered_pile_targets_its_dump_side_edge() {
        let mut hm = Heightmap::flat(100, 100, 0.025, 0.0);
        let sigma = 0.08;
        hm.add_pile(1.5, 1.25, 0.01, sigma);
        let obs = render_observation(&hm, &Pose::planar(1.0, 1.25, 0.0), &obs_spec()).unwrap();
        let action = policy().decide(&obs).unwrap();
        // Analytic blob boundary: amplitude*exp(-r^2/2sigma^2) = min_height.
        let amplitude = 0.01 / (2.0 * std::f64::consts::PI * sigma * sigma);
        let r_edge = sigma * (2.0 * (amplitude / 0.01f64).ln()).sqrt();
        let expected_x = 1.5 + r_edge + HeuristicConfig::default().push_margin;
        assert!(
            (action.goto.x - expected_x).abs() <= 0.025 + 1e-9,
            "goto.x = {}, expected ~{expected_x}",
            action.goto.x
        );
        assert_relative_eq!(action.goto.y, 1.25, epsilon = 0.03);
        // Reverse point backs up along the push line from the arrival point.
        let runback = HeuristicConfig::default().runback;
        assert_relative_eq!(action.reverse_to.x, action.goto.x - runback, epsilon = 1e-9);
    }

    #[test]
    fn larger_of_two_piles_wins() {
        let mut hm = Heightmap::flat(100, 100, 0.025, 0.0);
        hm.add_pile(1.3, 0.8, 0.004, 0.07);
        hm.add_pile(1.3, 1.7, 0.012, 0.07);
        let obs = render_observation(&hm, &Pose::planar(1.25, 1.25, 0.0), &obs_spec()).unwrap();
        let action = policy().decide(&obs).unwrap();
        assert!(
            (action.goto.y - 1.7).abs() < 0.1,
            "should target the larger pile, goto = {:?}",
            action.goto
        );
    }

    #[test]
    fn decide_is_deterministic() {
        let mut hm = Heightmap::flat(100, 100, 0.025, 0.0);
        hm.add_pile(1.4, 1.1, 0.01, 0.09);
        let obs = render_observation(&hm, &Pose::planar(1.0, 1.0, 0.2), &obs_spec()).unwrap();
        let a = policy().decide(&obs).unwrap();
        let b = policy().decide(&obs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn follower_at_target_transitions_with_zero_command() {
        let action = WaypointAction {
            goto: Vector2::new(1.0, 1.0),
            reverse_to: Vector2::new(0.5, 1.0),
        };
        let mut f = FollowerState::new(action, 0.4, FollowerConfig::default());
        let cmd = f.step(&Pose::planar(1.0, 1.0, 0.0), 0.01).unwrap();
        assert_eq!(cmd.speed, 0.0);
        assert_eq!(cmd.turn_rate, 0.0);
        assert_eq!(f.phase, FollowerPhase::Reverse);
    }

    #[test]
    fn follower_straight_line_arrival_time() {
        // Perfect estimate, straight 3 m leg at 0.4 m/s: arrival within 2%.
        let action = WaypointAction {
            goto: Vector2::new(3.1, 0.0),
            reverse_to: Vector2::new(0.1, 0.0),
        };
        let mut f = FollowerState::new(
            action,
            0.4,
            FollowerConfig {
                time_budget: 60.0,
                ..FollowerConfig::default()
            },
        );
        let dt = 0.01;
        let mut pose = Pose::planar(0.1, 0.0, 0.0);
        let mut t = 0.0;
        while f.phase == FollowerPhase::Drive {
            let cmd = f.step(&pose, dt).unwrap();
            pose.att.psi += cmd.turn_rate * dt;
            pose.p.x += cmd.speed * pose.att.psi.cos() * dt;
            pose.p.y += cmd.speed * pose.att.psi.sin() * dt;
            t += dt;
        }
        let expected = 3.0 / 0.4;
        assert!(
            (t - expected).abs() <= 0.02 * expected,
            "arrival at {t}, expected {expected}"
        );
    }

    #[test]
    fn yaw_bias_lengthens_arrival() {
        // A constant 10 degree yaw estimation bias curves the true path.
        let run = |bias: f64| {
            let action = WaypointAction {
                goto: Vector2::new(2.1, 0.0),
                reverse_to: Vector2::new(0.1, 0.0),
            };
            let mut f = FollowerState::new(
                action,
                0.4,
                FollowerConfig {
                    time_budget: 120.0,
                    ..FollowerConfig::default()
                },
            );
            let dt = 0.01;
            let mut pose = Pose::planar(0.1, 0.0, 0.0);
            let mut t = 0.0;
            while f.phase == FollowerPhase::Drive {
                let mut est = pose;
                est.att.psi += bias;
                let cmd = f.step(&est, dt).unwrap();
                pose.att.psi += cmd.turn_rate * dt;
                pose.p.x += cmd.speed * pose.att.psi.cos() * dt;
                pose.p.y += cmd.speed * pose.att.psi.sin() * dt;
                t += dt;
            }
            t
        };
        let clean = run(0.0);
        let biased = run(10f64.to_radians());
        assert!(
            biased > clean,
            "biased {biased} should exceed unbiased {clean}"
        );
    }

    #[test]
    fn follower_time_budget_exceeded() {
        let action = WaypointAction {
            goto: Vector2::new(100.0, 0.0),
            reverse_to: Vector2::new(0.0, 0.0),
        };
        let mut f = FollowerState::new(
            action,
            0.4,
            FollowerConfig {
                time_budget: 1.0,
                ..FollowerConfig::default()
            },
        );
        let pose = Pose::planar(0.0, 0.0, 0.0);
        let mut result = Ok(());
        for _ in 0..200 {
            if let Err(e) = f.step(&pose, 0.01) {
                result = Err(e);
                break;
            }
        }
        assert_eq!(result, Err(FollowerError::TimeBudgetExceeded));
    }

    #[test]
    fn replay_policy_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.jsonl");
        let action = WaypointAction {
            goto: Vector2::new(1.5, 0.75),
            reverse_to: Vector2::new(0.5, 0.75),
        };
        let mut hm = Heightmap::flat(100, 100, 0.025, 0.0);
        hm.add_pile(1.4, 1.1, 0.01, 0.09);
        let obs = render_observation(&hm, &Pose::planar(1.0, 1.0, 0.0), &obs_spec()).unwrap();
        let hash = observation_hash(&obs);
        ReplayPolicy::record(&path, [(hash, action)]).unwrap();
        let mut replay = ReplayPolicy::from_file(&path).unwrap();
        assert_eq!(replay.decide(&obs).unwrap(), action);
        let flat = render_observation(
            &Heightmap::flat(100, 100, 0.025, 0.0),
            &Pose::planar(1.0, 1.0, 0.0),
            &obs_spec(),
        )
        .unwrap();
        assert!(matches!(
            replay.decide(&flat),
            Err(PolicyError::ReplayMiss { .. })
        ));
    }

    #[test]
    fn frame_labels_shift_opposite_to_pose() {
        let action = WaypointAction {
            goto: Vector2::new(2.0, 1.0),
            reverse_to: Vector2::new(1.0, 1.0),
        };
        let base = Pose::planar(1.0, 1.0, 0.0);
        let shifted = Pose::planar(1.1, 1.0, 0.0);
        let l0 = action_to_frame_labels(&action, &base);
        let l1 = action_to_frame_labels(&action, &shifted);
        assert_relative_eq!(l1.goto.x - l0.goto.x, -0.1, epsilon = 1e-12);
    }
}
