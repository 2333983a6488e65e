//! The closed-loop grading episode: terrain, true dozer kinematics, and the
//! perception pipeline advance in lockstep at the IMU rate, while the
//! follower steers using only the estimated pose. Estimation errors therefore
//! propagate into the executed path and into where the policy's waypoints
//! land in the world.

use super::obs::{
    render_observation, sample_observations, AugmentedSample, Observation, ObservationSpec,
    WaypointAction,
};
use super::EnvError;
use crate::eskf::{compute_residual, EpochRecord, FilterConfig, FusedSample, FusionFilter};
use crate::ins::StrapdownState;
use crate::noise::{corrupt_aiding, corrupt_ic, corrupt_imu, NoiseConfig, RolloutRng};
use crate::policy::{FollowCommand, FollowerConfig, FollowerPhase, FollowerState, Policy, PolicyError};
use crate::terrain::{
    advance_dozer, decision_success, deposit_load, spawn_episode, DozerBody, GradeMetrics,
    Heightmap, SpawnConfig, StepOutcome, TerrainError,
};
use crate::trajectory::{IncrementGenerator, Pose, TrajectorySample};
use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Everything needed to run one seeded episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub spawn: SpawnConfig,
    pub obs: ObservationSpec,
    pub follower: FollowerConfig,
    pub noise: NoiseConfig,
    /// IMU sample rate (Hz).
    pub imu_rate: f64,
    /// Aiding measurement interval (s).
    pub aiding_interval: f64,
    pub gravity: f64,
    /// Episode wall budget in simulated seconds.
    pub time_budget: f64,
    /// Episode terminates when uncleared volume drops below this fraction of
    /// the initial volume.
    pub termination_fraction: f64,
    /// Remove the position->velocity coupling block from the filter model.
    pub zero_pos_vel_coupling: bool,
    /// Observations sampled per decision for dataset export (0 disables).
    pub augment_k: usize,
    /// Record every Nth perception sample in the trails.
    pub trail_decimation: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            spawn: SpawnConfig::default(),
            obs: ObservationSpec::default(),
            follower: FollowerConfig::default(),
            noise: crate::noise::NoiseConfig::zero(0),
            imu_rate: 100.0,
            aiding_interval: 1.0,
            gravity: crate::STANDARD_GRAVITY,
            time_budget: 300.0,
            termination_fraction: 0.02,
            zero_pos_vel_coupling: false,
            augment_k: 0,
            trail_decimation: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LegEvent {
    ReachedWaypoint,
    /// Follower exhausted its time budget before the waypoint.
    FollowerTimeout,
    /// True pose hit the map boundary.
    OutOfBounds,
    /// Load released at the dump strip (m^3).
    Dumped(f64),
}

/// Bookkeeping for one completed (or aborted) leg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegRecord {
    pub index: usize,
    pub start_t: f64,
    pub duration: f64,
    /// Blade fill attributed to the push: load at the end of the drive phase
    /// plus anything dumped during it.
    pub leg_load: f64,
    pub success: bool,
    pub diverged: bool,
    /// Blade-lifted relocation move issued when no sand was visible.
    pub survey: bool,
    pub events: Vec<LegEvent>,
}

/// Mutable episode state; one per rollout.
pub struct EpisodeState {
    pub cfg: EpisodeConfig,
    pub hm: Heightmap,
    pub dozer: DozerBody,
    ins: StrapdownState,
    filter: FusionFilter,
    incgen: IncrementGenerator,
    pub rng: RolloutRng,
    pub t: f64,
    est_pose: Pose,
    pub initial_uncleared: f64,
    initial_total: f64,
    dumped_total: f64,
    sigma_d: Matrix3<f64>,
    last_epoch_v: Vector3<f64>,
    last_epoch_t: f64,
    next_aiding_t: f64,
    tick_count: u64,
    pub legs: Vec<LegRecord>,
    pub true_trail: Vec<TrajectorySample>,
    pub est_trail: Vec<FusedSample>,
    pub epochs: Vec<EpochRecord>,
}

impl EpisodeState {
    pub fn new(cfg: EpisodeConfig, seed: u64) -> Result<Self, EnvError> {
        let mut rng = RolloutRng::from_seed(seed);
        let (hm, dozer) = spawn_episode(&mut rng.env, &cfg.spawn)?;
        let true_pose = dozer.pose;
        let (ic_pose, ic_v) = corrupt_ic(&true_pose, &Vector3::zeros(), &cfg.noise);
        let ins = StrapdownState::init(&ic_pose, &ic_v);
        let mut filter_cfg = FilterConfig::from_noise(&cfg.noise, cfg.aiding_interval);
        filter_cfg.zero_pos_vel_coupling = cfg.zero_pos_vel_coupling;
        let filter = FusionFilter::new(filter_cfg);
        let mut incgen = IncrementGenerator::new(cfg.gravity);
        incgen
            .push(&TrajectorySample {
                t: 0.0,
                pose: true_pose,
                v: Vector3::zeros(),
            })
            .expect("first sample");
        let initial_uncleared = hm.uncleared_volume();
        let initial_total = hm.total_volume();
        let est_pose = ins.pose()?;
        let last_epoch_v = ins.v;
        Ok(EpisodeState {
            cfg: cfg.clone(),
            hm,
            dozer,
            ins,
            filter,
            incgen,
            rng,
            t: 0.0,
            est_pose,
            initial_uncleared,
            initial_total,
            dumped_total: 0.0,
            sigma_d: Matrix3::zeros(),
            last_epoch_v,
            last_epoch_t: 0.0,
            next_aiding_t: cfg.aiding_interval,
            tick_count: 0,
            legs: Vec::new(),
            true_trail: vec![TrajectorySample {
                t: 0.0,
                pose: true_pose,
                v: Vector3::zeros(),
            }],
            est_trail: Vec::new(),
            epochs: Vec::new(),
        })
    }

    pub fn estimated_pose(&self) -> &Pose {
        &self.est_pose
    }

    pub fn true_pose(&self) -> &Pose {
        &self.dozer.pose
    }

    /// Map volume + carried load + dumped outflow minus the initial total;
    /// zero up to float error when sand is conserved.
    pub fn conservation_error(&self) -> f64 {
        self.hm.total_volume() + self.dozer.blade_load + self.dumped_total - self.initial_total
    }

    pub fn initial_total_volume(&self) -> f64 {
        self.initial_total
    }

    pub fn cleared(&self) -> bool {
        self.hm.uncleared_volume() < self.cfg.termination_fraction * self.initial_uncleared
    }

    pub fn budget_exhausted(&self) -> bool {
        self.t >= self.cfg.time_budget
    }

    /// Render the observation the policy sees (registered to the estimate).
    pub fn observe(&self) -> Result<Observation, EnvError> {
        let mut obs = render_observation(&self.hm, &self.est_pose, &self.cfg.obs)?;
        obs.t = self.t;
        Ok(obs)
    }

    /// The `(x, y, psi)` marginal of the filter covariance.
    pub fn pose_covariance_marginal(&self) -> Matrix3<f64> {
        let p = self.filter.covariance();
        let idx = [0usize, 1, 3];
        let mut m = Matrix3::zeros();
        for (r, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                m[(r, c)] = p[(i, j)];
            }
        }
        m
    }

    /// Draw the augmentation set for the current decision.
    pub fn augmented_samples(
        &mut self,
        action: &WaypointAction,
        k: usize,
    ) -> Result<Vec<AugmentedSample>, EnvError> {
        let cov = self.pose_covariance_marginal();
        let mut samples = sample_observations(
            &self.hm,
            &self.est_pose.clone(),
            action,
            &cov,
            k,
            &mut self.rng.env,
            &self.cfg.obs.clone(),
        )?;
        for s in &mut samples {
            s.obs.t = self.t;
        }
        Ok(samples)
    }

    /// Advance true motion, terrain, and perception by one IMU interval.
    /// With the blade lifted (`blade_engaged == false`) the dozer moves
    /// without touching the sand.
    pub fn tick(&mut self, cmd: &FollowCommand, blade_engaged: bool) -> Result<StepOutcome, EnvError> {
        let dt = 1.0 / self.cfg.imu_rate;
        self.dozer.pose.att.psi =
            crate::geometry::wrap_angle(self.dozer.pose.att.psi + cmd.turn_rate * dt);
        let step = cmd.speed * dt;
        let outcome = if step != 0.0 {
            if blade_engaged {
                let dump_line = self.cfg.spawn.dump_line();
                advance_dozer(&mut self.hm, &mut self.dozer, step, dump_line)?
            } else {
                crate::terrain::move_dozer(&self.hm, &mut self.dozer, step)?;
                StepOutcome::default()
            }
        } else {
            StepOutcome::default()
        };
        self.dumped_total += outcome.dumped;
        self.t += dt;
        self.advance_perception(dt)?;
        Ok(outcome)
    }

    fn advance_perception(&mut self, dt: f64) -> Result<(), EnvError> {
        let sample = TrajectorySample {
            t: self.t,
            pose: self.dozer.pose,
            v: Vector3::zeros(),
        };
        let inc = self
            .incgen
            .push(&sample)
            .map_err(|_| EnvError::Fusion(crate::eskf::EskfError::StreamMisaligned { t: self.t }))?
            .expect("generator primed at construction");
        let noisy = corrupt_imu(&inc, &self.cfg.noise, &mut self.rng.imu);
        self.ins.step(&noisy, self.cfg.gravity);
        self.sigma_d += self.ins.d_nb.transpose().matrix() * dt;

        if self.t >= self.next_aiding_t - dt * 0.5 {
            let meas = corrupt_aiding(&self.dozer.pose, &self.cfg.noise, &mut self.rng.aiding);
            let dt_m = (self.t - self.last_epoch_t).max(dt);
            let dv = self.ins.v - self.last_epoch_v;
            self.filter.set_epoch_model(&self.sigma_d.clone(), &dv, dt_m);
            self.filter.predict()?;
            let dz = compute_residual(&meas, &self.ins)?;
            let dx = self.filter.update(&dz.negated())?;
            self.ins.apply_correction(&dx);
            self.filter.reset_error();
            self.epochs.push(EpochRecord {
                t: self.t,
                pose: self.ins.pose()?,
                covariance: *self.filter.covariance(),
                residual: dz,
                correction: dx,
            });
            self.sigma_d = Matrix3::zeros();
            self.last_epoch_v = self.ins.v;
            self.last_epoch_t = self.t;
            self.next_aiding_t += self.cfg.aiding_interval;
        }

        self.est_pose = self.ins.pose()?;
        self.tick_count += 1;
        if self.tick_count % self.cfg.trail_decimation as u64 == 0 {
            self.true_trail.push(sample);
            self.est_trail.push(FusedSample {
                t: self.t,
                pose: self.est_pose,
                v: self.ins.v,
            });
        }
        Ok(())
    }

    /// Execute one leg: drive to the action's push waypoint, lift and spread
    /// the blade, reverse to the runback point. Returns the leg record;
    /// follower timeouts and boundary hits abort the leg and mark it
    /// diverged rather than failing the episode. Survey legs run with the
    /// blade lifted and never touch the sand.
    pub fn step_episode(
        &mut self,
        action: WaypointAction,
        blade_engaged: bool,
    ) -> Result<LegRecord, EnvError> {
        let mut follower = FollowerState::new(action, self.dozer.speed, self.cfg.follower);
        let start_t = self.t;
        let mut events = Vec::new();
        let mut dumped_during_drive = 0.0;
        let mut leg_load: Option<f64> = None;
        let mut diverged = false;

        loop {
            if self.budget_exhausted() {
                break;
            }
            let phase_before = follower.phase;
            let cmd = match follower.step(&self.est_pose, 1.0 / self.cfg.imu_rate) {
                Ok(c) => c,
                Err(_) => {
                    events.push(LegEvent::FollowerTimeout);
                    diverged = true;
                    break;
                }
            };
            if phase_before == FollowerPhase::Drive && follower.phase == FollowerPhase::Reverse {
                // Push complete: score the blade fill, then lift the blade.
                events.push(LegEvent::ReachedWaypoint);
                leg_load = Some(self.dozer.blade_load + dumped_during_drive);
                deposit_load(&mut self.hm, &mut self.dozer);
            }
            if follower.phase == FollowerPhase::Done {
                break;
            }
            match self.tick(&cmd, blade_engaged) {
                Ok(out) => {
                    if out.dumped > 0.0 {
                        events.push(LegEvent::Dumped(out.dumped));
                        dumped_during_drive += out.dumped;
                    }
                }
                Err(EnvError::Terrain(TerrainError::OutOfBounds { .. })) => {
                    events.push(LegEvent::OutOfBounds);
                    diverged = true;
                    // The dozer stops at the wall; time still passes for the
                    // wasted tick.
                    let idle = FollowCommand {
                        turn_rate: 0.0,
                        speed: 0.0,
                    };
                    self.tick(&idle, false)?;
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        let leg_load = leg_load.unwrap_or_else(|| {
            // Aborted before finishing the push.
            let load = self.dozer.blade_load + dumped_during_drive;
            deposit_load(&mut self.hm, &mut self.dozer);
            load
        });
        let record = LegRecord {
            index: self.legs.len(),
            start_t,
            duration: self.t - start_t,
            leg_load,
            success: blade_engaged && decision_success(leg_load, self.dozer.blade_capacity),
            diverged,
            survey: !blade_engaged,
            events,
        };
        Ok(record)
    }
}

/// Per-leg augmentation samples tagged for export.
pub struct CollectedLeg {
    pub leg: usize,
    pub covariance: Matrix3<f64>,
    pub samples: Vec<AugmentedSample>,
}

/// Outcome of a full episode run.
pub struct EpisodeResult {
    pub metrics: GradeMetrics,
    pub legs: Vec<LegRecord>,
    /// Task finished (uncleared volume under the termination threshold).
    pub completed: bool,
    /// Budget ran out or the policy lost the remaining sand.
    pub diverged: bool,
    pub initial_uncleared: f64,
    pub true_trail: Vec<TrajectorySample>,
    pub est_trail: Vec<FusedSample>,
    pub epochs: Vec<EpochRecord>,
    pub final_heightmap: Heightmap,
    pub collected: Vec<CollectedLeg>,
}

/// Survey targets visited when the policy reports no visible sand: the four
/// quadrant centers and the map center, which together cover the map for the
/// default window size.
fn survey_targets(hm: &Heightmap) -> [Vector2<f64>; 5] {
    let (ex, ey) = (hm.extent_x(), hm.extent_y());
    [
        Vector2::new(0.25 * ex, 0.25 * ey),
        Vector2::new(0.75 * ex, 0.25 * ey),
        Vector2::new(0.75 * ex, 0.75 * ey),
        Vector2::new(0.25 * ex, 0.75 * ey),
        Vector2::new(0.5 * ex, 0.5 * ey),
    ]
}

/// Run a seeded episode to termination under the given policy.
///
/// Termination: the map is graded below the threshold (completed), the time
/// budget runs out, or the policy finds no sand through a full survey cycle.
/// Episodes that do not complete report the full budget as their episode
/// time.
pub fn run_episode(
    cfg: &EpisodeConfig,
    seed: u64,
    policy: &mut dyn Policy,
) -> Result<EpisodeResult, EnvError> {
    let mut state = EpisodeState::new(cfg.clone(), seed)?;
    let mut survey_idx = 0usize;
    let mut consecutive_no_sand = 0usize;
    let mut collected = Vec::new();

    while !state.budget_exhausted() && !state.cleared() {
        let obs = state.observe()?;
        let (action, blade_engaged) = match policy.decide(&obs) {
            Ok(a) => {
                consecutive_no_sand = 0;
                (a, true)
            }
            Err(PolicyError::NoSandVisible) => {
                if consecutive_no_sand >= survey_targets(&state.hm).len() {
                    break;
                }
                consecutive_no_sand += 1;
                // Relocate with the blade lifted and observe from there.
                let goto = survey_targets(&state.hm)[survey_idx % 5];
                survey_idx += 1;
                (
                    WaypointAction {
                        goto,
                        reverse_to: goto,
                    },
                    false,
                )
            }
            Err(e) => {
                return Err(EnvError::Io(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("policy failed: {e}"),
                )))
            }
        };
        if cfg.augment_k > 0 && blade_engaged {
            let samples = state.augmented_samples(&action, cfg.augment_k)?;
            collected.push(CollectedLeg {
                leg: state.legs.len(),
                covariance: state.pose_covariance_marginal(),
                samples,
            });
        }
        let record = state.step_episode(action, blade_engaged)?;
        state.legs.push(record);
    }

    let completed = state.cleared();
    let episode_time = if completed {
        state.t
    } else {
        cfg.time_budget
    };
    Ok(EpisodeResult {
        metrics: GradeMetrics {
            episode_time,
            uncleared_volume: state.hm.uncleared_volume(),
            legs: state.legs.len(),
        },
        completed,
        diverged: !completed,
        initial_uncleared: state.initial_uncleared,
        legs: state.legs,
        true_trail: state.true_trail,
        est_trail: state.est_trail,
        epochs: state.epochs,
        final_heightmap: state.hm,
        collected,
    })
}
