//! Fixed-rate closed-loop driving: scan, policy, optional safety filter,
//! dynamics, bookkeeping.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lidar::{check_collision, raycast_scan, Scan};
use super::track::{Pose, TrackMap};
use super::vehicle::{step_dynamics, ControlCommand, VehicleParams, VehicleState, MAX_STEER};
use crate::cbf::{filter_steering, CbfParams, FilterResult, SafetyContext};
use crate::error::Result;
use crate::ftg::{bin_scan, speed_heuristic, BinnedScan};

/// What a policy sees at step `k`.
pub struct Observation<'a> {
    pub scan: &'a Scan,
    pub binned: &'a BinnedScan,
    pub v: f64,
    pub omega: f64,
    /// Observation and applied steering of step `k-1`, when there was one.
    pub previous: Option<&'a PreviousStep>,
}

#[derive(Clone, Debug)]
pub struct PreviousStep {
    pub binned: BinnedScan,
    pub v: f64,
    pub omega: f64,
    pub steer: f64,
}

/// A steering policy; speed always comes from the steering heuristic.
pub trait Policy {
    fn name(&self) -> String;
    fn steer(&mut self, obs: &Observation<'_>) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollisionMode {
    /// End the episode at the first contact.
    Terminate,
    /// Put the car back on the centerline at rest and add a time penalty.
    Respawn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub dt: f64,
    pub max_steps: usize,
    pub laps_target: usize,
    pub r_car: f64,
    pub beams: usize,
    pub max_range: f64,
    pub bins: usize,
    pub vehicle: VehicleParams,
    pub collision: CollisionMode,
    /// Seconds added to the clock per respawn.
    pub respawn_penalty: f64,
    /// The run is declared stuck when the car moves less than
    /// `stuck_distance` over `stuck_steps` consecutive steps.
    pub stuck_steps: usize,
    pub stuck_distance: f64,
    pub cbf: Option<CbfParams>,
    /// Half-width of uniform noise added to the policy's steering, rad.
    pub steer_noise: f64,
    pub noise_seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            dt: 0.005,
            max_steps: 40_000,
            laps_target: 1,
            r_car: 0.25,
            beams: 1080,
            max_range: 30.0,
            bins: 54,
            vehicle: VehicleParams::default(),
            collision: CollisionMode::Respawn,
            respawn_penalty: 1.0,
            stuck_steps: 600,
            stuck_distance: 0.1,
            cbf: None,
            steer_noise: 0.0,
            noise_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "detail")]
pub enum Outcome {
    LapsCompleted,
    MaxSteps,
    Stuck,
    Collision,
    Aborted(String),
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub k: usize,
    /// Clock at the start of the step including penalties, s.
    pub t: f64,
    pub state: VehicleState,
    pub binned: Vec<f64>,
    /// Policy output before noise and filtering.
    pub steer_policy: f64,
    /// Steering actually applied.
    pub steer: f64,
    pub speed: f64,
    /// Barrier value of this step's scan with the configured clearance.
    pub h: f64,
    pub filter: Option<FilterResult>,
    /// The car was respawned at the end of this step.
    pub respawned: bool,
    pub policy_latency: f64,
}

#[derive(Clone, Debug)]
pub struct EpisodeLog {
    pub track: String,
    pub policy: String,
    pub steps: Vec<StepRecord>,
    pub collisions: usize,
    /// Clock values at which each lap was completed.
    pub lap_times: Vec<f64>,
    pub outcome: Outcome,
    /// Clock at the end of the run including penalties, s.
    pub elapsed: f64,
}

impl EpisodeLog {
    pub fn laps(&self) -> usize {
        self.lap_times.len()
    }
}

/// Drives `policy` on `map` from `start` until the lap target, the step
/// limit, a stuck condition, or (in terminate mode) a collision.
pub fn run_episode(
    policy: &mut dyn Policy,
    map: &TrackMap,
    cfg: &EpisodeConfig,
    start: Pose,
) -> Result<EpisodeLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
    let d_safe = cfg.cbf.map_or(CbfParams::default().d_safe, |c| c.d_safe);
    let mut state = VehicleState::at_rest(start.x, start.y, start.theta);
    let mut log = EpisodeLog {
        track: map.name().to_string(),
        policy: policy.name(),
        steps: Vec::new(),
        collisions: 0,
        lap_times: Vec::new(),
        outcome: Outcome::MaxSteps,
        elapsed: 0.0,
    };
    let mut clock = 0.0;
    let mut progress = 0i64;
    let mut previous: Option<PreviousStep> = None;
    let mut anchor = (0usize, state.position());

    for k in 0..cfg.max_steps {
        let scan = match raycast_scan(&state, map, cfg.beams, cfg.max_range) {
            Ok(s) => s,
            Err(e) => {
                log.outcome = Outcome::Aborted(format!("step {k}: {e}"));
                break;
            }
        };
        let binned = bin_scan(&scan, cfg.bins)?;
        let obs = Observation {
            scan: &scan,
            binned: &binned,
            v: state.v,
            omega: state.omega,
            previous: previous.as_ref(),
        };
        let t0 = Instant::now();
        let raw = policy.steer(&obs);
        let mut latency = t0.elapsed().as_secs_f64();
        let raw = match raw {
            Ok(d) if d.is_finite() => d,
            Ok(d) => {
                log.outcome = Outcome::Aborted(format!("step {k}: policy returned steering {d}"));
                break;
            }
            Err(e) => {
                log.outcome = Outcome::Aborted(format!("step {k}: policy failed: {e}"));
                break;
            }
        };
        let mut steer = raw;
        if cfg.steer_noise > 0.0 {
            steer += rng.gen_range(-cfg.steer_noise..=cfg.steer_noise);
        }
        steer = steer.clamp(-MAX_STEER, MAX_STEER);
        let mut filter = None;
        if let Some(cp) = &cfg.cbf {
            let ctx = SafetyContext::from_scan(&scan, state.v, cfg.vehicle.wheelbase, cp);
            let r = filter_steering(steer, &ctx)?;
            latency += r.solve_time;
            steer = r.steer;
            filter = Some(r);
        }
        let h = filter.map_or_else(|| crate::cbf::safety_value(&scan, d_safe).h, |r| r.h);
        let speed = speed_heuristic(steer);
        let cmd = ControlCommand { steer, speed };
        let next = step_dynamics(&state, &cmd, &cfg.vehicle, cfg.dt)?;
        log.steps.push(StepRecord {
            k,
            t: clock,
            state,
            binned: binned.bins.clone(),
            steer_policy: raw,
            steer,
            speed,
            h,
            filter,
            respawned: false,
            policy_latency: latency,
        });
        clock += cfg.dt;
        previous = Some(PreviousStep {
            binned,
            v: state.v,
            omega: state.omega,
            steer,
        });

        let mut moved_to = next;
        progress += map.finish_crossing(state.position(), next.position()) as i64;
        if check_collision(&next, map, cfg.r_car) || !map.contains(next.position()) {
            log.collisions += 1;
            match cfg.collision {
                CollisionMode::Terminate => {
                    log.outcome = Outcome::Collision;
                    break;
                }
                CollisionMode::Respawn => {
                    let p = map.centerline_pose(next.position());
                    moved_to = VehicleState::at_rest(p.x, p.y, p.theta);
                    progress += map.finish_crossing(next.position(), moved_to.position()) as i64;
                    clock += cfg.respawn_penalty;
                    previous = None;
                    log.steps.last_mut().expect("just pushed").respawned = true;
                }
            }
        }
        state = moved_to;
        if progress > log.lap_times.len() as i64 {
            log.lap_times.push(clock);
            if log.lap_times.len() >= cfg.laps_target {
                log.outcome = Outcome::LapsCompleted;
                break;
            }
        }
        if k + 1 - anchor.0 >= cfg.stuck_steps {
            if (state.position() - anchor.1).norm() < cfg.stuck_distance {
                log.outcome = Outcome::Stuck;
                break;
            }
            anchor = (k + 1, state.position());
        }
    }
    log.elapsed = clock;
    Ok(log)
}

/// Steers a constant angle; useful for tests and sanity runs.
pub struct ConstantSteer(pub f64);

impl Policy for ConstantSteer {
    fn name(&self) -> String {
        format!("constant({})", self.0)
    }

    fn steer(&mut self, _obs: &Observation<'_>) -> Result<f64> {
        Ok(self.0)
    }
}
