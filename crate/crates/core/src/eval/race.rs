//! Closed-loop races on one track with per-run and per-policy metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbf::{certify_step, CbfParams};
use crate::dataset::perturbed_start;
use crate::error::Result;
use crate::sim::{run_episode, CollisionMode, EpisodeConfig, EpisodeLog, Outcome, Policy, TrackMap, MAX_STEER};

use super::latency::LatencyStats;

/// Tolerance on the barrier residual of a feasible filter step.
pub const RESIDUAL_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaceConfig {
    pub episode: EpisodeConfig,
    /// Independent single-lap runs per policy.
    pub runs: usize,
    pub seed: u64,
    /// Start poses are shifted sideways by up to this much, m.
    pub lateral_jitter: f64,
    /// Start headings are rotated by up to this much, rad.
    pub heading_jitter: f64,
}

impl Default for RaceConfig {
    fn default() -> Self {
        RaceConfig {
            episode: EpisodeConfig {
                collision: CollisionMode::Respawn,
                laps_target: 1,
                ..EpisodeConfig::default()
            },
            runs: 5,
            seed: 0,
            lateral_jitter: 0.3,
            heading_jitter: 0.1,
        }
    }
}

/// Uniform steering-noise half-width whose standard deviation is `sigma`.
pub fn uniform_half_width(sigma: f64) -> f64 {
    sigma * 3f64.sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    /// Lap time including respawn penalties; `None` when the lap was not
    /// completed.
    pub ttf: Option<f64>,
    pub collisions: usize,
    pub steer_rate: f64,
    pub steps: usize,
    pub outcome: Outcome,
    pub filter_active: usize,
    pub filter_infeasible: usize,
    /// Applied commands outside the steering box.
    pub box_violations: usize,
    pub residual_violations: usize,
    /// Consecutive feasible steps checked with the discrete certificate.
    pub certificate_checks: usize,
    pub certificate_violations: usize,
}

/// Mean `|δ_{k+1} − δ_k| / dt` over consecutive applied commands during
/// which the car was moving; pairs across a respawn and steps at rest do
/// not count.
pub fn steering_rate(log: &EpisodeLog, dt: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for w in log.steps.windows(2) {
        let moving = w[0].state.v > 0.0 || w[1].state.v > 0.0;
        if w[0].respawned || !moving {
            continue;
        }
        sum += (w[1].steer - w[0].steer).abs() / dt;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn run_metrics(run: usize, log: &EpisodeLog, cfg: &EpisodeConfig) -> RunMetrics {
    let alpha = cfg.cbf.map_or(CbfParams::default().alpha, |c| c.alpha);
    let mut m = RunMetrics {
        run,
        ttf: log.lap_times.first().copied(),
        collisions: log.collisions,
        steer_rate: steering_rate(log, cfg.dt),
        steps: log.steps.len(),
        outcome: log.outcome.clone(),
        filter_active: 0,
        filter_infeasible: 0,
        box_violations: log.steps.iter().filter(|s| s.steer.abs() > MAX_STEER).count(),
        residual_violations: 0,
        certificate_checks: 0,
        certificate_violations: 0,
    };
    for (i, s) in log.steps.iter().enumerate() {
        let Some(f) = s.filter else { continue };
        m.filter_active += usize::from(f.active);
        if !f.feasible {
            m.filter_infeasible += 1;
            continue;
        }
        if f.residual(alpha) < -RESIDUAL_TOL {
            m.residual_violations += 1;
        }
        if let Some(next) = log.steps.get(i + 1).filter(|_| !s.respawned) {
            m.certificate_checks += 1;
            if !certify_step(s.h, next.h, cfg.dt, alpha) {
                m.certificate_violations += 1;
            }
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRace {
    pub policy: String,
    pub cbf: bool,
    pub runs: Vec<RunMetrics>,
    /// Per-call policy plus filter time.
    pub latency: LatencyStats,
    /// Filter solve time alone; empty without the filter.
    pub filter_latency: LatencyStats,
}

impl PolicyRace {
    /// Mean lap time over completed runs.
    pub fn avg_ttf(&self) -> Option<f64> {
        let t: Vec<f64> = self.runs.iter().filter_map(|r| r.ttf).collect();
        (!t.is_empty()).then(|| t.iter().sum::<f64>() / t.len() as f64)
    }

    pub fn incomplete(&self) -> usize {
        self.runs.iter().filter(|r| r.ttf.is_none()).count()
    }

    pub fn total_collisions(&self) -> usize {
        self.runs.iter().map(|r| r.collisions).sum()
    }

    pub fn avg_collisions(&self) -> f64 {
        self.total_collisions() as f64 / self.runs.len().max(1) as f64
    }

    pub fn avg_steer_rate(&self) -> f64 {
        self.runs.iter().map(|r| r.steer_rate).sum::<f64>() / self.runs.len().max(1) as f64
    }

    fn filter_steps(&self) -> usize {
        if self.cbf {
            self.runs.iter().map(|r| r.steps).sum()
        } else {
            0
        }
    }

    /// Fraction of filtered steps whose barrier condition was satisfiable.
    pub fn feasible_fraction(&self) -> Option<f64> {
        let n = self.filter_steps();
        let bad: usize = self.runs.iter().map(|r| r.filter_infeasible).sum();
        (n > 0).then(|| (n - bad) as f64 / n as f64)
    }

    /// Fraction of checked feasible steps failing the discrete certificate.
    pub fn certificate_violation_fraction(&self) -> Option<f64> {
        let n: usize = self.runs.iter().map(|r| r.certificate_checks).sum();
        let bad: usize = self.runs.iter().map(|r| r.certificate_violations).sum();
        (n > 0).then(|| bad as f64 / n as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RaceReport {
    pub track: String,
    pub policies: Vec<PolicyRace>,
}

impl RaceReport {
    pub fn find(&self, policy: &str, cbf: bool) -> Option<&PolicyRace> {
        self.policies.iter().find(|p| p.policy == policy && p.cbf == cbf)
    }
}

/// Runs `policy` `cfg.runs` times on `map`. Run `i` starts from a pose
/// perturbed by a generator seeded with `cfg.seed`, and its steering noise
/// stream is seeded with `cfg.seed + i`, so every policy faces the same
/// starts and noise.
pub fn race_policy(policy: &mut dyn Policy, map: &TrackMap, cfg: &RaceConfig) -> Result<(PolicyRace, Vec<EpisodeLog>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut runs = Vec::with_capacity(cfg.runs);
    let mut logs = Vec::with_capacity(cfg.runs);
    let mut calls = Vec::new();
    let mut solves = Vec::new();
    for i in 0..cfg.runs {
        let start = perturbed_start(
            map.start_pose(),
            rng.gen_range(-cfg.lateral_jitter..=cfg.lateral_jitter),
            rng.gen_range(-cfg.heading_jitter..=cfg.heading_jitter),
        );
        let ep = EpisodeConfig {
            noise_seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.episode.clone()
        };
        let log = run_episode(policy, map, &ep, start)?;
        runs.push(run_metrics(i, &log, &ep));
        calls.extend(log.steps.iter().map(|s| s.policy_latency));
        solves.extend(log.steps.iter().filter_map(|s| s.filter.map(|f| f.solve_time)));
        logs.push(log);
    }
    let race = PolicyRace {
        policy: policy.name(),
        cbf: cfg.episode.cbf.is_some(),
        runs,
        latency: LatencyStats::from_seconds(&calls),
        filter_latency: LatencyStats::from_seconds(&solves),
    };
    Ok((race, logs))
}

/// Races every policy under the same configuration; `cbf` pairs each policy
/// with whether the filter is on for it.
pub fn run_races(
    policies: &mut [(&mut dyn Policy, bool)],
    map: &TrackMap,
    cfg: &RaceConfig,
    cbf: CbfParams,
) -> Result<RaceReport> {
    let mut report = RaceReport {
        track: map.name().to_string(),
        policies: Vec::new(),
    };
    for (policy, filtered) in policies.iter_mut() {
        let c = RaceConfig {
            episode: EpisodeConfig {
                cbf: filtered.then_some(cbf),
                ..cfg.episode.clone()
            },
            ..cfg.clone()
        };
        report.policies.push(race_policy(&mut **policy, map, &c)?.0);
    }
    Ok(report)
}
