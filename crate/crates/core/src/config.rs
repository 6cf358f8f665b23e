//! The full set of run parameters, serialized into every artifact.

use serde::{Deserialize, Serialize};

use crate::cbf::CbfParams;
use crate::dataset::DemoConfig;
use crate::error::{Error, Result};
use crate::eval::{uniform_half_width, RaceConfig, TrainConfig};
use crate::ftg::FtgParams;
use crate::np::{ModelConfig, ModelKind};
use crate::sim::{CollisionMode, EpisodeConfig, VehicleParams, TRAINING_TRACKS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Control period, s.
    pub dt: f64,
    /// LiDAR beams over the 270° field of view.
    pub beams: usize,
    /// LiDAR range, m.
    pub max_range: f64,
    /// Bins of the condensed scan.
    pub bins: usize,
    /// Collision radius of the car, m.
    pub r_car: f64,
    /// Wheelbase, m.
    pub wheelbase: f64,
    /// Speed response time constant, s.
    pub speed_tau: f64,
    pub max_steps: usize,
    /// Clock penalty per respawn, s.
    pub respawn_penalty: f64,
    pub stuck_steps: usize,
    /// m.
    pub stuck_distance: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let e = EpisodeConfig::default();
        SimConfig {
            dt: e.dt,
            beams: e.beams,
            max_range: e.max_range,
            bins: e.bins,
            r_car: e.r_car,
            wheelbase: e.vehicle.wheelbase,
            speed_tau: e.vehicle.speed_tau,
            max_steps: e.max_steps,
            respawn_penalty: e.respawn_penalty,
            stuck_steps: e.stuck_steps,
            stuck_distance: e.stuck_distance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSection {
    /// Bundled track names or track files.
    pub tracks: Vec<String>,
    pub episodes: usize,
    pub seed: u64,
    /// Half-width of uniform noise on the executed expert steering, rad.
    pub steer_noise: f64,
    /// m.
    pub lateral_jitter: f64,
    /// rad.
    pub heading_jitter: f64,
}

impl Default for DemoSection {
    fn default() -> Self {
        let d = DemoConfig::default();
        DemoSection {
            tracks: TRAINING_TRACKS.iter().map(|s| s.to_string()).collect(),
            episodes: 4,
            seed: 0,
            steer_noise: d.steer_noise,
            lateral_jitter: d.lateral_jitter,
            heading_jitter: d.heading_jitter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelWidths {
    pub embed: usize,
    pub repr: usize,
    pub latent: usize,
    pub heads: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub res_blocks: usize,
}

impl Default for ModelWidths {
    fn default() -> Self {
        let m = ModelConfig::new(ModelKind::PiAttNp);
        ModelWidths {
            embed: m.embed,
            repr: m.repr,
            latent: m.latent,
            heads: m.heads,
            hidden: m.hidden,
            hidden_layers: m.hidden_layers,
            res_blocks: m.res_blocks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub eval_examples: usize,
    /// Fraction of episodes used for training.
    pub split: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            eval_examples: t.eval_examples,
            split: 0.75,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaceSection {
    /// Single-lap runs per policy.
    pub laps: usize,
    pub seed: u64,
    /// Standard deviation of the uniform steering noise, degrees.
    pub noise_deg: f64,
    /// m.
    pub lateral_jitter: f64,
    /// rad.
    pub heading_jitter: f64,
}

impl Default for RaceSection {
    fn default() -> Self {
        let r = RaceConfig::default();
        RaceSection {
            laps: r.runs,
            seed: r.seed,
            noise_deg: 0.0,
            lateral_jitter: r.lateral_jitter,
            heading_jitter: r.heading_jitter,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub ftg: FtgParams,
    pub cbf: CbfParams,
    pub demo: DemoSection,
    pub model: ModelWidths,
    pub train: TrainSection,
    pub race: RaceSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sim;
        let positive = [
            ("sim.dt", s.dt),
            ("sim.max_range", s.max_range),
            ("sim.r_car", s.r_car),
            ("sim.wheelbase", s.wheelbase),
            ("sim.speed_tau", s.speed_tau),
            ("cbf.alpha", self.cbf.alpha),
            ("cbf.d_safe", self.cbf.d_safe),
            ("ftg.max_range", self.ftg.max_range),
            ("train.lr", self.train.lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("sim.respawn_penalty", s.respawn_penalty),
            ("demo.steer_noise", self.demo.steer_noise),
            ("race.noise_deg", self.race.noise_deg),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if s.bins == 0 || s.beams % s.bins != 0 {
            return Err(Error::Config(format!("{} bins must divide {} beams", s.bins, s.beams)));
        }
        if self.train.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if !(self.train.split > 0.0 && self.train.split < 1.0) {
            return Err(Error::Config(format!("train.split must lie in (0, 1), got {}", self.train.split)));
        }
        self.model_config(ModelKind::PiAttNp).validate()
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        let s = &self.sim;
        EpisodeConfig {
            dt: s.dt,
            max_steps: s.max_steps,
            laps_target: 1,
            r_car: s.r_car,
            beams: s.beams,
            max_range: s.max_range,
            bins: s.bins,
            vehicle: VehicleParams {
                wheelbase: s.wheelbase,
                speed_tau: s.speed_tau,
            },
            collision: CollisionMode::Respawn,
            respawn_penalty: s.respawn_penalty,
            stuck_steps: s.stuck_steps,
            stuck_distance: s.stuck_distance,
            cbf: None,
            steer_noise: 0.0,
            noise_seed: 0,
        }
    }

    pub fn demo_config(&self) -> DemoConfig {
        DemoConfig {
            episode: self.episode_config(),
            ftg: self.ftg,
            lateral_jitter: self.demo.lateral_jitter,
            heading_jitter: self.demo.heading_jitter,
            steer_noise: self.demo.steer_noise,
        }
    }

    pub fn model_config(&self, kind: ModelKind) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            kind,
            bins: self.sim.bins,
            embed: m.embed,
            repr: m.repr,
            latent: m.latent,
            heads: m.heads,
            hidden: m.hidden,
            hidden_layers: m.hidden_layers,
            res_blocks: m.res_blocks,
            max_range: self.sim.max_range,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch: self.train.batch,
            lr: self.train.lr,
            eval_examples: self.train.eval_examples,
        }
    }

    pub fn race_config(&self, cbf: bool) -> RaceConfig {
        RaceConfig {
            episode: EpisodeConfig {
                cbf: cbf.then_some(self.cbf),
                steer_noise: uniform_half_width(self.race.noise_deg.to_radians()),
                ..self.episode_config()
            },
            runs: self.race.laps,
            seed: self.race.seed,
            lateral_jitter: self.race.lateral_jitter,
            heading_jitter: self.race.heading_jitter,
        }
    }
}
