//! Expert demonstration logs and the context/target pairs built from them.
//!
//! A log is newline-delimited JSON. The first line is a [`LogHeader`]; every
//! following line is either a `record` (one control step) or an `episode`
//! summary. Records of one episode are written in step order, followed by
//! that episode's summary. See `docs/FORMATS.md` for the field list.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::ftg::{gap_prior, BinnedScan, FtgParams, FtgPolicy};
use crate::sim::{run_episode, EpisodeConfig, Pose, TrackMap, Vec2, MAX_STEER};

pub const LOG_SCHEMA: &str = "racer-drive-log/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub bins: usize,
    /// Sensor range; ζ values lie in (0, max_range].
    pub max_range: f64,
    pub dt: f64,
    pub tracks: Vec<String>,
    pub seed: u64,
    /// Full run configuration used to produce the log.
    pub config: serde_json::Value,
}

/// One expert control step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriveRecord {
    pub episode: usize,
    pub track: String,
    pub k: usize,
    /// Binned scan ζ_k in meters.
    pub bins: Vec<f64>,
    pub v: f64,
    pub omega: f64,
    /// Expert steering command issued at step k.
    pub steer: f64,
    /// Steering actually applied from k to k+1: the expert command plus the
    /// recording noise. Equal to `steer` when recording without noise.
    pub applied: f64,
    /// Gap-angle prior of ζ_k.
    pub prior: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub track: String,
    pub steps: usize,
    pub laps: usize,
    pub collisions: usize,
    /// The expert touched a wall during this episode.
    pub flagged: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line {
    Record(DriveRecord),
    Episode(EpisodeSummary),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriveLog {
    pub header: LogHeader,
    pub records: Vec<DriveRecord>,
    pub episodes: Vec<EpisodeSummary>,
}

impl DriveLog {
    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        let mut rec = self.records.iter().peekable();
        for ep in &self.episodes {
            while let Some(r) = rec.next_if(|r| r.episode == ep.episode) {
                let _ = writeln!(out, "{}", serde_json::to_string(&Line::Record(r.clone()))?);
            }
            let _ = writeln!(out, "{}", serde_json::to_string(&Line::Episode(ep.clone()))?);
        }
        if rec.peek().is_some() {
            return Err(Error::Data("records out of episode order".into()));
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ndjson()?)?;
        Ok(())
    }

    pub fn parse(text: &str, origin: &Path) -> Result<DriveLog> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "empty log"))?;
        let header: LogHeader =
            serde_json::from_str(first).map_err(|e| Error::parse(origin, 1, format!("bad header: {e}")))?;
        if header.schema != LOG_SCHEMA {
            return Err(Error::parse(
                origin,
                1,
                format!("unsupported schema `{}` (expected {LOG_SCHEMA})", header.schema),
            ));
        }
        let mut records = Vec::new();
        let mut episodes = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(line).map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
            match parsed {
                Line::Record(r) => {
                    if r.bins.len() != header.bins {
                        return Err(Error::parse(
                            origin,
                            i + 1,
                            format!("record has {} bins, header says {}", r.bins.len(), header.bins),
                        ));
                    }
                    records.push(r);
                }
                Line::Episode(e) => episodes.push(e),
            }
        }
        Ok(DriveLog {
            header,
            records,
            episodes,
        })
    }

    pub fn read(path: &Path) -> Result<DriveLog> {
        let text = std::fs::read_to_string(path)?;
        DriveLog::parse(&text, path)
    }

    /// Subset holding the given episodes, header unchanged.
    fn select(&self, ids: &[usize]) -> DriveLog {
        DriveLog {
            header: self.header.clone(),
            records: self.records.iter().filter(|r| ids.contains(&r.episode)).cloned().collect(),
            episodes: self.episodes.iter().filter(|e| ids.contains(&e.episode)).cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub episode: EpisodeConfig,
    pub ftg: FtgParams,
    /// Start poses are shifted sideways by up to this much, m.
    pub lateral_jitter: f64,
    /// Start headings are rotated by up to this much, rad.
    pub heading_jitter: f64,
    /// Half-width of uniform noise added to the executed steering, rad.
    /// Labels stay the expert's clean commands.
    pub steer_noise: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            episode: EpisodeConfig::default(),
            ftg: FtgParams::default(),
            lateral_jitter: 0.3,
            heading_jitter: 0.1,
            steer_noise: 0.15,
        }
    }
}

/// Start pose moved sideways by `lateral` and rotated by `heading`.
pub fn perturbed_start(start: Pose, lateral: f64, heading: f64) -> Pose {
    let side = Vec2::from_angle(start.theta).perp() * lateral;
    Pose {
        x: start.x + side.x,
        y: start.y + side.y,
        theta: start.theta + heading,
    }
}

/// Drives the expert for one lap per episode on every track and logs each
/// control step.
pub fn record_demonstrations(
    tracks: &[TrackMap],
    episodes_per_track: usize,
    seed: u64,
    cfg: &DemoConfig,
    run_config: serde_json::Value,
) -> Result<DriveLog> {
    if tracks.is_empty() || episodes_per_track == 0 {
        return Err(Error::Config("need at least one track and one episode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ep_cfg = EpisodeConfig {
        laps_target: 1,
        steer_noise: cfg.steer_noise,
        ..cfg.episode.clone()
    };
    let mut records = Vec::new();
    let mut episodes = Vec::new();
    for map in tracks {
        for _ in 0..episodes_per_track {
            let id = episodes.len();
            let start = perturbed_start(
                map.start_pose(),
                rng.gen_range(-cfg.lateral_jitter..=cfg.lateral_jitter),
                rng.gen_range(-cfg.heading_jitter..=cfg.heading_jitter),
            );
            ep_cfg.noise_seed = rng.gen();
            let mut expert = FtgPolicy { params: cfg.ftg };
            let log = run_episode(&mut expert, map, &ep_cfg, start)?;
            if log.laps() < 1 {
                return Err(Error::Expert {
                    track: map.name().to_string(),
                    reason: format!(
                        "episode {id} ended with {:?} after {} steps and {} collisions",
                        log.outcome,
                        log.steps.len(),
                        log.collisions
                    ),
                });
            }
            for s in &log.steps {
                let binned = BinnedScan {
                    bins: s.binned.clone(),
                    angles: crate::ftg::bin_angles(s.binned.len()),
                };
                records.push(DriveRecord {
                    episode: id,
                    track: map.name().to_string(),
                    k: s.k,
                    bins: s.binned.clone(),
                    v: s.state.v,
                    omega: s.state.omega,
                    steer: s.steer_policy,
                    applied: s.steer,
                    prior: gap_prior(&binned).angle,
                });
            }
            episodes.push(EpisodeSummary {
                episode: id,
                track: map.name().to_string(),
                steps: log.steps.len(),
                laps: log.laps(),
                collisions: log.collisions,
                flagged: log.collisions > 0,
            });
        }
    }
    Ok(DriveLog {
        header: LogHeader {
            schema: LOG_SCHEMA.into(),
            bins: cfg.episode.bins,
            max_range: cfg.episode.max_range,
            dt: cfg.episode.dt,
            tracks: tracks.iter().map(|t| t.name().to_string()).collect(),
            seed,
            config: run_config,
        },
        records,
        episodes,
    })
}

/// Paired context/target rows for a batch of independent tasks.
///
/// Input rows are raw `[ζ (m), v, ω]`; the network applies its own scaling
/// and velocity embedding. The context output is the steering applied after
/// the context step (what a closed-loop policy sees as its previous
/// command); the target output is the expert command at the target step.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextTargetBatch {
    pub groups: usize,
    pub n_context: usize,
    pub n_target: usize,
    pub x_context: Tensor,
    pub y_context: Tensor,
    pub x_target: Tensor,
    pub y_target: Tensor,
    pub prior: Tensor,
}

fn input_row(r: &DriveRecord) -> Vec<f64> {
    let mut row = r.bins.clone();
    row.push(r.v);
    row.push(r.omega);
    row
}

impl ContextTargetBatch {
    /// One task per `(context, target)` record pair.
    pub fn from_pairs(pairs: &[(&DriveRecord, &DriveRecord)]) -> Result<ContextTargetBatch> {
        let n = pairs.len();
        if n == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let width = pairs[0].0.bins.len() + 2;
        let mut xc = Vec::with_capacity(n * width);
        let mut xt = Vec::with_capacity(n * width);
        let (mut yc, mut yt, mut pr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for (c, t) in pairs {
            xc.extend(input_row(c));
            xt.extend(input_row(t));
            yc.push(c.applied);
            yt.push(t.steer);
            pr.push(t.prior);
        }
        Ok(ContextTargetBatch {
            groups: n,
            n_context: 1,
            n_target: 1,
            x_context: Tensor::matrix(n, width, xc)?,
            y_context: Tensor::matrix(n, 1, yc)?,
            x_target: Tensor::matrix(n, width, xt)?,
            y_target: Tensor::matrix(n, 1, yt)?,
            prior: Tensor::matrix(n, 1, pr)?,
        })
    }

    pub fn check(&self, bins: usize) -> Result<()> {
        let rows_c = self.groups * self.n_context;
        let rows_t = self.groups * self.n_target;
        let ok = self.x_context.shape() == [rows_c, bins + 2]
            && self.y_context.shape() == [rows_c, 1]
            && self.x_target.shape() == [rows_t, bins + 2]
            && self.y_target.shape() == [rows_t, 1]
            && self.prior.shape() == [rows_t, 1];
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "batch of {} groups ({} context, {} target rows each) does not match {bins} bins: x_C {:?}, y_C {:?}, x_T {:?}, y_T {:?}, prior {:?}",
                self.groups,
                self.n_context,
                self.n_target,
                self.x_context.shape(),
                self.y_context.shape(),
                self.x_target.shape(),
                self.y_target.shape(),
                self.prior.shape()
            )))
        }
    }
}

/// Index pairs `(k-1, k)` of consecutive records within each episode.
pub fn consecutive_pairs(log: &DriveLog) -> Result<Vec<(usize, usize)>> {
    if log.records.is_empty() {
        return Err(Error::Data("the log holds no records".into()));
    }
    let pairs: Vec<_> = log
        .records
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0].episode == w[1].episode && w[1].k == w[0].k + 1)
        .map(|(i, _)| (i, i + 1))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data("no episode has two consecutive records".into()));
    }
    Ok(pairs)
}

/// Endless stream of shuffled batches; every pass over the pairs uses a
/// fresh permutation from the same seeded generator, and the trailing
/// partial batch of each pass is dropped.
pub struct BatchStream {
    records: Vec<DriveRecord>,
    pairs: Vec<(usize, usize)>,
    batch: usize,
    rng: ChaCha8Rng,
    pos: usize,
}

impl BatchStream {
    pub fn examples(&self) -> usize {
        self.pairs.len()
    }

    pub fn batches_per_pass(&self) -> usize {
        self.pairs.len() / self.batch
    }

    /// Pair order of the current pass.
    pub fn order(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

impl Iterator for BatchStream {
    type Item = ContextTargetBatch;

    fn next(&mut self) -> Option<ContextTargetBatch> {
        if self.pos + self.batch > self.pairs.len() {
            self.pairs.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let chunk = &self.pairs[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        let refs: Vec<_> = chunk.iter().map(|&(c, t)| (&self.records[c], &self.records[t])).collect();
        Some(ContextTargetBatch::from_pairs(&refs).expect("non-empty batch of equal-width rows"))
    }
}

pub fn build_batches(log: &DriveLog, batch: usize, seed: u64) -> Result<BatchStream> {
    let pairs = consecutive_pairs(log)?;
    if batch == 0 || batch > pairs.len() {
        return Err(Error::Config(format!(
            "batch size {batch} does not fit {} training examples",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = pairs;
    pairs.shuffle(&mut rng);
    Ok(BatchStream {
        records: log.records.clone(),
        pairs,
        batch,
        rng,
        pos: 0,
    })
}

/// Splits by whole episodes. Episodes on `held_out` tracks never enter the
/// training side; the rest are dealt round-robin across tracks and the
/// first `round(ratio · n)` go to training.
pub fn split_train_eval(log: &DriveLog, ratio: f64, held_out: &[&str]) -> Result<(DriveLog, DriveLog)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let usable: Vec<&EpisodeSummary> = log
        .episodes
        .iter()
        .filter(|e| !held_out.contains(&e.track.as_str()))
        .collect();
    if usable.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 episodes on training tracks to split, found {}",
            usable.len()
        )));
    }
    let mut tracks: Vec<&str> = Vec::new();
    for e in &usable {
        if !tracks.contains(&e.track.as_str()) {
            tracks.push(&e.track);
        }
    }
    let per_track: Vec<Vec<usize>> = tracks
        .iter()
        .map(|t| usable.iter().filter(|e| e.track == *t).map(|e| e.episode).collect())
        .collect();
    let mut dealt = Vec::with_capacity(usable.len());
    for round in 0.. {
        let before = dealt.len();
        dealt.extend(per_track.iter().filter_map(|eps| eps.get(round)));
        if dealt.len() == before {
            break;
        }
    }
    let n_train = ((ratio * dealt.len() as f64).round() as usize).clamp(1, dealt.len() - 1);
    let mut train = dealt[..n_train].to_vec();
    let mut eval: Vec<usize> = dealt[n_train..].to_vec();
    eval.extend(log.episodes.iter().filter(|e| held_out.contains(&e.track.as_str())).map(|e| e.episode));
    train.sort_unstable();
    eval.sort_unstable();
    Ok((log.select(&train), log.select(&eval)))
}

/// `n` evenly strided pairs from a log, as one batch.
pub fn eval_slice(log: &DriveLog, n: usize) -> Result<ContextTargetBatch> {
    let pairs = consecutive_pairs(log)?;
    let n = n.min(pairs.len());
    let refs: Vec<_> = (0..n)
        .map(|i| {
            let (c, t) = pairs[i * pairs.len() / n];
            (&log.records[c], &log.records[t])
        })
        .collect();
    ContextTargetBatch::from_pairs(&refs)
}

/// Checks the record-level invariants of a log.
pub fn validate_log(log: &DriveLog) -> Result<()> {
    for r in &log.records {
        if r.steer.abs() > MAX_STEER || r.applied.abs() > MAX_STEER {
            return Err(Error::Data(format!("episode {} step {}: steering {} out of range", r.episode, r.k, r.steer)));
        }
        if r.bins.iter().any(|&d| !(d > 0.0 && d <= log.header.max_range)) {
            return Err(Error::Data(format!("episode {} step {}: bin range outside (0, max_range]", r.episode, r.k)));
        }
    }
    Ok(())
}
