//! Follow-the-gap expert, scan binning, the gap-angle prior and the
//! steering-to-speed map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::episode::{Observation, Policy};
use crate::sim::lidar::{Scan, HALF_FOV};
use crate::sim::vehicle::MAX_STEER;

/// Mean range over `b` equal angular sectors of a scan.
#[derive(Clone, Debug, PartialEq)]
pub struct BinnedScan {
    pub bins: Vec<f64>,
    /// Sector centers, from +3π/4·(1 - 1/b) down to its negative.
    pub angles: Vec<f64>,
}

/// Center angles of `b` equal sectors spanning the field of view.
pub fn bin_angles(b: usize) -> Vec<f64> {
    (0..b)
        .map(|i| HALF_FOV * (b as f64 - 1.0 - 2.0 * i as f64) / b as f64)
        .collect()
}

pub fn bin_scan(scan: &Scan, b: usize) -> Result<BinnedScan> {
    let o = scan.len();
    if b == 0 || o % b != 0 {
        return Err(Error::Config(format!("{b} bins do not evenly divide {o} beams")));
    }
    let width = o / b;
    let bins = scan
        .distances
        .chunks(width)
        .map(|c| c.iter().sum::<f64>() / width as f64)
        .collect();
    Ok(BinnedScan {
        bins,
        angles: bin_angles(b),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapPrior {
    /// Center angle of the deepest bin, rad.
    pub angle: f64,
    pub index: usize,
}

/// `true` when `(d, a)` should replace `(best_d, best_a)` as the argmax:
/// larger value, then smaller |angle|, then the left (positive) side.
fn better_max(d: f64, a: f64, best_d: f64, best_a: f64) -> bool {
    d > best_d || (d == best_d && (a.abs() < best_a.abs() || (a.abs() == best_a.abs() && a > best_a)))
}

/// Direction of the bin with the largest mean range.
pub fn gap_prior(z: &BinnedScan) -> GapPrior {
    let mut index = 0;
    for i in 1..z.bins.len() {
        if better_max(z.bins[i], z.angles[i], z.bins[index], z.angles[index]) {
            index = i;
        }
    }
    GapPrior {
        angle: z.angles[index],
        index,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtgParams {
    /// Radius of the region cleared around the nearest return, m.
    pub bubble_radius: f64,
    /// Beams longer than this count as free space, m.
    pub gap_threshold: f64,
    /// Steering per radian of target bearing.
    pub steer_gain: f64,
    /// Ranges are clamped to this before processing, m. Well below the
    /// sensor range so that the target averages over the open sector
    /// instead of grazing the far edge of a corner.
    pub max_range: f64,
}

impl Default for FtgParams {
    fn default() -> Self {
        FtgParams {
            bubble_radius: 0.8,
            gap_threshold: 1.5,
            steer_gain: 0.9,
            max_range: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FtgDecision {
    pub steer: f64,
    /// Bearing of the chosen target point (0 when blocked).
    pub target: f64,
    /// No free gap survived the bubble.
    pub blocked: bool,
}

/// Classical follow-the-gap on a raw scan.
pub fn ftg_expert(scan: &Scan, p: &FtgParams) -> FtgDecision {
    let angles = &scan.angles;
    let mut ranges: Vec<f64> = scan.distances.iter().map(|d| d.min(p.max_range)).collect();

    // nearest return; ties prefer the straightest, then the left beam
    let mut near = 0;
    for i in 1..ranges.len() {
        let (d, a) = (ranges[i], angles[i]);
        let (bd, ba) = (ranges[near], angles[near]);
        if d < bd || (d == bd && (a.abs() < ba.abs() || (a.abs() == ba.abs() && a > ba))) {
            near = i;
        }
    }
    let half = (p.bubble_radius / ranges[near]).atan();
    let center = angles[near];
    for (r, a) in ranges.iter_mut().zip(angles) {
        if (a - center).abs() <= half {
            *r = 0.0;
        }
    }

    // widest run of free beams; ties prefer the straightest, then the left run
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < ranges.len() {
        if ranges[i] <= p.gap_threshold {
            i += 1;
            continue;
        }
        let start = i;
        while i < ranges.len() && ranges[i] > p.gap_threshold {
            i += 1;
        }
        let run = (start, i - 1);
        let mid = |(s, e): (usize, usize)| 0.5 * (angles[s] + angles[e]);
        best = match best {
            None => Some(run),
            Some(b) => {
                let (w, bw) = (run.1 - run.0, b.1 - b.0);
                let (m, bm) = (mid(run), mid(b));
                if w > bw || (w == bw && (m.abs() < bm.abs() || (m.abs() == bm.abs() && m > bm))) {
                    Some(run)
                } else {
                    Some(b)
                }
            }
        };
    }
    let Some((s, e)) = best else {
        return FtgDecision {
            steer: 0.0,
            target: 0.0,
            blocked: true,
        };
    };

    // deepest point of the gap; equal depths are averaged
    let deepest = ranges[s..=e].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (sum, count) = (s..=e)
        .filter(|&j| ranges[j] == deepest)
        .fold((0.0, 0usize), |(acc, n), j| (acc + angles[j], n + 1));
    let target = sum / count as f64;
    FtgDecision {
        steer: (p.steer_gain * target).clamp(-MAX_STEER, MAX_STEER),
        target,
        blocked: false,
    }
}

/// The expert as a closed-loop policy.
#[derive(Clone, Debug, Default)]
pub struct FtgPolicy {
    pub params: FtgParams,
}

impl Policy for FtgPolicy {
    fn name(&self) -> String {
        "ftg".into()
    }

    fn steer(&mut self, obs: &Observation<'_>) -> Result<f64> {
        Ok(ftg_expert(obs.scan, &self.params).steer)
    }
}

/// Commanded speed for a steering angle: slower for sharper turns.
pub fn speed_heuristic(steer: f64) -> f64 {
    let a = steer.abs();
    if a > 10f64.to_radians() {
        1.5
    } else if a > 5f64.to_radians() {
        3.0
    } else {
        5.0
    }
}
