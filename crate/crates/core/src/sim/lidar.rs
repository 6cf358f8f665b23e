use std::cell::RefCell;
use std::f64::consts::{FRAC_PI_4, PI, TAU};
use std::rc::Rc;

use super::geometry::{wrap_angle, Vec2};
use super::track::TrackMap;
use super::vehicle::VehicleState;
use crate::error::{Error, Result};

/// Half of the 270° field of view.
pub const HALF_FOV: f64 = 3.0 * FRAC_PI_4;

/// Smallest range a beam reports; a beam never reads exactly zero.
const MIN_RANGE: f64 = 1e-6;

/// One LiDAR sweep in the vehicle frame.
///
/// Index 0 is the leftmost beam at +3π/4, the last index the rightmost at
/// -3π/4.
#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    pub distances: Vec<f64>,
    pub angles: Vec<f64>,
    pub max_range: f64,
}

/// Beam angles for an `o`-beam sweep, strictly decreasing.
///
/// Computed so that beam `i` and beam `o-1-i` are exact negatives.
pub fn beam_angles(o: usize) -> Vec<f64> {
    let last = (o - 1) as f64;
    (0..o)
        .map(|i| HALF_FOV * (last - 2.0 * i as f64) / last)
        .collect()
}

impl Scan {
    pub fn new(distances: Vec<f64>, max_range: f64) -> Result<Scan> {
        if distances.len() < 2 {
            return Err(Error::Contract("a scan needs at least two beams".into()));
        }
        if let Some(d) = distances.iter().find(|&&d| !(d > 0.0 && d <= max_range)) {
            return Err(Error::Contract(format!(
                "beam range {d} outside (0, {max_range}]"
            )));
        }
        let angles = beam_angles(distances.len());
        Ok(Scan {
            distances,
            angles,
            max_range,
        })
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    /// Left/right reflection: beam `i` takes the range of beam `o-1-i`.
    pub fn mirrored(&self) -> Scan {
        let mut distances = self.distances.clone();
        distances.reverse();
        Scan {
            distances,
            angles: self.angles.clone(),
            max_range: self.max_range,
        }
    }
}

type BeamTable = (Vec<f64>, Rc<Vec<Vec2>>);

thread_local! {
    static BEAMS: RefCell<Option<(usize, BeamTable)>> = const { RefCell::new(None) };
}

/// Beam angles and their unit vectors in the vehicle frame, cached per
/// thread for the most recent beam count.
fn beam_table(o: usize) -> (Vec<f64>, Rc<Vec<Vec2>>) {
    BEAMS.with(|b| {
        let mut b = b.borrow_mut();
        match &*b {
            Some((n, t)) if *n == o => (t.0.clone(), t.1.clone()),
            _ => {
                let angles = beam_angles(o);
                let units = Rc::new(angles.iter().map(|&a| Vec2::from_angle(a)).collect());
                *b = Some((o, (angles.clone(), Rc::clone(&units))));
                (angles, units)
            }
        }
    })
}

/// Continuous beam index of a vehicle-frame angle.
fn beam_index(angle: f64, o: usize) -> f64 {
    (o - 1) as f64 * (HALF_FOV - angle) / (2.0 * HALF_FOV)
}

/// Simulated LiDAR sweep of `o` beams from the vehicle pose.
///
/// Each wall segment is only intersected with the beams inside the angular
/// interval it subtends, which keeps the cost close to `o` ray tests per
/// visible wall layer instead of `o × segments`.
pub fn raycast_scan(s: &VehicleState, map: &TrackMap, o: usize, max_range: f64) -> Result<Scan> {
    if o < 2 {
        return Err(Error::Contract(format!("need at least 2 beams, got {o}")));
    }
    let origin = s.position();
    if !map.contains(origin) {
        return Err(Error::Contract(format!(
            "vehicle at ({:.3}, {:.3}) is outside track `{}`",
            s.x,
            s.y,
            map.name()
        )));
    }
    let (angles, units) = beam_table(o);
    let (c, sn) = (s.theta.cos(), s.theta.sin());
    let dirs: Vec<Vec2> = units.iter().map(|u| Vec2::new(c * u.x - sn * u.y, sn * u.x + c * u.y)).collect();
    let mut best = vec![max_range; o];
    let mut test = |i: usize, w: Vec2, e: Vec2| {
        // origin + t·dir meets a + s·e with t ≥ 0 and s ∈ [0, 1]; divide only
        // once the hit is known to be closer than the current best
        let d = dirs[i];
        let denom = d.cross(e);
        let tn = w.cross(e);
        let sn = w.cross(d);
        let hit = if denom > 0.0 {
            tn >= 0.0 && sn >= 0.0 && sn <= denom && tn < best[i] * denom
        } else if denom < 0.0 {
            tn <= 0.0 && sn <= 0.0 && sn >= denom && tn > best[i] * denom
        } else {
            false
        };
        if hit {
            best[i] = best[i].min(tn / denom);
        }
    };
    let mut cached: Option<(Vec2, f64)> = None;
    for seg in map.walls() {
        let a1 = match cached {
            Some((p, a)) if p == seg.a => a,
            _ => wrap_angle((seg.a - origin).angle() - s.theta),
        };
        let a2 = wrap_angle((seg.b - origin).angle() - s.theta);
        cached = Some((seg.b, a2));
        let (w, e) = (seg.a - origin, seg.b - seg.a);
        let span = wrap_angle(a2 - a1);
        if span.abs() >= PI - 1e-9 {
            // origin on the supporting line; test everything
            (0..o).for_each(|i| test(i, w, e));
            continue;
        }
        let lo = if span >= 0.0 { a1 } else { a2 };
        let hi = lo + span.abs();
        let wrapped = (hi > PI).then(|| (-PI, hi - TAU));
        for (p0, p1) in std::iter::once((lo, hi.min(PI))).chain(wrapped) {
            if p1 < -HALF_FOV - 1e-9 || p0 > HALF_FOV + 1e-9 {
                continue;
            }
            let first = (beam_index(p1, o).floor() - 1.0).max(0.0) as usize;
            let last = ((beam_index(p0, o).ceil() + 1.0) as usize).min(o - 1);
            (first..=last).for_each(|i| test(i, w, e));
        }
    }
    let distances = best.into_iter().map(|d| d.max(MIN_RANGE)).collect();
    Ok(Scan {
        distances,
        angles,
        max_range,
    })
}

/// True when the disc of radius `r_car` around the vehicle overlaps a wall
/// (strictly closer than `r_car`).
pub fn check_collision(s: &VehicleState, map: &TrackMap, r_car: f64) -> bool {
    map.wall_distance(s.position()) < r_car
}
