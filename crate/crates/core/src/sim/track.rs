//! Racetrack geometry: two closed wall loops, a start pose and a finish line.
//!
//! Track files are plain text, one record per line:
//!
//! ```text
//! # comment
//! name oval
//! start_pose 10.000000 0.000000 1.570796
//! finish_line 7.250000 0.000000 12.750000 0.000000
//! 7.250000 0.000000 7.250000 1.000000
//! ...
//! ```
//!
//! Every line that is not a comment or a keyword record is a wall segment
//! `x1 y1 x2 y2` in meters. Coordinates are written with six decimals.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::geometry::{Segment, Vec2};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// One closed wall loop as an ordered polygon.
#[derive(Clone, Debug)]
struct WallLoop {
    vertices: Vec<Vec2>,
    /// +1 when walking the vertices in order follows the driving direction.
    drive_sign: f64,
}

impl WallLoop {
    fn edges(&self) -> impl Iterator<Item = Segment> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| Segment::new(self.vertices[i], self.vertices[(i + 1) % n]))
    }

    fn signed_area(&self) -> f64 {
        self.edges().map(|e| e.a.cross(e.b)).sum::<f64>() / 2.0
    }

    fn contains(&self, p: Vec2) -> bool {
        let mut inside = false;
        for e in self.edges() {
            if (e.a.y > p.y) != (e.b.y > p.y) {
                let x = e.a.x + (p.y - e.a.y) * (e.b.x - e.a.x) / (e.b.y - e.a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Nearest point on the loop and the unit edge direction there.
    fn nearest(&self, p: Vec2) -> (Vec2, Vec2, f64) {
        self.edges()
            .map(|e| {
                let q = e.closest_point(p);
                (q, (e.b - e.a).normalized(), (p - q).norm())
            })
            .min_by(|a, b| a.2.total_cmp(&b.2))
            .expect("loops have at least three edges")
    }
}

/// Immutable track description.
#[derive(Clone, Debug)]
pub struct TrackMap {
    name: String,
    walls: Vec<Segment>,
    start: Pose,
    finish: Segment,
    /// `[outer, inner]`
    loops: [WallLoop; 2],
    /// Unit normal of the finish line pointing in the driving direction.
    finish_normal: Vec2,
}

fn point_key(p: Vec2) -> (u64, u64) {
    // +0.0 and -0.0 compare equal as coordinates
    ((p.x + 0.0).to_bits(), (p.y + 0.0).to_bits())
}

/// Chains segments sharing endpoints into closed polygons.
fn trace_loops(walls: &[Segment]) -> Result<Vec<Vec<Vec2>>> {
    let mut at: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
    for (i, s) in walls.iter().enumerate() {
        if s.a == s.b {
            return Err(Error::Contract(format!("wall segment {i} has zero length")));
        }
        at.entry(point_key(s.a)).or_default().push(i);
        at.entry(point_key(s.b)).or_default().push(i);
    }
    if let Some((k, v)) = at.iter().find(|(_, v)| v.len() != 2) {
        let p = Vec2::new(f64::from_bits(k.0), f64::from_bits(k.1));
        return Err(Error::Contract(format!(
            "wall endpoint ({:.6}, {:.6}) is shared by {} segments, expected 2",
            p.x,
            p.y,
            v.len()
        )));
    }
    let mut used = vec![false; walls.len()];
    let mut loops = Vec::new();
    for first in 0..walls.len() {
        if used[first] {
            continue;
        }
        used[first] = true;
        let start = walls[first].a;
        let mut verts = vec![start];
        let mut cur = walls[first].b;
        let mut seg = first;
        while point_key(cur) != point_key(start) {
            verts.push(cur);
            let next = at[&point_key(cur)]
                .iter()
                .copied()
                .find(|&j| j != seg)
                .expect("every endpoint has two segments");
            used[next] = true;
            let s = walls[next];
            cur = if point_key(s.a) == point_key(cur) { s.b } else { s.a };
            seg = next;
        }
        loops.push(verts);
    }
    Ok(loops)
}

impl TrackMap {
    pub fn new(name: impl Into<String>, walls: Vec<Segment>, start: Pose, finish: Segment) -> Result<Self> {
        let name = name.into();
        let polys = trace_loops(&walls)?;
        if polys.len() != 2 || polys.iter().any(|p| p.len() < 3) {
            return Err(Error::Contract(format!(
                "track `{name}` must have exactly two closed wall loops, found {}",
                polys.len()
            )));
        }
        let mut loops: Vec<WallLoop> = polys
            .into_iter()
            .map(|vertices| WallLoop {
                vertices,
                drive_sign: 1.0,
            })
            .collect();
        loops.sort_by(|a, b| b.signed_area().abs().total_cmp(&a.signed_area().abs()));
        let p = start.position();
        if !(loops[0].contains(p) && !loops[1].contains(p)) {
            return Err(Error::Contract(format!(
                "start pose of `{name}` does not lie between the wall loops"
            )));
        }
        let heading = Vec2::from_angle(start.theta);
        for l in &mut loops {
            let (_, dir, _) = l.nearest(p);
            l.drive_sign = if dir.dot(heading) >= 0.0 { 1.0 } else { -1.0 };
        }
        let fd = finish.b - finish.a;
        if fd.norm() == 0.0 {
            return Err(Error::Contract("finish line has zero length".into()));
        }
        let mut finish_normal = fd.perp().normalized();
        if finish_normal.dot(heading) < 0.0 {
            finish_normal = -finish_normal;
        }
        let [outer, inner]: [WallLoop; 2] = loops.try_into().expect("two loops");
        Ok(TrackMap {
            name,
            walls,
            start,
            finish,
            loops: [outer, inner],
            finish_normal,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn walls(&self) -> &[Segment] {
        &self.walls
    }

    pub fn start_pose(&self) -> Pose {
        self.start
    }

    pub fn finish_line(&self) -> Segment {
        self.finish
    }

    /// True when `p` lies strictly between the two wall loops.
    pub fn contains(&self, p: Vec2) -> bool {
        self.loops[0].contains(p) && !self.loops[1].contains(p)
    }

    /// Minimum distance from `p` to any wall.
    pub fn wall_distance(&self, p: Vec2) -> f64 {
        self.walls
            .iter()
            .map(|s| s.distance_to(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// +1 for a forward crossing of the finish line by the motion `from -> to`,
    /// -1 for a backward crossing, 0 otherwise.
    pub fn finish_crossing(&self, from: Vec2, to: Vec2) -> i32 {
        if from == to || !Segment::new(from, to).intersects(&self.finish) {
            return 0;
        }
        let before = (from - self.finish.a).dot(self.finish_normal);
        let after = (to - self.finish.a).dot(self.finish_normal);
        match (before < 0.0, after >= 0.0) {
            (true, true) => 1,
            _ if before >= 0.0 && after < 0.0 => -1,
            _ => 0,
        }
    }

    /// Point midway between the nearest outer and inner wall points, with
    /// the track's driving direction there. Used to put a crashed car back
    /// on the track.
    pub fn centerline_pose(&self, p: Vec2) -> Pose {
        let (q_out, d_out, dist_out) = self.loops[0].nearest(p);
        let (q_in, d_in, dist_in) = self.loops[1].nearest(p);
        let mid = (q_out + q_in) * 0.5;
        let dir = if dist_out <= dist_in {
            d_out * self.loops[0].drive_sign
        } else {
            d_in * self.loops[1].drive_sign
        };
        Pose {
            x: mid.x,
            y: mid.y,
            theta: dir.angle(),
        }
    }

    /// Same track reflected about the x-axis.
    pub fn mirrored(&self) -> Result<TrackMap> {
        let m = |p: Vec2| Vec2::new(p.x, -p.y);
        let walls = self.walls.iter().map(|s| Segment::new(m(s.a), m(s.b))).collect();
        let start = Pose {
            x: self.start.x,
            y: -self.start.y,
            theta: -self.start.theta,
        };
        TrackMap::new(
            format!("{}-mirrored", self.name),
            walls,
            start,
            Segment::new(m(self.finish.a), m(self.finish.b)),
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# wall segments x1 y1 x2 y2 in meters");
        let _ = writeln!(out, "name {}", self.name);
        let _ = writeln!(
            out,
            "start_pose {:.6} {:.6} {:.6}",
            self.start.x, self.start.y, self.start.theta
        );
        let f = self.finish;
        let _ = writeln!(out, "finish_line {:.6} {:.6} {:.6} {:.6}", f.a.x, f.a.y, f.b.x, f.b.y);
        for s in &self.walls {
            let _ = writeln!(out, "{:.6} {:.6} {:.6} {:.6}", s.a.x, s.a.y, s.b.x, s.b.y);
        }
        out
    }

    /// Parses track text; `origin` is only used in error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<TrackMap> {
        let mut name = None;
        let mut start = None;
        let mut finish = None;
        let mut walls = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().expect("non-empty line");
            let nums = |it: std::str::SplitWhitespace<'_>, n: usize| -> Result<Vec<f64>> {
                let v = it
                    .map(|t| {
                        t.parse::<f64>()
                            .ok()
                            .filter(|x| x.is_finite())
                            .ok_or_else(|| Error::parse(origin, lineno, format!("bad number `{t}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if v.len() != n {
                    return Err(Error::parse(
                        origin,
                        lineno,
                        format!("expected {n} numbers, found {}", v.len()),
                    ));
                }
                Ok(v)
            };
            match head {
                "name" => {
                    let rest: Vec<_> = parts.collect();
                    if rest.is_empty() {
                        return Err(Error::parse(origin, lineno, "missing track name"));
                    }
                    name = Some(rest.join(" "));
                }
                "start_pose" => {
                    let v = nums(parts, 3)?;
                    start = Some(Pose {
                        x: v[0],
                        y: v[1],
                        theta: v[2],
                    });
                }
                "finish_line" => {
                    let v = nums(parts, 4)?;
                    finish = Some(Segment::new(Vec2::new(v[0], v[1]), Vec2::new(v[2], v[3])));
                }
                _ => {
                    let v = nums(line.split_whitespace(), 4)?;
                    walls.push(Segment::new(Vec2::new(v[0], v[1]), Vec2::new(v[2], v[3])));
                }
            }
        }
        let missing = |what: &str| Error::parse(origin, 0, format!("missing `{what}` record"));
        TrackMap::new(
            name.ok_or_else(|| missing("name"))?,
            walls,
            start.ok_or_else(|| missing("start_pose"))?,
            finish.ok_or_else(|| missing("finish_line"))?,
        )
    }

    pub fn load(path: &Path) -> Result<TrackMap> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Builds a track from a closed centerline and a per-vertex half width.
///
/// The first centerline vertex carries the finish line; the car starts
/// `start_offset` meters further along. Coordinates are rounded to the
/// six-decimal file precision so that a written track parses back exactly.
pub fn track_from_centerline(
    name: &str,
    centerline: &[Vec2],
    half_width: impl Fn(usize) -> f64,
    start_offset: f64,
) -> Result<TrackMap> {
    let n = centerline.len();
    if n < 3 {
        return Err(Error::Contract("centerline needs at least three points".into()));
    }
    let r = |p: Vec2| Vec2::new(round6(p.x), round6(p.y));
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for i in 0..n {
        let prev = centerline[(i + n - 1) % n];
        let next = centerline[(i + 1) % n];
        let normal = (next - prev).normalized().perp();
        let w = half_width(i);
        left.push(r(centerline[i] + normal * w));
        right.push(r(centerline[i] - normal * w));
    }
    let mut walls = Vec::with_capacity(2 * n);
    for side in [&left, &right] {
        for i in 0..n {
            walls.push(Segment::new(side[i], side[(i + 1) % n]));
        }
    }
    let finish = Segment::new(left[0], right[0]);
    // walk `start_offset` meters along the centerline from vertex 0
    let mut remaining = start_offset;
    let mut i = 0;
    let (pos, dir) = loop {
        let a = centerline[i % n];
        let b = centerline[(i + 1) % n];
        let len = (b - a).norm();
        if remaining <= len {
            break (a + (b - a) * (remaining / len), (b - a).normalized());
        }
        remaining -= len;
        i += 1;
    };
    let start = Pose {
        x: round6(pos.x),
        y: round6(pos.y),
        theta: round6(dir.angle()),
    };
    TrackMap::new(name, walls, start, finish)
}
