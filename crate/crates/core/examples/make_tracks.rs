//! Regenerates the bundled track files under `crates/core/tracks/`.
//!
//! cargo run -p racer-core --example make_tracks

use std::f64::consts::{PI, TAU};
use std::path::PathBuf;

use racer::sim::{track_from_centerline, Vec2};

/// Counter-clockwise stadium: bottom straight heading +x, centered at the origin.
fn stadium(straight: f64, radius: f64, step: f64, lift: impl Fn(f64) -> f64) -> Vec<Vec2> {
    let half = straight / 2.0;
    let n_straight = (straight / step).round() as usize;
    let n_arc = (PI * radius / step).round() as usize;
    let mut pts = Vec::new();
    for i in 0..n_straight {
        let x = -half + straight * i as f64 / n_straight as f64;
        pts.push(Vec2::new(x, -radius));
    }
    for i in 0..n_arc {
        let a = -PI / 2.0 + PI * i as f64 / n_arc as f64;
        pts.push(Vec2::new(half + radius * a.cos(), radius * a.sin()));
    }
    for i in 0..n_straight {
        let x = half - straight * i as f64 / n_straight as f64;
        pts.push(Vec2::new(x, radius - lift(x)));
    }
    for i in 0..n_arc {
        let a = PI / 2.0 + PI * i as f64 / n_arc as f64;
        pts.push(Vec2::new(-half + radius * a.cos(), radius * a.sin()));
    }
    pts
}

/// Smooth 0 → 1 → 0 plateau over `[lo, hi]` with ramps of length `ramp`.
fn plateau(x: f64, lo: f64, hi: f64, ramp: f64) -> f64 {
    let s = |t: f64| 0.5 - 0.5 * (PI * t.clamp(0.0, 1.0)).cos();
    s((x - lo) / ramp) * s((hi - x) / ramp)
}

fn main() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tracks");
    std::fs::create_dir_all(&dir).expect("create tracks dir");

    let oval = stadium(24.0, 9.0, 0.5, |_| 0.0);
    // move the finish line to the middle of the bottom straight
    let oval: Vec<Vec2> = oval[24..].iter().chain(&oval[..24]).copied().collect();

    let n = 480;
    let s_curve: Vec<Vec2> = (0..n)
        .map(|i| {
            let t = TAU * i as f64 / n as f64 - PI / 2.0;
            let r = 16.0 + 4.0 * (3.0 * t).sin();
            Vec2::new(r * t.cos(), r * t.sin())
        })
        .collect();

    // back straight runs from x=+15 to x=-15; the chicane jogs inward by
    // 2 m between x=+9 and x=-9 and the track narrows at its apex
    let chicane = stadium(30.0, 10.0, 0.5, |x| 2.0 * plateau(x, -9.0, 9.0, 5.0));
    let chicane: Vec<Vec2> = chicane[30..].iter().chain(&chicane[..30]).copied().collect();
    let pinch: Vec<f64> = chicane
        .iter()
        .map(|p| if p.y > 0.0 { 1.75 - 0.55 * plateau(p.x, -3.0, 3.0, 3.0) } else { 1.75 })
        .collect();

    let tracks = [
        track_from_centerline("oval", &oval, |_| 1.75, 1.0),
        track_from_centerline("s-curve", &s_curve, |_| 1.75, 1.0),
        track_from_centerline("pinch-chicane", &chicane, |i| pinch[i], 1.0),
    ];
    for t in tracks {
        let t = t.expect("valid track");
        let path = dir.join(format!("{}.track", t.name()));
        std::fs::write(&path, t.to_text()).expect("write track");
        println!("wrote {} ({} walls)", path.display(), t.walls().len());
    }
}
