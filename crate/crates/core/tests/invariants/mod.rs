//! Property suites shared by the core tests and the acceptance target.

use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use racer::autodiff::{Graph, Tensor};
use racer::cbf::{filter_steering, lie_derivatives, SafetyContext, DEGENERATE_GAIN};
use racer::dataset::ContextTargetBatch;
use racer::ftg::{bin_angles, ftg_expert, gap_prior, BinnedScan, FtgParams};
use racer::np::{kl_divergence, LatentSample, ModelConfig, ModelKind, Network};
use racer::sim::{raycast_scan, Pose, Scan, Segment, TrackMap, Vec2, VehicleState, MAX_STEER};

fn cases() -> ProptestConfig {
    ProptestConfig::with_cases(1000)
}

// ---------------------------------------------------------------- latent

fn small_net(kind: ModelKind) -> Network {
    let mut c = ModelConfig::new(kind);
    c.bins = 6;
    c.embed = 4;
    c.repr = 8;
    c.latent = 4;
    c.heads = 2;
    c.hidden = 8;
    Network::new(c, 21).unwrap()
}

fn nets() -> &'static [Network; 2] {
    static NETS: OnceLock<[Network; 2]> = OnceLock::new();
    NETS.get_or_init(|| [small_net(ModelKind::PiAttNp), small_net(ModelKind::AttNp)])
}

fn task(seed: u64, nc: usize, nt: usize) -> ContextTargetBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = |n: usize| {
        let data = (0..n)
            .flat_map(|_| {
                let mut r: Vec<f64> = (0..6).map(|_| rng.gen_range(0.2..30.0)).collect();
                r.push(rng.gen_range(0.0..5.0));
                r.push(rng.gen_range(-2.0..2.0));
                r
            })
            .collect();
        Tensor::matrix(n, 8, data).unwrap()
    };
    let x_context = rows(nc);
    let x_target = rows(nt);
    let mut col = |n: usize| Tensor::matrix(n, 1, (0..n).map(|_| rng.gen_range(-0.6..0.6)).collect()).unwrap();
    ContextTargetBatch {
        groups: 1,
        n_context: nc,
        n_target: nt,
        x_context,
        y_context: col(nc),
        x_target,
        y_target: col(nt),
        prior: col(nt),
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let data = perm.iter().flat_map(|&i| t.data()[i * w..(i + 1) * w].to_vec()).collect();
    Tensor::matrix(perm.len(), w, data).unwrap()
}

/// Latent mean/std and predictive mean/std at the prior-mean latent.
fn outputs(net: &Network, b: &ContextTargetBatch) -> Vec<f64> {
    let mut g = Graph::new();
    let f = net.forward(&mut g, b, LatentSample::PriorMean).unwrap();
    let z = f.z_prior.unwrap();
    [z.mean, z.sigma, f.predictive.mean, f.predictive.sigma]
        .iter()
        .flat_map(|&v| g.value(v).data().to_vec())
        .collect()
}

fn context_and_permutation() -> impl Strategy<Value = (u64, Vec<usize>)> {
    (any::<u64>(), 1usize..9).prop_flat_map(|(seed, nc)| (Just(seed), Just((0..nc).collect::<Vec<_>>()).prop_shuffle()))
}

proptest! {
    #![proptest_config(cases())]

    fn latent_and_prediction_ignore_context_order((seed, perm) in context_and_permutation(), which in 0usize..2) {
        let net = &nets()[which];
        let b = task(seed, perm.len(), 3);
        let mut shuffled = b.clone();
        shuffled.x_context = permute_rows(&b.x_context, &perm);
        shuffled.y_context = permute_rows(&b.y_context, &perm);
        let (a, c) = (outputs(net, &b), outputs(net, &shuffled));
        for (x, y) in a.iter().zip(&c) {
            prop_assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
    }
}

// ---------------------------------------------------------------- mirror

/// Piecewise-constant scans: runs of equal range, like walls seen face on.
/// Ranges stay under the expert's clamp, which commutes with reflection but
/// would flatten the tie-breaking ripple below.
fn blocky_scan(beams: usize) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec((1usize..120, 0.1f64..4.99), 1..40), 0.1f64..4.99).prop_map(move |(blocks, tail)| {
        let mut d: Vec<f64> = blocks.iter().flat_map(|&(n, r)| std::iter::repeat(r).take(n)).collect();
        d.resize(beams, tail);
        d
    })
}

proptest! {
    #![proptest_config(cases())]

    fn expert_steering_is_odd_under_reflection(d in blocky_scan(1080)) {
        // A fixed asymmetric ripple keeps mirrored features from tying exactly;
        // the tie rules resolve toward the left on both sides, so an exactly
        // symmetric scan is not an odd case.
        let d: Vec<f64> = d.iter().enumerate().map(|(i, a)| a + 1e-6 * (i as f64 * 0.618_034).fract()).collect();
        let scan = Scan::new(d, 30.0).unwrap();
        let p = FtgParams::default();
        let a = ftg_expert(&scan, &p);
        let b = ftg_expert(&scan.mirrored(), &p);
        prop_assert_eq!(a.blocked, b.blocked);
        prop_assert!((a.steer + b.steer).abs() <= 1e-12, "{} vs {}", a.steer, b.steer);
        prop_assert!((a.target + b.target).abs() <= 1e-12);
    }

    fn gap_prior_is_odd_under_reflection(bins in prop::collection::vec(0.1f64..30.0, 2..80)) {
        let mut sorted = bins.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted[sorted.len() - 1] != sorted[sorted.len() - 2]);
        let angles = bin_angles(bins.len());
        let z = BinnedScan { bins: bins.clone(), angles: angles.clone() };
        let mut rev = bins;
        rev.reverse();
        let m = BinnedScan { bins: rev, angles };
        let (a, b) = (gap_prior(&z), gap_prior(&m));
        prop_assert_eq!(a.angle, -b.angle);
        prop_assert_eq!(a.index + b.index, z.bins.len() - 1);
    }
}

// ---------------------------------------------------------------- KL

fn gaussian(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-3.0f64..3.0, dim), prop::collection::vec(0.05f64..3.0, dim))
}

proptest! {
    #![proptest_config(cases())]

    fn kl_is_non_negative_and_zero_only_on_identity(
        ((mq, sq), (mp, sp)) in (1usize..7).prop_flat_map(|d| (gaussian(d), gaussian(d)))
    ) {
        let kl = kl_divergence(&mq, &sq, &mp, &sp);
        prop_assert!(kl >= -1e-12, "{kl}");
        prop_assert!(kl_divergence(&mq, &sq, &mq, &sq).abs() <= 1e-12);
        let gap = mq.iter().zip(&mp).chain(sq.iter().zip(&sp)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap > 1e-3 {
            prop_assert!(kl > 0.0, "KL {kl} for distinct Gaussians");
        }
    }
}

// ---------------------------------------------------------------- raycast

const OUTER: (f64, f64) = (10.0, 6.0);
const INNER: (f64, f64) = (4.0, 2.0);

fn rect(hw: f64, hh: f64) -> Vec<Segment> {
    let c = [Vec2::new(-hw, -hh), Vec2::new(hw, -hh), Vec2::new(hw, hh), Vec2::new(-hw, hh)];
    (0..4).map(|i| Segment::new(c[i], c[(i + 1) % 4])).collect()
}

fn box_track() -> &'static TrackMap {
    static T: OnceLock<TrackMap> = OnceLock::new();
    T.get_or_init(|| {
        let mut walls = rect(OUTER.0, OUTER.1);
        walls.extend(rect(INNER.0, INNER.1));
        let start = Pose { x: 0.0, y: -4.0, theta: 0.0 };
        let finish = Segment::new(Vec2::new(0.0, -6.0), Vec2::new(0.0, -2.0));
        TrackMap::new("box", walls, start, finish).unwrap()
    })
}

/// Nearest axis-aligned wall hit along a ray, by direct solution per wall.
fn ray_oracle(p: Vec2, theta: f64, max_range: f64) -> f64 {
    let (dx, dy) = (theta.cos(), theta.sin());
    let mut best = max_range;
    for (hw, hh) in [OUTER, INNER] {
        for x in [-hw, hw] {
            if dx != 0.0 {
                let t = (x - p.x) / dx;
                let y = p.y + t * dy;
                if t >= 0.0 && y.abs() <= hh {
                    best = best.min(t);
                }
            }
        }
        for y in [-hh, hh] {
            if dy != 0.0 {
                let t = (y - p.y) / dy;
                let x = p.x + t * dx;
                if t >= 0.0 && x.abs() <= hw {
                    best = best.min(t);
                }
            }
        }
    }
    best
}

fn pose_in_box() -> impl Strategy<Value = (f64, f64)> {
    (-9.8f64..9.8, -5.8f64..5.8).prop_filter("between the walls", |(x, y)| x.abs() > INNER.0 + 0.2 || y.abs() > INNER.1 + 0.2)
}

proptest! {
    #![proptest_config(cases())]

    fn raycast_matches_direct_solution((x, y) in pose_in_box(), theta in -3.14f64..3.14, max_range in prop_oneof![Just(30.0), 1.0f64..30.0]) {
        let s = VehicleState::at_rest(x, y, theta);
        let scan = raycast_scan(&s, box_track(), 1080, max_range).unwrap();
        let p = Vec2::new(x, y);
        for (d, a) in scan.distances.iter().zip(&scan.angles) {
            let want = ray_oracle(p, theta + a, max_range);
            // beams grazing a corner may hit either side; both agree in range
            prop_assert!((d - want).abs() <= 1e-9 * want.max(1.0), "beam {a}: {d} vs {want}");
        }
    }
}

// ---------------------------------------------------------------- filter

fn context() -> impl Strategy<Value = SafetyContext> {
    (0.02f64..10.0, -2.36f64..2.36, 0.0f64..8.0, 0.1f64..20.0, 0.0f64..0.5).prop_map(|(d_min, phi, v, alpha, d_safe)| SafetyContext {
        d_min,
        phi,
        v,
        wheelbase: 0.33,
        d_safe,
        alpha,
        steer_max: MAX_STEER,
    })
}

/// Closest feasible grid point to `raw`, if any grid point is feasible.
fn grid_projection(raw: f64, c: &SafetyContext) -> (Option<f64>, f64) {
    let (lf, lg) = lie_derivatives(c);
    let b = -lf - c.alpha * c.h();
    let n = 40_000;
    let step = 2.0 * c.steer_max / n as f64;
    let best = (0..=n)
        .map(|i| -c.steer_max + i as f64 * step)
        .filter(|d| lg * d >= b)
        .min_by(|x, y| (x - raw).abs().total_cmp(&(y - raw).abs()));
    (best, step)
}

proptest! {
    #![proptest_config(cases())]

    fn filter_matches_brute_force_projection(c in context(), raw in -1.2f64..1.2) {
        let r = filter_steering(raw, &c).unwrap();
        let (lf, lg) = lie_derivatives(&c);
        prop_assert!(r.steer.abs() <= c.steer_max);
        prop_assert_eq!((r.lf, r.lg), (lf, lg));
        let slack = r.residual(c.alpha);
        let (grid, step) = grid_projection(raw, &c);
        if lg.abs() <= DEGENERATE_GAIN {
            prop_assert_eq!(r.steer, raw.clamp(-c.steer_max, c.steer_max));
            return Ok(());
        }
        match grid {
            Some(g) => {
                prop_assert!(r.feasible);
                prop_assert!(slack >= -1e-9 * (1.0 + lf.abs() + lg.abs()), "residual {slack}");
                prop_assert!((r.steer - g).abs() <= step + 1e-12, "{} vs grid {g}", r.steer);
            }
            None if r.feasible => {
                // feasible interval narrower than the grid spacing
                prop_assert!(slack >= -1e-9 * (1.0 + lf.abs() + lg.abs()));
            }
            None => {
                let best_end = if lg > 0.0 { c.steer_max } else { -c.steer_max };
                prop_assert_eq!(r.steer, best_end);
                prop_assert!(r.active);
            }
        }
        if r.feasible && !r.active {
            prop_assert_eq!(r.steer, raw.clamp(-c.steer_max, c.steer_max));
        }
    }
}

proptest! {
    #![proptest_config(cases())]

    fn filter_is_idempotent(c in context(), raw in -10.0f64..10.0) {
        let once = filter_steering(raw, &c).unwrap();
        prop_assert!(once.steer.abs() <= c.steer_max);
        let twice = filter_steering(once.steer, &c).unwrap();
        prop_assert_eq!(twice.steer, once.steer);
        prop_assert_eq!(twice.feasible, once.feasible);
        prop_assert!(!twice.raw_clamped);
    }
}

/// Every suite by name.
pub const SUITES: [(&str, fn()); 7] = [
    ("latent path ignores context order", latent_and_prediction_ignore_context_order),
    ("expert steering is odd under reflection", expert_steering_is_odd_under_reflection),
    ("gap prior is odd under reflection", gap_prior_is_odd_under_reflection),
    ("KL is non-negative, zero only on identity", kl_is_non_negative_and_zero_only_on_identity),
    ("raycast matches direct solution", raycast_matches_direct_solution),
    ("filter matches brute-force projection", filter_matches_brute_force_projection),
    ("filter is a projection", filter_is_idempotent),
];
