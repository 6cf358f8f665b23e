//! End-to-end acceptance checks. Each criterion is one test and writes one
//! PASS/FAIL line straight to stderr, so the lines show even when libtest
//! captures output. A lock runs the criteria one at a time so that timing
//! measurements do not compete for the CPU.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4};
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use racer::cbf::{certify_step, filter_steering, lie_derivatives, SafetyContext, DEGENERATE_GAIN};
use racer::config::RunConfig;
use racer::dataset::{record_demonstrations, split_train_eval, DriveLog};
use racer::eval::{median, race_policy, run_convergence, ConvergenceReport, PolicyRace, RaceReport};
use racer::ftg::{bin_scan, speed_heuristic, FtgPolicy};
use racer::np::{observation_batch, predict_steering, ModelKind, Network, NpPolicy};
use racer::sim::{
    bundled_track, raycast_scan, EpisodeLog, Observation, PreviousStep, MAX_STEER, TRAINING_TRACKS, UNSEEN_TRACK,
};

#[allow(dead_code)]
#[path = "../../core/tests/gradients/mod.rs"]
mod gradients;
#[path = "../../core/tests/invariants/mod.rs"]
mod invariants;

fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[criterion {n:>2}] {verdict}  {title}: {detail}");
    assert!(pass, "criterion {n} ({title}) failed: {detail}");
}

// ---------------------------------------------------------------- shared runs

struct Trained {
    convergence: ConvergenceReport,
    elapsed: Duration,
}

impl Trained {
    fn net(&self, kind: ModelKind) -> Network {
        self.convergence.runs_of(kind).find(|r| r.seed == 0).expect("seed 0 run").net.clone()
    }
}

fn demonstrations() -> &'static DriveLog {
    static LOG: OnceLock<DriveLog> = OnceLock::new();
    LOG.get_or_init(|| {
        let cfg = RunConfig::default();
        let tracks: Vec<_> = cfg.demo.tracks.iter().map(|t| bundled_track(t).unwrap()).collect();
        record_demonstrations(&tracks, cfg.demo.episodes, cfg.demo.seed, &cfg.demo_config(), cfg.to_json()).unwrap()
    })
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let cfg = RunConfig::default();
        let t0 = Instant::now();
        let (train, eval) = split_train_eval(demonstrations(), cfg.train.split, &[UNSEEN_TRACK]).unwrap();
        let models: Vec<_> = [ModelKind::PiAttNp, ModelKind::AttNp, ModelKind::ResMlp]
            .into_iter()
            .map(|k| cfg.model_config(k))
            .collect();
        let convergence = run_convergence(&models, &train, &eval, &cfg.train_config(), &[0, 1, 2]).unwrap();
        Trained {
            convergence,
            elapsed: t0.elapsed(),
        }
    })
}

struct Races {
    /// PI-AttNP, PI-AttNP with the filter, AttNP.
    report: RaceReport,
    noise_deg: f64,
    filtered_logs: Vec<EpisodeLog>,
    elapsed: Duration,
}

fn race_trio(cfg: &RunConfig) -> (RaceReport, Vec<EpisodeLog>) {
    let t = trained();
    let map = bundled_track(UNSEEN_TRACK).unwrap();
    let mut report = RaceReport {
        track: map.name().to_string(),
        policies: Vec::new(),
    };
    let mut filtered_logs = Vec::new();
    for (kind, cbf) in [(ModelKind::PiAttNp, false), (ModelKind::PiAttNp, true), (ModelKind::AttNp, false)] {
        let mut policy = NpPolicy { net: t.net(kind) };
        let (race, logs) = race_policy(&mut policy, &map, &cfg.race_config(cbf)).unwrap();
        if cbf {
            filtered_logs = logs;
        }
        report.policies.push(race);
    }
    (report, filtered_logs)
}

/// Races on the unseen track; repeated under 2° steering noise when no
/// learned policy collides without it.
fn races() -> &'static Races {
    static R: OnceLock<Races> = OnceLock::new();
    R.get_or_init(|| {
        let mut cfg = RunConfig::default();
        let t0 = Instant::now();
        let (mut report, mut filtered_logs) = race_trio(&cfg);
        if report.policies.iter().all(|p| p.total_collisions() == 0) {
            cfg.race.noise_deg = 2.0;
            (report, filtered_logs) = race_trio(&cfg);
        }
        Races {
            report,
            noise_deg: cfg.race.noise_deg,
            filtered_logs,
            elapsed: t0.elapsed(),
        }
    })
}

fn summary(p: &PolicyRace) -> String {
    let ttf = p.avg_ttf().map_or("n/a".into(), |t| format!("{t:.2} s"));
    format!(
        "{}{} coll {} ttf {} incomplete {}",
        p.policy,
        if p.cbf { "+cbf" } else { "" },
        p.total_collisions(),
        ttf,
        p.incomplete()
    )
}

// ---------------------------------------------------------------- criteria

/// Closest feasible point to `raw` on a 10³ grid over the box, refined on a
/// 10⁴ grid spanning the neighbouring coarse cells; the endpoint maximizing
/// `Lg·δ` when no grid point is feasible.
fn grid_qp(raw: f64, c: &SafetyContext) -> f64 {
    let (lf, lg) = lie_derivatives(c);
    let b = -lf - c.alpha * c.h();
    let m = c.steer_max;
    let search = |lo: f64, hi: f64, n: usize| {
        let step = (hi - lo) / n as f64;
        let mut best: Option<f64> = None;
        for i in 0..=n {
            let d = if i == n { hi } else { lo + i as f64 * step }.clamp(-m, m);
            if lg * d >= b && best.map_or(true, |x| (d - raw).abs() < (x - raw).abs()) {
                best = Some(d);
            }
        }
        best
    };
    let coarse_step = 2.0 * m / 1000.0;
    match search(-m, m, 1000) {
        Some(c0) => search(c0 - coarse_step, c0 + coarse_step, 10_000).unwrap_or(c0),
        None => {
            if lg * m >= lg * -m {
                m
            } else {
                -m
            }
        }
    }
}

#[test]
fn criterion_01_filter_matches_grid_qp() {
    let _g = exclusive();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut skipped) = (0.0f64, 0usize);
    let mut times = Vec::with_capacity(100_000);
    for _ in 0..100_000 {
        let c = SafetyContext {
            d_min: rng.gen_range(0.02..10.0),
            phi: rng.gen_range(-2.356..2.356),
            v: rng.gen_range(0.0..8.0),
            wheelbase: 0.33,
            d_safe: rng.gen_range(0.0..0.5),
            alpha: rng.gen_range(0.1..20.0),
            steer_max: MAX_STEER,
        };
        let raw = rng.gen_range(-1.0..1.0);
        let t0 = Instant::now();
        let r = filter_steering(raw, &c).unwrap();
        times.push(t0.elapsed().as_secs_f64());
        if lie_derivatives(&c).1.abs() <= DEGENERATE_GAIN {
            skipped += 1;
            continue;
        }
        worst = worst.max((r.steer - grid_qp(raw, &c)).abs());
    }
    let med_us = median(times.into_iter()) * 1e6;
    report(
        1,
        "closed-form filter vs grid QP",
        worst <= 1e-6 && med_us < 10.0,
        &format!("max |Δδ| {worst:.2e} rad over 100000 contexts ({skipped} degenerate skipped); median {med_us:.3} µs/call"),
    );
}

#[test]
fn criterion_02_lie_derivatives_and_certificate() {
    let _g = exclusive();
    let ctx = |phi: f64| SafetyContext {
        d_min: 1.5,
        phi,
        v: 2.0,
        wheelbase: 0.33,
        d_safe: 0.1,
        alpha: 2.0,
        steer_max: MAX_STEER,
    };
    // v = 2, L = 0.33, d = 1.5: v·d/L = 100/11
    let k = 100.0 / 11.0;
    let cases = [
        (0.0, -2.0, 0.0),
        (FRAC_PI_2, 0.0, k),
        (-FRAC_PI_2, 0.0, -k),
        (FRAC_PI_4, -2.0 * FRAC_1_SQRT_2, k * FRAC_1_SQRT_2),
        (-FRAC_PI_4, -2.0 * FRAC_1_SQRT_2, -k * FRAC_1_SQRT_2),
    ];
    let mut worst = 0.0f64;
    for (phi, lf, lg) in cases {
        let (a, b) = lie_derivatives(&ctx(phi));
        worst = worst.max((a - lf).abs()).max((b - lg).abs());
    }
    // h decaying at exactly rate α passes, faster decay fails, growth passes,
    // and inside the unsafe set h must rise at least at rate α·|h|
    let (dt, alpha) = (0.005, 2.0);
    let mut h = vec![1.0];
    for _ in 0..200 {
        let last = *h.last().unwrap();
        h.push(last * (1.0 - alpha * dt));
    }
    let boundary = h.windows(2).all(|w| certify_step(w[0], w[1], dt, alpha));
    let faster = !certify_step(1.0, 1.0 - 1.01 * alpha * dt, dt, alpha);
    let growth = certify_step(0.5, 0.6, dt, alpha);
    let unsafe_ok = certify_step(-0.1, -0.1 + 0.2 * dt, dt, alpha) && !certify_step(-0.1, -0.1 + 0.19 * dt, dt, alpha);
    let pass = worst <= 1e-12 && boundary && faster && growth && unsafe_ok;
    report(
        2,
        "Lie derivatives and certificate arithmetic",
        pass,
        &format!("max error {worst:.1e} over φ ∈ {{0, ±π/2, ±π/4}}; sequences boundary={boundary} faster-rejected={faster} growth={growth} unsafe={unsafe_ok}"),
    );
}

#[test]
fn criterion_03_gradients() {
    let _g = exclusive();
    let t0 = Instant::now();
    let ops = std::panic::catch_unwind(|| gradients::OP_SUITES.iter().for_each(|f| f())).is_ok();
    let p95 = gradients::objective_probe_p95();
    let secs = t0.elapsed().as_secs_f64();
    report(
        3,
        "finite-difference gradients",
        ops && p95 < 1e-4 && secs < 60.0,
        &format!("all op checks {}; objective 95th pct rel. err {p95:.2e} over 100 probes; {secs:.1} s", if ops { "pass" } else { "FAIL" }),
    );
}

#[test]
fn criterion_04_convergence_ordering() {
    let _g = exclusive();
    let t = trained();
    let c = &t.convergence;
    let med = |k| c.median_final(k).unwrap_or((f64::NAN, f64::NAN));
    let ((pm, pn), (am, an), (rm, rn)) = (med(ModelKind::PiAttNp), med(ModelKind::AttNp), med(ModelKind::ResMlp));
    let failed = c.runs.iter().filter(|r| r.failure.is_some()).count();
    let mins = t.elapsed.as_secs_f64() / 60.0;
    let pass = failed == 0 && pm < am && pm < rm && pn < an && pn < rn && mins < 30.0;
    report(
        4,
        "convergence ordering, 3 seeds x 2000 steps",
        pass,
        &format!(
            "median final MAE pi-attnp {pm:.5} attnp {am:.5} res-mlp {rm:.5}; NLL pi-attnp {pn:.4} attnp {an:.4} res-mlp {rn:.4}; {failed} diverged; {mins:.1} min"
        ),
    );
}

#[test]
fn criterion_05_closed_loop_safety_ordering() {
    let _g = exclusive();
    let r = races();
    let [pi, pi_cbf, att] = [&r.report.policies[0], &r.report.policies[1], &r.report.policies[2]];
    let coll = |p: &PolicyRace| p.total_collisions();
    let ordered = coll(pi_cbf) <= coll(pi) && coll(pi) <= coll(att);
    let ttf_ok = match (pi.avg_ttf(), pi_cbf.avg_ttf()) {
        (Some(a), Some(b)) => (b - a).abs() <= 0.05 * a,
        _ => false,
    };
    let complete = pi.incomplete() == 0 && pi_cbf.incomplete() == 0;
    let mins = r.elapsed.as_secs_f64() / 60.0;
    report(
        5,
        "closed-loop safety ordering on the unseen track",
        ordered && ttf_ok && complete && mins < 10.0,
        &format!(
            "noise σ={}°; {}; {}; {}; {mins:.1} min",
            r.noise_deg,
            summary(pi),
            summary(pi_cbf),
            summary(att)
        ),
    );
}

#[test]
fn criterion_06_expert_competence() {
    let _g = exclusive();
    let cfg = RunConfig::default();
    let mut lines = Vec::new();
    let mut pass = true;
    for name in TRAINING_TRACKS.iter().copied().chain([UNSEEN_TRACK]) {
        let map = bundled_track(name).unwrap();
        let (race, _) = race_policy(&mut FtgPolicy { params: cfg.ftg }, &map, &cfg.race_config(false)).unwrap();
        let laps = race.runs.len() - race.incomplete();
        pass &= laps == 5 && race.total_collisions() == 0;
        lines.push(format!("{name} {laps}/5 laps {} coll", race.total_collisions()));
    }
    let table = [(15.0, 1.5), (7.0, 3.0), (5.0, 5.0), (-15.0, 1.5), (-7.0, 3.0), (0.0, 5.0)];
    let speeds = table.iter().all(|&(deg, want)| speed_heuristic(f64::to_radians(deg)) == want);
    report(
        6,
        "expert competence gate",
        pass && speeds,
        &format!("{}; speed table {}", lines.join(", "), if speeds { "exact" } else { "MISMATCH" }),
    );
}

#[test]
fn criterion_07_control_loop_latency() {
    let _g = exclusive();
    let cfg = RunConfig::default();
    let net = trained().net(ModelKind::PiAttNp);
    let map = bundled_track(UNSEEN_TRACK).unwrap();
    let (_, logs) = race_policy(&mut FtgPolicy { params: cfg.ftg }, &map, &cfg.race_config(false)).unwrap();
    let states: Vec<_> = logs[0].steps.iter().step_by(10).map(|s| s.state).collect();
    let mut times = Vec::with_capacity(states.len());
    let mut previous = None;
    for s in &states {
        let scan = raycast_scan(s, &map, cfg.sim.beams, cfg.sim.max_range).unwrap();
        let t0 = Instant::now();
        let binned = bin_scan(&scan, cfg.sim.bins).unwrap();
        let obs = Observation {
            scan: &scan,
            binned: &binned,
            v: s.v,
            omega: s.omega,
            previous: previous.as_ref(),
        };
        let (raw, _) = predict_steering(&net, &observation_batch(&obs).unwrap()).unwrap();
        let ctx = SafetyContext::from_scan(&scan, s.v, cfg.sim.wheelbase, &cfg.cbf);
        let steer = filter_steering(raw, &ctx).unwrap().steer;
        times.push(t0.elapsed().as_secs_f64());
        previous = Some(PreviousStep {
            binned,
            v: s.v,
            omega: s.omega,
            steer,
        });
    }
    let n = times.len();
    let med_ms = median(times.into_iter()) * 1e3;
    report(
        7,
        "policy plus filter step latency",
        med_ms < 5.0,
        &format!("median {med_ms:.3} ms over {n} steps (bin, predict, filter)"),
    );
}

#[test]
fn criterion_08_certificate_accounting() {
    let _g = exclusive();
    let r = races();
    let steps: Vec<_> = r.filtered_logs.iter().flat_map(|l| &l.steps).collect();
    let in_box = steps.iter().filter(|s| s.steer.abs() <= MAX_STEER).count();
    let p = &r.report.policies[1];
    let checks: usize = p.runs.iter().map(|m| m.certificate_checks).sum();
    let bad: usize = p.runs.iter().map(|m| m.certificate_violations).sum();
    let residual_bad: usize = p.runs.iter().map(|m| m.residual_violations).sum();
    let cert = if checks > 0 { 1.0 - bad as f64 / checks as f64 } else { 0.0 };
    report(
        8,
        "certificate accounting with the filter on",
        in_box == steps.len() && checks > 0 && cert >= 0.99,
        &format!(
            "{in_box}/{} steps in the box; certificate holds on {:.2}% of {checks} feasible steps; {residual_bad} residual violations; {} infeasible steps",
            steps.len(),
            100.0 * cert,
            p.runs.iter().map(|m| m.filter_infeasible).sum::<usize>()
        ),
    );
}

fn racer(args: &[&str]) {
    let o = Command::new(env!("CARGO_BIN_EXE_racer")).args(args).output().unwrap();
    assert!(o.status.success(), "racer {args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Vec<String> {
    names
        .iter()
        .filter(|n| std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok())
        .map(|n| n.to_string())
        .collect()
}

#[test]
fn criterion_09_determinism() {
    let _g = exclusive();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        std::fs::create_dir_all(dir).unwrap();
        let log = dir.join("demo.ndjson");
        let d = |p: &Path| p.to_str().unwrap().to_string();
        racer(&["gen-data", "--seed", "4", "--out", &d(&log)]);
        racer(&["train", "--model", "pi-attnp", "--data", &d(&log), "--steps", "20", "--seed", "4", "--out", &d(&dir.join("train"))]);
        racer(&["race", "--policy", "pi-attnp", "--ckpt", &d(&dir.join("train/model.ckpt")), "--laps", "1", "--cbf", "on", "--seed", "4", "--out", &d(&dir.join("race"))]);
    }
    let mut diff = same_files(&a, &b, &["demo.ndjson"]);
    diff.extend(same_files(&a.join("train"), &b.join("train"), &["model.ckpt", "convergence.csv", "convergence.txt", "config.json"]));
    diff.extend(same_files(&a.join("race"), &b.join("race"), &["races.csv", "races.txt", "config.json"]));
    report(
        9,
        "byte-identical gen-data, train and race outputs",
        diff.is_empty(),
        &if diff.is_empty() {
            "8 primary files identical across two runs".to_string()
        } else {
            format!("differing: {}", diff.join(", "))
        },
    );
}

#[test]
fn criterion_10_invariant_suites() {
    let _g = exclusive();
    let mut failed = Vec::new();
    for (name, suite) in invariants::SUITES {
        if std::panic::catch_unwind(suite).is_err() {
            failed.push(name);
        }
    }
    report(
        10,
        "property suites, 1000 cases each",
        failed.is_empty(),
        &if failed.is_empty() {
            format!("{} suites pass", invariants::SUITES.len())
        } else {
            format!("failing: {}", failed.join(", "))
        },
    );
}
