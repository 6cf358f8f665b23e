use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use racer::cbf::{filter_steering, SafetyContext};
use racer::config::RunConfig;
use racer::dataset::{record_demonstrations, split_train_eval, DriveLog};
use racer::eval::{emit_convergence, emit_races, run_convergence, RaceReport};
use racer::ftg::FtgPolicy;
use racer::np::{ModelKind, Network, NpPolicy};
use racer::sim::{resolve_track, Policy, Scan, UNSEEN_TRACK};

mod scan_file;

const DEFAULTS: fn() -> RunConfig = RunConfig::default;

/// Generates `Knobs`, one long flag per configuration value, and the code
/// that copies explicitly given flags over a loaded configuration.
macro_rules! knobs {
    ($( $field:ident : $ty:ty = $($path:ident).+ , $help:literal ;)*) => {
        #[derive(Args, Debug, Clone)]
        #[command(next_help_heading = "Configuration (flag > --config file > default)")]
        struct Knobs {
            $(
                #[arg(long, help = $help, default_value_t = DEFAULTS().$($path).+)]
                $field: $ty,
            )*
        }

        impl Knobs {
            fn apply(&self, m: &ArgMatches, cfg: &mut RunConfig) {
                $(
                    if m.value_source(stringify!($field)) == Some(ValueSource::CommandLine) {
                        cfg.$($path).+ = self.$field.clone();
                    }
                )*
            }
        }
    };
}

knobs! {
    dt: f64 = sim.dt, "Control period, s";
    beams: usize = sim.beams, "LiDAR beams over the 270° field of view";
    max_range: f64 = sim.max_range, "LiDAR range, m";
    bins: usize = sim.bins, "Bins of the condensed scan (must divide --beams)";
    r_car: f64 = sim.r_car, "Collision radius of the car, m";
    wheelbase: f64 = sim.wheelbase, "Wheelbase, m";
    speed_tau: f64 = sim.speed_tau, "Speed response time constant, s";
    max_steps: usize = sim.max_steps, "Step limit per run";
    respawn_penalty: f64 = sim.respawn_penalty, "Clock penalty per collision respawn, s";
    stuck_steps: usize = sim.stuck_steps, "Window of the stuck check, steps";
    stuck_distance: f64 = sim.stuck_distance, "Minimum travel per stuck window, m";
    bubble_radius: f64 = ftg.bubble_radius, "Expert: radius cleared around the nearest return, m";
    gap_threshold: f64 = ftg.gap_threshold, "Expert: ranges above this count as free, m";
    steer_gain: f64 = ftg.steer_gain, "Expert: steering per radian of target bearing";
    ftg_range: f64 = ftg.max_range, "Expert: range clamp before gap search, m";
    alpha: f64 = cbf.alpha, "Barrier decay rate, 1/s";
    d_safe: f64 = cbf.d_safe, "Barrier clearance margin, m";
    demo_noise: f64 = demo.steer_noise, "Half-width of uniform noise on executed expert steering, rad";
    lateral_jitter: f64 = demo.lateral_jitter, "Demonstrations: max lateral start offset, m";
    heading_jitter: f64 = demo.heading_jitter, "Demonstrations: max start heading offset, rad";
    embed: usize = model.embed, "Velocity embedding width";
    repr: usize = model.repr, "Representation width";
    latent: usize = model.latent, "Latent width";
    heads: usize = model.heads, "Attention heads (must divide --repr)";
    hidden: usize = model.hidden, "Hidden layer width";
    hidden_layers: usize = model.hidden_layers, "Hidden layers per MLP";
    res_blocks: usize = model.res_blocks, "Residual blocks of res-mlp";
    batch: usize = train.batch, "Training batch size";
    lr: f64 = train.lr, "Adam learning rate";
    eval_examples: usize = train.eval_examples, "Examples in the evaluation slice";
    split: f64 = train.split, "Fraction of episodes used for training";
    noise_deg: f64 = race.noise_deg, "Races: std of uniform steering noise, degrees";
    race_lateral_jitter: f64 = race.lateral_jitter, "Races: max lateral start offset, m";
    race_heading_jitter: f64 = race.heading_jitter, "Races: max start heading offset, rad";
}

#[derive(Parser, Debug)]
#[command(name = "racer", version, about = "Gap-following demonstrations, neural-process steering policies and a barrier steering filter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record expert demonstrations on the training tracks.
    GenData(GenData),
    /// Train one model and write its checkpoint and metric series.
    Train(Train),
    /// Race one policy on a track and write race metrics.
    Race(Race),
    /// Filter one steering command against a scan and print the result.
    FilterDemo(FilterDemo),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; any subset of sections and keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    knobs: Knobs,
}

#[derive(Args, Debug)]
struct GenData {
    /// Bundled track names or track files, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULTS().demo.tracks)]
    tracks: Vec<String>,
    /// Episodes per track.
    #[arg(long, default_value_t = DEFAULTS().demo.episodes)]
    episodes: usize,
    /// Seed of the start perturbations and expert noise.
    #[arg(long, default_value_t = DEFAULTS().demo.seed)]
    seed: u64,
    /// Output log file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Train {
    /// pi-attnp, attnp or res-mlp.
    #[arg(long, value_parser = ModelKind::parse)]
    model: ModelKind,
    /// Demonstration log from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Optimizer steps.
    #[arg(long, default_value_t = DEFAULTS().train.steps)]
    steps: usize,
    /// Seed of initialization, batch order and latent noise.
    #[arg(long, default_value_t = DEFAULTS().train.seed)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyName {
    Ftg,
    PiAttnp,
    Attnp,
    ResMlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Debug)]
struct Race {
    /// Steering policy; learned policies need a matching --ckpt.
    #[arg(long, value_enum)]
    policy: PolicyName,
    /// Checkpoint of a learned policy.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Bundled track name or track file.
    #[arg(long, default_value = UNSEEN_TRACK)]
    track: String,
    /// Single-lap runs.
    #[arg(long, default_value_t = DEFAULTS().race.laps)]
    laps: usize,
    /// Pass steering through the barrier filter.
    #[arg(long, value_enum, default_value = "off")]
    cbf: Switch,
    /// Seed of the start perturbations and steering noise.
    #[arg(long, default_value_t = DEFAULTS().race.seed)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct FilterDemo {
    /// Scan file: one range per line, `#` comments, optional `max_range <m>`.
    #[arg(long)]
    scan_file: PathBuf,
    /// Raw steering command, rad.
    #[arg(long, allow_hyphen_values = true)]
    delta_raw: f64,
    /// Forward speed, m/s.
    #[arg(long)]
    v: f64,
    #[command(flatten)]
    common: Common,
}

fn resolve(common: &Common, sub: &ArgMatches) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    common.knobs.apply(sub, &mut cfg);
    Ok(cfg)
}

fn flag(sub: &ArgMatches, id: &str) -> bool {
    sub.value_source(id) == Some(ValueSource::CommandLine)
}

fn gen_data(a: &GenData, sub: &ArgMatches) -> anyhow::Result<()> {
    let mut cfg = resolve(&a.common, sub)?;
    if flag(sub, "tracks") {
        cfg.demo.tracks = a.tracks.clone();
    }
    if flag(sub, "episodes") {
        cfg.demo.episodes = a.episodes;
    }
    if flag(sub, "seed") {
        cfg.demo.seed = a.seed;
    }
    cfg.validate()?;
    if cfg.demo.episodes == 0 {
        bail!(racer::Error::Config("demo.episodes must be positive".into()));
    }
    let tracks = cfg.demo.tracks.iter().map(|t| resolve_track(t)).collect::<racer::Result<Vec<_>>>()?;
    let log = record_demonstrations(&tracks, cfg.demo.episodes, cfg.demo.seed, &cfg.demo_config(), cfg.to_json())?;
    log.write(&a.out)?;
    let flagged = log.episodes.iter().filter(|e| e.flagged).count();
    eprintln!(
        "wrote {} records in {} episodes ({} flagged) to {}",
        log.records.len(),
        log.episodes.len(),
        flagged,
        a.out.display()
    );
    Ok(())
}

fn train(a: &Train, sub: &ArgMatches) -> anyhow::Result<()> {
    let mut cfg = resolve(&a.common, sub)?;
    if flag(sub, "steps") {
        cfg.train.steps = a.steps;
    }
    if flag(sub, "seed") {
        cfg.train.seed = a.seed;
    }
    cfg.validate()?;
    let log = DriveLog::read(&a.data)?;
    if log.header.bins != cfg.sim.bins {
        bail!(racer::Error::Config(format!(
            "log has {} bins but the configuration uses {}",
            log.header.bins, cfg.sim.bins
        )));
    }
    let (train_log, eval_log) = split_train_eval(&log, cfg.train.split, &[UNSEEN_TRACK])?;
    let model = cfg.model_config(a.model);
    let report = run_convergence(&[model], &train_log, &eval_log, &cfg.train_config(), &[cfg.train.seed])?;
    std::fs::create_dir_all(&a.out)?;
    let run = &report.runs[0];
    let ckpt = a.out.join("model.ckpt");
    run.net.save(&ckpt, run.seed, (run.series.len() - 1) as u64, cfg.to_json())?;
    emit_convergence(&report, &a.out, &cfg.to_json())?;
    let last = run.final_row();
    eprintln!(
        "{}: step {} eval MAE {:.5} NLL {:.4}; wrote {}",
        a.model,
        last.step,
        last.mae,
        last.nll,
        ckpt.display()
    );
    if let Some(f) = &run.failure {
        bail!(racer::Error::Numeric(format!("training diverged: {f}")));
    }
    Ok(())
}

fn race(a: &Race, sub: &ArgMatches) -> anyhow::Result<()> {
    let mut cfg = resolve(&a.common, sub)?;
    if flag(sub, "laps") {
        cfg.race.laps = a.laps;
    }
    if flag(sub, "seed") {
        cfg.race.seed = a.seed;
    }
    cfg.validate()?;
    let map = resolve_track(&a.track)?;
    let mut policy: Box<dyn Policy> = match (a.policy, &a.ckpt) {
        (PolicyName::Ftg, None) => Box::new(FtgPolicy { params: cfg.ftg }),
        (PolicyName::Ftg, Some(_)) => bail!(racer::Error::Config("--policy ftg takes no --ckpt".into())),
        (_, None) => bail!(racer::Error::Config(format!(
            "--policy {} needs --ckpt",
            a.policy.to_possible_value().expect("named").get_name()
        ))),
        (p, Some(path)) => {
            let (net, _) = Network::load(path)?;
            let want = match p {
                PolicyName::PiAttnp => ModelKind::PiAttNp,
                PolicyName::Attnp => ModelKind::AttNp,
                _ => ModelKind::ResMlp,
            };
            if net.kind() != want {
                bail!(racer::Error::Config(format!(
                    "{} holds a {} model, not {want}",
                    path.display(),
                    net.kind()
                )));
            }
            if net.config.bins != cfg.sim.bins {
                bail!(racer::Error::Config(format!(
                    "checkpoint expects {} bins but the configuration uses {}",
                    net.config.bins, cfg.sim.bins
                )));
            }
            Box::new(NpPolicy { net })
        }
    };
    let race_cfg = cfg.race_config(a.cbf == Switch::On);
    let (race, _) = racer::eval::race_policy(policy.as_mut(), &map, &race_cfg)?;
    let report = RaceReport {
        track: map.name().to_string(),
        policies: vec![race],
    };
    emit_races(&report, &a.out, &cfg.to_json())?;
    print!("{}", racer::eval::race_table(&report));
    Ok(())
}

fn filter_demo(a: &FilterDemo, sub: &ArgMatches) -> anyhow::Result<()> {
    let cfg = resolve(&a.common, sub)?;
    cfg.validate()?;
    let (ranges, max_range) = scan_file::read(&a.scan_file, cfg.sim.max_range)?;
    let scan = Scan::new(ranges, max_range)?;
    let ctx = SafetyContext::from_scan(&scan, a.v, cfg.sim.wheelbase, &cfg.cbf);
    let r = filter_steering(a.delta_raw, &ctx)?;
    println!("delta_raw    {}", a.delta_raw);
    println!("delta_star   {}", r.steer);
    println!("active       {}", r.active);
    println!("feasible     {}", r.feasible);
    println!("raw_clamped  {}", r.raw_clamped);
    println!("h            {}", r.h);
    println!("d_min        {}", ctx.d_min);
    println!("phi          {}", ctx.phi);
    println!("lf           {}", r.lf);
    println!("lg           {}", r.lg);
    println!("residual     {}", r.residual(cfg.cbf.alpha));
    println!("solve_us     {:.3}", r.solve_time * 1e6);
    Ok(())
}

/// 2 for bad input or configuration, 3 for broken internal invariants.
fn exit_code(err: &anyhow::Error) -> u8 {
    use racer::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Dimension(_) | E::Numeric(_) | E::Contract(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a, sub),
        Command::Train(a) => train(a, sub),
        Command::Race(a) => race(a, sub),
        Command::FilterDemo(a) => filter_demo(a, sub),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
