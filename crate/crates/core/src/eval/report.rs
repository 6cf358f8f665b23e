//! Columnar metric files and fixed-width summary tables.
//!
//! Every numeric cell is written with Rust's shortest round-trip float
//! formatting, so parsing a file back recovers the exact values. Wall-clock
//! measurements go to their own files; everything else is a deterministic
//! function of the configuration and seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::convergence::ConvergenceReport;
use super::race::RaceReport;
use crate::error::{Error, Result};
use crate::np::ModelKind;

pub const CONVERGENCE_HEADER: [&str; 6] = ["model", "seed", "step", "loss", "mae", "nll"];

pub const RUN_HEADER: [&str; 8] = ["policy", "cbf", "run", "ttf_s", "collisions", "steer_rate", "steps", "outcome"];

pub const FILTER_RUN_HEADER: [&str; 6] = [
    "filter_active",
    "filter_infeasible",
    "box_violations",
    "residual_violations",
    "certificate_checks",
    "certificate_violations",
];

pub const LATENCY_HEADER: [&str; 9] = [
    "policy",
    "cbf",
    "calls",
    "mean_ms",
    "std_ms",
    "median_ms",
    "max_ms",
    "filter_mean_ms",
    "filter_std_ms",
];

fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Header and rows of a comma-separated file.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| Error::Data(format!("csv: {e}")))?
        .iter()
        .map(String::from)
        .collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok((header, rows))
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

pub fn convergence_csv(report: &ConvergenceReport) -> Result<String> {
    let rows: Vec<Vec<String>> = report
        .runs
        .iter()
        .flat_map(|run| {
            run.series.iter().map(move |m| {
                vec![
                    run.model.to_string(),
                    run.seed.to_string(),
                    m.step.to_string(),
                    m.loss.to_string(),
                    m.mae.to_string(),
                    m.nll.to_string(),
                ]
            })
        })
        .collect();
    csv_string(&CONVERGENCE_HEADER, &rows)
}

/// Lowest and final evaluation metrics per run, then seed medians per model.
pub fn convergence_table(report: &ConvergenceReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>6} {:>12} {:>12} {:>12} {:>12}  status",
        "model", "seed", "lowest MAE", "lowest NLL", "final MAE", "final NLL"
    );
    for run in &report.runs {
        let f = run.final_row();
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>12.5} {:>12.4} {:>12.5} {:>12.4}  {}",
            run.model.name(),
            run.seed,
            run.min_mae(),
            run.min_nll(),
            f.mae,
            f.nll,
            run.failure.as_deref().unwrap_or("ok")
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<10} {:>12} {:>12}", "model", "median MAE", "median NLL");
    for kind in ModelKind::ALL {
        if let Some((mae, nll)) = report.median_final(kind) {
            let _ = writeln!(out, "{:<10} {:>12.5} {:>12.4}", kind.name(), mae, nll);
        }
    }
    out
}

fn has_filter(report: &RaceReport) -> bool {
    report.policies.iter().any(|p| p.cbf)
}

/// One row per run; filter columns appear when any policy ran filtered.
pub fn race_runs_csv(report: &RaceReport) -> Result<String> {
    let filter = has_filter(report);
    let mut header: Vec<&str> = RUN_HEADER.to_vec();
    if filter {
        header.extend(FILTER_RUN_HEADER);
    }
    let mut rows = Vec::new();
    for p in &report.policies {
        for r in &p.runs {
            let outcome = serde_json::to_value(&r.outcome)?;
            let mut row = vec![
                p.policy.clone(),
                p.cbf.to_string(),
                r.run.to_string(),
                opt(r.ttf),
                r.collisions.to_string(),
                r.steer_rate.to_string(),
                r.steps.to_string(),
                outcome["kind"].as_str().unwrap_or_default().to_string(),
            ];
            if filter {
                row.extend(
                    [
                        r.filter_active,
                        r.filter_infeasible,
                        r.box_violations,
                        r.residual_violations,
                        r.certificate_checks,
                        r.certificate_violations,
                    ]
                    .map(|x| x.to_string()),
                );
            }
            rows.push(row);
        }
    }
    csv_string(&header, &rows)
}

pub fn latency_csv(report: &RaceReport) -> Result<String> {
    let rows: Vec<Vec<String>> = report
        .policies
        .iter()
        .map(|p| {
            let (l, f) = (&p.latency, &p.filter_latency);
            vec![
                p.policy.clone(),
                p.cbf.to_string(),
                l.count.to_string(),
                l.mean_ms.to_string(),
                l.std_ms.to_string(),
                l.median_ms.to_string(),
                l.max_ms.to_string(),
                if p.cbf { f.mean_ms.to_string() } else { String::new() },
                if p.cbf { f.std_ms.to_string() } else { String::new() },
            ]
        })
        .collect();
    csv_string(&LATENCY_HEADER, &rows)
}

fn label(policy: &str, cbf: bool) -> String {
    if cbf {
        format!("{policy} + CBF")
    } else {
        policy.to_string()
    }
}

/// Racing metrics in the column order TTF, collisions, steering rate, then
/// barrier accounting for filtered policies.
pub fn race_table(report: &RaceReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "track: {}", report.track);
    let _ = writeln!(
        out,
        "{:<18} {:>12} {:>12} {:>16} {:>10}",
        "policy", "Avg TTF (s)", "Avg # coll", "Avg δ̇ (rad/s)", "unfinished"
    );
    for p in &report.policies {
        let ttf = p.avg_ttf().map_or_else(|| "-".to_string(), |t| format!("{t:.3}"));
        let _ = writeln!(
            out,
            "{:<18} {:>12} {:>12.2} {:>16.4} {:>10}",
            label(&p.policy, p.cbf),
            ttf,
            p.avg_collisions(),
            p.avg_steer_rate(),
            p.incomplete()
        );
    }
    if has_filter(report) {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<18} {:>12} {:>12} {:>14} {:>14}",
            "policy", "feasible", "active", "box viol.", "cert. viol."
        );
        for p in report.policies.iter().filter(|p| p.cbf) {
            let active: usize = p.runs.iter().map(|r| r.filter_active).sum();
            let boxv: usize = p.runs.iter().map(|r| r.box_violations).sum();
            let _ = writeln!(
                out,
                "{:<18} {:>12} {:>12} {:>14} {:>14}",
                label(&p.policy, p.cbf),
                p.feasible_fraction().map_or_else(|| "-".into(), |f| format!("{:.4}", f)),
                active,
                boxv,
                p.certificate_violation_fraction()
                    .map_or_else(|| "-".into(), |f| format!("{:.4}", f)),
            );
        }
    }
    out
}

/// Per-call control latency as `mean ± std` in milliseconds.
pub fn latency_table(report: &RaceReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<18} {:>22} {:>22}", "policy", "loop (ms)", "filter (ms)");
    for p in &report.policies {
        let filter = if p.cbf { p.filter_latency.display() } else { "-".into() };
        let _ = writeln!(out, "{:<18} {:>22} {:>22}", label(&p.policy, p.cbf), p.latency.display(), filter);
    }
    out
}

fn write(dir: &Path, name: &str, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    written.push(path);
    Ok(())
}

fn config_block(config: &serde_json::Value) -> Result<String> {
    Ok(format!("config:\n{}\n", serde_json::to_string_pretty(config)?))
}

/// Writes `convergence.csv`, `convergence.txt` and `config.json` into `dir`.
pub fn emit_convergence(report: &ConvergenceReport, dir: &Path, config: &serde_json::Value) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    write(dir, "convergence.csv", &convergence_csv(report)?, &mut written)?;
    let text = format!("{}\n{}", convergence_table(report), config_block(config)?);
    write(dir, "convergence.txt", &text, &mut written)?;
    write(dir, "config.json", &serde_json::to_string_pretty(config)?, &mut written)?;
    Ok(written)
}

/// Writes `races.csv`, `races.txt` and `config.json` (deterministic) plus
/// `latency.csv` and `latency.txt` (wall-clock) into `dir`.
pub fn emit_races(report: &RaceReport, dir: &Path, config: &serde_json::Value) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    write(dir, "races.csv", &race_runs_csv(report)?, &mut written)?;
    let text = format!("{}\n{}", race_table(report), config_block(config)?);
    write(dir, "races.txt", &text, &mut written)?;
    write(dir, "config.json", &serde_json::to_string_pretty(config)?, &mut written)?;
    write(dir, "latency.csv", &latency_csv(report)?, &mut written)?;
    write(dir, "latency.txt", &latency_table(report), &mut written)?;
    Ok(written)
}
