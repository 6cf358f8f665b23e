//! Training runs with per-step evaluation on a held-out slice.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Adam;
use crate::dataset::{build_batches, eval_slice, ContextTargetBatch, DriveLog};
use crate::error::Result;
use crate::np::{ModelConfig, ModelKind, Network};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Examples in the fixed evaluation slice.
    pub eval_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 100,
            lr: 1e-3,
            eval_examples: 500,
        }
    }
}

/// Metrics after `step` optimizer updates. `loss` is the training objective
/// on that step's batch (for step 0, on the first batch before any update);
/// `mae` and `nll` come from the evaluation slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub mae: f64,
    pub nll: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: ModelKind,
    pub seed: u64,
    /// One row per step including the initial one, so `steps + 1` rows for
    /// a run that finished.
    pub series: Vec<MetricRow>,
    /// Set when the loss stopped being finite; the series ends there.
    pub failure: Option<String>,
    pub net: Network,
}

impl TrainRun {
    pub fn final_row(&self) -> &MetricRow {
        self.series.last().expect("series holds the initial row")
    }

    pub fn min_mae(&self) -> f64 {
        self.series.iter().map(|r| r.mae).fold(f64::INFINITY, f64::min)
    }

    pub fn min_nll(&self) -> f64 {
        self.series.iter().map(|r| r.nll).fold(f64::INFINITY, f64::min)
    }
}

/// Trains one model from seed `seed`. Parameter initialisation, batch order
/// and latent noise are all derived from that seed.
pub fn train_model(
    model: &ModelConfig,
    train: &DriveLog,
    eval: &ContextTargetBatch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainRun> {
    let mut net = Network::new(model.clone(), seed)?;
    let mut batches = build_batches(train, cfg.batch, seed.wrapping_add(1))?;
    let mut noise = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut adam = Adam::new(cfg.lr);
    let mut series = Vec::with_capacity(cfg.steps + 1);
    let mut failure = None;

    let first = batches.next().expect("batch stream is endless");
    let (_, _, m0) = net.elbo_loss(&first, &mut noise)?;
    let e0 = net.evaluate(eval)?;
    series.push(MetricRow {
        step: 0,
        loss: m0.loss,
        mae: e0.mae,
        nll: e0.nll,
    });
    let mut batch = first;
    for step in 1..=cfg.steps {
        let (mut g, loss, m) = net.elbo_loss(&batch, &mut noise)?;
        if !m.loss.is_finite() {
            failure = Some(format!("loss became {} at step {step}", m.loss));
            break;
        }
        g.backward(loss)?;
        let grads = g.param_grads(&net.params);
        adam.step(&mut net.params, &grads)?;
        let e = net.evaluate(eval)?;
        if !(e.mae.is_finite() && e.nll.is_finite()) {
            failure = Some(format!("evaluation metrics became non-finite at step {step}"));
            break;
        }
        series.push(MetricRow {
            step,
            loss: m.loss,
            mae: e.mae,
            nll: e.nll,
        });
        batch = batches.next().expect("batch stream is endless");
    }
    Ok(TrainRun {
        model: model.kind,
        seed,
        series,
        failure,
        net,
    })
}

#[derive(Clone, Debug, Default)]
pub struct ConvergenceReport {
    pub runs: Vec<TrainRun>,
}

impl ConvergenceReport {
    pub fn runs_of(&self, kind: ModelKind) -> impl Iterator<Item = &TrainRun> {
        self.runs.iter().filter(move |r| r.model == kind)
    }

    /// Median over seeds of the final evaluation MAE and NLL.
    pub fn median_final(&self, kind: ModelKind) -> Option<(f64, f64)> {
        let rows: Vec<_> = self.runs_of(kind).filter(|r| r.failure.is_none()).map(|r| *r.final_row()).collect();
        if rows.is_empty() {
            return None;
        }
        Some((median(rows.iter().map(|r| r.mae)), median(rows.iter().map(|r| r.nll))))
    }
}

pub fn median(xs: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = xs.collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains every model configuration with every seed on `train`, evaluating
/// on a fixed strided slice of `eval`.
pub fn run_convergence(
    models: &[ModelConfig],
    train: &DriveLog,
    eval: &DriveLog,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<ConvergenceReport> {
    let slice = eval_slice(eval, cfg.eval_examples)?;
    let mut report = ConvergenceReport::default();
    for m in models {
        for &seed in seeds {
            report.runs.push(train_model(m, train, &slice, cfg, seed)?);
        }
    }
    Ok(report)
}
