use crate::autodiff::Tensor;
use crate::dataset::ContextTargetBatch;
use crate::error::Result;
use crate::ftg::gap_prior;
use crate::sim::{Observation, Policy};

use super::model::Network;

/// Single-task batch for one control step: the previous observation and
/// its applied steering as context, the current observation as target.
///
/// Without a previous step (start of a run or after a respawn) the current
/// observation serves as its own context with zero steering.
pub fn observation_batch(obs: &Observation<'_>) -> Result<ContextTargetBatch> {
    let row = |bins: &[f64], v: f64, omega: f64| {
        let mut r = bins.to_vec();
        r.push(v);
        r.push(omega);
        r
    };
    let width = obs.binned.bins.len() + 2;
    let target = row(&obs.binned.bins, obs.v, obs.omega);
    let (context, steer) = match obs.previous {
        Some(p) => (row(&p.binned.bins, p.v, p.omega), p.steer),
        None => (target.clone(), 0.0),
    };
    Ok(ContextTargetBatch {
        groups: 1,
        n_context: 1,
        n_target: 1,
        x_context: Tensor::matrix(1, width, context)?,
        y_context: Tensor::matrix(1, 1, vec![steer])?,
        x_target: Tensor::matrix(1, width, target)?,
        y_target: Tensor::matrix(1, 1, vec![0.0])?,
        prior: Tensor::matrix(1, 1, vec![gap_prior(obs.binned).angle])?,
    })
}

/// Closed-loop driver around a trained network.
pub struct NpPolicy {
    pub net: Network,
}

impl Policy for NpPolicy {
    fn name(&self) -> String {
        self.net.kind().to_string()
    }

    fn steer(&mut self, obs: &Observation<'_>) -> Result<f64> {
        let batch = observation_batch(obs)?;
        Ok(self.net.predict(&batch)?[0])
    }
}
