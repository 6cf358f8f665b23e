//! Diagonal Gaussian helpers, both on the tape and in plain arithmetic.

use std::f64::consts::PI;

use crate::autodiff::{Graph, Reduce, Var};
use crate::error::Result;

/// Lower bound on every predicted standard deviation.
pub const SIGMA_MIN: f64 = 1e-3;

/// Mean and standard deviation nodes of a diagonal Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub sigma: Var,
}

/// Splits `[n, 2d]` head output into mean and `SIGMA_MIN + softplus(raw)`.
pub fn gaussian_head(g: &mut Graph, out: Var, d: usize) -> Result<GaussianVars> {
    let mean = g.slice_cols(out, 0, d)?;
    let raw = g.slice_cols(out, d, d)?;
    let sp = g.softplus(raw)?;
    let sigma = g.add_const(sp, SIGMA_MIN);
    Ok(GaussianVars { mean, sigma })
}

/// Elementwise negative log density of `y` under `N(mean, sigma²)`.
pub fn nll_points(g: &mut Graph, y: Var, p: GaussianVars) -> Result<Var> {
    let diff = g.sub(y, p.mean)?;
    let z = g.div(diff, p.sigma)?;
    let z2 = g.square(z)?;
    let half = g.scale(z2, 0.5);
    let log_sigma = g.log(p.sigma)?;
    let s = g.add(half, log_sigma)?;
    Ok(g.add_const(s, 0.5 * (2.0 * PI).ln()))
}

/// `KL(q ‖ p)` for diagonal Gaussians, summed over columns: one value per row.
pub fn kl_rows(g: &mut Graph, q: GaussianVars, p: GaussianVars) -> Result<Var> {
    let log_q = g.log(q.sigma)?;
    let log_p = g.log(p.sigma)?;
    let log_ratio = g.sub(log_p, log_q)?;
    let var_q = g.square(q.sigma)?;
    let dm = g.sub(q.mean, p.mean)?;
    let dm2 = g.square(dm)?;
    let num = g.add(var_q, dm2)?;
    let var_p = g.square(p.sigma)?;
    let frac = g.div(num, var_p)?;
    let half = g.scale(frac, 0.5);
    let t = g.add(log_ratio, half)?;
    let t = g.add_const(t, -0.5);
    g.reduce(Reduce::Sum, t, 1)
}

/// Closed-form `KL(N(mq, sq²) ‖ N(mp, sp²))` summed over dimensions.
pub fn kl_divergence(mq: &[f64], sq: &[f64], mp: &[f64], sp: &[f64]) -> f64 {
    mq.iter()
        .zip(sq)
        .zip(mp.iter().zip(sp))
        .map(|((&mq, &sq), (&mp, &sp))| (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5)
        .sum()
}

/// Negative log density of `y` under `N(mean, sigma²)`.
pub fn gaussian_nll(y: f64, mean: f64, sigma: f64) -> f64 {
    0.5 * (2.0 * PI).ln() + sigma.ln() + 0.5 * ((y - mean) / sigma).powi(2)
}
