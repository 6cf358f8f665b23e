//! Attentive neural-process steering models and the residual-MLP baseline.

mod gaussian;
mod layers;
mod model;
mod policy;

pub use gaussian::{gaussian_head, gaussian_nll, kl_divergence, kl_rows, nll_points, GaussianVars, SIGMA_MIN};
pub use layers::{Linear, Mlp, MultiHeadAttention};
pub use model::{
    mean_abs_diff, predict_steering, BatchMetrics, ForwardVars, LatentSample, ModelConfig, ModelKind, Network,
};
pub use policy::{observation_batch, NpPolicy};
