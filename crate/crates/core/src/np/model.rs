use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::gaussian::{gaussian_head, kl_rows, nll_points, GaussianVars};
use super::layers::{Linear, Mlp, MultiHeadAttention};
use crate::autodiff::{Checkpoint, Graph, ParamStore, Tensor, Var};
use crate::dataset::ContextTargetBatch;
use crate::error::{Error, Result};
use crate::sim::MAX_STEER;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "pi-attnp")]
    PiAttNp,
    #[serde(rename = "attnp")]
    AttNp,
    #[serde(rename = "res-mlp")]
    ResMlp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::PiAttNp, ModelKind::AttNp, ModelKind::ResMlp];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::PiAttNp => "pi-attnp",
            ModelKind::AttNp => "attnp",
            ModelKind::ResMlp => "res-mlp",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}` (expected pi-attnp, attnp or res-mlp)")))
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Scan bins per input row.
    pub bins: usize,
    /// Width of the learned (v, ω) embedding.
    pub embed: usize,
    /// Width of the context representations.
    pub repr: usize,
    /// Width of the latent variable.
    pub latent: usize,
    pub heads: usize,
    /// Width of every hidden layer.
    pub hidden: usize,
    /// Hidden layers per MLP.
    pub hidden_layers: usize,
    /// Residual blocks of the residual-MLP baseline.
    pub res_blocks: usize,
    /// Bin ranges are divided by this before entering the network, m.
    pub max_range: f64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            bins: 54,
            embed: 16,
            repr: 128,
            latent: 32,
            heads: 8,
            hidden: 128,
            hidden_layers: 2,
            res_blocks: 4,
            max_range: 30.0,
        }
    }

    pub fn prior_enabled(&self) -> bool {
        self.kind == ModelKind::PiAttNp
    }

    /// Width of the network's own scan-plus-embedding input.
    pub fn feature_width(&self) -> usize {
        self.bins + self.embed
    }

    /// Width of the decoder input.
    pub fn decoder_width(&self) -> usize {
        self.feature_width() + self.repr + self.latent + usize::from(self.prior_enabled())
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.bins, self.embed, self.repr, self.latent, self.heads, self.hidden];
        if widths.contains(&0) {
            return Err(Error::Config(format!("model widths must be positive: {self:?}")));
        }
        if self.repr % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide representation width {}",
                self.heads, self.repr
            )));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config("max_range must be positive".into()));
        }
        Ok(())
    }

    fn mlp_widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(std::iter::repeat(self.hidden).take(self.hidden_layers));
        w.push(output);
        w
    }
}

#[derive(Clone, Debug)]
struct NpModules {
    embed: Mlp,
    encoder: Mlp,
    self_attn: MultiHeadAttention,
    latent: Mlp,
    keys: Mlp,
    cross: MultiHeadAttention,
    decoder: Mlp,
}

#[derive(Clone, Debug)]
struct ResModules {
    embed: Mlp,
    input: Linear,
    blocks: Vec<(Linear, Linear)>,
    head: Linear,
}

#[derive(Clone, Debug)]
enum Arch {
    Np(NpModules),
    Res(ResModules),
}

/// Which latent value the decoder sees.
#[derive(Clone, Copy, Debug)]
pub enum LatentSample<'a> {
    /// Mean of the context-conditioned latent (deterministic inference).
    PriorMean,
    /// Reparameterized posterior draw `μ + σ·ε` with `ε: [groups, latent]`.
    Posterior(&'a Tensor),
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub predictive: GaussianVars,
    pub z_prior: Option<GaussianVars>,
    pub z_posterior: Option<GaussianVars>,
    /// Context representations after self-attention.
    pub context_repr: Option<Var>,
    /// Cross-attention output per target row.
    pub r_lambda: Option<Var>,
    /// Raw cross-attention node, for its weights.
    pub cross_weights: Option<Var>,
}

/// Scalar training / evaluation metrics for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchMetrics {
    pub loss: f64,
    pub nll: f64,
    pub mae: f64,
    pub kl: f64,
}

/// A steering model and its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub params: ParamStore,
    arch: Arch,
}

impl Network {
    /// Fresh parameters drawn from a ChaCha stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Network> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let embed = Mlp::new(&mut p, "embed", &c.mlp_widths(2, c.embed), &mut rng);
        let arch = match c.kind {
            ModelKind::PiAttNp | ModelKind::AttNp => {
                let fw = c.feature_width();
                Arch::Np(NpModules {
                    embed,
                    encoder: Mlp::new(&mut p, "encoder", &c.mlp_widths(fw + 1, c.repr), &mut rng),
                    self_attn: MultiHeadAttention::new(&mut p, "self_attn", c.repr, c.repr, c.repr, c.heads, &mut rng),
                    latent: Mlp::new(&mut p, "latent", &c.mlp_widths(c.repr, 2 * c.latent), &mut rng),
                    keys: Mlp::new(&mut p, "keys", &c.mlp_widths(fw, c.repr), &mut rng),
                    cross: MultiHeadAttention::new(&mut p, "cross", c.repr, c.repr, c.repr, c.heads, &mut rng),
                    decoder: Mlp::new(&mut p, "decoder", &c.mlp_widths(c.decoder_width(), 2), &mut rng),
                })
            }
            ModelKind::ResMlp => {
                let input = Linear::new(&mut p, "input", c.feature_width(), c.hidden, true, &mut rng);
                let blocks = (0..c.res_blocks)
                    .map(|i| {
                        (
                            Linear::new(&mut p, &format!("block{i}.0"), c.hidden, c.hidden, true, &mut rng),
                            Linear::new(&mut p, &format!("block{i}.1"), c.hidden, c.hidden, true, &mut rng),
                        )
                    })
                    .collect();
                let head = Linear::new(&mut p, "head", c.hidden, 2, true, &mut rng);
                Arch::Res(ResModules {
                    embed,
                    input,
                    blocks,
                    head,
                })
            }
        };
        Ok(Network {
            config,
            params: p,
            arch,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Residual-block weight ids, `(first, second)` per block.
    pub fn residual_branches(&self) -> Vec<(crate::autodiff::ParamId, crate::autodiff::ParamId)> {
        match &self.arch {
            Arch::Res(r) => r.blocks.iter().map(|(a, b)| (a.w, b.w)).collect(),
            Arch::Np(_) => Vec::new(),
        }
    }

    /// `[ζ / max_range, embed(v, ω)]` for raw rows `[ζ, v, ω]`.
    fn features(&self, g: &mut Graph, x: &Tensor) -> Result<Var> {
        let c = &self.config;
        let (rows, cols) = x.dims2()?;
        if cols != c.bins + 2 {
            return Err(Error::Dimension(format!(
                "input rows have {cols} columns, expected {} bins plus (v, ω)",
                c.bins
            )));
        }
        let mut scan = Vec::with_capacity(rows * c.bins);
        let mut vel = Vec::with_capacity(rows * 2);
        for r in 0..rows {
            let row = x.row(r);
            scan.extend(row[..c.bins].iter().map(|d| d / c.max_range));
            vel.extend_from_slice(&row[c.bins..]);
        }
        let scan = g.input(Tensor::matrix(rows, c.bins, scan)?);
        let vel = g.input(Tensor::matrix(rows, 2, vel)?);
        let embed = match &self.arch {
            Arch::Np(m) => &m.embed,
            Arch::Res(m) => &m.embed,
        };
        let e = embed.forward(g, &self.params, vel)?;
        g.concat_cols(&[scan, e])
    }

    /// Context representation: embedding MLP over `[x, y]` pairs followed by
    /// self-attention within each group of `n` rows.
    fn encode(&self, g: &mut Graph, m: &NpModules, x: Var, y: Var, groups: usize, n: usize) -> Result<Var> {
        let xy = g.concat_cols(&[x, y])?;
        let h = m.encoder.forward(g, &self.params, xy)?;
        let (r, _) = m.self_attn.forward(g, &self.params, h, h, h, groups, n, n)?;
        Ok(r)
    }

    /// Average of each group's representations mapped to a latent Gaussian.
    fn latent(&self, g: &mut Graph, m: &NpModules, r: Var, n: usize) -> Result<GaussianVars> {
        let avg = g.group_mean(r, n)?;
        let out = m.latent.forward(g, &self.params, avg)?;
        gaussian_head(g, out, self.config.latent)
    }

    /// Decoder over `[x_T, R_Λ, z, prior]`; the prior column must be given
    /// exactly when the model is configured to use it.
    pub fn decode(&self, g: &mut Graph, x_t: Var, r_lambda: Var, z: Var, prior: Option<Var>) -> Result<GaussianVars> {
        let Arch::Np(m) = &self.arch else {
            return Err(Error::Config("the residual MLP has no decoder".into()));
        };
        match (prior, self.config.prior_enabled()) {
            (Some(_), false) => {
                return Err(Error::Config(format!("{} does not take a prior input", self.kind())));
            }
            (None, true) => return Err(Error::Config(format!("{} requires a prior input", self.kind()))),
            _ => {}
        }
        let mut cols = vec![x_t, r_lambda, z];
        cols.extend(prior);
        let input = g.concat_cols(&cols)?;
        let out = m.decoder.forward(g, &self.params, input)?;
        gaussian_head(g, out, 1)
    }

    /// Builds the forward pass for a batch on `g`.
    pub fn forward(&self, g: &mut Graph, batch: &ContextTargetBatch, sample: LatentSample<'_>) -> Result<ForwardVars> {
        batch.check(self.config.bins)?;
        let x_t = self.features(g, &batch.x_target)?;
        match &self.arch {
            Arch::Res(m) => {
                let mut h = m.input.forward(g, &self.params, x_t)?;
                for (a, b) in &m.blocks {
                    let u = a.forward(g, &self.params, h)?;
                    let u = g.tanh(u)?;
                    let u = b.forward(g, &self.params, u)?;
                    h = g.add(h, u)?;
                }
                let out = m.head.forward(g, &self.params, h)?;
                Ok(ForwardVars {
                    predictive: gaussian_head(g, out, 1)?,
                    z_prior: None,
                    z_posterior: None,
                    context_repr: None,
                    r_lambda: None,
                    cross_weights: None,
                })
            }
            Arch::Np(m) => {
                let (groups, nc, nt) = (batch.groups, batch.n_context, batch.n_target);
                let x_c = self.features(g, &batch.x_context)?;
                let y_c = g.input(batch.y_context.clone());
                let r_c = self.encode(g, m, x_c, y_c, groups, nc)?;
                let z_prior = self.latent(g, m, r_c, nc)?;
                let y_t = g.input(batch.y_target.clone());
                let r_t = self.encode(g, m, x_t, y_t, groups, nt)?;
                let z_post = self.latent(g, m, r_t, nt)?;
                let z = match sample {
                    LatentSample::PriorMean => z_prior.mean,
                    LatentSample::Posterior(eps) => {
                        if eps.shape() != [groups, self.config.latent] {
                            return Err(Error::Dimension(format!(
                                "latent noise has shape {:?}, expected [{groups}, {}]",
                                eps.shape(),
                                self.config.latent
                            )));
                        }
                        let e = g.input(eps.clone());
                        let scaled = g.mul(z_post.sigma, e)?;
                        g.add(z_post.mean, scaled)?
                    }
                };
                let keys = m.keys.forward(g, &self.params, x_c)?;
                let queries = m.keys.forward(g, &self.params, x_t)?;
                let (r_lambda, att) = m.cross.forward(g, &self.params, queries, keys, r_c, groups, nt, nc)?;
                let z_rows = g.repeat_rows(z, nt)?;
                let prior = if self.config.prior_enabled() {
                    Some(g.input(batch.prior.clone()))
                } else {
                    None
                };
                let predictive = self.decode(g, x_t, r_lambda, z_rows, prior)?;
                Ok(ForwardVars {
                    predictive,
                    z_prior: Some(z_prior),
                    z_posterior: Some(z_post),
                    context_repr: Some(r_c),
                    r_lambda: Some(r_lambda),
                    cross_weights: Some(att),
                })
            }
        }
    }

    /// Training objective on `g`: mean per-point NLL plus, for the neural
    /// processes, the mean `KL(posterior ‖ prior)`.
    pub fn loss_on(&self, g: &mut Graph, batch: &ContextTargetBatch, sample: LatentSample<'_>) -> Result<(Var, BatchMetrics)> {
        let f = self.forward(g, batch, sample)?;
        let y = g.input(batch.y_target.clone());
        let nll_pts = nll_points(g, y, f.predictive)?;
        let nll = g.mean(nll_pts);
        let (loss, kl) = match (f.z_posterior, f.z_prior) {
            (Some(q), Some(p)) => {
                let kl_rows = kl_rows(g, q, p)?;
                let kl = g.mean(kl_rows);
                (g.add(nll, kl)?, g.value(kl).item())
            }
            _ => (nll, 0.0),
        };
        let mae = mean_abs_diff(g.value(f.predictive.mean).data(), batch.y_target.data());
        let metrics = BatchMetrics {
            loss: g.value(loss).item(),
            nll: g.value(nll).item(),
            mae,
            kl,
        };
        Ok((loss, metrics))
    }

    /// Loss with one reparameterized posterior draw per group, as used in
    /// training. Returns the graph so the caller can run the reverse pass.
    pub fn elbo_loss(&self, batch: &ContextTargetBatch, rng: &mut impl Rng) -> Result<(Graph, Var, BatchMetrics)> {
        let mut g = Graph::new();
        let eps = Tensor::matrix(
            batch.groups,
            self.config.latent,
            (0..batch.groups * self.config.latent).map(|_| rng.sample(StandardNormal)).collect(),
        )?;
        let (loss, m) = self.loss_on(&mut g, batch, LatentSample::Posterior(&eps))?;
        Ok((g, loss, m))
    }

    /// Deterministic metrics with the latent fixed at the prior mean.
    pub fn evaluate(&self, batch: &ContextTargetBatch) -> Result<BatchMetrics> {
        let mut g = Graph::new();
        let (_, m) = self.loss_on(&mut g, batch, LatentSample::PriorMean)?;
        Ok(m)
    }

    /// Predicted steering per target row: predictive mean at the prior-mean
    /// latent, clamped to the steering limit.
    pub fn predict(&self, batch: &ContextTargetBatch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, batch, LatentSample::PriorMean)?;
        Ok(g.value(f.predictive.mean).data().iter().map(|d| d.clamp(-MAX_STEER, MAX_STEER)).collect())
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64, run: serde_json::Value) -> Result<Checkpoint> {
        let metadata = serde_json::to_string(&CheckpointMeta {
            model: self.config.clone(),
            run,
        })?;
        Ok(Checkpoint {
            seed,
            step,
            metadata,
            params: self.params.clone(),
        })
    }

    pub fn save(&self, path: &Path, seed: u64, step: u64, run: serde_json::Value) -> Result<()> {
        self.to_checkpoint(seed, step, run)?.save(path)
    }

    /// Rebuilds a network from a checkpoint, validating every parameter's
    /// name and shape against the stored model configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Network, serde_json::Value)> {
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| Error::Checkpoint(format!("bad model header: {e}")))?;
        let mut net = Network::new(meta.model, 0)?;
        if net.params.len() != ckpt.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                ckpt.params.len(),
                net.params.len()
            )));
        }
        net.params.load_from(&ckpt.params)?;
        Ok((net, meta.run))
    }

    pub fn load(path: &Path) -> Result<(Network, serde_json::Value)> {
        Network::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    run: serde_json::Value,
}

pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Steering prediction for one observation pair, with its wall-clock cost.
pub fn predict_steering(net: &Network, batch: &ContextTargetBatch) -> Result<(f64, f64)> {
    let t0 = Instant::now();
    let d = net.predict(batch)?;
    Ok((d[0], t0.elapsed().as_secs_f64()))
}
