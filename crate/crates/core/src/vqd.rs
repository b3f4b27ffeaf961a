//! Variational query generation for denoising queries and the denoising loss.
//!
//! A corrupted ground truth is embedded (category table + linear map of its
//! continuous 3D attributes), passed through a small network, and read out
//! as the mean and log-variance of a diagonal Gaussian. Noisy queries are
//! sampled from it with the reparameterisation trick, and the denoising loss
//! adds a KL pull towards `N(0, I)` to the reconstruction loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, VqdError};
use crate::geometry::Noisy3D;
use crate::numerics::{Graph, ParamId, ParameterStore, Tensor, Var};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenoisingMode {
    /// Sample `z ~ N(mu, sigma^2)` and regularise with KL.
    Variational,
    /// Use `mu` directly with no KL term: conventional (autoencoder-style)
    /// denoising.
    Deterministic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoisingConfig {
    pub beta: f64,
    pub mode: DenoisingMode,
    /// Fraction of training over which `beta` ramps linearly from 0.
    pub warmup_frac: f64,
}

impl Default for DenoisingConfig {
    fn default() -> Self {
        Self { beta: 0.1, mode: DenoisingMode::Variational, warmup_frac: 0.1 }
    }
}

impl DenoisingConfig {
    /// KL weight in effect during `epoch` (0-based) of `total` epochs.
    pub fn beta_at(&self, epoch: usize, total: usize) -> f64 {
        let warm = (self.warmup_frac * total as f64).ceil();
        if warm <= 0.0 {
            return self.beta;
        }
        self.beta * ((epoch as f64 + 1.0) / warm).min(1.0)
    }
}

/// Per-query diagonal Gaussian, `K x D` mean and clamped log-variance.
#[derive(Clone, Copy, Debug)]
pub struct LatentDistribution {
    pub mu: Var,
    pub log_var: Var,
}

/// Weights of the box embedding (the encoder half of the generator).
#[derive(Clone, Copy, Debug)]
pub struct GeneratorParams {
    pub category_table: ParamId,
    pub attr_w: ParamId,
    pub attr_b: ParamId,
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub mu_w: ParamId,
    pub mu_b: ParamId,
    pub log_var_w: ParamId,
    pub log_var_b: ParamId,
    pub num_classes: usize,
}

/// Number of continuous attributes fed to the embedding.
pub const ATTR_FEATURES: usize = 6;

impl GeneratorParams {
    pub fn register(store: &mut ParameterStore, width: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(width.is_multiple_of(2), "generator width must be even");
        let half = width / 2;
        let category_table = store.insert_normal("vqg.category_table", &[num_classes, half], 1.0, rng);
        let attr_w = store.insert_glorot("vqg.attr.w", ATTR_FEATURES, half, rng);
        let attr_b = store.insert("vqg.attr.b", Tensor::zeros(&[half]));
        let hidden_w = store.insert_glorot("vqg.hidden.w", width, width, rng);
        let hidden_b = store.insert("vqg.hidden.b", Tensor::zeros(&[width]));
        let mu_w = store.insert_glorot("vqg.mu.w", width, width, rng);
        let mu_b = store.insert("vqg.mu.b", Tensor::zeros(&[width]));
        let log_var_w = store.insert_normal("vqg.log_var.w", &[width, width], 0.01, rng);
        let log_var_b = store.insert("vqg.log_var.b", Tensor::zeros(&[width]));
        Self { category_table, attr_w, attr_b, hidden_w, hidden_b, mu_w, mu_b, log_var_w, log_var_b, num_classes }
    }
}

/// Normalised continuous attributes: metric sizes over 5 m, yaw as
/// `(sin, cos)`, depth over 25 m.
pub fn attribute_features(n: &Noisy3D) -> [f64; ATTR_FEATURES] {
    [n.l3d / 5.0, n.w3d / 5.0, n.h3d / 5.0, n.theta.sin(), n.theta.cos(), n.depth / 25.0]
}

/// Embeds a batch of corrupted boxes into latent distributions.
pub fn encode_noisy_boxes(
    g: &mut Graph,
    store: &ParameterStore,
    p: &GeneratorParams,
    boxes: &[Noisy3D],
) -> Result<LatentDistribution> {
    if let Some(bad) = boxes.iter().find(|b| b.category >= p.num_classes) {
        return Err(VqdError::Category { category: bad.category, num_classes: p.num_classes });
    }
    let cats: Vec<usize> = boxes.iter().map(|b| b.category).collect();
    let feats: Vec<f64> = boxes.iter().flat_map(attribute_features).collect();
    let table = g.param(store, p.category_table);
    let cat_embed = g.gather_rows(table, &cats)?;
    let attrs = g.constant(Tensor::matrix(boxes.len(), ATTR_FEATURES, feats)?);
    let (aw, ab) = (g.param(store, p.attr_w), g.param(store, p.attr_b));
    let attr_embed = g.linear(attrs, aw, ab)?;
    let joined = g.concat_cols(&[cat_embed, attr_embed])?;
    let h = g.relu(joined);
    let (hw, hb) = (g.param(store, p.hidden_w), g.param(store, p.hidden_b));
    let h = g.linear(h, hw, hb)?;
    let h = g.relu(h);
    let (mw, mb) = (g.param(store, p.mu_w), g.param(store, p.mu_b));
    let mu = g.linear(h, mw, mb)?;
    let (lw, lb) = (g.param(store, p.log_var_w), g.param(store, p.log_var_b));
    let raw = g.linear(h, lw, lb)?;
    let log_var = g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX);
    Ok(LatentDistribution { mu, log_var })
}

/// `z = mu + exp(log_var / 2) * eps` with the supplied `eps`, which is a
/// constant: gradients reach `mu` and `log_var` only.
pub fn reparameterize_with(g: &mut Graph, dist: &LatentDistribution, eps: Tensor) -> Result<Var> {
    let half = g.scale(dist.log_var, 0.5);
    let std = g.exp(half);
    let eps = g.constant(eps);
    let noise = g.mul(std, eps)?;
    g.add(dist.mu, noise)
}

/// One reparameterised draw per query; deterministic mode returns `mu`.
pub fn sample_reparameterized(
    g: &mut Graph,
    dist: &LatentDistribution,
    mode: DenoisingMode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    match mode {
        DenoisingMode::Deterministic => Ok(dist.mu),
        DenoisingMode::Variational => {
            let shape = g.value(dist.mu).shape().to_vec();
            let n: usize = shape.iter().product();
            let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            reparameterize_with(g, dist, Tensor::new(shape, eps)?)
        }
    }
}

/// `L_res + beta * KL` with the KL averaged over every noisy query of every
/// group. Deterministic mode drops the KL term.
pub fn denoising_loss(
    g: &mut Graph,
    reconstruction: Var,
    dists: &[LatentDistribution],
    mode: DenoisingMode,
    beta: f64,
) -> Result<DenoisingTerms> {
    let kl = if mode == DenoisingMode::Variational && !dists.is_empty() {
        let mut terms = Vec::with_capacity(dists.len());
        for d in dists {
            terms.push(g.gaussian_kl(d.mu, d.log_var)?);
        }
        let stacked = g.concat_rows(&terms)?;
        Some(g.mean(stacked))
    } else {
        None
    };
    let total = match kl {
        Some(kl) if beta != 0.0 => {
            let weighted = g.scale(kl, beta);
            g.add(reconstruction, weighted)?
        }
        _ => reconstruction,
    };
    Ok(DenoisingTerms { total, reconstruction, kl })
}

#[derive(Clone, Copy, Debug)]
pub struct DenoisingTerms {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Option<Var>,
}
