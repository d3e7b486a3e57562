//! Training objective: label-smoothed cross-entropy on the forward logits,
//! cosine alignment of the two CNN feature maps, and a temperature-scaled KL
//! term between the forward and reverse predictions.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::ForwardTrace;
use crate::tensor::Tensor;
use crate::N_CLASSES;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature shared by the LS and KL terms.
    pub tau: f64,
    /// Weight of the KL term (multiplied by `tau^2`).
    pub lambda: f64,
    /// Label smoothing level.
    pub alpha: f64,
    /// Include the cosine alignment term.
    pub cosine: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 5.0, lambda: 1.0, alpha: 0.1, cosine: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("loss.tau must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("loss.alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("loss.lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Coefficient in front of the KL term.
    pub fn kl_weight(&self) -> f64 {
        self.lambda * self.tau * self.tau
    }
}

/// Graph handles of the three terms and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub ls: Var,
    pub cos: Var,
    pub kl: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown { ls: g.item(self.ls), cos: g.item(self.cos), kl: g.item(self.kl), total: g.item(self.total) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ls: f64,
    pub cos: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.ls, self.cos, self.kl, self.total].iter().all(|v| v.is_finite())
    }
}

fn class_logits(g: &Graph, z: Var) -> Result<(usize, usize)> {
    match g.shape(z) {
        [b, s, c] if *c == N_CLASSES => Ok((*b, *s)),
        other => Err(Error::dim(format!("expected logits [B, S, {N_CLASSES}], got {other:?}"))),
    }
}

/// `log softmax(Z / tau)` over the class axis.
pub fn scaled_log_probs(g: &mut Graph, z: Var, tau: f64) -> Result<Var> {
    let axis = g.shape(z).len().checked_sub(1).ok_or_else(|| Error::dim("logits must have a class axis"))?;
    let scaled = g.scale(z, 1.0 / tau);
    g.log_softmax(scaled, axis)
}

/// Smoothed targets `(1 - alpha) onehot(y) + alpha / 5`, shaped `[B, S, 5]`.
pub fn smoothed_targets(labels: &[u8], batch: usize, seq: usize, alpha: f64) -> Result<Tensor> {
    if labels.len() != batch * seq {
        return Err(Error::dim(format!("{} labels for a [{batch}, {seq}] batch", labels.len())));
    }
    let mut q = vec![alpha / N_CLASSES as f64; labels.len() * N_CLASSES];
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= N_CLASSES {
            return Err(Error::Data(format!("label {y} at position ({}, {}) is outside 0..{N_CLASSES}", i / seq, i % seq)));
        }
        q[i * N_CLASSES + y as usize] += 1.0 - alpha;
    }
    Tensor::new(vec![batch, seq, N_CLASSES], q)
}

/// Mean over positions of `-sum_i q_i log softmax_i(Z / tau)`. `labels` is
/// row-major `[B, S]`.
pub fn label_smoothing_loss(g: &mut Graph, z: Var, labels: &[u8], alpha: f64, tau: f64) -> Result<Var> {
    let (b, s) = class_logits(g, z)?;
    let q = smoothed_targets(labels, b, s, alpha)?;
    let q = g.constant(&q);
    let logp = scaled_log_probs(g, z, tau)?;
    let weighted = g.mul(q, logp)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / (b * s) as f64))
}

/// `1 - mean cos(O_X[r], O_X'[r])` with each `[N+1, D]` slice flattened.
pub fn cosine_alignment_loss(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(format!("cosine loss: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    let shape = g.shape(a).to_vec();
    let rows = *shape.first().ok_or_else(|| Error::dim("cosine loss on a scalar"))?;
    let cols = shape[1..].iter().product::<usize>();
    let a = g.reshape(a, &[rows, cols])?;
    let b = g.reshape(b, &[rows, cols])?;
    let sim = g.cosine_rows(a, b)?;
    let mean = g.mean(sim);
    Ok(g.affine(mean, -1.0, 1.0))
}

/// Mean over positions of `KL(P_fwd || P_rev)` between the tau-scaled class
/// distributions. Both arguments receive gradient.
pub fn distillation_kl_loss(g: &mut Graph, z_fwd: Var, z_rev: Var, tau: f64) -> Result<Var> {
    let (b, s) = class_logits(g, z_fwd)?;
    if g.shape(z_rev) != g.shape(z_fwd) {
        return Err(Error::dim(format!("KL loss: {:?} vs {:?}", g.shape(z_fwd), g.shape(z_rev))));
    }
    let log_f = scaled_log_probs(g, z_fwd, tau)?;
    let log_r = scaled_log_probs(g, z_rev, tau)?;
    let p_f = g.exp(log_f);
    let diff = g.sub(log_f, log_r)?;
    let terms = g.mul(p_f, diff)?;
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / (b * s) as f64))
}

/// All terms for one `(X, X')` pair given both directed traces.
pub fn total_loss(
    g: &mut Graph,
    fwd: &ForwardTrace,
    rev: &ForwardTrace,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let ls = label_smoothing_loss(g, fwd.logits, labels, cfg.alpha, cfg.tau)?;
    let cos = if cfg.cosine {
        cosine_alignment_loss(g, fwd.cnn_x, fwd.cnn_xp)?
    } else {
        g.constant(&Tensor::scalar(0.0))
    };
    let kl = distillation_kl_loss(g, fwd.logits, rev.logits, cfg.tau)?;
    let partial = g.add(ls, cos)?;
    let weighted = g.scale(kl, cfg.kl_weight());
    let total = g.add(partial, weighted)?;
    Ok(LossTerms { ls, cos, kl, total })
}
