//! Joint objective: multi-class focal loss plus center loss.
//!
//! Focal: `-alpha_y (1 - p_y)^gamma log(p_y)` averaged over the batch, with
//! `p = softmax(logits)`. Center: `0.5 * sum_i ||v_i - c_{y_i}||^2`, summed
//! (not batch-normalized) exactly as published; `lambda` calibrates the mix.
//! Class centers are trained by a dedicated plain-SGD rule on the analytic
//! center gradient, not by the main optimizer.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::sync::Arc;

/// Loss hyperparameters.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Per-class focal weights.
    pub alpha: Vec<f64>,
    pub gamma: f64,
    /// Weight of the center term in the total objective.
    pub lambda: f64,
    pub num_classes: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: vec![0.25; 3],
            gamma: 2.0,
            lambda: 0.001,
            num_classes: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || self.lambda < 0.0 || self.alpha.iter().any(|&a| a < 0.0) {
            return Err(Error::InvalidArgument(
                "focal/center hyperparameters must be nonnegative".into(),
            ));
        }
        if self.alpha.len() != self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "alpha has {} entries for {} classes",
                self.alpha.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty label batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range [0, {num_classes})"
        )));
    }
    Ok(())
}

/// Record the focal loss of a `(B, C)` logits node. Returns a scalar node.
pub fn focal_loss(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    check_labels(labels, cfg.num_classes)?;
    let b = g.shape(logits)[0];
    if b != labels.len() || g.shape(logits)[1] != cfg.num_classes {
        return Err(Error::InvalidArgument(format!(
            "focal: logits {:?} vs {} labels, {} classes",
            g.shape(logits),
            labels.len(),
            cfg.num_classes
        )));
    }
    let probs = g.softmax_rows(logits)?;
    let p_y = g.select_per_row(probs, Arc::new(labels.to_vec()))?; // (B,1)
    let log_p = g.log(p_y);
    let neg_p = g.scale(p_y, -1.0);
    let one_minus = g.add_scalar(neg_p, 1.0);
    let modulator = g.pow_const(one_minus, cfg.gamma);
    let alpha = g.input(Tensor::from_vec(
        vec![b, 1],
        labels.iter().map(|&y| cfg.alpha[y]).collect(),
    ));
    let weighted = g.mul(modulator, log_p)?;
    let weighted = g.mul(weighted, alpha)?;
    let total = g.sum_all(weighted);
    Ok(g.scale(total, -1.0 / b as f64)) // batch mean of -alpha (1-p)^g log p
}

/// Record the center loss of `(B, d)` features against a `(C, d)` centers
/// node (input or parameter). Returns a scalar node.
pub fn center_loss(
    g: &mut Graph,
    features: NodeId,
    labels: &[usize],
    centers: NodeId,
) -> Result<NodeId> {
    let c = g.shape(centers)[0];
    check_labels(labels, c)?;
    if g.shape(features)[0] != labels.len() || g.shape(features)[1] != g.shape(centers)[1] {
        return Err(Error::InvalidArgument(format!(
            "center: features {:?} vs centers {:?} with {} labels",
            g.shape(features),
            g.shape(centers),
            labels.len()
        )));
    }
    let own = g.gather_rows(centers, Arc::new(labels.to_vec()))?;
    let diff = g.sub(features, own)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum_all(sq);
    Ok(g.scale(total, 0.5))
}

/// Focal + lambda * center. When `lambda == 0` the center branch is not
/// recorded at all, so no gradient path into the centers exists.
pub fn total_loss(
    g: &mut Graph,
    logits: NodeId,
    features: NodeId,
    labels: &[usize],
    centers: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let focal = focal_loss(g, logits, labels, cfg)?;
    if cfg.lambda == 0.0 {
        return Ok(focal);
    }
    let center = center_loss(g, features, labels, centers)?;
    let scaled = g.scale(center, cfg.lambda);
    g.add(focal, scaled)
}

/// Analytic center-loss gradient `d L_cen / d centers`: for class k,
/// `sum_{i: y_i = k} (c_k - v_i)`. Used by the dedicated SGD center update.
pub fn center_gradient(features: &Tensor, labels: &[usize], centers: &Tensor) -> Result<Tensor> {
    check_labels(labels, centers.rows())?;
    let d = centers.cols();
    let mut grad = Tensor::zeros(&[centers.rows(), d]);
    for (i, &y) in labels.iter().enumerate() {
        let v = &features.data()[i * d..(i + 1) * d];
        let c = &centers.data()[y * d..(y + 1) * d];
        let gslice = &mut grad.data_mut()[y * d..(y + 1) * d];
        for j in 0..d {
            gslice[j] += c[j] - v[j];
        }
    }
    Ok(grad)
}
