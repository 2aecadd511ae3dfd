//! Training losses: softmax cross-entropy over identity classes and the
//! batch-hard triplet loss on embedding distances.

use crate::error::{CoreError, Result};
use crate::matrix::Mat;
use crate::real::Real;

/// Margin and weighting of the triplet term.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Triplet margin; defaults to 0.3.
    pub margin: f64,
    /// Weight of the triplet term in the total loss.
    pub lambda_tri: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.3,
            lambda_tri: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin < 0.0 {
            return Err(CoreError::config(format!(
                "triplet margin must be non-negative, got {}",
                self.margin
            )));
        }
        if self.lambda_tri < 0.0 {
            return Err(CoreError::config(format!(
                "lambda_tri must be non-negative, got {}",
                self.lambda_tri
            )));
        }
        Ok(())
    }
}

/// Mean over samples of `-log softmax(logits)[label]`, with log-sum-exp
/// stabilization. Returns the loss and its gradient `(softmax - onehot)/N`.
pub fn softmax_cross_entropy<T: Real>(logits: &Mat<T>, labels: &[usize]) -> Result<(T, Mat<T>)> {
    let n = logits.rows;
    let classes = logits.cols;
    if classes < 2 {
        return Err(CoreError::input(format!(
            "cross-entropy needs at least 2 classes, got {classes}"
        )));
    }
    if labels.len() != n {
        return Err(CoreError::input(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if !logits.all_finite() {
        return Err(CoreError::numerical(
            "softmax_cross_entropy",
            "logits contain non-finite values",
            None,
        ));
    }
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(CoreError::input(format!(
                "label {y} of sample {i} is out of range [0, {classes})"
            )));
        }
    }

    let inv_n = T::one() / T::from_f64(n as f64);
    let mut grad = Mat::zeros(n, classes);
    let mut loss = T::zero();
    for i in 0..n {
        let row = logits.row(i);
        let mut max = row[0];
        for &v in row {
            max = max.max(v);
        }
        let mut sum = T::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        loss += (lse - row[labels[i]]) * inv_n;
        let g = grad.row_mut(i);
        for c in 0..classes {
            let p = (row[c] - lse).exp();
            g[c] = p * inv_n;
        }
        g[labels[i]] -= inv_n;
    }
    Ok((loss, grad))
}

/// Batch-hard triplet loss: per anchor, hinge on
/// `(hardest positive distance - hardest negative distance + margin)`,
/// summed over anchors. Distances are non-squared Euclidean. Returns the
/// loss and its subgradient w.r.t. the embeddings (0 at the hinge kink).
pub fn batch_hard_triplet<T: Real>(
    features: &Mat<T>,
    ids: &[usize],
    cfg: &LossConfig,
) -> Result<(T, Mat<T>)> {
    cfg.validate()?;
    let n = features.rows;
    if ids.len() != n {
        return Err(CoreError::input(format!(
            "{} ids for {n} feature rows",
            ids.len()
        )));
    }
    // Pairwise Euclidean distances.
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0f64;
            for (a, b) in features.row(i).iter().zip(features.row(j)) {
                let d = (*a - *b).to_f64();
                acc += d * d;
            }
            let d = acc.sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let margin = cfg.margin;
    let mut loss = 0.0f64;
    let mut grad = Mat::zeros(n, features.cols);
    for anchor in 0..n {
        // Hardest positive: max distance among same-id others; hardest
        // negative: min distance among other ids. First occurrence wins ties.
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for other in 0..n {
            if other == anchor {
                continue;
            }
            let d = dist[anchor * n + other];
            if ids[other] == ids[anchor] {
                if hardest_pos.map_or(true, |(_, best)| d > best) {
                    hardest_pos = Some((other, d));
                }
            } else if hardest_neg.map_or(true, |(_, best)| d < best) {
                hardest_neg = Some((other, d));
            }
        }
        let (pos, d_pos) = hardest_pos.ok_or_else(|| {
            CoreError::input(format!(
                "sample {anchor} (id {}) has no positive in the batch",
                ids[anchor]
            ))
        })?;
        let (neg, d_neg) = hardest_neg.ok_or_else(|| {
            CoreError::input(format!(
                "sample {anchor} (id {}) has no negative in the batch",
                ids[anchor]
            ))
        })?;

        let term = d_pos - d_neg + margin;
        if term <= 0.0 {
            continue;
        }
        loss += term;
        // d term / d f = unit vectors along the active pair differences;
        // zero-distance pairs contribute a zero subgradient.
        if d_pos > 0.0 {
            let inv = 1.0 / d_pos;
            for k in 0..features.cols {
                let diff =
                    (features.at(anchor, k) - features.at(pos, k)).to_f64() * inv;
                let delta = T::from_f64(diff);
                *grad.at_mut(anchor, k) += delta;
                *grad.at_mut(pos, k) -= delta;
            }
        }
        if d_neg > 0.0 {
            let inv = 1.0 / d_neg;
            for k in 0..features.cols {
                let diff =
                    (features.at(anchor, k) - features.at(neg, k)).to_f64() * inv;
                let delta = T::from_f64(diff);
                *grad.at_mut(anchor, k) -= delta;
                *grad.at_mut(neg, k) += delta;
            }
        }
    }
    Ok((T::from_f64(loss), grad))
}

/// Total training loss: `cls + lambda_tri * tri`.
pub fn total_loss<T: Real>(cls: T, tri: T, cfg: &LossConfig) -> T {
    cls + T::from_f64(cfg.lambda_tri) * tri
}
