use std::sync::Arc;

use super::{BackwardOp, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Per-pixel class probabilities, shape `(N, C, H, W)` with each pixel's
/// channels summing to one. Computed in `f64` and not tracked.
pub fn softmax<E: Scalar>(logits: &Tensor<E>) -> Vec<f64> {
    let s = logits.shape();
    let (c, plane) = (s.c(), s.plane());
    let data = logits.data();
    let mut out = vec![0.0; s.numel()];
    let mut z = vec![0.0; c];
    for n in 0..s.n() {
        let base = n * c * plane;
        for p in 0..plane {
            for (k, zk) in z.iter_mut().enumerate() {
                *zk = data[base + k * plane + p].to_f64_lossy();
            }
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = z.iter().map(|v| (v - m).exp()).sum();
            for (k, zk) in z.iter().enumerate() {
                out[base + k * plane + p] = (zk - m).exp() / total;
            }
        }
    }
    out
}

struct SoftmaxCrossEntropy<E: Scalar> {
    logits: Tensor<E>,
    labels: Arc<[u32]>,
    weights: Vec<f64>,
    probs: Vec<f64>,
}

impl<E: Scalar> BackwardOp<E> for SoftmaxCrossEntropy<E> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn inputs(&self) -> Vec<&Tensor<E>> {
        vec![&self.logits]
    }

    fn backward(&self, _output: &Tensor<E>, g: &[E]) -> Vec<Option<Vec<E>>> {
        let s = self.logits.shape();
        let (c, plane) = (s.c(), s.plane());
        let pixels = (s.n() * plane) as f64;
        let upstream = g[0].to_f64_lossy();
        let mut dz = vec![E::zero(); s.numel()];
        for n in 0..s.n() {
            for p in 0..plane {
                let y = self.labels[n * plane + p] as usize;
                let coef = upstream * self.weights[y] / pixels;
                for k in 0..c {
                    let i = (n * c + k) * plane + p;
                    let target = if k == y { 1.0 } else { 0.0 };
                    dz[i] = E::from_f64_lossy(coef * (self.probs[i] - target));
                }
            }
        }
        vec![Some(dz)]
    }
}

/// Mean over pixels of `−w[y]·log p_y`, where `p = softmax(logits)` over channels.
///
/// `labels` holds one class index per pixel in `(N, H, W)` order; `weights`
/// has one entry per class.
pub fn softmax_cross_entropy<E: Scalar>(
    logits: &Tensor<E>,
    labels: &[u32],
    weights: &[f64],
) -> Result<Tensor<E>> {
    let s = logits.shape();
    let (c, plane) = (s.c(), s.plane());
    if weights.len() != c {
        return Err(Error::invalid(format!(
            "softmax_cross_entropy: {} class weights for {c} logit channels",
            weights.len()
        )));
    }
    if labels.len() != s.n() * plane {
        return Err(Error::invalid(format!(
            "softmax_cross_entropy: {} labels for logits {s}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= c) {
        return Err(Error::invalid(format!(
            "softmax_cross_entropy: label {bad} out of range for {c} classes"
        )));
    }

    let probs = softmax(logits);
    let data = logits.data();
    let mut total = 0.0;
    for n in 0..s.n() {
        for p in 0..plane {
            let y = labels[n * plane + p] as usize;
            // log p_y = z_y − m − ln Σ exp(z_k − m)
            let z = |k: usize| data[(n * c + k) * plane + p].to_f64_lossy();
            let m = (0..c).map(z).fold(f64::NEG_INFINITY, f64::max);
            let lse = (0..c).map(|k| (z(k) - m).exp()).sum::<f64>().ln();
            total -= weights[y] * (z(y) - m - lse);
        }
    }
    let loss = total / (s.n() * plane) as f64;
    Ok(Tensor::from_op(
        Shape::SCALAR,
        vec![E::from_f64_lossy(loss)],
        SoftmaxCrossEntropy {
            logits: logits.clone(),
            labels: labels.into(),
            weights: weights.to_vec(),
            probs,
        },
    ))
}
