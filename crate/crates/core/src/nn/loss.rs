use super::Tensor;
use crate::error::{Error, Result};

/// Mean squared error over all elements, with its gradient.
pub fn loss_mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Per-pixel softmax cross-entropy on CxHxW logits, averaged over pixels.
/// `labels` holds H*W class indices in row-major order.
pub fn loss_softmax_ce(logits: &Tensor, labels: &[u8], classes: usize) -> Result<(f64, Tensor)> {
    let (c, h, w) = logits.chw()?;
    if c != classes {
        return Err(Error::Shape(format!("expected {classes} class channels, got {c}")));
    }
    let hw = h * w;
    if labels.len() != hw {
        return Err(Error::Shape(format!("{} labels for a {h}x{w} image", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad as usize,
            classes,
        });
    }
    let x = logits.data();
    let mut grad = Tensor::zeros(logits.shape());
    let g = grad.data_mut();
    let mut loss = 0.0;
    let inv = 1.0 / hw as f64;
    for p in 0..hw {
        let max = (0..c).map(|k| x[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..c).map(|k| (x[k * hw + p] - max).exp()).sum();
        let lse = max + sum.ln();
        let y = labels[p] as usize;
        loss += lse - x[y * hw + p];
        for k in 0..c {
            let s = (x[k * hw + p] - lse).exp();
            g[k * hw + p] = (s - if k == y { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok((loss * inv, grad))
}
