use super::network::{Gradients, ModelParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimKind {
    /// v <- mu*v - lr*g; w <- w + v
    SgdMomentum { lr: f64, momentum: f64 },
    /// Bias-corrected Adam.
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn adam(lr: f64) -> Self {
        OptimKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimKind::SgdMomentum { lr, momentum }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimKind::SgdMomentum { lr, .. } | OptimKind::Adam { lr, .. } => lr,
        }
    }

    pub fn set_lr(&mut self, value: f64) {
        match self {
            OptimKind::SgdMomentum { lr, .. } | OptimKind::Adam { lr, .. } => *lr = value,
        }
    }
}

/// Optimiser state with one buffer (two for Adam) per parameter tensor.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub kind: OptimKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    pub steps: u64,
}

impl OptimState {
    pub fn new(kind: OptimKind, model: &ModelParams) -> Self {
        let first: Vec<Vec<f64>> = model.tensors().map(|t| vec![0.0; t.len()]).collect();
        let second = match kind {
            OptimKind::Adam { .. } => first.clone(),
            OptimKind::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            kind,
            first,
            second,
            steps: 0,
        }
    }

    pub fn step(&mut self, model: &mut ModelParams, grads: &Gradients) -> Result<()> {
        let gs: Vec<&[f64]> = grads
            .iter()
            .flatten()
            .flat_map(|p| [p.weight.data(), p.bias.data()])
            .collect();
        if gs.len() != self.first.len() {
            return Err(Error::Shape("gradient list does not match optimiser state".into()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (idx, w) in model.tensors_mut().enumerate() {
            let g = gs[idx];
            if g.len() != w.len() || self.first[idx].len() != w.len() {
                return Err(Error::Shape(format!("tensor {idx}: gradient shape mismatch")));
            }
            let w = w.data_mut();
            match self.kind {
                OptimKind::SgdMomentum { lr, momentum } => {
                    let v = &mut self.first[idx];
                    for i in 0..w.len() {
                        v[i] = momentum * v[i] - lr * g[i];
                        w[i] += v[i];
                    }
                }
                OptimKind::Adam { lr, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
                    for i in 0..w.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
