//! Central finite-difference checks of analytic gradients.

use rand::Rng;

use super::loss::{loss_mse, loss_softmax_ce};
use super::network::{Gradients, ModelParams};
use super::Tensor;
use crate::error::Result;
use crate::rng;

pub const FD_STEP: f64 = 1e-5;

/// Scalar objective applied to a network output.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    Mse(&'a Tensor),
    SoftmaxCe { labels: &'a [u8], classes: usize },
}

impl Objective<'_> {
    pub fn eval(&self, output: &Tensor) -> Result<(f64, Tensor)> {
        match *self {
            Objective::Mse(t) => loss_mse(output, t),
            Objective::SoftmaxCe { labels, classes } => loss_softmax_ce(output, labels, classes),
        }
    }
}

/// Loss, parameter gradients and input gradient for one example.
pub fn loss_and_grads(model: &ModelParams, input: &Tensor, obj: Objective) -> Result<(f64, Gradients, Tensor)> {
    let (out, cache) = model.forward(input)?;
    let (loss, g) = obj.eval(&out)?;
    let (grads, gin) = model.backward(&cache, &g)?;
    Ok((loss, grads, gin))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Maximum relative error between `eval`'s analytic gradients and central
/// differences over `coords` randomly drawn parameter coordinates.
pub fn grad_check_with(
    model: &ModelParams,
    coords: usize,
    seed: u64,
    eval: impl Fn(&ModelParams) -> Result<(f64, Gradients)>,
) -> Result<f64> {
    let (_, grads) = eval(model)?;
    let analytic: Vec<f64> = grads
        .iter()
        .flatten()
        .flat_map(|p| p.weight.data().iter().chain(p.bias.data()).copied())
        .collect();
    let sizes: Vec<usize> = model.tensors().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut r = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for _ in 0..coords.min(total) {
        let flat = r.gen_range(0..total);
        let (mut t, mut off) = (0, flat);
        while off >= sizes[t] {
            off -= sizes[t];
            t += 1;
        }
        let orig = model.tensors().nth(t).unwrap().data()[off];
        let set = |p: &mut ModelParams, v: f64| p.tensors_mut().nth(t).unwrap().data_mut()[off] = v;
        set(&mut probe, orig + FD_STEP);
        let up = eval(&probe)?.0;
        set(&mut probe, orig - FD_STEP);
        let down = eval(&probe)?.0;
        set(&mut probe, orig);
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[flat], numeric));
    }
    Ok(worst)
}

/// Parameter-gradient check of `model` on one (input, objective) pair.
pub fn grad_check(model: &ModelParams, input: &Tensor, obj: Objective, coords: usize, seed: u64) -> Result<f64> {
    grad_check_with(model, coords, seed, |m| {
        loss_and_grads(m, input, obj).map(|(l, g, _)| (l, g))
    })
}

/// Same check for the gradient with respect to the input.
pub fn grad_check_input(model: &ModelParams, input: &Tensor, obj: Objective, coords: usize, seed: u64) -> Result<f64> {
    let (_, _, gin) = loss_and_grads(model, input, obj)?;
    let mut r = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    let mut probe = input.clone();
    for _ in 0..coords.min(input.len()) {
        let i = r.gen_range(0..input.len());
        let orig = input.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = obj.eval(&model.infer(&probe)?)?.0;
        probe.data_mut()[i] = orig - FD_STEP;
        let down = obj.eval(&model.infer(&probe)?)?.0;
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(gin.data()[i], (up - down) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scale_grads, LayerSpec};
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
    }

    fn mlp() -> ModelParams {
        let specs = vec![
            LayerSpec::Dense { input: 6, output: 5 },
            LayerSpec::Relu,
            LayerSpec::Dense { input: 5, output: 4 },
            LayerSpec::Relu,
            LayerSpec::Dense { input: 4, output: 3 },
        ];
        ModelParams::build(specs, 3).unwrap()
    }

    #[test]
    fn mlp_mse_gradients_match() {
        let m = mlp();
        let x = randn(&[7, 6], 1);
        let t = randn(&[7, 3], 2);
        assert!(grad_check(&m, &x, Objective::Mse(&t), 200, 5).unwrap() < 1e-4);
        assert!(grad_check_input(&m, &x, Objective::Mse(&t), 40, 6).unwrap() < 1e-4);
    }

    #[test]
    fn softmax_layer_gradients_match() {
        let specs = vec![LayerSpec::Dense { input: 4, output: 3 }, LayerSpec::Softmax];
        let m = ModelParams::build(specs, 9).unwrap();
        let x = randn(&[5, 4], 3);
        let t = randn(&[5, 3], 4);
        assert!(grad_check(&m, &x, Objective::Mse(&t), 200, 7).unwrap() < 1e-4);
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let m = mlp();
        let x = randn(&[7, 6], 1);
        let t = randn(&[7, 3], 2);
        let err = grad_check_with(&m, 100, 5, |p| {
            let (l, mut g, _) = loss_and_grads(p, &x, Objective::Mse(&t))?;
            scale_grads(&mut g, 1.1);
            Ok((l, g))
        })
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }
}
