use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use super::layers::{self, LayerSpec};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Weight and bias of one parametrised layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer gradients, aligned with [`ModelParams::params`].
pub type Gradients = Vec<Option<LayerParams>>;

/// Layer list, learned parameters and checkpoint metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub specs: Vec<LayerSpec>,
    pub params: Vec<Option<LayerParams>>,
    pub seed: u64,
    pub epochs: u64,
    /// Free-form key/value metadata embedded in checkpoints.
    pub meta: BTreeMap<String, String>,
}

/// What flows between layers during shape validation.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Flow {
    Unknown,
    Features(usize),
    Channels(usize),
}

/// Checks channel/width chaining and skip references.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    let mut flows: Vec<Flow> = Vec::with_capacity(specs.len());
    let mut cur = Flow::Unknown;
    for (i, s) in specs.iter().enumerate() {
        let bad = |msg: String| Err(Error::Shape(format!("layer {i} ({}): {msg}", s.name())));
        cur = match *s {
            LayerSpec::Dense { input, output } => {
                if input == 0 || output == 0 {
                    return bad("zero width".into());
                }
                match cur {
                    Flow::Features(n) if n != input => return bad(format!("expects {input} inputs, gets {n}")),
                    Flow::Channels(_) => return bad("dense after convolutional layers".into()),
                    _ => Flow::Features(output),
                }
            }
            LayerSpec::Conv2d { in_ch, out_ch, .. } | LayerSpec::UpConv2 { in_ch, out_ch } => {
                if in_ch == 0 || out_ch == 0 {
                    return bad("zero channels".into());
                }
                if matches!(*s, LayerSpec::Conv2d { k: 0, .. }) {
                    return bad("kernel size must be positive".into());
                }
                match cur {
                    Flow::Channels(c) if c != in_ch => return bad(format!("expects {in_ch} channels, gets {c}")),
                    Flow::Features(_) => return bad("convolution after dense layer".into()),
                    _ => Flow::Channels(out_ch),
                }
            }
            LayerSpec::MaxPool2 => match cur {
                Flow::Features(_) => return bad("pooling after dense layer".into()),
                other => other,
            },
            LayerSpec::Concat { skip } => {
                if skip >= i {
                    return bad(format!("skip {skip} does not precede it"));
                }
                match (flows[skip], cur) {
                    (Flow::Channels(a), Flow::Channels(b)) => Flow::Channels(a + b),
                    _ => return bad("concat needs channel counts on both inputs".into()),
                }
            }
            LayerSpec::Relu | LayerSpec::Softmax => cur,
        };
        flows.push(cur);
    }
    Ok(())
}

/// He-normal weights, zero bias.
pub(crate) fn init_layer(spec: &LayerSpec, seed: u64) -> Option<LayerParams> {
    let (ws, bs) = spec.param_shapes()?;
    let std = (2.0 / spec.fan_in() as f64).sqrt();
    let mut r = rng::seeded(seed);
    let n: usize = ws.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            z * std
        })
        .collect();
    Some(LayerParams {
        weight: Tensor::new(ws, w).unwrap(),
        bias: Tensor::zeros(&bs),
    })
}

/// Activations recorded by [`ModelParams::forward`].
#[derive(Debug)]
pub struct Cache {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Tensor>,
    pool_args: Vec<Option<Vec<usize>>>,
}

impl Cache {
    pub fn activation(&self, layer: usize) -> &Tensor {
        &self.acts[layer + 1]
    }
}

impl ModelParams {
    pub fn build(specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_specs(&specs)?;
        let params = specs
            .iter()
            .enumerate()
            .map(|(i, s)| init_layer(s, rng::derive(seed, i as u64)))
            .collect();
        Ok(Self {
            specs,
            params,
            seed,
            epochs: 0,
            meta: BTreeMap::new(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    /// Verifies every parameter tensor against its spec.
    pub fn check_shapes(&self) -> Result<()> {
        validate_specs(&self.specs)?;
        if self.params.len() != self.specs.len() {
            return Err(Error::Shape("parameter list length differs from layer list".into()));
        }
        for (i, (s, p)) in self.specs.iter().zip(&self.params).enumerate() {
            match (s.param_shapes(), p) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) if p.weight.shape() == ws && p.bias.shape() == bs => {}
                _ => {
                    return Err(Error::Shape(format!(
                        "layer {i} ({}) parameters do not match",
                        s.name()
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        let mut acts = Vec::with_capacity(self.specs.len() + 1);
        let mut pool_args = Vec::with_capacity(self.specs.len());
        acts.push(input.clone());
        for (i, s) in self.specs.iter().enumerate() {
            let x = &acts[i];
            let mut arg = None;
            let y = match *s {
                LayerSpec::Dense { .. } => {
                    let p = self.params[i].as_ref().unwrap();
                    layers::dense_forward(x, &p.weight, &p.bias)?
                }
                LayerSpec::Relu => layers::relu_forward(x),
                LayerSpec::Conv2d { k, pad, .. } => {
                    let p = self.params[i].as_ref().unwrap();
                    layers::conv_forward(x, &p.weight, &p.bias, k, pad)?
                }
                LayerSpec::MaxPool2 => {
                    let (y, a) = layers::maxpool_forward(x)?;
                    arg = Some(a);
                    y
                }
                LayerSpec::UpConv2 { .. } => {
                    let p = self.params[i].as_ref().unwrap();
                    layers::upconv_forward(x, &p.weight, &p.bias)?
                }
                LayerSpec::Concat { skip } => layers::concat_forward(&acts[skip + 1], x)?,
                LayerSpec::Softmax => layers::softmax_forward(x),
            };
            pool_args.push(arg);
            acts.push(y);
        }
        let out = acts.last().unwrap().clone();
        Ok((out, Cache { acts, pool_args }))
    }

    /// Forward pass without keeping the cache.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        self.forward(input).map(|(y, _)| y)
    }

    /// Backpropagates `grad_out` (dLoss/dOutput) through the cached pass.
    pub fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Gradients, Tensor)> {
        if cache.acts.len() != self.specs.len() + 1 {
            return Err(Error::StaleCache(format!(
                "cache has {} activations for {} layers",
                cache.acts.len(),
                self.specs.len()
            )));
        }
        if cache.acts.last().unwrap().shape() != grad_out.shape() {
            return Err(Error::StaleCache(format!(
                "output gradient {:?} does not match cached output {:?}",
                grad_out.shape(),
                cache.acts.last().unwrap().shape()
            )));
        }
        let n = self.specs.len();
        let mut grads: Gradients = vec![None; n];
        // Extra gradient arriving at an activation through skip connections.
        let mut pending: Vec<Option<Tensor>> = vec![None; n + 1];
        let mut g = grad_out.clone();
        for i in (0..n).rev() {
            if let Some(extra) = pending[i + 1].take() {
                g.add_assign(&extra);
            }
            let x = &cache.acts[i];
            g = match self.specs[i] {
                LayerSpec::Dense { .. } => {
                    let p = self.params[i].as_ref().unwrap();
                    let (dw, db, dx) = layers::dense_backward(x, &p.weight, &g);
                    grads[i] = Some(LayerParams { weight: dw, bias: db });
                    dx
                }
                LayerSpec::Relu => layers::relu_backward(x, &g),
                LayerSpec::Conv2d { k, pad, .. } => {
                    let p = self.params[i].as_ref().unwrap();
                    let (dw, db, dx) = layers::conv_backward(x, &p.weight, &g, k, pad);
                    grads[i] = Some(LayerParams { weight: dw, bias: db });
                    dx
                }
                LayerSpec::MaxPool2 => {
                    let arg = cache.pool_args[i]
                        .as_ref()
                        .ok_or_else(|| Error::StaleCache("missing pooling indices".into()))?;
                    layers::maxpool_backward(x.shape(), arg, &g)
                }
                LayerSpec::UpConv2 { .. } => {
                    let p = self.params[i].as_ref().unwrap();
                    let (dw, db, dx) = layers::upconv_backward(x, &p.weight, &g);
                    grads[i] = Some(LayerParams { weight: dw, bias: db });
                    dx
                }
                LayerSpec::Concat { skip } => {
                    let (gs, gx) = layers::concat_backward(cache.acts[skip + 1].shape(), &g);
                    match &mut pending[skip + 1] {
                        Some(t) => t.add_assign(&gs),
                        slot => *slot = Some(gs),
                    }
                    gx
                }
                LayerSpec::Softmax => layers::softmax_backward(&cache.acts[i + 1], &g),
            };
        }
        Ok((grads, g))
    }

    /// Every parameter tensor in a fixed order (weight then bias per layer).
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().flatten().flat_map(|p| [&p.weight, &p.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
    }
}

/// Zero gradients shaped like `model`.
pub fn zero_grads(model: &ModelParams) -> Gradients {
    model
        .params
        .iter()
        .map(|p| {
            p.as_ref().map(|p| LayerParams {
                weight: Tensor::zeros(p.weight.shape()),
                bias: Tensor::zeros(p.bias.shape()),
            })
        })
        .collect()
}

/// `acc += g`.
pub fn accumulate(acc: &mut Gradients, g: &Gradients) {
    for (a, b) in acc.iter_mut().zip(g) {
        if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
            a.weight.add_assign(&b.weight);
            a.bias.add_assign(&b.bias);
        }
    }
}

pub fn scale_grads(g: &mut Gradients, s: f64) {
    for p in g.iter_mut().flatten() {
        p.weight.scale(s);
        p.bias.scale(s);
    }
}
