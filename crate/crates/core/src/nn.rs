//! Trainable layers over the autograd graph: parameters, binding of
//! parameters into a graph per forward pass, convolution / linear /
//! batch-norm layers with separate train and inference paths, and SGD with
//! momentum.
//!
//! A fresh [`Graph`] is built per batch. Layers bind their parameters as
//! graph leaves through a [`Binds`] registry keyed by parameter name; after
//! `backward`, `Binds::harvest` copies gradients back into the parameters,
//! so the traversal order of the network structure never has to match the
//! binding order.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{batchnorm_infer, conv2d_raw, linear_raw, Graph, Tensor, TensorId};

/// A named trainable buffer plus its gradient and momentum state.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Vec<f32>,
    pub vel: Vec<f32>,
    /// Per-parameter learning-rate multiplier (structural, not persisted).
    /// Warp-predicting heads need a much smaller step than texture filters,
    /// otherwise their grid runs off-frame before the filters learn anything.
    pub lr_scale: f32,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let n = data.len();
        Param {
            name: name.into(),
            shape,
            data,
            grad: vec![0.0; n],
            vel: vec![0.0; n],
            lr_scale: 1.0,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param::new(name, shape, vec![0.0; n])
    }

    /// Zero-mean Gaussian fan-in scaling; the variance keeps activations of
    /// rectified layers from shrinking layer over layer.
    pub fn he_normal(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| gaussian(rng) * std).collect();
        Param::new(name, shape, data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Box-Muller from two uniform draws; consumes exactly two f64s per call so
/// the stream layout is stable.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Name -> graph-leaf registry for one forward/backward pass.
#[derive(Default)]
pub struct Binds {
    map: HashMap<String, TensorId>,
}

impl Binds {
    pub fn new() -> Self {
        Binds::default()
    }

    pub fn bind(&mut self, g: &mut Graph, p: &Param) -> TensorId {
        let t = Tensor::new(p.shape.clone(), p.data.clone())
            .expect("param invariant: shape matches buffer")
            .with_grad();
        let id = g.leaf(t);
        let prev = self.map.insert(p.name.clone(), id);
        debug_assert!(prev.is_none(), "parameter {:?} bound twice", p.name);
        id
    }

    pub fn id(&self, name: &str) -> Option<TensorId> {
        self.map.get(name).copied()
    }

    /// Adds the graph gradient of `p` (if it was bound and received one)
    /// into `p.grad`.
    pub fn harvest(&self, g: &Graph, p: &mut Param) {
        if let Some(id) = self.map.get(&p.name) {
            if let Some(grad) = g.grad(*id) {
                for (a, b) in p.grad.iter_mut().zip(grad) {
                    *a += *b;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Conv2d {
            weight: Param::he_normal(
                format!("{name}.weight"),
                vec![out_c, in_c, k, k],
                in_c * k * k,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![out_c]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: TensorId, binds: &mut Binds) -> Result<TensorId> {
        let w = binds.bind(g, &self.weight);
        let b = binds.bind(g, &self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let w = Tensor::new(self.weight.shape.clone(), self.weight.data.clone())?;
        let b = Tensor::new(self.bias.shape.clone(), self.bias.data.clone())?;
        conv2d_raw(x, &w, &b, self.stride, self.pad)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Param::he_normal(format!("{name}.weight"), vec![out_f, in_f], in_f, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![out_f]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: TensorId, binds: &mut Binds) -> Result<TensorId> {
        let w = binds.bind(g, &self.weight);
        let b = binds.bind(g, &self.bias);
        g.linear(x, w, b)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let w = Tensor::new(self.weight.shape.clone(), self.weight.data.clone())?;
        let b = Tensor::new(self.bias.shape.clone(), self.bias.data.clone())?;
        linear_raw(x, &w, &b)
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
}

/// Batch norm layer owning its running statistics. Training updates them with
/// momentum 0.1; inference before any update (or load) is an error.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub initialized: bool,
    pub eps: f32,
    pub momentum: f32,
    name: String,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            initialized: false,
            eps: 1e-5,
            momentum: 0.1,
            name: name.to_string(),
        }
    }

    pub fn forward_train(
        &mut self,
        g: &mut Graph,
        x: TensorId,
        binds: &mut Binds,
    ) -> Result<TensorId> {
        let gamma = binds.bind(g, &self.gamma);
        let beta = binds.bind(g, &self.beta);
        let (y, mean, var) = g.batchnorm_train(x, gamma, beta, self.eps)?;
        for (r, m) in self.running_mean.iter_mut().zip(&mean) {
            *r = (1.0 - self.momentum) * *r + self.momentum * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&var) {
            *r = (1.0 - self.momentum) * *r + self.momentum * v;
        }
        self.initialized = true;
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        if !self.initialized {
            return Err(Error::Uninitialized(format!(
                "batch norm {:?} used for inference before any training step or load",
                self.name
            )));
        }
        let gamma = Tensor::new(self.gamma.shape.clone(), self.gamma.data.clone())?;
        let beta = Tensor::new(self.beta.shape.clone(), self.beta.data.clone())?;
        batchnorm_infer(x, &gamma, &beta, &self.running_mean, &self.running_var, self.eps)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// SGD with classical momentum and L2 weight decay folded into the gradient:
/// v = mu*v - lr*(g + wd*w); w += v. `step` also clears the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn step(&self, p: &mut Param) {
        let lr = self.lr * p.lr_scale;
        for i in 0..p.data.len() {
            let g = p.grad[i] + self.weight_decay * p.data[i];
            p.vel[i] = self.momentum * p.vel[i] - lr * g;
            p.data[i] += p.vel[i];
            p.grad[i] = 0.0;
        }
    }
}
