//! Batch normalization over the channel axis of NCHW tensors.
//!
//! Training mode normalizes with biased batch statistics and reports them to
//! the caller (which owns the running-average state); inference mode is a
//! pure per-channel affine map using stored running statistics. Channel sums
//! accumulate in f64 so batch statistics do not depend on reduction
//! tiling.

use super::graph::{Graph, Op, TensorId};
use super::Tensor;
use crate::error::{Error, Result};

fn check_bn_shapes(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4("batchnorm2d")?;
    if gamma.shape() != [c] {
        return Err(Error::shape(
            "batchnorm2d",
            format!("gamma shape {:?}, expected [{c}]", gamma.shape()),
        ));
    }
    if beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm2d",
            format!("beta shape {:?}, expected [{c}]", beta.shape()),
        ));
    }
    Ok((n, c, h, w))
}

/// Per-channel batch mean and (biased) variance of an NCHW tensor.
pub(crate) fn channel_stats(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = x.dims4("channel_stats").expect("caller checked rank");
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ci in 0..c {
        let mut acc = 0.0f64;
        for ni in 0..n {
            let src = &x.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            for v in src {
                acc += *v as f64;
            }
        }
        let mu = acc / count;
        let mut vacc = 0.0f64;
        for ni in 0..n {
            let src = &x.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            for v in src {
                let d = *v as f64 - mu;
                vacc += d * d;
            }
        }
        mean[ci] = mu as f32;
        var[ci] = (vacc / count) as f32;
    }
    (mean, var)
}

/// Inference-mode normalization with frozen statistics.
pub fn batchnorm_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let (n, c, h, w) = check_bn_shapes(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape(
            "batchnorm2d",
            format!(
                "running stats hold {} channels, input has {c}",
                running_mean.len()
            ),
        ));
    }
    let plane = h * w;
    let mut out = vec![0.0f32; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let scale = gamma.data()[ci] / (running_var[ci] + eps).sqrt();
            let shift = beta.data()[ci] - running_mean[ci] * scale;
            let src = &x.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            let dst = &mut out[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            for (d, v) in dst.iter_mut().zip(src) {
                *d = v * scale + shift;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

struct BatchNormOp {
    eps: f32,
    // saved by forward for backward
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl Op for BatchNormOp {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let (n, c, h, w) = check_bn_shapes(x, gamma, beta)?;
        let (mean, var) = channel_stats(x);
        self.inv_std = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        self.mean = mean;
        let plane = h * w;
        let mut out = vec![0.0f32; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let scale = gamma.data()[ci] * self.inv_std[ci];
                let shift = beta.data()[ci] - self.mean[ci] * scale;
                let src = &x.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                let dst = &mut out[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v * scale + shift;
                }
            }
        }
        Tensor::new(vec![n, c, h, w], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, h, w) = x.dims4("batchnorm2d").expect("checked in forward");
        let plane = h * w;
        let m = (n * plane) as f64;

        // Channel reductions shared by all three gradients.
        let mut sum_go = vec![0.0f64; c];
        let mut sum_go_xhat = vec![0.0f64; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let mu = self.mean[ci] as f64;
                let istd = self.inv_std[ci] as f64;
                let mut a = 0.0f64;
                let mut b = 0.0f64;
                for p in 0..plane {
                    let g = grad_out[base + p] as f64;
                    let xh = (x.data()[base + p] as f64 - mu) * istd;
                    a += g;
                    b += g * xh;
                }
                sum_go[ci] += a;
                sum_go_xhat[ci] += b;
            }
        }

        let gx = needs[0].then(|| {
            let mut gx = vec![0.0f32; x.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let mu = self.mean[ci] as f64;
                    let istd = self.inv_std[ci] as f64;
                    let gsc = gamma.data()[ci] as f64 * istd / m;
                    for p in 0..plane {
                        let g = grad_out[base + p] as f64;
                        let xh = (x.data()[base + p] as f64 - mu) * istd;
                        gx[base + p] =
                            (gsc * (m * g - sum_go[ci] - xh * sum_go_xhat[ci])) as f32;
                    }
                }
            }
            gx
        });
        let gg = needs[1].then(|| sum_go_xhat.iter().map(|v| *v as f32).collect());
        let gb = needs[2].then(|| sum_go.iter().map(|v| *v as f32).collect());
        vec![gx, gg, gb]
    }
}

impl Graph {
    /// Training-mode batch norm. Returns the output id plus the batch mean
    /// and biased variance so the owning layer can fold them into its running
    /// averages.
    pub fn batchnorm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f32,
    ) -> Result<(TensorId, Vec<f32>, Vec<f32>)> {
        let (mean, var) = {
            let xt = self.tensor(x);
            check_bn_shapes(xt, self.tensor(gamma), self.tensor(beta))?;
            channel_stats(xt)
        };
        let id = self.apply(
            Box::new(BatchNormOp {
                eps,
                mean: Vec::new(),
                inv_std: Vec::new(),
            }),
            &[x, gamma, beta],
        )?;
        Ok((id, mean, var))
    }
}
