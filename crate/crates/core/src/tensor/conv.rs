//! 2-d convolution via im2col + matrix product.
//!
//! Output extent per axis is floor((in + 2*pad - k) / stride) + 1; padding is
//! implicit zeros. The column buffer is laid out [C*kh*kw, OH*OW] per image so
//! both the forward product and the two backward products run over contiguous
//! rows.

use super::graph::{Graph, Op, TensorId};
use super::{mat, Tensor};
use crate::error::{Error, Result};

pub(crate) fn conv_out_extent(
    op: &'static str,
    axis: &'static str,
    input: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::arg(op, "stride must be positive"));
    }
    let padded = input + 2 * pad;
    if k == 0 || k > padded {
        return Err(Error::shape(
            op,
            format!("kernel {k} exceeds padded input {padded} along {axis}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let mut col = vec![0.0f32; c * kh * kw * oh * ow];
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((ci * kh + ki) * kw + kj) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of a column buffer back onto an image plane (adjoint of
/// `im2col`); overlapping windows accumulate.
fn col2im(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &col[((ci * kh + ki) * kw + kj) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, wd) = x.dims4("conv2d")?;
    let ws = w.shape();
    let (o, cw, kh, kw) = match *ws {
        [o, cw, kh, kw] => (o, cw, kh, kw),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be [out,in,kh,kw], got {ws:?}"),
            ))
        }
    };
    if cw != c {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {c} vs weight channels {cw}"),
        ));
    }
    if b.shape() != [o] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?}, expected [{o}]", b.shape()),
        ));
    }
    let oh = conv_out_extent("conv2d", "height", h, kh, stride, pad)?;
    let ow = conv_out_extent("conv2d", "width", wd, kw, stride, pad)?;
    Ok((n, c, h, wd, o, kh, kw, oh, ow))
}

/// Plain convolution forward used by inference paths and oracles alike.
pub fn conv2d_raw(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, wd, o, kh, kw, oh, ow) = check_conv_shapes(x, w, b, stride, pad)?;
    let ckk = c * kh * kw;
    let ohw = oh * ow;
    let mut out = vec![0.0f32; n * o * ohw];
    for ni in 0..n {
        let col = im2col(
            &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd],
            c,
            h,
            wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        );
        let prod = mat::matmul(w.data(), &col, o, ckk, ohw);
        let dst = &mut out[ni * o * ohw..(ni + 1) * o * ohw];
        for oi in 0..o {
            let bias = b.data()[oi];
            let row = &mut dst[oi * ohw..(oi + 1) * ohw];
            for (rv, pv) in row.iter_mut().zip(&prod[oi * ohw..(oi + 1) * ohw]) {
                *rv = pv + bias;
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out)
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl Op for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        conv2d_raw(inputs[0], inputs[1], inputs[2], self.stride, self.pad)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, c, h, wd) = x.dims4("conv2d").expect("checked in forward");
        let (o, _, kh, kw) = match *w.shape() {
            [o, cw, kh, kw] => (o, cw, kh, kw),
            _ => unreachable!("checked in forward"),
        };
        let (oh, ow) = (output.shape()[2], output.shape()[3]);
        let (ckk, ohw) = (c * kh * kw, oh * ow);

        let mut gx = needs[0].then(|| vec![0.0f32; x.len()]);
        let mut gw = needs[1].then(|| vec![0.0f32; w.len()]);
        let gb = needs[2].then(|| {
            let mut gb = vec![0.0f32; o];
            for ni in 0..n {
                let go = &grad_out[ni * o * ohw..(ni + 1) * o * ohw];
                for oi in 0..o {
                    let mut acc = 0.0f32;
                    for v in &go[oi * ohw..(oi + 1) * ohw] {
                        acc += *v;
                    }
                    gb[oi] += acc;
                }
            }
            gb
        });

        if needs[0] || needs[1] {
            for ni in 0..n {
                let go = &grad_out[ni * o * ohw..(ni + 1) * o * ohw];
                if let Some(gw) = gw.as_mut() {
                    // dL/dW += go[o, ohw] * col[ckk, ohw]^T, recomputing the
                    // column buffer instead of caching it across the batch.
                    let col = im2col(
                        &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd],
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        self.stride,
                        self.pad,
                        oh,
                        ow,
                    );
                    let contrib = mat::matmul_abt(go, &col, o, ohw, ckk);
                    for (a, b) in gw.iter_mut().zip(&contrib) {
                        *a += *b;
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    // dL/dcol = W^T * go, then scatter back onto the image.
                    let gcol = mat::matmul_atb(w.data(), go, o, ckk, ohw);
                    col2im(
                        &gcol,
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        self.stride,
                        self.pad,
                        oh,
                        ow,
                        &mut gx[ni * c * h * wd..(ni + 1) * c * h * wd],
                    );
                }
            }
        }
        vec![gx, gw, gb]
    }
}

impl Graph {
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        self.apply(Box::new(Conv2dOp { stride, pad }), &[x, w, b])
    }
}
