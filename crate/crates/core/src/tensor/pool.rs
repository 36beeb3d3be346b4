//! Max pooling (floor or ceil output rounding), index-preserving unpooling,
//! and average pooling.
//!
//! Ceil rounding admits a final partial window as long as it starts inside
//! the input, e.g. 25 -> 13 for a 2x2/2 pool; unpooling with the recorded
//! indices then restores the original 25-pixel extent. Argmax ties resolve to
//! the lowest flat index.

use super::graph::{Graph, Op, TensorId};
use super::Tensor;
use crate::error::{Error, Result};

/// Argmax positions recorded by a max pool, one per pooled output element,
/// each a flat `y * in_w + x` offset within its (n, c) input plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    indices: Vec<u32>,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolIndices {
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Number of (n, c) planes these indices cover.
    pub fn planes(&self) -> usize {
        self.indices.len() / (self.out_h * self.out_w)
    }
}

pub(crate) fn pool_out_extent(
    op: &'static str,
    axis: &'static str,
    input: usize,
    k: usize,
    stride: usize,
    ceil: bool,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::arg(op, "stride must be positive"));
    }
    if k == 0 || k > input {
        return Err(Error::shape(
            op,
            format!("window {k} exceeds input extent {input} along {axis}"),
        ));
    }
    let mut out = if ceil {
        (input - k + stride - 1) / stride + 1
    } else {
        (input - k) / stride + 1
    };
    // A ceil-mode window must still start inside the input.
    if ceil && (out - 1) * stride >= input {
        out -= 1;
    }
    Ok(out)
}

/// Returns the pooled tensor and the argmax record needed to undo it.
pub fn maxpool2d_raw(
    x: &Tensor,
    k: usize,
    stride: usize,
    ceil: bool,
) -> Result<(Tensor, PoolIndices)> {
    let (n, c, h, w) = x.dims4("maxpool2d")?;
    let oh = pool_out_extent("maxpool2d", "height", h, k, stride, ceil)?;
    let ow = pool_out_extent("maxpool2d", "width", w, k, stride, ceil)?;
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut indices = vec![0u32; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst_base = plane * oh * ow;
        for oy in 0..oh {
            let y0 = oy * stride;
            let y1 = (y0 + k).min(h);
            for ox in 0..ow {
                let x0 = ox * stride;
                let x1 = (x0 + k).min(w);
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = (y0 * w + x0) as u32;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let v = src[yy * w + xx];
                        if v > best {
                            best = v;
                            best_idx = (yy * w + xx) as u32;
                        }
                    }
                }
                out[dst_base + oy * ow + ox] = best;
                indices[dst_base + oy * ow + ox] = best_idx;
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, oh, ow], out)?,
        PoolIndices {
            indices,
            in_h: h,
            in_w: w,
            out_h: oh,
            out_w: ow,
        },
    ))
}

/// Scatter-add of pooled values back to their argmax positions; every other
/// position is zero. Exact inverse of the pool on the retained elements.
pub fn unpool2d_raw(x: &Tensor, idx: &PoolIndices) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("unpool2d")?;
    if h != idx.out_h || w != idx.out_w {
        return Err(Error::shape(
            "unpool2d",
            format!(
                "input extent {h}x{w} vs recorded pooled extent {}x{}",
                idx.out_h, idx.out_w
            ),
        ));
    }
    if x.len() != idx.indices.len() {
        return Err(Error::shape(
            "unpool2d",
            format!(
                "input holds {} planes, indices record {}",
                n * c,
                idx.planes()
            ),
        ));
    }
    let plane_len = idx.in_h * idx.in_w;
    let mut out = vec![0.0f32; n * c * plane_len];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let ids = &idx.indices[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * plane_len..(plane + 1) * plane_len];
        for (v, &i) in src.iter().zip(ids) {
            let i = i as usize;
            if i >= plane_len {
                return Err(Error::arg(
                    "unpool2d",
                    format!("recorded index {i} outside {}x{} plane", idx.in_h, idx.in_w),
                ));
            }
            dst[i] += *v;
        }
    }
    Tensor::new(vec![n, c, idx.in_h, idx.in_w], out)
}

pub fn avgpool2d_raw(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("avgpool2d")?;
    let oh = pool_out_extent("avgpool2d", "height", h, k, stride, false)?;
    let ow = pool_out_extent("avgpool2d", "width", w, k, stride, false)?;
    let inv = 1.0 / (k * k) as f32;
    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for yy in oy * stride..oy * stride + k {
                    for xx in ox * stride..ox * stride + k {
                        acc += src[yy * w + xx];
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

struct MaxPool2dOp {
    k: usize,
    stride: usize,
    ceil: bool,
    indices: PoolIndices,
}

impl Op for MaxPool2dOp {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (out, idx) = maxpool2d_raw(inputs[0], self.k, self.stride, self.ceil)?;
        self.indices = idx;
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            let mut gx = vec![0.0f32; inputs[0].len()];
            let plane_len = self.indices.in_h * self.indices.in_w;
            let out_len = self.indices.out_h * self.indices.out_w;
            for plane in 0..self.indices.planes() {
                let ids = &self.indices.indices[plane * out_len..(plane + 1) * out_len];
                let go = &grad_out[plane * out_len..(plane + 1) * out_len];
                let dst = &mut gx[plane * plane_len..(plane + 1) * plane_len];
                for (&i, g) in ids.iter().zip(go) {
                    dst[i as usize] += *g;
                }
            }
            gx
        })]
    }
}

struct Unpool2dOp {
    indices: PoolIndices,
}

impl Op for Unpool2dOp {
    fn name(&self) -> &'static str {
        "unpool2d"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        unpool2d_raw(inputs[0], &self.indices)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            // Adjoint of scatter-add: gather at the recorded positions.
            let mut gx = vec![0.0f32; inputs[0].len()];
            let plane_len = self.indices.in_h * self.indices.in_w;
            let out_len = self.indices.out_h * self.indices.out_w;
            for plane in 0..self.indices.planes() {
                let ids = &self.indices.indices[plane * out_len..(plane + 1) * out_len];
                let src = &grad_out[plane * plane_len..(plane + 1) * plane_len];
                let dst = &mut gx[plane * out_len..(plane + 1) * out_len];
                for (d, &i) in dst.iter_mut().zip(ids) {
                    *d = src[i as usize];
                }
            }
            gx
        })]
    }
}

struct AvgPool2dOp {
    k: usize,
    stride: usize,
}

impl Op for AvgPool2dOp {
    fn name(&self) -> &'static str {
        "avgpool2d"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        avgpool2d_raw(inputs[0], self.k, self.stride)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            let (n, c, h, w) = inputs[0].dims4("avgpool2d").expect("checked in forward");
            let (oh, ow) = (output.shape()[2], output.shape()[3]);
            let inv = 1.0 / (self.k * self.k) as f32;
            let mut gx = vec![0.0f32; inputs[0].len()];
            for plane in 0..n * c {
                let go = &grad_out[plane * oh * ow..(plane + 1) * oh * ow];
                let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = go[oy * ow + ox] * inv;
                        for yy in oy * self.stride..oy * self.stride + self.k {
                            for xx in ox * self.stride..ox * self.stride + self.k {
                                dst[yy * w + xx] += g;
                            }
                        }
                    }
                }
            }
            gx
        })]
    }
}

impl Graph {
    /// Max pool that also hands the caller the argmax record (cloned out of
    /// the recorded op) for a later unpool.
    pub fn maxpool2d(
        &mut self,
        x: TensorId,
        k: usize,
        stride: usize,
        ceil: bool,
    ) -> Result<(TensorId, PoolIndices)> {
        let (out, indices) = maxpool2d_raw(self.tensor(x), k, stride, ceil)?;
        let op = Box::new(MaxPool2dOp {
            k,
            stride,
            ceil,
            indices: indices.clone(),
        });
        let id = self.record_precomputed(op, &[x], out);
        Ok((id, indices))
    }

    pub fn unpool2d(&mut self, x: TensorId, indices: PoolIndices) -> Result<TensorId> {
        self.apply(Box::new(Unpool2dOp { indices }), &[x])
    }

    pub fn avgpool2d(&mut self, x: TensorId, k: usize, stride: usize) -> Result<TensorId> {
        self.apply(Box::new(AvgPool2dOp { k, stride }), &[x])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_mode_extents_match_fixed_plan() {
        // The 100 -> 50 -> 25 -> 13 cascade the encoder-decoder relies on.
        assert_eq!(pool_out_extent("t", "h", 100, 2, 2, true).unwrap(), 50);
        assert_eq!(pool_out_extent("t", "h", 50, 2, 2, true).unwrap(), 25);
        assert_eq!(pool_out_extent("t", "h", 25, 2, 2, true).unwrap(), 13);
        assert_eq!(pool_out_extent("t", "h", 25, 2, 2, false).unwrap(), 12);
    }

    #[test]
    fn pool_then_unpool_restores_values_at_argmax_positions() {
        let x = Tensor::from_fn(vec![1, 2, 25, 25], |i| ((i * 2654435761) % 1000) as f32 / 7.0);
        let (pooled, idx) = maxpool2d_raw(&x, 2, 2, true).unwrap();
        assert_eq!(pooled.shape(), &[1, 2, 13, 13]);
        let restored = unpool2d_raw(&pooled, &idx).unwrap();
        assert_eq!(restored.shape(), x.shape());
        // Every retained element returns to its exact source position.
        for (out_pos, &flat) in idx.indices().iter().enumerate() {
            let plane = out_pos / (13 * 13);
            let v = restored.data()[plane * 625 + flat as usize];
            assert_eq!(v, pooled.data()[out_pos]);
        }
        // Non-argmax positions must be zero.
        let nonzero = restored.data().iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, idx.indices().len());
    }

    #[test]
    fn argmax_ties_pick_lowest_flat_index() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let (_, idx) = maxpool2d_raw(&x, 2, 2, false).unwrap();
        assert_eq!(idx.indices(), &[0]);
    }

    #[test]
    fn unpool_rejects_wrong_extent() {
        let x = Tensor::zeros(vec![1, 1, 4, 4]);
        let (pooled, idx) = maxpool2d_raw(&x, 2, 2, false).unwrap();
        assert_eq!(pooled.shape(), &[1, 1, 2, 2]);
        let wrong = Tensor::zeros(vec![1, 1, 3, 3]);
        assert!(unpool2d_raw(&wrong, &idx).is_err());
    }

    #[test]
    fn window_larger_than_input_is_rejected() {
        let x = Tensor::zeros(vec![1, 1, 3, 3]);
        assert!(maxpool2d_raw(&x, 4, 2, false).is_err());
        assert!(avgpool2d_raw(&x, 4, 2).is_err());
    }

    #[test]
    fn avgpool_means_windows() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0])
            .unwrap();
        let y = avgpool2d_raw(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[2.5, 6.5]);
    }
}
