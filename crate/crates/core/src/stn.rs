//! Spatial transformer building blocks: affine sampling grids, bilinear
//! sampling with zero padding outside the input, and a self-contained module
//! (localization net + grid + sampler) that is an exact identity map at
//! initialization.
//!
//! Coordinates are normalized so pixel centers span [-1, 1] inclusive along
//! each axis: x_norm = -1 + 2x/(W-1). An affine map theta = [a b tx; c d ty]
//! produces *source* coordinates from target coordinates, i.e. the module
//! pulls each output pixel from `(a*xt + b*yt + tx, c*xt + d*yt + ty)`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Binds, Conv2d, Linear, Param};
use crate::tensor::{avgpool2d_raw, maxpool2d_raw, relu_raw, Graph, Op, Tensor, TensorId};

/// Six affine coefficients, row-major: [a, b, tx, c, d, ty].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams(pub [f32; 6]);

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    /// Pure translation in normalized coordinates.
    pub fn translation(tx: f32, ty: f32) -> Self {
        AffineParams([1.0, 0.0, tx, 0.0, 1.0, ty])
    }

    pub fn apply(&self, xt: f32, yt: f32) -> (f32, f32) {
        let t = &self.0;
        (t[0] * xt + t[1] * yt + t[2], t[3] * xt + t[4] * yt + t[5])
    }
}

/// Normalized source coordinates for every target pixel, (x, y) interleaved,
/// row-major over the target raster.
#[derive(Debug, Clone)]
pub struct SampleGrid {
    pub h_out: usize,
    pub w_out: usize,
    coords: Vec<f32>,
}

impl SampleGrid {
    pub fn coords(&self) -> &[f32] {
        &self.coords
    }

    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = 2 * (y * self.w_out + x);
        (self.coords[i], self.coords[i + 1])
    }
}

/// Center of pixel `i` of `n` in normalized coordinates; a single pixel sits
/// at the origin.
pub fn norm_coord(i: usize, n: usize) -> f32 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f32 / (n - 1) as f32
    }
}

/// Evaluates the affine map at every target pixel center.
pub fn affine_grid(theta: &AffineParams, h_out: usize, w_out: usize) -> SampleGrid {
    let mut coords = Vec::with_capacity(2 * h_out * w_out);
    for y in 0..h_out {
        let yt = norm_coord(y, h_out);
        for x in 0..w_out {
            let xt = norm_coord(x, w_out);
            let (xs, ys) = theta.apply(xt, yt);
            coords.push(xs);
            coords.push(ys);
        }
    }
    SampleGrid {
        h_out,
        w_out,
        coords,
    }
}

#[inline]
fn to_px(norm: f32, extent: usize) -> f32 {
    (norm + 1.0) * (extent - 1) as f32 / 2.0
}

/// Bilinear read of one plane at fractional pixel coordinates; positions
/// outside the raster read as zero.
#[inline]
fn sample_plane(plane: &[f32], h: usize, w: usize, px: f32, py: f32) -> f32 {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let read = |y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let v00 = read(y0, x0);
    let v01 = read(y0, x0 + 1);
    let v10 = read(y0 + 1, x0);
    let v11 = read(y0 + 1, x0 + 1);
    v00 * (1.0 - fx) * (1.0 - fy) + v01 * fx * (1.0 - fy) + v10 * (1.0 - fx) * fy + v11 * fx * fy
}

/// Samples every channel of every image through one shared grid.
pub fn bilinear_sample(input: &Tensor, grid: &SampleGrid) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("bilinear_sample")?;
    let (oh, ow) = (grid.h_out, grid.w_out);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane_idx in 0..n * c {
        let plane = &input.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
        let dst = &mut out[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let (gx, gy) = grid.at(y, x);
                dst[y * ow + x] = sample_plane(plane, h, w, to_px(gx, w), to_px(gy, h));
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

// ---------------------------------------------------------------------------
// graph ops
// ---------------------------------------------------------------------------

struct AffineGridOp {
    h_out: usize,
    w_out: usize,
}

impl Op for AffineGridOp {
    fn name(&self) -> &'static str {
        "affine_grid"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let theta = inputs[0];
        let (n, six) = theta.dims2("affine_grid")?;
        if six != 6 {
            return Err(Error::shape(
                "affine_grid",
                format!("theta must have 6 coefficients per sample, got {six}"),
            ));
        }
        let (oh, ow) = (self.h_out, self.w_out);
        let mut out = vec![0.0f32; n * oh * ow * 2];
        for ni in 0..n {
            let t = &theta.data()[ni * 6..(ni + 1) * 6];
            let dst = &mut out[ni * oh * ow * 2..(ni + 1) * oh * ow * 2];
            for y in 0..oh {
                let yt = norm_coord(y, oh);
                for x in 0..ow {
                    let xt = norm_coord(x, ow);
                    let i = 2 * (y * ow + x);
                    dst[i] = t[0] * xt + t[1] * yt + t[2];
                    dst[i + 1] = t[3] * xt + t[4] * yt + t[5];
                }
            }
        }
        Tensor::new(vec![n, oh, ow, 2], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            let n = inputs[0].shape()[0];
            let (oh, ow) = (self.h_out, self.w_out);
            let mut gt = vec![0.0f32; n * 6];
            for ni in 0..n {
                let go = &grad_out[ni * oh * ow * 2..(ni + 1) * oh * ow * 2];
                let mut acc = [0.0f64; 6];
                for y in 0..oh {
                    let yt = norm_coord(y, oh) as f64;
                    for x in 0..ow {
                        let xt = norm_coord(x, ow) as f64;
                        let i = 2 * (y * ow + x);
                        let gx = go[i] as f64;
                        let gy = go[i + 1] as f64;
                        acc[0] += gx * xt;
                        acc[1] += gx * yt;
                        acc[2] += gx;
                        acc[3] += gy * xt;
                        acc[4] += gy * yt;
                        acc[5] += gy;
                    }
                }
                for (dst, a) in gt[ni * 6..(ni + 1) * 6].iter_mut().zip(&acc) {
                    *dst = *a as f32;
                }
            }
            gt
        })]
    }
}

struct BilinearSampleOp;

impl Op for BilinearSampleOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, grid) = (inputs[0], inputs[1]);
        let (n, c, h, w) = x.dims4("bilinear_sample")?;
        let (gn, oh, ow, two) = match *grid.shape() {
            [gn, oh, ow, two] => (gn, oh, ow, two),
            _ => {
                return Err(Error::shape(
                    "bilinear_sample",
                    format!("grid must be [n, h, w, 2], got {:?}", grid.shape()),
                ))
            }
        };
        if two != 2 || gn != n {
            return Err(Error::shape(
                "bilinear_sample",
                format!(
                    "grid shape {:?} does not pair with input batch {n}",
                    grid.shape()
                ),
            ));
        }
        let mut out = vec![0.0f32; n * c * oh * ow];
        for ni in 0..n {
            let g = &grid.data()[ni * oh * ow * 2..(ni + 1) * oh * ow * 2];
            for ci in 0..c {
                let plane = &x.data()[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                let dst = &mut out[(ni * c + ci) * oh * ow..(ni * c + ci + 1) * oh * ow];
                for p in 0..oh * ow {
                    dst[p] = sample_plane(plane, h, w, to_px(g[2 * p], w), to_px(g[2 * p + 1], h));
                }
            }
        }
        Tensor::new(vec![n, c, oh, ow], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let (x, grid) = (inputs[0], inputs[1]);
        let (n, c, h, w) = x.dims4("bilinear_sample").expect("checked in forward");
        let (oh, ow) = (output.shape()[2], output.shape()[3]);
        let mut gx = needs[0].then(|| vec![0.0f32; x.len()]);
        let mut gg = needs[1].then(|| vec![0.0f32; grid.len()]);
        let half_w = (w - 1) as f32 / 2.0;
        let half_h = (h - 1) as f32 / 2.0;

        for ni in 0..n {
            let g = &grid.data()[ni * oh * ow * 2..(ni + 1) * oh * ow * 2];
            for p in 0..oh * ow {
                let px = to_px(g[2 * p], w);
                let py = to_px(g[2 * p + 1], h);
                let x0 = px.floor();
                let y0 = py.floor();
                let fx = px - x0;
                let fy = py - y0;
                let (x0, y0) = (x0 as isize, y0 as isize);
                let inb =
                    |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize;
                let mut dpx = 0.0f32;
                let mut dpy = 0.0f32;
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    let go = grad_out[(ni * c + ci) * oh * ow + p];
                    let read = |y: isize, x: isize| -> f32 {
                        if inb(y, x) {
                            x_at(x, y, base, w, inputs[0])
                        } else {
                            0.0
                        }
                    };
                    if let Some(gx) = gx.as_mut() {
                        // weights of the four corners
                        let mut put = |y: isize, xq: isize, wgt: f32| {
                            if inb(y, xq) && wgt != 0.0 {
                                gx[base + y as usize * w + xq as usize] += go * wgt;
                            }
                        };
                        put(y0, x0, (1.0 - fx) * (1.0 - fy));
                        put(y0, x0 + 1, fx * (1.0 - fy));
                        put(y0 + 1, x0, (1.0 - fx) * fy);
                        put(y0 + 1, x0 + 1, fx * fy);
                    }
                    if gg.is_some() {
                        let v00 = read(y0, x0);
                        let v01 = read(y0, x0 + 1);
                        let v10 = read(y0 + 1, x0);
                        let v11 = read(y0 + 1, x0 + 1);
                        dpx += go * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy);
                        dpy += go * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx);
                    }
                }
                if let Some(gg) = gg.as_mut() {
                    gg[ni * oh * ow * 2 + 2 * p] = dpx * half_w;
                    gg[ni * oh * ow * 2 + 2 * p + 1] = dpy * half_h;
                }
            }
        }
        vec![gx, gg]
    }
}

#[inline]
fn x_at(x: isize, y: isize, base: usize, w: usize, t: &Tensor) -> f32 {
    t.data()[base + y as usize * w + x as usize]
}

impl Graph {
    /// theta [N, 6] -> normalized source grid [N, h_out, w_out, 2].
    pub fn affine_grid_op(
        &mut self,
        theta: TensorId,
        h_out: usize,
        w_out: usize,
    ) -> Result<TensorId> {
        self.apply(Box::new(AffineGridOp { h_out, w_out }), &[theta])
    }

    /// input [N, C, H, W] sampled through grid [N, h_out, w_out, 2].
    pub fn bilinear_sample_op(&mut self, x: TensorId, grid: TensorId) -> Result<TensorId> {
        self.apply(Box::new(BilinearSampleOp), &[x, grid])
    }
}

// ---------------------------------------------------------------------------
// spatial transformer module
// ---------------------------------------------------------------------------

/// Width knobs for the localization network.
#[derive(Debug, Clone, Copy)]
pub struct StWidths {
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
}

impl Default for StWidths {
    fn default() -> Self {
        StWidths {
            conv1: 16,
            conv2: 32,
            hidden: 32,
        }
    }
}

/// Localization net (two strided convs, a pool, two linear layers) feeding an
/// affine grid + bilinear sampler. The final linear layer starts at zero
/// weights with an identity bias, so an untrained module reproduces its
/// input.
#[derive(Debug, Clone)]
pub struct STModule {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fc1: Linear,
    pub fc_theta: Linear,
    in_channels: usize,
    input_edge: usize,
    flat: usize,
}

impl STModule {
    pub fn new(
        name: &str,
        in_channels: usize,
        input_edge: usize,
        widths: StWidths,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        // conv(3x3, stride 2, pad 1) -> pool(2/2) -> conv(3x3, stride 2, pad 1)
        let e1 = (input_edge + 2 - 3) / 2 + 1;
        if e1 < 2 {
            return Err(Error::shape(
                "st_module",
                format!("input edge {input_edge} too small for the localization net"),
            ));
        }
        let p1 = (e1 - 2) / 2 + 1;
        let e2 = (p1 + 2 - 3) / 2 + 1;
        let flat = widths.conv2 * e2 * e2;

        let conv1 = Conv2d::new(
            &format!("{name}.loc.conv1"),
            in_channels,
            widths.conv1,
            3,
            2,
            1,
            rng,
        );
        let conv2 = Conv2d::new(
            &format!("{name}.loc.conv2"),
            widths.conv1,
            widths.conv2,
            3,
            2,
            1,
            rng,
        );
        let fc1 = Linear::new(&format!("{name}.loc.fc1"), flat, widths.hidden, rng);
        let mut fc_theta = Linear::new(&format!("{name}.loc.theta"), widths.hidden, 6, rng);
        for v in fc_theta.weight.data.iter_mut() {
            *v = 0.0;
        }
        fc_theta.bias.data.copy_from_slice(&AffineParams::identity().0);

        let mut st = STModule {
            conv1,
            conv2,
            fc1,
            fc_theta,
            in_channels,
            input_edge,
            flat,
        };
        // The warp coefficients multiply straight into the sampling grid, so
        // their gradients dwarf the rest of the net; damp the localization
        // stack or theta runs off-frame within a few optimizer steps and the
        // module degenerates to a constant map.
        st.visit_params(&mut |p| p.lr_scale = 0.1);
        st.fc_theta.weight.lr_scale = 0.01;
        st.fc_theta.bias.lr_scale = 0.01;
        Ok(st)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, c, h, w] if c == self.in_channels && h == self.input_edge && w == self.input_edge => {
                Ok(())
            }
            _ => Err(Error::shape(
                "st_module",
                format!(
                    "expected [n, {}, {}, {}] input, got {:?}",
                    self.in_channels, self.input_edge, self.input_edge, shape
                ),
            )),
        }
    }

    /// Train-mode pass; output has the input's shape.
    pub fn forward(&self, g: &mut Graph, x: TensorId, binds: &mut Binds) -> Result<TensorId> {
        self.check_input(g.tensor(x).shape())?;
        let n = g.tensor(x).shape()[0];
        let mut t = self.conv1.forward(g, x, binds)?;
        t = g.relu(t)?;
        let (t2, _) = g.maxpool2d(t, 2, 2, false)?;
        let mut t = self.conv2.forward(g, t2, binds)?;
        t = g.relu(t)?;
        let t = g.reshape(t, vec![n, self.flat])?;
        let mut t = self.fc1.forward(g, t, binds)?;
        t = g.relu(t)?;
        let theta = self.fc_theta.forward(g, t, binds)?;
        let grid = g.affine_grid_op(theta, self.input_edge, self.input_edge)?;
        g.bilinear_sample_op(x, grid)
    }

    /// Inference pass plus, for diagnostics, the predicted thetas.
    pub fn infer_with_theta(&self, x: &Tensor) -> Result<(Tensor, Vec<AffineParams>)> {
        self.check_input(x.shape())?;
        let n = x.shape()[0];
        let mut t = self.conv1.infer(x)?;
        t = relu_raw(&t);
        let (t2, _) = maxpool2d_raw(&t, 2, 2, false)?;
        let mut t = self.conv2.infer(&t2)?;
        t = relu_raw(&t);
        let flatt = Tensor::new(vec![n, self.flat], t.into_data())?;
        let mut t = self.fc1.infer(&flatt)?;
        t = relu_raw(&t);
        let theta = self.fc_theta.infer(&t)?;

        let e = self.input_edge;
        let c = self.in_channels;
        let mut out = vec![0.0f32; x.len()];
        let mut thetas = Vec::with_capacity(n);
        for ni in 0..n {
            let mut coeffs = [0.0f32; 6];
            coeffs.copy_from_slice(&theta.data()[ni * 6..(ni + 1) * 6]);
            let params = AffineParams(coeffs);
            let grid = affine_grid(&params, e, e);
            let one = Tensor::new(
                vec![1, c, e, e],
                x.data()[ni * c * e * e..(ni + 1) * c * e * e].to_vec(),
            )?;
            let sampled = bilinear_sample(&one, &grid)?;
            out[ni * c * e * e..(ni + 1) * c * e * e].copy_from_slice(sampled.data());
            thetas.push(params);
        }
        Ok((Tensor::new(x.shape().to_vec(), out)?, thetas))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.infer_with_theta(x)?.0)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.conv2.visit_params(f);
        self.fc1.visit_params(f);
        self.fc_theta.visit_params(f);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit_params_ref(f);
        self.conv2.visit_params_ref(f);
        self.fc1.visit_params_ref(f);
        self.fc_theta.visit_params_ref(f);
    }
}

/// Average pooling raw helper re-exported for aux heads (kept here so the
/// embedder does not reach into tensor internals).
pub fn global_avgpool(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4("global_avgpool")?;
    avgpool2d_raw(x, h.min(w), h.min(w))
}
