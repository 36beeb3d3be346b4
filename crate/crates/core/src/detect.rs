//! Grid-regression bounding-box detector for iris and pupil.
//!
//! The network divides the input into a W x W grid; each cell regresses K
//! boxes (center offsets within the cell, width/height relative to the whole
//! image, confidence) plus N shared class scores, so the head emits
//! W*W*(5K+N) values squashed through a logistic so every entry lies in
//! (0, 1). Because iris and pupil are concentric, both centers almost always
//! fall in the same cell and the shared class scores cannot say which box
//! belongs to which class; box slots are therefore bound to classes (slot c
//! holds class c's box), for encoding, decoding, and the loss alike.
//!
//! Convolution padding is floor(k/2) everywhere, which preserves extent for
//! stride-1 layers and exactly halves it for stride-2 ones.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{crop, resize_bilinear, Image};
use crate::nn::{Binds, Conv2d, Linear, Param};
use crate::tensor::{
    masked_sigmoid_raw, maxpool2d_raw, relu_raw, Graph, Op, Tensor, TensorId,
};

pub const CLASS_NAMES: [&str; 2] = ["iris", "pupil"];

/// Object classes the detector knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjClass {
    Iris,
    Pupil,
}

impl ObjClass {
    pub fn index(self) -> usize {
        match self {
            ObjClass::Iris => 0,
            ObjClass::Pupil => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<ObjClass> {
        match i {
            0 => Some(ObjClass::Iris),
            1 => Some(ObjClass::Pupil),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.index()]
    }

    pub fn from_name(s: &str) -> Option<ObjClass> {
        match s {
            "iris" => Some(ObjClass::Iris),
            "pupil" => Some(ObjClass::Pupil),
            _ => None,
        }
    }
}

/// Axis-aligned box in normalized image coordinates (all fields in [0, 1];
/// cx, cy is the center).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub class: ObjClass,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(class: ObjClass, cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox { class, cx, cy, w, h }
    }

    /// Edges as (left, top, right, bottom).
    pub fn edges(&self) -> (f32, f32, f32, f32) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn contains(&self, x: f32, y: f32) -> bool {
        let (l, t, r, b) = self.edges();
        x >= l && x <= r && y >= t && y <= b
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cx", self.cx), ("cy", self.cy), ("w", self.w), ("h", self.h)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::arg(
                    "bbox",
                    format!("{name} = {v} outside [0, 1] for class {}", self.class.name()),
                ));
            }
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::arg(
                "bbox",
                format!("degenerate extent {}x{} for class {}", self.w, self.h, self.class.name()),
            ));
        }
        Ok(())
    }
}

/// Intersection-over-union of two boxes (class-blind). Degenerate unions
/// yield 0.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let (al, at, ar, ab) = a.edges();
    let (bl, bt, br, bb) = b.edges();
    let iw = (ar.min(br) - al.max(bl)).max(0.0);
    let ih = (ab.min(bb) - at.max(bt)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

// ---------------------------------------------------------------------------
// configuration and grid codec
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub grid_w: usize,
    pub boxes_per_cell: usize,
    pub classes: usize,
    pub input_edge: usize,
    pub in_channels: usize,
    pub width_scale: f32,
    pub lambda_coord: f32,
    pub lambda_noobj: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            grid_w: 11,
            boxes_per_cell: 2,
            classes: 2,
            input_edge: 448,
            in_channels: 3,
            width_scale: 1.0,
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_w == 0 || self.boxes_per_cell == 0 || self.classes == 0 {
            return Err(Error::arg("detector_config", "grid, boxes, classes must be positive"));
        }
        if self.classes > CLASS_NAMES.len() {
            return Err(Error::arg(
                "detector_config",
                format!("{} classes, only {} are defined", self.classes, CLASS_NAMES.len()),
            ));
        }
        if self.width_scale <= 0.0 || !self.width_scale.is_finite() {
            return Err(Error::arg("detector_config", "width_scale must be positive"));
        }
        Ok(())
    }

    /// Values per cell.
    pub fn cell_len(&self) -> usize {
        5 * self.boxes_per_cell + self.classes
    }

    /// Total head output length: W*W*(5K+N).
    pub fn output_len(&self) -> usize {
        self.grid_w * self.grid_w * self.cell_len()
    }

    /// Per-cell activation mask for the head: coordinates and class scores are
    /// squashed into (0,1), confidences stay linear. A squashed confidence
    /// saturates once an always-occupied cell pushes its logit high, and the
    /// squared no-object penalty then loses its gradient; a linear slot can
    /// always be pulled back down.
    fn head_mask(&self) -> Vec<f32> {
        let mut mask = vec![1.0f32; self.cell_len()];
        for k in 0..self.boxes_per_cell {
            mask[5 * k + 4] = 0.0;
        }
        mask
    }
}

/// One image's worth of grid values, layout per cell (row-major cells):
/// K * [cx_off, cy_off, w, h, conf] then N class scores.
#[derive(Debug, Clone)]
pub struct DetectionGrid {
    pub grid_w: usize,
    pub boxes_per_cell: usize,
    pub classes: usize,
    data: Vec<f32>,
}

impl DetectionGrid {
    pub fn new(grid_w: usize, boxes_per_cell: usize, classes: usize, data: Vec<f32>) -> Result<Self> {
        let want = grid_w * grid_w * (5 * boxes_per_cell + classes);
        if data.len() != want {
            return Err(Error::shape(
                "detection_grid",
                format!("need {want} values for W={grid_w} K={boxes_per_cell} N={classes}, got {}", data.len()),
            ));
        }
        Ok(DetectionGrid {
            grid_w,
            boxes_per_cell,
            classes,
            data,
        })
    }

    pub fn zeros(cfg: &DetectorConfig) -> Self {
        DetectionGrid {
            grid_w: cfg.grid_w,
            boxes_per_cell: cfg.boxes_per_cell,
            classes: cfg.classes,
            data: vec![0.0; cfg.output_len()],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn cell_len(&self) -> usize {
        5 * self.boxes_per_cell + self.classes
    }

    fn cell(&self, gy: usize, gx: usize) -> &[f32] {
        let cl = self.cell_len();
        let base = (gy * self.grid_w + gx) * cl;
        &self.data[base..base + cl]
    }

    fn cell_mut(&mut self, gy: usize, gx: usize) -> &mut [f32] {
        let cl = self.cell_len();
        let base = (gy * self.grid_w + gx) * cl;
        &mut self.data[base..base + cl]
    }
}

/// Builds the regression target for one image. Each class's box lands in the
/// cell containing its center, in the slot equal to its class index, with
/// confidence 1 and its class score set; everything else stays zero.
pub fn encode_target(boxes: &[BBox], cfg: &DetectorConfig) -> Result<DetectionGrid> {
    cfg.validate()?;
    let mut grid = DetectionGrid::zeros(cfg);
    let w = cfg.grid_w;
    let mut seen = [false; CLASS_NAMES.len()];
    for b in boxes {
        b.validate()?;
        let ci = b.class.index();
        if ci >= cfg.classes {
            return Err(Error::arg(
                "encode_target",
                format!("class {} not representable with {} classes", b.class.name(), cfg.classes),
            ));
        }
        if ci >= cfg.boxes_per_cell {
            return Err(Error::arg(
                "encode_target",
                format!(
                    "class {} needs box slot {ci} but only {} slots exist per cell",
                    b.class.name(),
                    cfg.boxes_per_cell
                ),
            ));
        }
        if seen[ci] {
            return Err(Error::arg(
                "encode_target",
                format!("class {} appears more than once", b.class.name()),
            ));
        }
        seen[ci] = true;
        let gx = ((b.cx * w as f32).floor() as usize).min(w - 1);
        let gy = ((b.cy * w as f32).floor() as usize).min(w - 1);
        let cell = grid.cell_mut(gy, gx);
        let o = 5 * ci;
        cell[o] = b.cx * w as f32 - gx as f32;
        cell[o + 1] = b.cy * w as f32 - gy as f32;
        cell[o + 2] = b.w;
        cell[o + 3] = b.h;
        cell[o + 4] = 1.0;
        cell[5 * cfg.boxes_per_cell + ci] = 1.0;
    }
    Ok(grid)
}

/// A decoded detection: the box plus its confidence x class score.
#[derive(Debug, Clone, Copy)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f32,
}

/// Picks, per class, the best-scoring candidate over all cells (candidate
/// score = slot confidence x class score, slot bound to the class). Returns
/// one entry per class index; `None` where the best score is below
/// `threshold` or the class has no slot.
pub fn decode_detections(grid: &DetectionGrid, threshold: f32) -> Vec<Option<Detection>> {
    let w = grid.grid_w;
    let mut out = Vec::with_capacity(grid.classes);
    for ci in 0..grid.classes {
        if ci >= grid.boxes_per_cell {
            out.push(None);
            continue;
        }
        let mut best: Option<(f32, usize, usize)> = None;
        for gy in 0..w {
            for gx in 0..w {
                let cell = grid.cell(gy, gx);
                // Confidence is a linear head output; clamp before scoring so
                // the product stays a [0,1] score.
                let conf = cell[5 * ci + 4].clamp(0.0, 1.0);
                let score = conf * cell[5 * grid.boxes_per_cell + ci];
                if best.map_or(true, |(s, _, _)| score > s) {
                    best = Some((score, gy, gx));
                }
            }
        }
        let det = best.and_then(|(score, gy, gx)| {
            if score < threshold {
                return None;
            }
            let cell = grid.cell(gy, gx);
            let o = 5 * ci;
            let class = ObjClass::from_index(ci)?;
            Some(Detection {
                bbox: BBox::new(
                    class,
                    (gx as f32 + cell[o]) / w as f32,
                    (gy as f32 + cell[o + 1]) / w as f32,
                    cell[o + 2],
                    cell[o + 3],
                ),
                score,
            })
        });
        out.push(det);
    }
    out
}

// ---------------------------------------------------------------------------
// detection loss
// ---------------------------------------------------------------------------

const SQRT_FLOOR: f32 = 1e-8;

/// Sum-squared detection loss for one prediction/target pair: coordinate and
/// sqrt-extent terms (weight `lambda_coord`) plus confidence on responsible
/// slots, `lambda_noobj`-weighted confidence elsewhere, and class scores on
/// cells that host an object.
pub fn detection_loss_value(
    pred: &DetectionGrid,
    target: &DetectionGrid,
    lambda_coord: f32,
    lambda_noobj: f32,
) -> Result<f32> {
    if pred.grid_w != target.grid_w
        || pred.boxes_per_cell != target.boxes_per_cell
        || pred.classes != target.classes
    {
        return Err(Error::shape(
            "detection_loss",
            format!(
                "prediction grid W={} K={} N={} vs target W={} K={} N={}",
                pred.grid_w,
                pred.boxes_per_cell,
                pred.classes,
                target.grid_w,
                target.boxes_per_cell,
                target.classes
            ),
        ));
    }
    Ok(pair_loss_and_grad(
        &pred.data,
        &target.data,
        pred.grid_w,
        pred.boxes_per_cell,
        pred.classes,
        lambda_coord,
        lambda_noobj,
        None,
    ) as f32)
}

/// Shared forward/backward kernel; when `grad` is given, accumulates
/// d(loss)/d(pred) * scale into it.
#[allow(clippy::too_many_arguments)]
fn pair_loss_and_grad(
    pred: &[f32],
    target: &[f32],
    grid_w: usize,
    k: usize,
    n: usize,
    lc: f32,
    ln: f32,
    grad: Option<(&mut [f32], f32)>,
) -> f64 {
    let cell_len = 5 * k + n;
    let mut loss = 0.0f64;
    let mut grad = grad;
    for cell in 0..grid_w * grid_w {
        let base = cell * cell_len;
        let mut responsible_cell = false;
        for s in 0..k {
            let o = base + 5 * s;
            let resp = target[o + 4] == 1.0;
            if resp {
                responsible_cell = true;
                let dx = pred[o] - target[o];
                let dy = pred[o + 1] - target[o + 1];
                let pw = pred[o + 2].max(SQRT_FLOOR);
                let ph = pred[o + 3].max(SQRT_FLOOR);
                let dw = pw.sqrt() - target[o + 2].sqrt();
                let dh = ph.sqrt() - target[o + 3].sqrt();
                let dc = pred[o + 4] - 1.0;
                loss += lc as f64 * ((dx * dx + dy * dy) as f64 + (dw * dw + dh * dh) as f64)
                    + (dc * dc) as f64;
                if let Some((g, scale)) = grad.as_mut() {
                    g[o] += 2.0 * lc * dx * *scale;
                    g[o + 1] += 2.0 * lc * dy * *scale;
                    g[o + 2] += lc * dw / pw.sqrt() * *scale;
                    g[o + 3] += lc * dh / ph.sqrt() * *scale;
                    g[o + 4] += 2.0 * dc * *scale;
                }
            } else {
                let dc = pred[o + 4] - target[o + 4];
                loss += (ln * dc * dc) as f64;
                if let Some((g, scale)) = grad.as_mut() {
                    g[o + 4] += 2.0 * ln * dc * *scale;
                }
            }
        }
        if responsible_cell {
            for c in 0..n {
                let i = base + 5 * k + c;
                let d = pred[i] - target[i];
                loss += (d * d) as f64;
                if let Some((g, scale)) = grad.as_mut() {
                    g[i] += 2.0 * d * *scale;
                }
            }
        }
    }
    loss
}

struct DetectionLossOp {
    targets: Vec<f32>, // batch * output_len, constant
    grid_w: usize,
    k: usize,
    n: usize,
    lambda_coord: f32,
    lambda_noobj: f32,
}

impl Op for DetectionLossOp {
    fn name(&self) -> &'static str {
        "detection_loss"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let pred = inputs[0];
        let (b, l) = pred.dims2("detection_loss")?;
        let want = self.grid_w * self.grid_w * (5 * self.k + self.n);
        if l != want {
            return Err(Error::shape(
                "detection_loss",
                format!("prediction row length {l}, grid needs {want}"),
            ));
        }
        if self.targets.len() != b * l {
            return Err(Error::shape(
                "detection_loss",
                format!("{} target values for batch {b} x {l}", self.targets.len()),
            ));
        }
        let mut total = 0.0f64;
        for bi in 0..b {
            total += pair_loss_and_grad(
                &pred.data()[bi * l..(bi + 1) * l],
                &self.targets[bi * l..(bi + 1) * l],
                self.grid_w,
                self.k,
                self.n,
                self.lambda_coord,
                self.lambda_noobj,
                None,
            );
        }
        Ok(Tensor::scalar((total / b as f64) as f32))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            let pred = inputs[0];
            let (b, l) = pred.dims2("detection_loss").expect("checked in forward");
            let scale = grad_out[0] / b as f32;
            let mut gx = vec![0.0f32; pred.len()];
            for bi in 0..b {
                pair_loss_and_grad(
                    &pred.data()[bi * l..(bi + 1) * l],
                    &self.targets[bi * l..(bi + 1) * l],
                    self.grid_w,
                    self.k,
                    self.n,
                    self.lambda_coord,
                    self.lambda_noobj,
                    Some((&mut gx[bi * l..(bi + 1) * l], scale)),
                );
            }
            gx
        })]
    }
}

impl Graph {
    /// Mean detection loss over a batch: pred [B, W*W*(5K+N)] against
    /// per-image target grids.
    pub fn detection_loss(
        &mut self,
        pred: TensorId,
        targets: &[DetectionGrid],
        cfg: &DetectorConfig,
    ) -> Result<TensorId> {
        let mut buf = Vec::with_capacity(targets.len() * cfg.output_len());
        for t in targets {
            if t.grid_w != cfg.grid_w || t.boxes_per_cell != cfg.boxes_per_cell || t.classes != cfg.classes
            {
                return Err(Error::shape(
                    "detection_loss",
                    "target grid geometry differs from config".to_string(),
                ));
            }
            buf.extend_from_slice(&t.data);
        }
        self.apply(
            Box::new(DetectionLossOp {
                targets: buf,
                grid_w: cfg.grid_w,
                k: cfg.boxes_per_cell,
                n: cfg.classes,
                lambda_coord: cfg.lambda_coord,
                lambda_noobj: cfg.lambda_noobj,
            }),
            &[pred],
        )
    }
}

// ---------------------------------------------------------------------------
// the network
// ---------------------------------------------------------------------------

enum Stage {
    Conv(usize), // index into convs
    Pool,        // 2x2 stride 2, floor
}

/// The 16-conv + 3-FC grid regressor. Channel widths scale with
/// `width_scale`; the printed full-scale widths are the `width_scale = 1`
/// case.
pub struct DetectorNet {
    pub cfg: DetectorConfig,
    convs: Vec<Conv2d>,
    stages: Vec<Stage>,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    flat: usize,
    pub dropout: f32,
}

/// (name, kernel, stride, full-scale output channels); pools are interleaved
/// separately. Conv names follow the printed architecture (conv9/conv10 do
/// not exist in it).
const CONV_PLAN: [(&str, usize, usize, usize); 16] = [
    ("conv1", 7, 2, 64),
    ("conv2", 3, 1, 192),
    ("conv3", 1, 1, 128),
    ("conv4", 3, 1, 256),
    ("conv5", 1, 1, 256),
    ("conv6", 3, 1, 512),
    ("conv7", 1, 1, 256),
    ("conv8", 3, 1, 512),
    ("conv11", 1, 1, 512),
    ("conv12", 3, 1, 1024),
    ("conv13", 1, 1, 512),
    ("conv14", 3, 1, 1024),
    ("conv15", 3, 1, 1024),
    ("conv16", 3, 2, 1024),
    ("conv17", 3, 1, 1024),
    ("conv18", 3, 1, 1024),
];

/// Pools sit after these conv names.
const POOL_AFTER: [&str; 4] = ["conv1", "conv2", "conv6", "conv12"];

pub(crate) fn scaled(full: usize, scale: f32) -> usize {
    ((full as f32 * scale).round() as usize).max(1)
}

impl DetectorNet {
    pub fn new(cfg: DetectorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let ws = cfg.width_scale;
        let mut convs = Vec::with_capacity(CONV_PLAN.len());
        let mut stages = Vec::new();
        let mut in_c = cfg.in_channels;
        let mut edge = cfg.input_edge;
        for (name, k, stride, full_out) in CONV_PLAN {
            let out_c = scaled(full_out, ws);
            let pad = k / 2;
            if edge + 2 * pad < k {
                return Err(Error::shape(
                    "detector",
                    format!("{name}: extent {edge} too small for kernel {k}"),
                ));
            }
            convs.push(Conv2d::new(name, in_c, out_c, k, stride, pad, rng));
            stages.push(Stage::Conv(convs.len() - 1));
            edge = (edge + 2 * pad - k) / stride + 1;
            in_c = out_c;
            if POOL_AFTER.contains(&name) {
                if edge < 2 {
                    return Err(Error::shape(
                        "detector",
                        format!("pool after {name}: extent {edge} too small"),
                    ));
                }
                stages.push(Stage::Pool);
                edge = (edge - 2) / 2 + 1;
            }
        }
        let flat = in_c * edge * edge;
        let fc1 = Linear::new("fc1", flat, scaled(1024, ws), rng);
        let fc2 = Linear::new("fc2", fc1.out_features(), scaled(4096, ws), rng);
        let fc3 = Linear::new("fc3", fc2.out_features(), cfg.output_len(), rng);
        Ok(DetectorNet {
            cfg,
            convs,
            stages,
            fc1,
            fc2,
            fc3,
            flat,
            dropout: 0.5,
        })
    }

    /// (name, output shape for batch 1) for every layer, head included.
    pub fn layer_plan(&self) -> Vec<(String, Vec<usize>)> {
        let mut plan = Vec::new();
        let mut edge = self.cfg.input_edge;
        let mut ch = self.cfg.in_channels;
        for stage in &self.stages {
            match stage {
                Stage::Conv(i) => {
                    let conv = &self.convs[*i];
                    let k = conv.weight.shape[2];
                    edge = (edge + 2 * conv.pad - k) / conv.stride + 1;
                    ch = conv.out_channels();
                    plan.push((
                        conv.weight.name.trim_end_matches(".weight").to_string(),
                        vec![1, ch, edge, edge],
                    ));
                }
                Stage::Pool => {
                    edge = (edge - 2) / 2 + 1;
                    plan.push((format!("pool{}", plan.iter().filter(|(n, _)| n.starts_with("pool")).count() + 1), vec![1, ch, edge, edge]));
                }
            }
        }
        plan.push(("fc1".into(), vec![1, self.fc1.out_features()]));
        plan.push(("fc2".into(), vec![1, self.fc2.out_features()]));
        plan.push(("fc3".into(), vec![1, self.fc3.out_features()]));
        plan
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, c, h, w]
                if c == self.cfg.in_channels && h == self.cfg.input_edge && w == self.cfg.input_edge =>
            {
                Ok(())
            }
            _ => Err(Error::shape(
                "detector",
                format!(
                    "expected [n, {}, {e}, {e}] input, got {shape:?}",
                    self.cfg.in_channels,
                    e = self.cfg.input_edge
                ),
            )),
        }
    }

    /// Training forward: returns the squashed grid predictions [B, output_len].
    pub fn forward_train(
        &self,
        g: &mut Graph,
        x: TensorId,
        binds: &mut Binds,
        dropout_seed: u64,
    ) -> Result<TensorId> {
        self.check_input(g.tensor(x).shape())?;
        let n = g.tensor(x).shape()[0];
        let mut t = x;
        for stage in &self.stages {
            match stage {
                Stage::Conv(i) => {
                    t = self.convs[*i].forward(g, t, binds)?;
                    t = g.relu(t)?;
                }
                Stage::Pool => {
                    t = g.maxpool2d(t, 2, 2, false)?.0;
                }
            }
        }
        t = g.reshape(t, vec![n, self.flat])?;
        t = self.fc1.forward(g, t, binds)?;
        t = g.relu(t)?;
        t = g.dropout(t, self.dropout, dropout_seed)?;
        t = self.fc2.forward(g, t, binds)?;
        t = g.relu(t)?;
        t = g.dropout(t, self.dropout, dropout_seed.wrapping_add(1))?;
        t = self.fc3.forward(g, t, binds)?;
        g.masked_sigmoid(t, self.cfg.head_mask())
    }

    /// Inference: grid predictions [B, output_len] with dropout disabled.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let n = x.shape()[0];
        let mut t = x.clone();
        for stage in &self.stages {
            match stage {
                Stage::Conv(i) => {
                    t = relu_raw(&self.convs[*i].infer(&t)?);
                }
                Stage::Pool => {
                    t = maxpool2d_raw(&t, 2, 2, false)?.0;
                }
            }
        }
        let t = Tensor::new(vec![n, self.flat], t.into_data())?;
        let mut t = self.fc1.infer(&t)?;
        t = relu_raw(&t);
        t = self.fc2.infer(&t)?;
        t = relu_raw(&t);
        t = self.fc3.infer(&t)?;
        masked_sigmoid_raw(&t, &self.cfg.head_mask())
    }

    /// Splits an inference output row into a typed grid.
    pub fn grid_from_row(&self, pred: &Tensor, row: usize) -> Result<DetectionGrid> {
        let (b, l) = pred.dims2("detector")?;
        if row >= b {
            return Err(Error::arg("detector", format!("row {row} of batch {b}")));
        }
        DetectionGrid::new(
            self.cfg.grid_w,
            self.cfg.boxes_per_cell,
            self.cfg.classes,
            pred.data()[row * l..(row + 1) * l].to_vec(),
        )
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for c in &mut self.convs {
            c.visit_params(f);
        }
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
        self.fc3.visit_params(f);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        for c in &self.convs {
            c.visit_params_ref(f);
        }
        self.fc1.visit_params_ref(f);
        self.fc2.visit_params_ref(f);
        self.fc3.visit_params_ref(f);
    }
}

// ---------------------------------------------------------------------------
// box-driven ROI extraction
// ---------------------------------------------------------------------------

/// Cuts the iris box out of `img` with the pupil blotted to zero first: the
/// pupil disc is centered on the pupil box with diameter equal to the mean of
/// the box's pixel height and width. Result is resized to `out_edge` square.
pub fn mask_from_boxes(
    img: &Image,
    iris_box: &BBox,
    pupil_box: &BBox,
    out_edge: usize,
) -> Result<Image> {
    iris_box.validate()?;
    pupil_box.validate()?;
    let (h, w) = (img.h as f32, img.w as f32);
    let pcx = pupil_box.cx * w;
    let pcy = pupil_box.cy * h;
    let radius = (pupil_box.w * w + pupil_box.h * h) / 4.0;

    let mut work = img.clone();
    let y_lo = ((pcy - radius).floor().max(0.0)) as usize;
    let y_hi = ((pcy + radius).ceil().min(h - 1.0)) as usize;
    let x_lo = ((pcx - radius).floor().max(0.0)) as usize;
    let x_hi = ((pcx + radius).ceil().min(w - 1.0)) as usize;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dy = y as f32 + 0.5 - pcy;
            let dx = x as f32 + 0.5 - pcx;
            if dx * dx + dy * dy <= radius * radius {
                for c in 0..work.channels {
                    work.set(c, y, x, 0.0);
                }
            }
        }
    }

    let (y0, x0, ch, cw) = crop_rect(img.h, img.w, iris_box);
    let roi = crop(&work, y0, x0, ch, cw);
    Ok(resize_bilinear(&roi, out_edge, out_edge))
}

/// Pixel rectangle (y0, x0, height, width) covered by a normalized box.
/// Every region-of-interest crop in the pipeline goes through this so the
/// box-only and segmented paths cut out the same pixels.
pub fn crop_rect(img_h: usize, img_w: usize, b: &BBox) -> (isize, isize, usize, usize) {
    let (w, h) = (img_w as f32, img_h as f32);
    let (l, t, r, bo) = b.edges();
    let x0 = (l * w).round() as isize;
    let y0 = (t * h).round() as isize;
    let cw = (((r - l) * w).round() as isize).max(1) as usize;
    let ch = (((bo - t) * h).round() as isize).max(1) as usize;
    (y0, x0, ch, cw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn desk_cfg() -> DetectorConfig {
        DetectorConfig {
            grid_w: 7,
            boxes_per_cell: 2,
            classes: 2,
            input_edge: 96,
            in_channels: 1,
            width_scale: 0.0625,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn output_len_formula() {
        let full = DetectorConfig::default();
        assert_eq!(full.output_len(), 11 * 11 * 12);
        assert_eq!(full.output_len(), 1452);
        let quarter = DetectorConfig {
            grid_w: 7,
            boxes_per_cell: 1,
            classes: 2,
            ..DetectorConfig::default()
        };
        assert_eq!(quarter.output_len(), 7 * 7 * 7);
        assert_eq!(quarter.output_len(), 343);
    }

    #[test]
    fn encode_centers_land_in_expected_cell() {
        let cfg = DetectorConfig::default();
        let b = BBox::new(ObjClass::Iris, 0.5, 0.5, 0.4, 0.4);
        let grid = encode_target(&[b], &cfg).unwrap();
        // floor(0.5 * 11) = 5: center cell of an 11-wide grid.
        let cell = grid.cell(5, 5);
        assert_eq!(cell[4], 1.0);
        assert!((cell[0] - 0.5).abs() < 1e-6);
        assert!((cell[1] - 0.5).abs() < 1e-6);
        // class score one-hot
        assert_eq!(cell[10], 1.0);
        assert_eq!(cell[11], 0.0);
    }

    #[test]
    fn encode_decode_round_trip_with_concentric_boxes() {
        let cfg = DetectorConfig::default();
        let iris = BBox::new(ObjClass::Iris, 0.517, 0.483, 0.4021, 0.3985);
        let pupil = BBox::new(ObjClass::Pupil, 0.512, 0.488, 0.131, 0.127);
        let grid = encode_target(&[iris, pupil], &cfg).unwrap();
        let dets = decode_detections(&grid, 0.5);
        let got_iris = dets[0].expect("iris decoded").bbox;
        let got_pupil = dets[1].expect("pupil decoded").bbox;
        for (a, b) in [(got_iris, iris), (got_pupil, pupil)] {
            assert!((a.cx - b.cx).abs() < 1e-6, "{a:?} vs {b:?}");
            assert!((a.cy - b.cy).abs() < 1e-6);
            assert!((a.w - b.w).abs() < 1e-6);
            assert!((a.h - b.h).abs() < 1e-6);
            assert_eq!(a.class, b.class);
        }
    }

    #[test]
    fn encode_rejects_duplicate_class() {
        let cfg = DetectorConfig::default();
        let b = BBox::new(ObjClass::Iris, 0.5, 0.5, 0.3, 0.3);
        let err = encode_target(&[b, b], &cfg).unwrap_err();
        assert!(err.to_string().contains("more than once"), "{err}");
    }

    #[test]
    fn decode_returns_none_below_threshold() {
        let cfg = DetectorConfig::default();
        let grid = DetectionGrid::zeros(&cfg);
        let dets = decode_detections(&grid, 0.25);
        assert!(dets.iter().all(|d| d.is_none()));
    }

    #[test]
    fn loss_of_exact_prediction_is_zero_and_grows_with_perturbation() {
        let cfg = DetectorConfig::default();
        let boxes = [
            BBox::new(ObjClass::Iris, 0.5, 0.5, 0.4, 0.4),
            BBox::new(ObjClass::Pupil, 0.5, 0.5, 0.1, 0.1),
        ];
        let target = encode_target(&boxes, &cfg).unwrap();
        let zero = detection_loss_value(&target, &target, 5.0, 0.5).unwrap();
        assert_eq!(zero, 0.0);

        // responsible cell (5,5) holds both boxes; its slot-0 cx is index
        // (5*11+5)*12. Coordinates elsewhere are ignored by design.
        let resp = (5 * 11 + 5) * 12;
        let mut off = target.clone();
        off.data[0] += 0.1;
        assert_eq!(detection_loss_value(&off, &target, 5.0, 0.5).unwrap(), 0.0);
        off.data[resp] += 0.1;
        let l1 = detection_loss_value(&off, &target, 5.0, 0.5).unwrap();
        assert!(l1 > 0.0);
        off.data[resp] += 0.1;
        let l2 = detection_loss_value(&off, &target, 5.0, 0.5).unwrap();
        assert!(l2 > l1);
    }

    #[test]
    fn noobj_confidence_is_downweighted() {
        let cfg = DetectorConfig::default();
        let target = DetectionGrid::zeros(&cfg);
        let mut pred = DetectionGrid::zeros(&cfg);
        pred.data[4] = 0.8; // one stray confidence
        let loss = detection_loss_value(&pred, &target, 5.0, 0.5).unwrap();
        assert!((loss - 0.5 * 0.8 * 0.8).abs() < 1e-6);
    }

    #[test]
    fn iou_basics() {
        let a = BBox::new(ObjClass::Iris, 0.5, 0.5, 0.4, 0.4);
        assert!((iou(&a, &a) - 1.0).abs() < 1e-6);
        let b = BBox::new(ObjClass::Iris, 0.9, 0.9, 0.1, 0.1);
        assert_eq!(iou(&a, &b), 0.0);
        // half-overlap along one axis
        let c = BBox::new(ObjClass::Iris, 0.7, 0.5, 0.4, 0.4);
        let expect = 0.2 * 0.4 / (2.0 * 0.16 - 0.2 * 0.4);
        assert!((iou(&a, &c) - expect).abs() < 1e-6);
    }

    #[test]
    fn desk_scale_net_emits_configured_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DetectorNet::new(desk_cfg(), &mut rng).unwrap();
        let x = Tensor::zeros(vec![1, 1, 96, 96]);
        let y = net.infer(&x).unwrap();
        assert_eq!(y.shape(), &[1, desk_cfg().output_len()]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_wrong_input_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DetectorNet::new(desk_cfg(), &mut rng).unwrap();
        let x = Tensor::zeros(vec![1, 1, 95, 96]);
        assert!(net.infer(&x).is_err());
    }

    #[test]
    fn full_scale_plan_matches_printed_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DetectorNet::new(DetectorConfig::default(), &mut rng).unwrap();
        let plan = net.layer_plan();
        let find = |name: &str| {
            plan.iter()
                .find(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("{name} missing"))
                .1
                .clone()
        };
        assert_eq!(find("conv1"), vec![1, 64, 224, 224]);
        assert_eq!(find("pool1"), vec![1, 64, 112, 112]);
        assert_eq!(find("conv2"), vec![1, 192, 112, 112]);
        assert_eq!(find("pool2"), vec![1, 192, 56, 56]);
        assert_eq!(find("conv3"), vec![1, 128, 56, 56]);
        assert_eq!(find("conv6"), vec![1, 512, 56, 56]);
        assert_eq!(find("pool3"), vec![1, 512, 28, 28]);
        assert_eq!(find("conv7"), vec![1, 256, 28, 28]);
        assert_eq!(find("conv12"), vec![1, 1024, 28, 28]);
        assert_eq!(find("pool4"), vec![1, 1024, 14, 14]);
        assert_eq!(find("conv16"), vec![1, 1024, 7, 7]);
        assert_eq!(find("conv18"), vec![1, 1024, 7, 7]);
        assert_eq!(find("fc3"), vec![1, 1452]);
    }

    #[test]
    fn mask_from_boxes_zeroes_pupil_disc() {
        let mut img = Image::new(1, 50, 50);
        for v in img.data.iter_mut() {
            *v = 1.0;
        }
        let iris = BBox::new(ObjClass::Iris, 0.5, 0.5, 0.8, 0.8);
        let pupil = BBox::new(ObjClass::Pupil, 0.5, 0.5, 0.2, 0.2);
        let out = mask_from_boxes(&img, &iris, &pupil, 100).unwrap();
        assert_eq!((out.h, out.w), (100, 100));
        // center should be zeroed, corner not
        assert!(out.at(0, 50, 50) < 0.05, "center {}", out.at(0, 50, 50));
        assert!(out.at(0, 2, 2) > 0.9, "corner {}", out.at(0, 2, 2));
    }
}
