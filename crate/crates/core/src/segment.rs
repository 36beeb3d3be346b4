//! Encoder-decoder semantic segmenter for {background, iris, pupil}.
//!
//! Encoder: four 7x7 conv blocks (BN + ReLU) with three ceil-mode 2x2 max
//! pools (100 -> 50 -> 25 -> 13). Decoder mirrors it, upsampling by index
//! unpooling with the argmax records the encoder pools produced, so every
//! upsample places values exactly where the matching downsample took them
//! from. A 1x1 conv head emits per-pixel class logits; prediction is the
//! per-pixel argmax (ties resolve to the lowest label).
//!
//! Decoder widths step down ahead of each unpool (128 -> 96 -> 64) because
//! index unpooling requires channel counts to match the tensor the pool saw.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Binds, Conv2d, Param};
use crate::synth::NUM_LABELS;
use crate::tensor::{
    maxpool2d_raw, relu_raw, softmax_probs, unpool2d_raw, Graph, Tensor, TensorId,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterConfig {
    pub input_edge: usize,
    pub in_channels: usize,
    pub width_scale: f32,
    pub classes: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            input_edge: 100,
            in_channels: 1,
            width_scale: 1.0,
            classes: NUM_LABELS,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::arg("segmenter_config", "need at least 2 classes"));
        }
        if self.width_scale <= 0.0 || !self.width_scale.is_finite() {
            return Err(Error::arg("segmenter_config", "width_scale must be positive"));
        }
        // three ceil pools must stay >= 1 px and the 7x7 convs need the
        // padded extent to cover the kernel
        if self.input_edge < 8 {
            return Err(Error::arg(
                "segmenter_config",
                format!("input edge {} too small", self.input_edge),
            ));
        }
        Ok(())
    }
}

struct Block {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl Block {
    fn new(name: &str, in_c: usize, out_c: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Block {
            conv: Conv2d::new(name, in_c, out_c, k, 1, k / 2, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_c),
        }
    }

    fn forward_train(&mut self, g: &mut Graph, x: TensorId, binds: &mut Binds) -> Result<TensorId> {
        let t = self.conv.forward(g, x, binds)?;
        let t = self.bn.forward_train(g, t, binds)?;
        g.relu(t)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(relu_raw(&self.bn.infer(&self.conv.infer(x)?)?))
    }
}

/// Full-scale channel widths; actual widths are these times `width_scale`
/// (minimum 1).
const ENC_CH: [usize; 4] = [64, 96, 128, 128];
const DEC_CH: [usize; 4] = [128, 96, 64, 64];

pub struct SegmenterNet {
    pub cfg: SegmenterConfig,
    enc: Vec<Block>,     // conv1, conv2, conv3, conv4
    dec: Vec<Block>,     // conv4d, conv3d, conv2d, conv1d
    classifier: Conv2d,  // 1x1, no BN/ReLU
}

impl SegmenterNet {
    pub fn new(cfg: SegmenterConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.width_scale;
        let ch: Vec<usize> = ENC_CH.iter().map(|c| crate::detect::scaled(*c, s)).collect();
        let dch: Vec<usize> = DEC_CH.iter().map(|c| crate::detect::scaled(*c, s)).collect();
        let enc = vec![
            Block::new("enc1", cfg.in_channels, ch[0], 7, rng),
            Block::new("enc2", ch[0], ch[1], 7, rng),
            Block::new("enc3", ch[1], ch[2], 7, rng),
            Block::new("enc4", ch[2], ch[3], 7, rng),
        ];
        // widths must re-converge to the encoder's before each unpool
        let dec = vec![
            Block::new("dec4", ch[3], dch[0], 7, rng),
            Block::new("dec3", dch[0], ch[1], 7, rng), // -> unpool over enc2's 96
            Block::new("dec2", ch[1], ch[0], 7, rng),  // -> unpool over enc1's 64
            Block::new("dec1", ch[0], dch[3], 7, rng),
        ];
        let classifier = Conv2d::new("classifier", dch[3], cfg.classes, 1, 1, 0, rng);
        Ok(SegmenterNet {
            cfg,
            enc,
            dec,
            classifier,
        })
    }

    /// Output shape of every stage for a batch-of-one input, in forward
    /// order. Pool edges use ceil mode; unpools restore the edge their
    /// matching pool consumed.
    pub fn layer_plan(&self) -> Vec<(String, Vec<usize>)> {
        let mut plan = Vec::new();
        let mut edge = self.cfg.input_edge;
        let pool_edge = |e: usize| (e - 2).div_ceil(2) + 1;
        let push_conv = |plan: &mut Vec<(String, Vec<usize>)>, b: &Block, e: usize| {
            plan.push((
                b.conv.weight.name.trim_end_matches(".weight").to_string(),
                vec![1, b.conv.out_channels(), e, e],
            ));
        };
        push_conv(&mut plan, &self.enc[0], edge);
        let e1 = edge;
        edge = pool_edge(edge);
        plan.push(("pool1".into(), vec![1, self.enc[0].conv.out_channels(), edge, edge]));
        push_conv(&mut plan, &self.enc[1], edge);
        let e2 = edge;
        edge = pool_edge(edge);
        plan.push(("pool2".into(), vec![1, self.enc[1].conv.out_channels(), edge, edge]));
        push_conv(&mut plan, &self.enc[2], edge);
        push_conv(&mut plan, &self.enc[3], edge);
        let e3 = edge;
        edge = pool_edge(edge);
        plan.push(("pool3".into(), vec![1, self.enc[3].conv.out_channels(), edge, edge]));

        edge = e3;
        plan.push(("unpool3".into(), vec![1, self.enc[3].conv.out_channels(), edge, edge]));
        push_conv(&mut plan, &self.dec[0], edge);
        push_conv(&mut plan, &self.dec[1], edge);
        edge = e2;
        plan.push(("unpool2".into(), vec![1, self.dec[1].conv.out_channels(), edge, edge]));
        push_conv(&mut plan, &self.dec[2], edge);
        edge = e1;
        plan.push(("unpool1".into(), vec![1, self.dec[2].conv.out_channels(), edge, edge]));
        push_conv(&mut plan, &self.dec[3], edge);
        plan.push(("classifier".into(), vec![1, self.cfg.classes, edge, edge]));
        plan
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, c, h, w]
                if c == self.cfg.in_channels
                    && h == self.cfg.input_edge
                    && w == self.cfg.input_edge =>
            {
                Ok(())
            }
            _ => Err(Error::shape(
                "segmenter",
                format!(
                    "expected [n, {}, {e}, {e}] input, got {shape:?}",
                    self.cfg.in_channels,
                    e = self.cfg.input_edge
                ),
            )),
        }
    }

    /// Training forward to per-pixel logits [N, classes, E, E].
    pub fn forward_train(
        &mut self,
        g: &mut Graph,
        x: TensorId,
        binds: &mut Binds,
    ) -> Result<TensorId> {
        self.check_input(g.tensor(x).shape())?;
        let mut t = self.enc[0].forward_train(g, x, binds)?;
        let (t1, p1) = g.maxpool2d(t, 2, 2, true)?;
        t = self.enc[1].forward_train(g, t1, binds)?;
        let (t2, p2) = g.maxpool2d(t, 2, 2, true)?;
        t = self.enc[2].forward_train(g, t2, binds)?;
        t = self.enc[3].forward_train(g, t, binds)?;
        let (t3, p3) = g.maxpool2d(t, 2, 2, true)?;

        t = g.unpool2d(t3, p3)?;
        t = self.dec[0].forward_train(g, t, binds)?;
        t = self.dec[1].forward_train(g, t, binds)?;
        t = g.unpool2d(t, p2)?;
        t = self.dec[2].forward_train(g, t, binds)?;
        t = g.unpool2d(t, p1)?;
        t = self.dec[3].forward_train(g, t, binds)?;
        self.classifier.forward(g, t, binds)
    }

    /// Inference to logits with frozen batch-norm statistics.
    pub fn infer_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let t = self.enc[0].infer(x)?;
        let (t, p1) = maxpool2d_raw(&t, 2, 2, true)?;
        let t = self.enc[1].infer(&t)?;
        let (t, p2) = maxpool2d_raw(&t, 2, 2, true)?;
        let t = self.enc[2].infer(&t)?;
        let t = self.enc[3].infer(&t)?;
        let (t, p3) = maxpool2d_raw(&t, 2, 2, true)?;

        let t = unpool2d_raw(&t, &p3)?;
        let t = self.dec[0].infer(&t)?;
        let t = self.dec[1].infer(&t)?;
        let t = unpool2d_raw(&t, &p2)?;
        let t = self.dec[2].infer(&t)?;
        let t = unpool2d_raw(&t, &p1)?;
        let t = self.dec[3].infer(&t)?;
        self.classifier.infer(&t)
    }

    /// Per-pixel argmax labels for a batch: one `E*E` raster per image.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Vec<u8>>> {
        let logits = self.infer_logits(x)?;
        let (n, c, h, w) = logits.dims4("segmenter")?;
        let mut out = Vec::with_capacity(n);
        for ni in 0..n {
            let mut labels = vec![0u8; h * w];
            for pix in 0..h * w {
                let mut best = 0usize;
                let mut best_v = f32::NEG_INFINITY;
                for ci in 0..c {
                    let v = logits.data()[(ni * c + ci) * h * w + pix];
                    if v > best_v {
                        best_v = v;
                        best = ci;
                    }
                }
                labels[pix] = best as u8;
            }
            out.push(labels);
        }
        Ok(out)
    }

    /// Per-pixel class probabilities, row-major rows = (n, y, x).
    pub fn predict_probs(&self, x: &Tensor) -> Result<Vec<f32>> {
        let logits = self.infer_logits(x)?;
        let (n, c, h, w) = logits.dims4("segmenter")?;
        // re-pack spatial layout into dense rows before the softmax
        let mut rows = vec![0.0f32; n * h * w * c];
        for ni in 0..n {
            for ci in 0..c {
                for pix in 0..h * w {
                    rows[(ni * h * w + pix) * c + ci] = logits.data()[(ni * c + ci) * h * w + pix];
                }
            }
        }
        Ok(softmax_probs(&rows, c))
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.cfg
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            b.conv.visit_params(f);
            b.bn.visit_params(f);
        }
        self.classifier.visit_params(f);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        for b in self.enc.iter().chain(self.dec.iter()) {
            b.conv.visit_params_ref(f);
            b.bn.visit_params_ref(f);
        }
        self.classifier.visit_params_ref(f);
    }

    /// Batch-norm layers in a stable order, for stats (de)serialization.
    pub fn visit_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        for b in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            f(&mut b.bn);
        }
    }

    pub fn visit_bn_ref(&self, f: &mut dyn FnMut(&BatchNorm2d)) {
        for b in self.enc.iter().chain(self.dec.iter()) {
            f(&b.bn);
        }
    }
}

/// Flattens a batch of label rasters into the loss's label order
/// (n-major, then row-major pixels), validating the range.
pub fn labels_for_loss(masks: &[&[u8]], classes: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(masks.iter().map(|m| m.len()).sum());
    for (i, m) in masks.iter().enumerate() {
        for (j, &l) in m.iter().enumerate() {
            if (l as usize) >= classes {
                return Err(Error::arg(
                    "labels_for_loss",
                    format!("mask {i} pixel {j} has label {l}, classes = {classes}"),
                ));
            }
            out.push(l as usize);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// pixel metrics
// ---------------------------------------------------------------------------

/// Precision, recall, F1 of `label` treating it as the positive class. With
/// no positives anywhere (nothing to find, nothing found) all three are 1;
/// a bare zero numerator yields 0.
pub fn precision_recall_f1(pred: &[u8], truth: &[u8], label: u8) -> (f64, f64, f64) {
    assert_eq!(pred.len(), truth.len(), "prediction/truth raster sizes differ");
    let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == label, t == label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    if tp + fp == 0 && tp + fne == 0 {
        return (1.0, 1.0, 1.0);
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fne == 0 { 0.0 } else { tp as f64 / (tp + fne) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}
