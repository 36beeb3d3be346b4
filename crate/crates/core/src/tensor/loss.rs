//! Softmax cross-entropy with integer labels, averaged over rows.
//!
//! Accepts [N, C] logits (one row per sample) or [N, C, H, W] logits (one row
//! per pixel, labels ordered n-major then row-major over pixels). Logits are
//! max-shifted before exponentiation; row sums accumulate in f64.

use super::graph::{Graph, Op, TensorId};
use super::Tensor;
use crate::error::{Error, Result};

/// Row-wise softmax of a [rows, classes] buffer.
pub fn softmax_probs(logits: &[f32], classes: usize) -> Vec<f32> {
    debug_assert_eq!(logits.len() % classes, 0);
    let mut out = vec![0.0f32; logits.len()];
    for (row, orow) in logits.chunks_exact(classes).zip(out.chunks_exact_mut(classes)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (o, v) in orow.iter_mut().zip(row) {
            let e = ((v - max) as f64).exp();
            *o = e as f32;
            sum += e;
        }
        let inv = (1.0 / sum) as f32;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    out
}

/// Describes how rows are laid out inside the logits tensor.
enum RowLayout {
    /// [N, C]: row r occupies logits[r*C .. r*C+C].
    Dense { rows: usize, classes: usize },
    /// [N, C, H, W]: row r = (n, y, x) reads logits[((n*C + c)*H + y)*W + x].
    Spatial {
        n: usize,
        classes: usize,
        h: usize,
        w: usize,
    },
}

impl RowLayout {
    fn of(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [n, c] => Ok(RowLayout::Dense {
                rows: n,
                classes: c,
            }),
            [n, c, h, w] => Ok(RowLayout::Spatial { n, classes: c, h, w }),
            _ => Err(Error::shape(
                "softmax_xent",
                format!("logits must be 2-d or 4-d, got {:?}", t.shape()),
            )),
        }
    }

    fn rows(&self) -> usize {
        match self {
            RowLayout::Dense { rows, .. } => *rows,
            RowLayout::Spatial { n, h, w, .. } => n * h * w,
        }
    }

    fn classes(&self) -> usize {
        match self {
            RowLayout::Dense { classes, .. } => *classes,
            RowLayout::Spatial { classes, .. } => *classes,
        }
    }

    /// Flat offset of (row, class) in the logits buffer.
    fn at(&self, row: usize, class: usize) -> usize {
        match self {
            RowLayout::Dense { classes, .. } => row * classes + class,
            RowLayout::Spatial { classes, h, w, .. } => {
                let plane = h * w;
                let n = row / plane;
                let pix = row % plane;
                (n * classes + class) * plane + pix
            }
        }
    }
}

struct SoftmaxXentOp {
    labels: Vec<usize>,
    probs: Vec<f32>, // rows * classes, row-major
}

impl Op for SoftmaxXentOp {
    fn name(&self) -> &'static str {
        "softmax_xent"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let layout = RowLayout::of(x)?;
        let (rows, classes) = (layout.rows(), layout.classes());
        if self.labels.len() != rows {
            return Err(Error::shape(
                "softmax_xent",
                format!("{} labels for {rows} rows", self.labels.len()),
            ));
        }
        self.probs = vec![0.0f32; rows * classes];
        let mut total = 0.0f64;
        for r in 0..rows {
            let label = self.labels[r];
            if label >= classes {
                return Err(Error::arg(
                    "softmax_xent",
                    format!("row {r}: label {label} out of range for {classes} classes"),
                ));
            }
            let mut max = f32::NEG_INFINITY;
            for c in 0..classes {
                max = max.max(x.data()[layout.at(r, c)]);
            }
            let mut sum = 0.0f64;
            for c in 0..classes {
                let e = ((x.data()[layout.at(r, c)] - max) as f64).exp();
                self.probs[r * classes + c] = e as f32;
                sum += e;
            }
            let inv = 1.0 / sum;
            for c in 0..classes {
                self.probs[r * classes + c] = (self.probs[r * classes + c] as f64 * inv) as f32;
            }
            total += -((x.data()[layout.at(r, label)] - max) as f64 - sum.ln());
        }
        Ok(Tensor::scalar((total / rows as f64) as f32))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            let x = inputs[0];
            let layout = RowLayout::of(x).expect("checked in forward");
            let (rows, classes) = (layout.rows(), layout.classes());
            let scale = grad_out[0] / rows as f32;
            let mut gx = vec![0.0f32; x.len()];
            for r in 0..rows {
                for c in 0..classes {
                    let p = self.probs[r * classes + c];
                    let t = if c == self.labels[r] { 1.0 } else { 0.0 };
                    gx[layout.at(r, c)] = (p - t) * scale;
                }
            }
            gx
        })]
    }
}

impl Graph {
    /// Mean cross-entropy between logits and integer labels. Labels must be
    /// in `0..classes`; one per row ([N, C]) or per pixel ([N, C, H, W]).
    pub fn softmax_xent(&mut self, logits: TensorId, labels: Vec<usize>) -> Result<TensorId> {
        self.apply(
            Box::new(SoftmaxXentOp {
                labels,
                probs: Vec::new(),
            }),
            &[logits],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln_classes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 4]));
        let loss = g.softmax_xent(x, vec![0, 3]).unwrap();
        assert!((g.scalar_value(loss) - (4.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn shifting_logits_leaves_loss_unchanged() {
        let base = vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0];
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 3], base.clone()).unwrap());
        let la = g.softmax_xent(a, vec![2, 0]).unwrap();
        let shifted: Vec<f32> = base.iter().map(|v| v + 1000.0).collect();
        let b = g.leaf(Tensor::new(vec![2, 3], shifted).unwrap());
        let lb = g.softmax_xent(b, vec![2, 0]).unwrap();
        assert!((g.scalar_value(la) - g.scalar_value(lb)).abs() < 1e-5);
    }

    #[test]
    fn out_of_range_label_is_rejected_with_row() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 3]));
        let err = g.softmax_xent(x, vec![0, 3]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 1") && msg.contains("label 3"), "got: {msg}");
    }

    #[test]
    fn spatial_layout_matches_dense_layout() {
        // One pixel per (h, w) position; rearranging to [N, C] must give the
        // same loss.
        let logits = vec![
            // n=0, c=0: 2x2 plane
            0.3, -0.1, 0.9, 0.0, //
            // n=0, c=1
            -0.4, 0.6, 0.2, 1.0,
        ];
        let labels = vec![0, 1, 1, 0];
        let mut g = Graph::new();
        let sp = g.leaf(Tensor::new(vec![1, 2, 2, 2], logits.clone()).unwrap());
        let l_sp = g.softmax_xent(sp, labels.clone()).unwrap();

        let mut dense = Vec::new();
        for pix in 0..4 {
            dense.push(logits[pix]);
            dense.push(logits[4 + pix]);
        }
        let de = g.leaf(Tensor::new(vec![4, 2], dense).unwrap());
        let l_de = g.softmax_xent(de, labels).unwrap();
        assert!((g.scalar_value(l_sp) - g.scalar_value(l_de)).abs() < 1e-6);
    }

    #[test]
    fn probs_sum_to_one() {
        let logits: Vec<f32> = (0..12).map(|i| (i as f32 * 0.711).sin() * 3.0).collect();
        let probs = softmax_probs(&logits, 4);
        for row in probs.chunks_exact(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
