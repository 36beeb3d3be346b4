//! Pointwise operations, fully connected layers, reshapes, dropout, and the
//! weighted combinations used to assemble multi-term losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Op, TensorId};
use super::{check_same_shape, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// raw kernels (shared by graph ops and inference paths)
// ---------------------------------------------------------------------------

pub fn relu_raw(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn sigmoid_raw(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    out
}

/// Sigmoid on entries where the repeating `mask` is 1, identity where it is 0.
/// The mask length must divide the element count; it tiles over leading rows.
pub fn masked_sigmoid_raw(x: &Tensor, mask: &[f32]) -> Result<Tensor> {
    if mask.is_empty() || x.len() % mask.len() != 0 {
        return Err(Error::shape(
            "masked_sigmoid",
            format!("mask of {} cannot tile {} elements", mask.len(), x.len()),
        ));
    }
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let m = mask[i % mask.len()];
        let s = 1.0 / (1.0 + (-*v).exp());
        *v = m * s + (1.0 - m) * *v;
    }
    Ok(out)
}

/// out[n,o] = sum_f x[n,f] * w[o,f] + b[o]
pub fn linear_raw(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, f) = x.dims2("linear")?;
    let (o, fw) = w.dims2("linear")?;
    if f != fw {
        return Err(Error::shape(
            "linear",
            format!("input features {f} vs weight features {fw}"),
        ));
    }
    if b.shape() != [o] {
        return Err(Error::shape(
            "linear",
            format!("bias shape {:?}, expected [{o}]", b.shape()),
        ));
    }
    let mut out = super::mat::matmul_abt(x.data(), w.data(), n, f, o);
    for row in out.chunks_exact_mut(o) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += *bv;
        }
    }
    Tensor::new(vec![n, o], out)
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

struct AddOp;

impl Op for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        check_same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let g = |want: bool| want.then(|| grad_out.to_vec());
        vec![g(needs[0]), g(needs[1])]
    }
}

struct ScaleOp(f32);

impl Op for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * self.0).collect())
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| grad_out.iter().map(|g| g * self.0).collect())]
    }
}

struct ReluOp;

impl Op for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(relu_raw(inputs[0]))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(grad_out)
                .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                .collect()
        })]
    }
}

struct SigmoidOp;

impl Op for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(sigmoid_raw(inputs[0]))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            output
                .data()
                .iter()
                .zip(grad_out)
                .map(|(y, g)| g * y * (1.0 - y))
                .collect()
        })]
    }
}

/// Mixes sigmoid and identity per element under a tiling 0/1 mask. Lets a
/// regression head squash bounded slots while leaving score slots linear,
/// where squared error keeps a gradient even far from the target.
struct MaskedSigmoidOp {
    mask: Vec<f32>,
}

impl Op for MaskedSigmoidOp {
    fn name(&self) -> &'static str {
        "masked_sigmoid"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        masked_sigmoid_raw(inputs[0], &self.mask)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            inputs[0]
                .data()
                .iter()
                .enumerate()
                .zip(grad_out)
                .map(|((i, x), g)| {
                    let m = self.mask[i % self.mask.len()];
                    let s = 1.0 / (1.0 + (-*x).exp());
                    g * (m * s * (1.0 - s) + (1.0 - m))
                })
                .collect()
        })]
    }
}

/// Inverted dropout: zeroes with probability `p` during training and scales
/// survivors by 1/(1-p), so inference needs no correction. The mask is drawn
/// from a dedicated stream seeded at op construction, which keeps a rebuilt
/// graph bit-identical for the same seeds.
struct DropoutOp {
    p: f32,
    seed: u64,
    mask: Vec<f32>,
}

impl Op for DropoutOp {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let keep = 1.0 - self.p;
        self.mask = (0..x.len())
            .map(|_| {
                if rng.gen::<f32>() < self.p {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let data = x.data().iter().zip(&self.mask).map(|(v, m)| v * m).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| grad_out.iter().zip(&self.mask).map(|(g, m)| g * m).collect())]
    }
}

struct ReshapeOp {
    shape: Vec<usize>,
}

impl Op for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let want: usize = self.shape.iter().product();
        if want != x.len() {
            return Err(Error::shape(
                "reshape",
                format!(
                    "cannot view {:?} ({} elements) as {:?} ({want} elements)",
                    x.shape(),
                    x.len(),
                    self.shape
                ),
            ));
        }
        Tensor::new(self.shape.clone(), x.data().to_vec())
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| grad_out.to_vec())]
    }
}

struct LinearOp;

impl Op for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        linear_raw(inputs[0], inputs[1], inputs[2])
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, f) = x.dims2("linear").expect("checked in forward");
        let o = w.shape()[0];

        let gx = needs[0].then(|| super::mat::matmul(grad_out, w.data(), n, o, f));
        let gw = needs[1].then(|| super::mat::matmul_atb(grad_out, x.data(), n, o, f));
        let gb = needs[2].then(|| {
            let mut gb = vec![0.0f32; o];
            for row in grad_out.chunks_exact(o) {
                for (g, r) in gb.iter_mut().zip(row) {
                    *g += *r;
                }
            }
            gb
        });
        vec![gx, gw, gb]
    }
}

/// out = sum_i weights[i] * inputs[i], all inputs of one shape. Used to fold
/// a main loss and auxiliary losses into one optimization target.
struct WeightedSumOp {
    weights: Vec<f32>,
}

impl Op for WeightedSumOp {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.len() != self.weights.len() {
            return Err(Error::arg(
                "weighted_sum",
                format!("{} inputs vs {} weights", inputs.len(), self.weights.len()),
            ));
        }
        if inputs.is_empty() {
            return Err(Error::arg("weighted_sum", "no inputs"));
        }
        for t in &inputs[1..] {
            check_same_shape("weighted_sum", inputs[0], t)?;
        }
        let mut data = vec![0.0f32; inputs[0].len()];
        for (t, w) in inputs.iter().zip(&self.weights) {
            for (d, v) in data.iter_mut().zip(t.data()) {
                *d += w * v;
            }
        }
        Tensor::new(inputs[0].shape().to_vec(), data)
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        self.weights
            .iter()
            .zip(needs)
            .map(|(w, need)| need.then(|| grad_out.iter().map(|g| g * w).collect()))
            .collect()
    }
}

/// Scalar projection: out = sum_i weights[i] * x[i]. Handy for reducing an
/// arbitrary tensor to a well-conditioned scalar in gradient checks.
struct WeightedReduceOp {
    weights: Vec<f32>,
}

impl Op for WeightedReduceOp {
    fn name(&self) -> &'static str {
        "weighted_reduce"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.len() != self.weights.len() {
            return Err(Error::shape(
                "weighted_reduce",
                format!("{} elements vs {} weights", x.len(), self.weights.len()),
            ));
        }
        let mut acc = 0.0f64;
        for (v, w) in x.data().iter().zip(&self.weights) {
            acc += (*v as f64) * (*w as f64);
        }
        Ok(Tensor::scalar(acc as f32))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let g = grad_out[0];
        vec![needs[0].then(|| self.weights.iter().map(|w| w * g).collect())]
    }
}

// ---------------------------------------------------------------------------
// graph sugar
// ---------------------------------------------------------------------------

impl Graph {
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Box::new(AddOp), &[a, b])
    }

    pub fn scale(&mut self, x: TensorId, c: f32) -> Result<TensorId> {
        self.apply(Box::new(ScaleOp(c)), &[x])
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Box::new(ReluOp), &[x])
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Box::new(SigmoidOp), &[x])
    }

    pub fn masked_sigmoid(&mut self, x: TensorId, mask: Vec<f32>) -> Result<TensorId> {
        self.apply(Box::new(MaskedSigmoidOp { mask }), &[x])
    }

    /// `p` must lie in [0, 1). The mask is derived from `seed` alone.
    pub fn dropout(&mut self, x: TensorId, p: f32, seed: u64) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::arg(
                "dropout",
                format!("drop probability {p} outside [0, 1)"),
            ));
        }
        self.apply(
            Box::new(DropoutOp {
                p,
                seed,
                mask: Vec::new(),
            }),
            &[x],
        )
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        self.apply(Box::new(ReshapeOp { shape }), &[x])
    }

    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Box::new(LinearOp), &[x, w, b])
    }

    pub fn weighted_sum(&mut self, xs: &[TensorId], weights: &[f32]) -> Result<TensorId> {
        self.apply(
            Box::new(WeightedSumOp {
                weights: weights.to_vec(),
            }),
            xs,
        )
    }

    pub fn weighted_reduce(&mut self, x: TensorId, weights: &[f32]) -> Result<TensorId> {
        self.apply(
            Box::new(WeightedReduceOp {
                weights: weights.to_vec(),
            }),
            &[x],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_zero_probability_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, -4.0]).unwrap());
        let y = g.dropout(x, 0.0, 7).unwrap();
        assert_eq!(g.value(y), &[1.0, -2.0, 3.0, -4.0]);
    }

    #[test]
    fn dropout_rejects_probability_one() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![4]));
        assert!(g.dropout(x, 1.0, 7).is_err());
    }

    #[test]
    fn dropout_mask_is_seed_deterministic() {
        let run = |seed| {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![64], vec![1.0; 64]).unwrap());
            let y = g.dropout(x, 0.5, seed).unwrap();
            g.value(y).to_vec()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn dropout_survivors_are_rescaled() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1000], vec![1.0; 1000]).unwrap());
        let y = g.dropout(x, 0.25, 11).unwrap();
        let data = g.value(y);
        let kept = data.iter().filter(|v| **v != 0.0).count();
        for v in data {
            assert!(*v == 0.0 || (*v - 1.0 / 0.75).abs() < 1e-6);
        }
        // Bernoulli(0.75) over 1000 draws stays within 5 sigma of the mean.
        assert!((kept as f64 - 750.0).abs() < 5.0 * (1000.0f64 * 0.25 * 0.75).sqrt());
    }

    #[test]
    fn masked_sigmoid_mixes_squashed_and_linear_lanes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![0.0, 3.0, -1.0, 40.0]).unwrap());
        let y = g.masked_sigmoid(x, vec![1.0, 0.0]).unwrap();
        let got = g.value(y);
        assert!((got[0] - 0.5).abs() < 1e-7);
        assert_eq!(got[1], 3.0);
        assert!((got[2] - 1.0 / (1.0 + 1.0f32.exp())).abs() < 1e-7);
        assert_eq!(got[3], 40.0);
    }

    #[test]
    fn masked_sigmoid_rejects_non_tiling_mask() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![5]));
        assert!(g.masked_sigmoid(x, vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![3, 2]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("axis 0"), "got: {err}");
    }

    #[test]
    fn linear_matches_hand_computation() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.leaf(Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![3], vec![0.5, -0.5, 0.0]).unwrap());
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y), &[1.5, 1.5, 3.0]);
    }

    #[test]
    fn weighted_sum_of_scalars() {
        let mut g = Graph::new();
        let ids: Vec<_> = [1.0f32, 2.0, 3.0]
            .iter()
            .map(|v| g.leaf(Tensor::scalar(*v)))
            .collect();
        let y = g.weighted_sum(&ids, &[1.0, 0.5, 2.0]).unwrap();
        assert_eq!(g.scalar_value(y), 8.0);
    }
}
