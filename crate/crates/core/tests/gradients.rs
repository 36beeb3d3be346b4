//! Central finite differences vs the analytic backward pass, op by op. Each
//! check projects the op output to a scalar through fixed random weights,
//! then compares every leaf-coordinate gradient against (f(x+h)-f(x-h))/2h.
//! Errors are reported relative to the largest gradient in the same leaf, so
//! near-zero coordinates don't blow up the ratio.

use iris_core::detect::{encode_target, BBox, DetectorConfig, ObjClass};
use iris_core::embed::{EmbedderConfig, EmbedderNet};
use iris_core::tensor::{Graph, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;
const INSTANCES: u64 = 5;

/// Wide step for smooth ops: f32 forward noise divided by 2h dominates the
/// truncation term, so bigger is better until kinks come into range.
const H_SMOOTH: f32 = 1e-2;
/// Narrow step for ops with derivative kinks nearby (pixel centers, argmax
/// ties); instance constructions keep kinks > 2h away from every coordinate.
const H_KINKY: f32 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform magnitudes in [lo, hi] with random sign: keeps relu and friends
/// away from their kink at zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(lo..hi) * if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Distinct values with gaps well above 2H, shuffled, so a perturbation can
/// never flip a max-pool argmax.
fn distinct(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, vals).unwrap()
}

fn check(tag: &str, h: f32, leaves: &[Tensor], build: &dyn Fn(&mut Graph, &[TensorId]) -> TensorId) {
    let eval = |vals: &[Tensor]| -> (Graph, Vec<TensorId>, TensorId) {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = vals.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
        let out = build(&mut g, &ids);
        (g, ids, out)
    };

    let (g0, _, out0) = eval(leaves);
    let out_len = g0.value(out0).len();
    let mut prng = ChaCha8Rng::seed_from_u64(0xFD00 ^ out_len as u64);
    // zero-mean weights keep the projected scalar small, which keeps the
    // f32 cancellation noise in the finite differences small too
    let proj: Vec<f32> = (0..out_len)
        .map(|_| prng.gen_range(0.5..1.5) * if prng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();

    let scalar = |vals: &[Tensor]| -> f64 {
        let (mut g, _, out) = eval(vals);
        let loss = g.weighted_reduce(out, &proj).unwrap();
        g.scalar_value(loss) as f64
    };

    let (mut g, ids, out) = eval(leaves);
    let loss = g.weighted_reduce(out, &proj).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .map(|id| g.grad(*id).expect("leaf gradient").to_vec())
        .collect();

    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let scale = analytic[li]
            .iter()
            .fold(0.0f32, |m, v| m.max(v.abs()))
            .max(1e-6) as f64;
        for ci in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[ci] += h;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[ci] -= h;
            let numeric = (scalar(&plus) - scalar(&minus)) / (2.0 * h as f64);
            let rel = (analytic[li][ci] as f64 - numeric).abs() / scale;
            if rel > worst {
                worst = rel;
            }
        }
    }
    assert!(worst < TOL, "{tag}: max relative gradient error {worst:.3e}");
}

#[test]
fn relu_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA0 + i);
        let x = off_zero(&mut rng, vec![2, 7], 0.1, 1.0);
        check("relu", H_KINKY, &[x], &|g, ids| g.relu(ids[0]).unwrap());
    }
}

#[test]
fn sigmoid_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0xB0 + i);
        let x = uniform(&mut rng, vec![3, 5], -2.0, 2.0);
        check("sigmoid", H_SMOOTH, &[x], &|g, ids| g.sigmoid(ids[0]).unwrap());
    }
}

#[test]
fn masked_sigmoid_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0xB8 + i);
        let x = uniform(&mut rng, vec![4, 6], -2.0, 2.0);
        let mask: Vec<f32> = (0..6).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
        check("masked_sigmoid", H_SMOOTH, &[x], &move |g, ids| {
            g.masked_sigmoid(ids[0], mask.clone()).unwrap()
        });
    }
}

#[test]
fn add_scale_reshape_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0 + i);
        let a = uniform(&mut rng, vec![2, 6], -1.0, 1.0);
        let b = uniform(&mut rng, vec![2, 6], -1.0, 1.0);
        check("add+scale+reshape", H_SMOOTH, &[a, b], &|g, ids| {
            let s = g.add(ids[0], ids[1]).unwrap();
            let s = g.scale(s, 0.7).unwrap();
            g.reshape(s, vec![3, 4]).unwrap()
        });
    }
}

#[test]
fn dropout_gradients() {
    // The mask is a deterministic function of the stored seed, so the
    // perturbed reruns see the same zero pattern and the check stays valid.
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0xD0 + i);
        let x = uniform(&mut rng, vec![4, 8], -1.0, 1.0);
        check("dropout", H_SMOOTH, &[x], &move |g, ids| {
            g.dropout(ids[0], 0.3, 17 + i).unwrap()
        });
    }
}

#[test]
fn linear_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0xE0 + i);
        let n = rng.gen_range(1..4);
        let f = rng.gen_range(2..6);
        let o = rng.gen_range(1..5);
        let x = uniform(&mut rng, vec![n, f], -1.0, 1.0);
        let w = uniform(&mut rng, vec![o, f], -1.0, 1.0);
        let b = uniform(&mut rng, vec![o], -0.5, 0.5);
        check("linear", H_SMOOTH, &[x, w, b], &|g, ids| {
            g.linear(ids[0], ids[1], ids[2]).unwrap()
        });
    }
}

#[test]
fn weighted_sum_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0xF0 + i);
        let a = uniform(&mut rng, vec![5], -1.0, 1.0);
        let b = uniform(&mut rng, vec![5], -1.0, 1.0);
        let c = uniform(&mut rng, vec![5], -1.0, 1.0);
        check("weighted_sum", H_SMOOTH, &[a, b, c], &|g, ids| {
            g.weighted_sum(ids, &[1.0, 0.3, -0.6]).unwrap()
        });
    }
}

#[test]
fn conv2d_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x100 + i);
        let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
        let k = [1, 3][rng.gen_range(0..2)];
        let stride = rng.gen_range(1..3);
        let e = rng.gen_range(5..8);
        let x = uniform(&mut rng, vec![n, c, e, e], -1.0, 1.0);
        let w = uniform(&mut rng, vec![o, c, k, k], -0.7, 0.7);
        let b = uniform(&mut rng, vec![o], -0.3, 0.3);
        check("conv2d", H_SMOOTH, &[x, w, b], &move |g, ids| {
            g.conv2d(ids[0], ids[1], ids[2], stride, k / 2).unwrap()
        });
    }
}

#[test]
fn maxpool_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x110 + i);
        let e = rng.gen_range(4..8);
        let ceil = rng.gen::<bool>();
        let x = distinct(&mut rng, vec![1, 2, e, e]);
        check("maxpool2d", H_KINKY, &[x], &move |g, ids| {
            g.maxpool2d(ids[0], 2, 2, ceil).unwrap().0
        });
    }
}

#[test]
fn avgpool_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x120 + i);
        let e = rng.gen_range(4..8);
        let k = rng.gen_range(2..4).min(e);
        let stride = rng.gen_range(1..3);
        let x = uniform(&mut rng, vec![2, 1, e, e], -1.0, 1.0);
        check("avgpool2d", H_SMOOTH, &[x], &move |g, ids| {
            g.avgpool2d(ids[0], k, stride).unwrap()
        });
    }
}

#[test]
fn unpool_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x130 + i);
        let e = rng.gen_range(4..8);
        let ceil = rng.gen::<bool>();
        // indices come from a pool over a fixed carrier; the leaf rides back
        // up through those slots
        let carrier = distinct(&mut rng, vec![1, 2, e, e]);
        let indices = {
            let mut g = Graph::new();
            let c = g.leaf(carrier);
            g.maxpool2d(c, 2, 2, ceil).unwrap().1
        };
        let pe = if ceil { (e - 2).div_ceil(2) + 1 } else { (e - 2) / 2 + 1 };
        let x = uniform(&mut rng, vec![1, 2, pe, pe], -1.0, 1.0);
        check("unpool2d", H_SMOOTH, &[x], &move |g, ids| {
            g.unpool2d(ids[0], indices.clone()).unwrap()
        });
    }
}

#[test]
fn batchnorm_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x140 + i);
        let (n, c, e) = (rng.gen_range(2..4), rng.gen_range(1..3), rng.gen_range(3..5));
        let x = uniform(&mut rng, vec![n, c, e, e], -1.5, 1.5);
        let gamma = uniform(&mut rng, vec![c], 0.5, 1.5);
        let beta = uniform(&mut rng, vec![c], -0.5, 0.5);
        check("batchnorm", H_SMOOTH, &[x, gamma, beta], &|g, ids| {
            g.batchnorm_train(ids[0], ids[1], ids[2], 1e-5).unwrap().0
        });
    }
}

#[test]
fn softmax_xent_dense_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x150 + i);
        let (n, c) = (rng.gen_range(2..5), rng.gen_range(2..5));
        let x = uniform(&mut rng, vec![n, c], -2.0, 2.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        check("softmax_xent dense", H_SMOOTH, &[x], &move |g, ids| {
            g.softmax_xent(ids[0], labels.clone()).unwrap()
        });
    }
}

#[test]
fn softmax_xent_spatial_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x160 + i);
        let (n, c, e) = (rng.gen_range(1..3), rng.gen_range(2..4), rng.gen_range(2..4));
        let x = uniform(&mut rng, vec![n, c, e, e], -2.0, 2.0);
        let labels: Vec<usize> = (0..n * e * e).map(|_| rng.gen_range(0..c)).collect();
        check("softmax_xent spatial", H_SMOOTH, &[x], &move |g, ids| {
            g.softmax_xent(ids[0], labels.clone()).unwrap()
        });
    }
}

#[test]
fn bilinear_sample_gradients() {
    // grid coordinates stay clear of pixel centers and the frame border, the
    // two kink sets of bilinear interpolation
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x170 + i);
        let (c, e) = (rng.gen_range(1..3), rng.gen_range(4..7));
        let (ho, wo) = (rng.gen_range(2..4), rng.gen_range(2..4));
        let x = uniform(&mut rng, vec![1, c, e, e], -1.0, 1.0);
        let grid = uniform(&mut rng, vec![1, ho, wo, 2], -0.83, 0.83);
        check("bilinear_sample", H_KINKY, &[x, grid], &|g, ids| {
            g.bilinear_sample_op(ids[0], ids[1]).unwrap()
        });
    }
}

#[test]
fn affine_grid_through_theta_gradients() {
    // Mild contractions keep every sample position interior. A candidate
    // theta is rejected when any mapped position sits too close to a pixel
    // center, where bilinear interpolation kinks and central differences
    // average the two slopes.
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x180 + i);
        let e = rng.gen_range(5..8usize);
        let theta_vals = loop {
            let cand = [
                rng.gen_range(0.6..0.75),
                rng.gen_range(-0.05..0.05f32),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(0.6..0.75),
                rng.gen_range(-0.1..0.1),
            ];
            let margin_px = 8.0 * H_KINKY * (e - 1) as f32 / 2.0;
            let mut ok = true;
            for oy in [-1.0f32, 0.0, 1.0] {
                for ox in [-1.0f32, 0.0, 1.0] {
                    let sx = cand[0] * ox + cand[1] * oy + cand[2];
                    let sy = cand[3] * ox + cand[4] * oy + cand[5];
                    for s in [sx, sy] {
                        let px = (s + 1.0) * (e - 1) as f32 / 2.0;
                        if (px - px.round()).abs() < margin_px {
                            ok = false;
                        }
                    }
                }
            }
            if ok {
                break cand;
            }
        };
        let theta = Tensor::new(vec![1, 6], theta_vals.to_vec()).unwrap();
        let x = uniform(&mut rng, vec![1, 2, e, e], -1.0, 1.0);
        check("affine_grid+bilinear_sample", H_KINKY, &[theta, x], &move |g, ids| {
            let grid = g.affine_grid_op(ids[0], 3, 3).unwrap();
            g.bilinear_sample_op(ids[1], grid).unwrap()
        });
    }
}

#[test]
fn detection_loss_gradients() {
    let cfg = DetectorConfig {
        grid_w: 3,
        boxes_per_cell: 2,
        classes: 2,
        ..DetectorConfig::default()
    };
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x190 + i);
        let mut targets = Vec::new();
        for row in 0..2 {
            let mut boxes = Vec::new();
            if row == 0 || rng.gen::<bool>() {
                boxes.push(BBox::new(
                    ObjClass::Iris,
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.5),
                    rng.gen_range(0.2..0.5),
                ));
                boxes.push(BBox::new(
                    ObjClass::Pupil,
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.1..0.3),
                    rng.gen_range(0.1..0.3),
                ));
            }
            targets.push(encode_target(&boxes, &cfg).unwrap());
        }
        // extents stay >= 0.1 so the sqrt terms are smooth
        let pred = uniform(&mut rng, vec![2, cfg.output_len()], 0.1, 0.9);
        let cfg = cfg.clone();
        check("detection_loss", H_KINKY, &[pred], &move |g, ids| {
            g.detection_loss(ids[0], &targets, &cfg).unwrap()
        });
    }
}

#[test]
fn total_loss_gradients() {
    let net = EmbedderNet::new(
        EmbedderConfig {
            input_edge: 64,
            in_channels: 1,
            width_scale: 0.0625,
            classes: 3,
            aux_weight: 0.3,
            dropout: 0.5,
        },
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1A0 + i);
        let n = rng.gen_range(2..4);
        let main = uniform(&mut rng, vec![n, 3], -2.0, 2.0);
        let a1 = uniform(&mut rng, vec![n, 3], -2.0, 2.0);
        let a2 = uniform(&mut rng, vec![n, 3], -2.0, 2.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let net = &net;
        check("total_loss", H_SMOOTH, &[main, a1, a2], &move |g, ids| {
            net.classification_loss(g, ids[0], &ids[1..], &labels).unwrap()
        });
    }
}
