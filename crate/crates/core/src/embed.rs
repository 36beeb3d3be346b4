//! Deep iris embedder: spatial-transformer-aligned conv stack trained as a
//! subject classifier, with the global-average feature vector (taken just
//! before the classifier) serving as the embedding.
//!
//! Three spatial transformers sit at increasing depth (on the input, after
//! the first pool, after the second pool) so alignment is refined as features
//! grow more abstract. Four auxiliary classifiers tap the pool outputs and
//! inject gradient early in the stack; their losses join the main loss at a
//! fixed weight. The last two conv blocks carry dropout, and the final block
//! omits ReLU so feature signs stay informative for the sign binarizer.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Binds, Conv2d, Linear, Param};
use crate::stn::{STModule, StWidths};
use crate::tensor::{
    avgpool2d_raw, maxpool2d_raw, relu_raw, Graph, Tensor, TensorId,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderConfig {
    pub input_edge: usize,
    pub in_channels: usize,
    pub width_scale: f32,
    pub classes: usize,
    pub aux_weight: f32,
    pub dropout: f32,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            input_edge: 100,
            in_channels: 1,
            width_scale: 1.0,
            classes: 2,
            aux_weight: 0.3,
            dropout: 0.5,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::arg("embedder_config", "need at least 2 classes"));
        }
        if self.width_scale <= 0.0 || !self.width_scale.is_finite() {
            return Err(Error::arg("embedder_config", "width_scale must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::arg("embedder_config", "dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// (name, kernel, full-scale channels); every conv is stride 1, pad k/2.
const CONV_PLAN: [(&str, usize, usize); 10] = [
    ("conv1", 5, 64),
    ("conv2", 3, 96),
    ("conv3", 3, 128),
    ("conv4", 3, 128),
    ("conv5", 3, 256),
    ("conv6", 3, 256),
    ("conv7", 3, 512),
    ("conv8", 3, 512),
    ("conv9", 3, 512),
    ("conv10", 3, 1024),
];

/// 2x2 stride-2 max pools sit after these convs; each pool output feeds an
/// auxiliary classifier.
const POOL_AFTER: [&str; 4] = ["conv1", "conv2", "conv4", "conv6"];

/// Spatial transformers run before these convs.
const ST_BEFORE: [&str; 3] = ["conv1", "conv2", "conv3"];

struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: bool,
    dropout: bool,
}

struct AuxHead {
    conv: Conv2d, // 1x1 after a 3x3/2 average pool
    fc: Linear,
    flat: usize,
}

pub struct EmbedderNet {
    pub cfg: EmbedderConfig,
    sts: Vec<STModule>,
    blocks: Vec<ConvBlock>,
    aux: Vec<AuxHead>,
    classifier: Linear,
    feature_dim: usize,
    final_edge: usize,
}

/// total = main + alpha * sum(aux); exactly linear in each aux loss with
/// slope alpha.
pub fn total_loss(
    g: &mut Graph,
    main: TensorId,
    aux: &[TensorId],
    alpha: f32,
) -> Result<TensorId> {
    if !(alpha >= 0.0) {
        return Err(Error::arg("total_loss", format!("aux weight {alpha} must be >= 0")));
    }
    let mut terms = vec![main];
    let mut weights = vec![1.0f32];
    for &a in aux {
        terms.push(a);
        weights.push(alpha);
    }
    g.weighted_sum(&terms, &weights)
}

impl EmbedderNet {
    pub fn new(cfg: EmbedderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let ws = cfg.width_scale;
        let st_widths = |_edge: usize| StWidths {
            conv1: crate::detect::scaled(16, ws).max(2),
            conv2: crate::detect::scaled(32, ws).max(2),
            hidden: crate::detect::scaled(32, ws).max(4),
        };

        let mut sts = Vec::new();
        let mut blocks = Vec::new();
        let mut aux = Vec::new();
        let mut edge = cfg.input_edge;
        let mut in_c = cfg.in_channels;
        for (name, k, full_out) in CONV_PLAN {
            if ST_BEFORE.contains(&name) {
                sts.push(STModule::new(
                    &format!("st{}", sts.len() + 1),
                    in_c,
                    edge,
                    st_widths(edge),
                    rng,
                )?);
            }
            let out_c = crate::detect::scaled(full_out, ws);
            if edge + 2 * (k / 2) < k {
                return Err(Error::shape(
                    "embedder",
                    format!("{name}: extent {edge} too small for kernel {k}"),
                ));
            }
            blocks.push(ConvBlock {
                conv: Conv2d::new(name, in_c, out_c, k, 1, k / 2, rng),
                bn: BatchNorm2d::new(&format!("{name}.bn"), out_c),
                relu: name != "conv10",
                dropout: name == "conv9" || name == "conv10",
            });
            in_c = out_c;
            if POOL_AFTER.contains(&name) {
                if edge < 2 {
                    return Err(Error::shape(
                        "embedder",
                        format!("pool after {name}: extent {edge} too small"),
                    ));
                }
                edge = (edge - 2) / 2 + 1;
                // aux head taps the pool output
                if edge < 3 {
                    return Err(Error::shape(
                        "embedder",
                        format!("aux head after {name}: extent {edge} below the 3x3 pool"),
                    ));
                }
                let ae = (edge - 3) / 2 + 1;
                let ac = crate::detect::scaled(128, ws);
                let idx = aux.len() + 1;
                let conv = Conv2d::new(&format!("aux{idx}.conv"), in_c, ac, 1, 1, 0, rng);
                let flat = ac * ae * ae;
                let fc = Linear::new(&format!("aux{idx}.fc"), flat, cfg.classes, rng);
                aux.push(AuxHead { conv, fc, flat });
            }
        }
        let feature_dim = in_c;
        let classifier = Linear::new("classifier", feature_dim, cfg.classes, rng);
        Ok(EmbedderNet {
            cfg,
            sts,
            blocks,
            aux,
            classifier,
            feature_dim,
            final_edge: edge,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
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
                "embedder",
                format!(
                    "expected [n, {}, {e}, {e}] input, got {shape:?}",
                    self.cfg.in_channels,
                    e = self.cfg.input_edge
                ),
            )),
        }
    }

    /// Training pass: (main logits, one aux logits tensor per head), each
    /// [N, classes].
    pub fn forward_train(
        &mut self,
        g: &mut Graph,
        x: TensorId,
        binds: &mut Binds,
        dropout_seed: u64,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        self.check_input(g.tensor(x).shape())?;
        let n = g.tensor(x).shape()[0];
        let mut t = x;
        let mut st_i = 0;
        let mut aux_i = 0;
        let mut drop_i = 0u64;
        let mut aux_logits = Vec::with_capacity(self.aux.len());
        for (bi, name_k) in CONV_PLAN.iter().enumerate() {
            let name = name_k.0;
            if ST_BEFORE.contains(&name) {
                t = self.sts[st_i].forward(g, t, binds)?;
                st_i += 1;
            }
            let block = &mut self.blocks[bi];
            t = block.conv.forward(g, t, binds)?;
            t = block.bn.forward_train(g, t, binds)?;
            if block.relu {
                t = g.relu(t)?;
            }
            if block.dropout {
                t = g.dropout(t, self.cfg.dropout, dropout_seed.wrapping_add(drop_i))?;
                drop_i += 1;
            }
            if POOL_AFTER.contains(&name) {
                t = g.maxpool2d(t, 2, 2, false)?.0;
                let head = &self.aux[aux_i];
                let mut a = g.avgpool2d(t, 3, 2)?;
                a = head.conv.forward(g, a, binds)?;
                a = g.relu(a)?;
                a = g.reshape(a, vec![n, head.flat])?;
                aux_logits.push(head.fc.forward(g, a, binds)?);
                aux_i += 1;
            }
        }
        // global average pool to the feature vector
        let e = self.final_edge;
        t = g.avgpool2d(t, e, e)?;
        t = g.reshape(t, vec![n, self.feature_dim])?;
        let main = self.classifier.forward(g, t, binds)?;
        Ok((main, aux_logits))
    }

    /// Cross-entropy on the main and aux logits folded through
    /// [`total_loss`] with this network's aux weight.
    pub fn classification_loss(
        &self,
        g: &mut Graph,
        main: TensorId,
        aux: &[TensorId],
        labels: &[usize],
    ) -> Result<TensorId> {
        let main_loss = g.softmax_xent(main, labels.to_vec())?;
        let aux_losses = aux
            .iter()
            .map(|&a| g.softmax_xent(a, labels.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        total_loss(g, main_loss, &aux_losses, self.cfg.aux_weight)
    }

    /// Embedding vectors [N, feature_dim] with frozen statistics, dropout
    /// off, and aux heads ignored.
    pub fn infer_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let n = x.shape()[0];
        let mut t = x.clone();
        let mut st_i = 0;
        for (bi, name_k) in CONV_PLAN.iter().enumerate() {
            let name = name_k.0;
            if ST_BEFORE.contains(&name) {
                t = self.sts[st_i].infer(&t)?;
                st_i += 1;
            }
            let block = &self.blocks[bi];
            t = block.bn.infer(&block.conv.infer(&t)?)?;
            if block.relu {
                t = relu_raw(&t);
            }
            if POOL_AFTER.contains(&name) {
                t = maxpool2d_raw(&t, 2, 2, false)?.0;
            }
        }
        let e = self.final_edge;
        let t = avgpool2d_raw(&t, e, e)?;
        Tensor::new(vec![n, self.feature_dim], t.into_data())
    }

    /// Subject logits for evaluation of the classifier itself.
    pub fn infer_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.classifier.infer(&self.infer_features(x)?)
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for st in &mut self.sts {
            st.visit_params(f);
        }
        for b in &mut self.blocks {
            b.conv.visit_params(f);
            b.bn.visit_params(f);
        }
        for a in &mut self.aux {
            a.conv.visit_params(f);
            a.fc.visit_params(f);
        }
        self.classifier.visit_params(f);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param)) {
        for st in &self.sts {
            st.visit_params_ref(f);
        }
        for b in &self.blocks {
            b.conv.visit_params_ref(f);
            b.bn.visit_params_ref(f);
        }
        for a in &self.aux {
            a.conv.visit_params_ref(f);
            a.fc.visit_params_ref(f);
        }
        self.classifier.visit_params_ref(f);
    }

    pub fn visit_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        for b in &mut self.blocks {
            f(&mut b.bn);
        }
    }

    pub fn visit_bn_ref(&self, f: &mut dyn FnMut(&BatchNorm2d)) {
        for b in &self.blocks {
            f(&b.bn);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg(classes: usize) -> EmbedderConfig {
        EmbedderConfig {
            input_edge: 48,
            in_channels: 1,
            width_scale: 0.0625,
            classes,
            ..EmbedderConfig::default()
        }
    }

    #[test]
    fn plan_counts_and_feature_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = EmbedderNet::new(tiny_cfg(3), &mut rng).unwrap();
        assert_eq!(net.sts.len(), 3);
        assert_eq!(net.aux.len(), 4);
        assert_eq!(net.blocks.len(), 10);
        // 1024 at 1/16 scale
        assert_eq!(net.feature_dim(), 64);
        // 48 -> 24 -> 12 -> 6 -> 3
        assert_eq!(net.final_edge, 3);
    }

    #[test]
    fn train_forward_emits_main_and_aux_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = EmbedderNet::new(tiny_cfg(3), &mut rng).unwrap();
        let x = Tensor::from_fn(vec![2, 1, 48, 48], |i| ((i * 37) % 101) as f32 / 101.0);
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let mut binds = Binds::new();
        let (main, aux) = net.forward_train(&mut g, xid, &mut binds, 7).unwrap();
        assert_eq!(g.tensor(main).shape(), &[2, 3]);
        assert_eq!(aux.len(), 4);
        for a in &aux {
            assert_eq!(g.tensor(*a).shape(), &[2, 3]);
        }

        // inference now works (batch norms are initialized) and is stable
        let f1 = net.infer_features(&x).unwrap();
        let f2 = net.infer_features(&x).unwrap();
        assert_eq!(f1.shape(), &[2, 64]);
        assert_eq!(f1.data(), f2.data());
    }

    #[test]
    fn identity_transformers_leave_features_finite_and_nonuniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = EmbedderNet::new(tiny_cfg(2), &mut rng).unwrap();
        let a = Tensor::from_fn(vec![1, 1, 48, 48], |i| ((i * 13) % 97) as f32 / 97.0);
        let b = Tensor::from_fn(vec![1, 1, 48, 48], |i| ((i * 29) % 89) as f32 / 89.0);
        // initialize BN stats with one training pass over both inputs
        let mut g = Graph::new();
        let both = Tensor::from_fn(vec![2, 1, 48, 48], |i| {
            let (n, rest) = (i / (48 * 48), i % (48 * 48));
            if n == 0 { a.data()[rest] } else { b.data()[rest] }
        });
        let xid = g.leaf(both);
        let mut binds = Binds::new();
        net.forward_train(&mut g, xid, &mut binds, 1).unwrap();

        let fa = net.infer_features(&a).unwrap();
        let fb = net.infer_features(&b).unwrap();
        assert!(fa.data().iter().all(|v| v.is_finite()));
        assert!(fa.data() != fb.data(), "distinct inputs must embed differently");
    }

    #[test]
    fn training_reduces_total_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = EmbedderNet::new(tiny_cfg(2), &mut rng).unwrap();
        // two fixed "identities": vertical vs horizontal stripes
        let x = Tensor::from_fn(vec![2, 1, 48, 48], |i| {
            let n = i / (48 * 48);
            let p = i % (48 * 48);
            let (y, xx) = (p / 48, p % 48);
            if n == 0 { (xx % 8 < 4) as usize as f32 } else { (y % 8 < 4) as usize as f32 }
        });
        let labels = vec![0usize, 1];
        let opt = crate::nn::Sgd { lr: 0.02, momentum: 0.9, weight_decay: 0.0 };
        let mut losses = Vec::new();
        for step in 0..10 {
            let mut g = Graph::new();
            let xid = g.leaf(x.clone());
            let mut binds = Binds::new();
            let (main, aux) = net.forward_train(&mut g, xid, &mut binds, step).unwrap();
            let loss = net.classification_loss(&mut g, main, &aux, &labels).unwrap();
            losses.push(g.scalar_value(loss));
            g.backward(loss).unwrap();
            net.visit_params(&mut |p| binds.harvest(&g, p));
            net.visit_params(&mut |p| opt.step(p));
        }
        assert!(
            losses.last().unwrap() < &(losses[0] * 0.9),
            "loss did not drop: {losses:?}"
        );
    }

    #[test]
    fn aux_weight_shapes_total_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = EmbedderNet::new(tiny_cfg(2), &mut rng).unwrap();
        let x = Tensor::from_fn(vec![1, 1, 48, 48], |i| (i % 11) as f32 / 11.0);
        let labels = vec![0usize];
        let mut g = Graph::new();
        let xid = g.leaf(x);
        let mut binds = Binds::new();
        let (main, aux) = net.forward_train(&mut g, xid, &mut binds, 0).unwrap();
        let total = net.classification_loss(&mut g, main, &aux, &labels).unwrap();
        let main_only = g.softmax_xent(main, labels.clone()).unwrap();
        let mut aux_sum = 0.0;
        for &a in &aux {
            let l = g.softmax_xent(a, labels.clone()).unwrap();
            aux_sum += g.scalar_value(l);
        }
        let expect = g.scalar_value(main_only) + 0.3 * aux_sum;
        assert!((g.scalar_value(total) - expect).abs() < 1e-5);
    }

    #[test]
    fn rejects_undersized_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = EmbedderConfig {
            input_edge: 20, // P4 would leave no room for the aux pool
            width_scale: 0.0625,
            classes: 2,
            ..EmbedderConfig::default()
        };
        assert!(EmbedderNet::new(cfg, &mut rng).is_err());
    }
}
