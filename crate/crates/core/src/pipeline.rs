//! End-to-end orchestration: run configuration, training loops with a
//! plateau learning-rate schedule, the image-to-template path (detect, crop,
//! segment, mask, embed, optionally binarize), enrollment, and evaluation.
//!
//! Every run is a pure function of (dataset, config, seed): shuffles and
//! dropout streams derive from the seed, so repeating a command reproduces
//! its model files byte for byte. A run manifest with the config hash and
//! seed is enough to replay any artifact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::codec::{Gallery, IrisCode, IrisTemplate, Metric, Payload};
use crate::detect::{
    crop_rect, decode_detections, encode_target, mask_from_boxes, BBox, DetectorConfig,
    DetectorNet, ObjClass,
};
use crate::embed::{EmbedderConfig, EmbedderNet};
use crate::error::{Error, Result};
use crate::eval::{roc_csv, run_protocol, write_report, ProtocolOutcome, ProtocolSpec};
use crate::image::{crop, resize_bilinear, resize_nearest, sample_annulus, Image};
use crate::model_io::{
    load_detector, load_embedder, load_segmenter, save_detector, save_embedder, save_segmenter,
};
use crate::nn::{Binds, Sgd};
use crate::segment::{labels_for_loss, SegmenterConfig, SegmenterNet};
use crate::synth::{channel_means, preprocess, AnnotatedSample, Eye, Spectrum, LABEL_IRIS};
use crate::tensor::{Graph, Tensor};

/// Iris sheet extent handed to the polar square remap: 50 radial rows by
/// 200 angular columns.
pub const POLAR_ROWS: usize = 50;
pub const POLAR_COLS: usize = 200;

pub const DETECTOR_FILE: &str = "detector.model";
pub const SEGMENTER_FILE: &str = "segmenter.model";
pub const EMBEDDER_FILE: &str = "embedder.model";

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Sectioned key-value run configuration. Training-rule values (learning
/// rates, momentum 0.9, weight decay 5e-4, batch 32, dropout 0.5, auxiliary
/// weight 0.3) default to the published recipe; network extents default to
/// scaled-down values a single desktop core can train in minutes.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub dataset: DatasetCfg,
    pub detector: DetectorTrainCfg,
    pub segmenter: SegmenterTrainCfg,
    pub embedder: EmbedderTrainCfg,
    pub train: TrainCfg,
    pub protocol: ProtocolCfg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetCfg {
    pub subjects: u32,
    pub shots_per_eye: u32,
    pub edge: usize,
    pub spectrum: Spectrum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrainCfg {
    pub input_edge: usize,
    pub grid_w: usize,
    pub width_scale: f32,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub conf_threshold: f32,
    pub augment: bool,
    /// Eyeless images (blank/flat/noise) mixed into training with empty
    /// target grids, so confidence learns to stay low when no eye is there.
    pub negatives: usize,
    pub dropout: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterTrainCfg {
    pub input_edge: usize,
    pub width_scale: f32,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderTrainCfg {
    pub input_edge: usize,
    pub width_scale: f32,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub aux_weight: f32,
    pub dropout: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainCfg {
    pub momentum: f32,
    pub weight_decay: f32,
    pub plateau_epsilon: f64,
    pub plateau_patience: usize,
    pub max_lr_drops: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolCfg {
    pub gallery_ratio: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            dataset: DatasetCfg {
                subjects: 8,
                shots_per_eye: 4,
                edge: 128,
                spectrum: Spectrum::Nir,
            },
            detector: DetectorTrainCfg {
                input_edge: 96,
                grid_w: 7,
                width_scale: 0.0625,
                epochs: 30,
                batch: 32,
                lr: 0.001,
                conf_threshold: 0.2,
                augment: false,
                negatives: 32,
                // The narrow desk-scale trunk needs little co-adaptation
                // control, and heavy dropout acts as a ridge penalty that
                // flattens the confidence head into a constant.
                dropout: 0.1,
            },
            segmenter: SegmenterTrainCfg {
                input_edge: 100,
                width_scale: 0.0625,
                epochs: 15,
                batch: 8,
                lr: 0.01,
            },
            embedder: EmbedderTrainCfg {
                input_edge: 64,
                width_scale: 0.0625,
                epochs: 50,
                batch: 8,
                lr: 0.01,
                aux_weight: 0.3,
                dropout: 0.5,
            },
            train: TrainCfg {
                momentum: 0.9,
                weight_decay: 0.0005,
                plateau_epsilon: 1e-4,
                plateau_patience: 5,
                max_lr_drops: 3,
            },
            protocol: ProtocolCfg { gallery_ratio: 0.5 },
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("detector.epochs", self.detector.epochs),
            ("detector.batch", self.detector.batch),
            ("segmenter.epochs", self.segmenter.epochs),
            ("segmenter.batch", self.segmenter.batch),
            ("embedder.epochs", self.embedder.epochs),
            ("embedder.batch", self.embedder.batch),
            ("train.plateau_patience", self.train.plateau_patience),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::arg("config", format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("detector.lr", self.detector.lr),
            ("segmenter.lr", self.segmenter.lr),
            ("embedder.lr", self.embedder.lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::arg("config", format!("{name} = {v} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.detector.conf_threshold) {
            return Err(Error::arg("config", "detector.conf_threshold outside [0, 1)"));
        }
        for (name, v) in [
            ("detector.dropout", self.detector.dropout),
            ("embedder.dropout", self.embedder.dropout),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::arg("config", format!("{name} = {v} outside [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.protocol.gallery_ratio) {
            return Err(Error::arg("config", "protocol.gallery_ratio outside [0, 1]"));
        }
        if self.train.plateau_epsilon <= 0.0 {
            return Err(Error::arg("config", "train.plateau_epsilon must be positive"));
        }
        Ok(())
    }

    /// Canonical text form: what gets hashed into run manifests and written
    /// back as the resolved config artifact.
    pub fn to_text(&self) -> String {
        format!(
            "[dataset]\n\
             subjects = {}\n\
             shots_per_eye = {}\n\
             edge = {}\n\
             spectrum = {}\n\
             \n\
             [detector]\n\
             input_edge = {}\n\
             grid_w = {}\n\
             width_scale = {}\n\
             epochs = {}\n\
             batch = {}\n\
             lr = {}\n\
             conf_threshold = {}\n\
             augment = {}\n\
             negatives = {}\n\
             dropout = {}\n\
             \n\
             [segmenter]\n\
             input_edge = {}\n\
             width_scale = {}\n\
             epochs = {}\n\
             batch = {}\n\
             lr = {}\n\
             \n\
             [embedder]\n\
             input_edge = {}\n\
             width_scale = {}\n\
             epochs = {}\n\
             batch = {}\n\
             lr = {}\n\
             aux_weight = {}\n\
             dropout = {}\n\
             \n\
             [train]\n\
             momentum = {}\n\
             weight_decay = {}\n\
             plateau_epsilon = {}\n\
             plateau_patience = {}\n\
             max_lr_drops = {}\n\
             \n\
             [protocol]\n\
             gallery_ratio = {}\n",
            self.dataset.subjects,
            self.dataset.shots_per_eye,
            self.dataset.edge,
            self.dataset.spectrum,
            self.detector.input_edge,
            self.detector.grid_w,
            self.detector.width_scale,
            self.detector.epochs,
            self.detector.batch,
            self.detector.lr,
            self.detector.conf_threshold,
            self.detector.augment,
            self.detector.negatives,
            self.detector.dropout,
            self.segmenter.input_edge,
            self.segmenter.width_scale,
            self.segmenter.epochs,
            self.segmenter.batch,
            self.segmenter.lr,
            self.embedder.input_edge,
            self.embedder.width_scale,
            self.embedder.epochs,
            self.embedder.batch,
            self.embedder.lr,
            self.embedder.aux_weight,
            self.embedder.dropout,
            self.train.momentum,
            self.train.weight_decay,
            self.train.plateau_epsilon,
            self.train.plateau_patience,
            self.train.max_lr_drops,
            self.protocol.gallery_ratio,
        )
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let fail = |detail: String| Error::parse(origin, ln + 1, detail);
            let line = match raw.find(['#', ';']) {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| fail("unterminated section header".into()))?
                    .trim();
                if !matches!(
                    name,
                    "dataset" | "detector" | "segmenter" | "embedder" | "train" | "protocol"
                ) {
                    return Err(fail(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail("expected key = value".into()))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(&section, key, value)
                .map_err(|detail| fail(detail))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e| format!("bad value {value:?} for {key}: {e}"))
        }
        let unknown = || Err(format!("unknown key {key:?} in section [{section}]"));
        match section {
            "dataset" => match key {
                "subjects" => self.dataset.subjects = num(key, value)?,
                "shots_per_eye" => self.dataset.shots_per_eye = num(key, value)?,
                "edge" => self.dataset.edge = num(key, value)?,
                "spectrum" => {
                    self.dataset.spectrum = Spectrum::parse(value)
                        .ok_or_else(|| format!("bad spectrum {value:?} (nir or vis)"))?;
                }
                _ => return unknown(),
            },
            "detector" => match key {
                "input_edge" => self.detector.input_edge = num(key, value)?,
                "grid_w" => self.detector.grid_w = num(key, value)?,
                "width_scale" => self.detector.width_scale = num(key, value)?,
                "epochs" => self.detector.epochs = num(key, value)?,
                "batch" => self.detector.batch = num(key, value)?,
                "lr" => self.detector.lr = num(key, value)?,
                "conf_threshold" => self.detector.conf_threshold = num(key, value)?,
                "augment" => self.detector.augment = num(key, value)?,
                "negatives" => self.detector.negatives = num(key, value)?,
                "dropout" => self.detector.dropout = num(key, value)?,
                _ => return unknown(),
            },
            "segmenter" => match key {
                "input_edge" => self.segmenter.input_edge = num(key, value)?,
                "width_scale" => self.segmenter.width_scale = num(key, value)?,
                "epochs" => self.segmenter.epochs = num(key, value)?,
                "batch" => self.segmenter.batch = num(key, value)?,
                "lr" => self.segmenter.lr = num(key, value)?,
                _ => return unknown(),
            },
            "embedder" => match key {
                "input_edge" => self.embedder.input_edge = num(key, value)?,
                "width_scale" => self.embedder.width_scale = num(key, value)?,
                "epochs" => self.embedder.epochs = num(key, value)?,
                "batch" => self.embedder.batch = num(key, value)?,
                "lr" => self.embedder.lr = num(key, value)?,
                "aux_weight" => self.embedder.aux_weight = num(key, value)?,
                "dropout" => self.embedder.dropout = num(key, value)?,
                _ => return unknown(),
            },
            "train" => match key {
                "momentum" => self.train.momentum = num(key, value)?,
                "weight_decay" => self.train.weight_decay = num(key, value)?,
                "plateau_epsilon" => self.train.plateau_epsilon = num(key, value)?,
                "plateau_patience" => self.train.plateau_patience = num(key, value)?,
                "max_lr_drops" => self.train.max_lr_drops = num(key, value)?,
                _ => return unknown(),
            },
            "protocol" => match key {
                "gallery_ratio" => self.protocol.gallery_ratio = num(key, value)?,
                _ => return unknown(),
            },
            "" => return Err(format!("key {key:?} appears before any [section] header")),
            _ => unreachable!("unknown sections are rejected at the header"),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text, path)
    }
}

// ---------------------------------------------------------------------------
// run manifest
// ---------------------------------------------------------------------------

pub fn config_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Writes `run_manifest.txt` plus the resolved config it hashes, under `out`.
/// The pair replays the run: same command, same config text, same seed.
pub fn write_run_manifest(
    out: &Path,
    command: &str,
    config_text: &str,
    seed: u64,
    artifacts: &[String],
) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = out.join("config.resolved.ini");
    fs::write(&resolved, config_text).map_err(|e| Error::io(&resolved, e))?;
    let mut text = String::new();
    text.push_str(&format!("command {command}\n"));
    text.push_str(&format!("seed {seed}\n"));
    text.push_str(&format!("config_sha256 {}\n", config_hash(config_text)));
    text.push_str("config_file config.resolved.ini\n");
    for a in artifacts {
        text.push_str(&format!("artifact {a}\n"));
    }
    let path = out.join("run_manifest.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// plateau learning-rate schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrAction {
    Keep,
    /// Multiply the learning rate by 0.1.
    Drop,
    /// The drop budget is spent; end training.
    Stop,
}

/// Drops the learning rate tenfold after `patience` consecutive epochs
/// without the loss improving on its best by at least `epsilon`; after
/// `max_drops` drops the next plateau stops training instead.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    epsilon: f64,
    patience: usize,
    max_drops: usize,
    best: f64,
    stale: usize,
    drops: usize,
}

impl PlateauSchedule {
    pub fn new(epsilon: f64, patience: usize, max_drops: usize) -> PlateauSchedule {
        PlateauSchedule {
            epsilon,
            patience,
            max_drops,
            best: f64::INFINITY,
            stale: 0,
            drops: 0,
        }
    }

    pub fn from_cfg(cfg: &TrainCfg) -> PlateauSchedule {
        PlateauSchedule::new(cfg.plateau_epsilon, cfg.plateau_patience, cfg.max_lr_drops)
    }

    pub fn observe(&mut self, loss: f64) -> LrAction {
        if loss < self.best - self.epsilon {
            self.best = loss;
            self.stale = 0;
            return LrAction::Keep;
        }
        self.stale += 1;
        if self.stale < self.patience {
            return LrAction::Keep;
        }
        self.stale = 0;
        if self.drops == self.max_drops {
            return LrAction::Stop;
        }
        self.drops += 1;
        LrAction::Drop
    }

    pub fn drops(&self) -> usize {
        self.drops
    }
}

// ---------------------------------------------------------------------------
// shared training plumbing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epoch_losses: Vec<f64>,
    pub final_lr: f32,
    pub lr_drops: usize,
    pub stopped_early: bool,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mix = seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
    idx
}

/// Concatenates batch-of-one tensors along the batch axis.
fn stack_batch(rows: &[Tensor]) -> Tensor {
    let shape = rows[0].shape().to_vec();
    let mut out_shape = shape.clone();
    out_shape[0] = rows.len();
    let mut data = Vec::with_capacity(rows.iter().map(|t| t.data().len()).sum());
    for t in rows {
        debug_assert_eq!(t.shape(), shape.as_slice());
        data.extend_from_slice(t.data());
    }
    Tensor::new(out_shape, data).expect("stacked rows share a shape")
}

fn require_samples(op: &'static str, samples: &[AnnotatedSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Uninitialized(format!("{op} called with an empty dataset")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// detector training
// ---------------------------------------------------------------------------

/// Eyeless training images: black, flat gray, and white noise. Their target
/// grids are empty, so only the no-object confidence term trains on them.
fn negative_images(count: usize, edge: usize, channels: usize, seed: u64) -> Vec<Image> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xEB1A);
    (0..count)
        .map(|i| {
            let mut img = Image::new(channels, edge, edge);
            match i % 3 {
                0 => {}
                1 => {
                    let v = rng.gen_range(0.15..0.85);
                    img.data.fill(v);
                }
                _ => {
                    for p in img.data.iter_mut() {
                        *p = rng.gen_range(0.0..1.0);
                    }
                }
            }
            img
        })
        .collect()
}

pub fn train_detector(
    samples: &[AnnotatedSample],
    cfg: &Config,
    seed: u64,
    log: &mut dyn FnMut(&str),
) -> Result<(DetectorNet, Vec<f32>, TrainOutcome)> {
    require_samples("train_detector", samples)?;
    let pool: Vec<AnnotatedSample> = if cfg.detector.augment {
        let mut pool = Vec::new();
        let mut skipped = 0usize;
        for s in samples {
            let (variants, miss) = crate::synth::augment(s, true);
            skipped += miss;
            pool.extend(variants);
        }
        if skipped > 0 {
            log(&format!("warning: skipped {skipped} out-of-frame augmentation shifts"));
        }
        pool
    } else {
        samples.to_vec()
    };

    let dcfg = DetectorConfig {
        grid_w: cfg.detector.grid_w,
        input_edge: cfg.detector.input_edge,
        in_channels: pool[0].image.channels,
        width_scale: cfg.detector.width_scale,
        ..DetectorConfig::default()
    };
    let mut net = DetectorNet::new(dcfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    net.dropout = cfg.detector.dropout;

    let images: Vec<&Image> = pool.iter().map(|s| &s.image).collect();
    let means = channel_means(&images);
    let mut inputs = Vec::with_capacity(pool.len());
    let mut targets = Vec::with_capacity(pool.len());
    for s in &pool {
        inputs.push(preprocess(&s.image, cfg.detector.input_edge, &means)?);
        targets.push(encode_target(&s.boxes, net.config())?);
    }
    for img in negative_images(
        cfg.detector.negatives,
        cfg.detector.input_edge,
        pool[0].image.channels,
        seed,
    ) {
        inputs.push(preprocess(&img, cfg.detector.input_edge, &means)?);
        targets.push(encode_target(&[], net.config())?);
    }

    let mut lr = cfg.detector.lr;
    let mut schedule = PlateauSchedule::from_cfg(&cfg.train);
    let mut outcome = TrainOutcome {
        epoch_losses: Vec::new(),
        final_lr: lr,
        lr_drops: 0,
        stopped_early: false,
    };
    'epochs: for epoch in 0..cfg.detector.epochs {
        let order = epoch_order(inputs.len(), seed, epoch);
        let opt = Sgd {
            lr,
            momentum: cfg.train.momentum,
            weight_decay: cfg.train.weight_decay,
        };
        let mut loss_sum = 0.0f64;
        for (bi, chunk) in order.chunks(cfg.detector.batch).enumerate() {
            let rows: Vec<Tensor> = chunk.iter().map(|i| inputs[*i].clone()).collect();
            let batch_targets: Vec<_> = chunk.iter().map(|i| targets[*i].clone()).collect();
            let mut g = Graph::new();
            let x = g.leaf(stack_batch(&rows));
            let mut binds = Binds::new();
            let drop_seed = seed ^ ((epoch as u64) << 24) ^ (bi as u64);
            let pred = net.forward_train(&mut g, x, &mut binds, drop_seed)?;
            let loss = g.detection_loss(pred, &batch_targets, net.config())?;
            loss_sum += g.scalar_value(loss) as f64 * chunk.len() as f64;
            g.backward(loss)?;
            net.visit_params(&mut |p| binds.harvest(&g, p));
            net.visit_params(&mut |p| opt.step(p));
        }
        let epoch_loss = loss_sum / inputs.len() as f64;
        outcome.epoch_losses.push(epoch_loss);
        log(&format!("epoch {epoch}: loss {epoch_loss:.6} lr {lr}"));
        match schedule.observe(epoch_loss) {
            LrAction::Keep => {}
            LrAction::Drop => {
                lr *= 0.1;
                log(&format!("plateau: learning rate dropped to {lr}"));
            }
            LrAction::Stop => {
                log("plateau: drop budget exhausted, stopping");
                outcome.stopped_early = true;
                break 'epochs;
            }
        }
    }
    outcome.final_lr = lr;
    outcome.lr_drops = schedule.drops();
    Ok((net, means, outcome))
}

// ---------------------------------------------------------------------------
// segmenter training
// ---------------------------------------------------------------------------

fn crop_labels(
    mask: &[u8],
    h: usize,
    w: usize,
    y0: isize,
    x0: isize,
    ch: usize,
    cw: usize,
) -> Vec<u8> {
    let mut out = vec![0u8; ch * cw]; // background fill
    for y in 0..ch {
        let sy = y0 + y as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..cw {
            let sx = x0 + x as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            out[y * cw + x] = mask[sy as usize * w + sx as usize];
        }
    }
    out
}

/// Ground-truth training pairs for the segmenter: the iris box cut out of
/// each eye image (bilinear to `edge`) and its label raster (nearest).
pub fn segmenter_training_set(
    samples: &[AnnotatedSample],
    edge: usize,
) -> Result<(Vec<Image>, Vec<Vec<u8>>)> {
    let mut rois = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let iris = s
            .find_box(ObjClass::Iris)
            .ok_or_else(|| Error::NotFound(format!("sample {i} has no iris box annotation")))?;
        let (y0, x0, ch, cw) = crop_rect(s.image.h, s.image.w, iris);
        rois.push(resize_bilinear(&crop(&s.image, y0, x0, ch, cw), edge, edge));
        let cropped = crop_labels(&s.mask, s.image.h, s.image.w, y0, x0, ch, cw);
        masks.push(resize_nearest(&cropped, ch, cw, edge, edge));
    }
    Ok((rois, masks))
}

pub fn train_segmenter(
    samples: &[AnnotatedSample],
    cfg: &Config,
    seed: u64,
    log: &mut dyn FnMut(&str),
) -> Result<(SegmenterNet, Vec<f32>, TrainOutcome)> {
    require_samples("train_segmenter", samples)?;
    let edge = cfg.segmenter.input_edge;
    let (rois, masks) = segmenter_training_set(samples, edge)?;
    let scfg = SegmenterConfig {
        input_edge: edge,
        in_channels: rois[0].channels,
        width_scale: cfg.segmenter.width_scale,
        ..SegmenterConfig::default()
    };
    let mut net = SegmenterNet::new(scfg, &mut ChaCha8Rng::seed_from_u64(seed))?;

    let roi_refs: Vec<&Image> = rois.iter().collect();
    let means = channel_means(&roi_refs);
    let mut inputs = Vec::with_capacity(rois.len());
    for r in &rois {
        inputs.push(preprocess(r, edge, &means)?);
    }

    let mut lr = cfg.segmenter.lr;
    let mut schedule = PlateauSchedule::from_cfg(&cfg.train);
    let mut outcome = TrainOutcome {
        epoch_losses: Vec::new(),
        final_lr: lr,
        lr_drops: 0,
        stopped_early: false,
    };
    'epochs: for epoch in 0..cfg.segmenter.epochs {
        let order = epoch_order(inputs.len(), seed, epoch);
        let opt = Sgd {
            lr,
            momentum: cfg.train.momentum,
            weight_decay: cfg.train.weight_decay,
        };
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.segmenter.batch) {
            let rows: Vec<Tensor> = chunk.iter().map(|i| inputs[*i].clone()).collect();
            let mask_refs: Vec<&[u8]> = chunk.iter().map(|i| masks[*i].as_slice()).collect();
            let labels = labels_for_loss(&mask_refs, net.config().classes)?;
            let mut g = Graph::new();
            let x = g.leaf(stack_batch(&rows));
            let mut binds = Binds::new();
            let logits = net.forward_train(&mut g, x, &mut binds)?;
            let loss = g.softmax_xent(logits, labels)?;
            loss_sum += g.scalar_value(loss) as f64 * chunk.len() as f64;
            g.backward(loss)?;
            net.visit_params(&mut |p| binds.harvest(&g, p));
            net.visit_params(&mut |p| opt.step(p));
        }
        let epoch_loss = loss_sum / inputs.len() as f64;
        outcome.epoch_losses.push(epoch_loss);
        log(&format!("epoch {epoch}: loss {epoch_loss:.6} lr {lr}"));
        match schedule.observe(epoch_loss) {
            LrAction::Keep => {}
            LrAction::Drop => {
                lr *= 0.1;
                log(&format!("plateau: learning rate dropped to {lr}"));
            }
            LrAction::Stop => {
                log("plateau: drop budget exhausted, stopping");
                outcome.stopped_early = true;
                break 'epochs;
            }
        }
    }
    outcome.final_lr = lr;
    outcome.lr_drops = schedule.drops();
    Ok((net, means, outcome))
}

// ---------------------------------------------------------------------------
// embedder training
// ---------------------------------------------------------------------------

/// Iris-only region of interest from ground truth: every pixel whose label
/// is not iris drops to zero, then the iris box is cut and resized. Both the
/// embedder's training inputs and the oracle-injected template path use this.
pub fn oracle_roi(img: &Image, mask: &[u8], iris_box: &BBox, out_edge: usize) -> Result<Image> {
    if mask.len() != img.h * img.w {
        return Err(Error::shape(
            "oracle_roi",
            format!("{} labels for a {}x{} image", mask.len(), img.h, img.w),
        ));
    }
    let mut work = img.clone();
    for y in 0..img.h {
        for x in 0..img.w {
            if mask[y * img.w + x] != LABEL_IRIS {
                for c in 0..img.channels {
                    work.set(c, y, x, 0.0);
                }
            }
        }
    }
    let (y0, x0, ch, cw) = crop_rect(img.h, img.w, iris_box);
    Ok(resize_bilinear(&crop(&work, y0, x0, ch, cw), out_edge, out_edge))
}

/// Ground-truth identity-classification set for the embedder: oracle-masked
/// ROIs, a class label per sample, and the sorted identity names the labels
/// index into. Left and right eyes count as distinct identities.
pub fn embedder_training_set(
    samples: &[AnnotatedSample],
    edge: usize,
) -> Result<(Vec<Image>, Vec<usize>, Vec<String>)> {
    let mut names: Vec<String> = samples.iter().map(|s| s.identity_key()).collect();
    names.sort();
    names.dedup();
    let index: BTreeMap<&str, usize> =
        names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut rois = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let iris = s
            .find_box(ObjClass::Iris)
            .ok_or_else(|| Error::NotFound(format!("sample {i} has no iris box annotation")))?;
        rois.push(oracle_roi(&s.image, &s.mask, iris, edge)?);
        labels.push(index[s.identity_key().as_str()]);
    }
    Ok((rois, labels, names))
}

/// Training set carrying both masking styles per sample: the ground-truth
/// mask ROI and the box-driven ROI with the pupil disc blotted out. The one
/// embedder serves every pipeline variant, so both input styles must be in
/// its training distribution or their features drift apart.
pub fn embedder_training_set_mixed(
    samples: &[AnnotatedSample],
    edge: usize,
) -> Result<(Vec<Image>, Vec<usize>, Vec<String>)> {
    let (mut rois, mut labels, names) = embedder_training_set(samples, edge)?;
    let index: BTreeMap<&str, usize> =
        names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    for (i, s) in samples.iter().enumerate() {
        let iris = s
            .find_box(ObjClass::Iris)
            .ok_or_else(|| Error::NotFound(format!("sample {i} has no iris box annotation")))?;
        let pupil = s
            .find_box(ObjClass::Pupil)
            .ok_or_else(|| Error::NotFound(format!("sample {i} has no pupil box annotation")))?;
        rois.push(mask_from_boxes(&s.image, iris, pupil, edge)?);
        labels.push(index[s.identity_key().as_str()]);
    }
    Ok((rois, labels, names))
}

pub fn train_embedder(
    samples: &[AnnotatedSample],
    cfg: &Config,
    seed: u64,
    log: &mut dyn FnMut(&str),
) -> Result<(EmbedderNet, Vec<f32>, TrainOutcome)> {
    require_samples("train_embedder", samples)?;
    let edge = cfg.embedder.input_edge;
    let (rois, labels, names) = embedder_training_set_mixed(samples, edge)?;
    if names.len() < 2 {
        return Err(Error::arg(
            "train_embedder",
            format!("need at least 2 identities, dataset has {}", names.len()),
        ));
    }
    let ecfg = EmbedderConfig {
        input_edge: edge,
        in_channels: rois[0].channels,
        width_scale: cfg.embedder.width_scale,
        classes: names.len(),
        aux_weight: cfg.embedder.aux_weight,
        dropout: cfg.embedder.dropout,
    };
    let mut net = EmbedderNet::new(ecfg, &mut ChaCha8Rng::seed_from_u64(seed))?;

    let roi_refs: Vec<&Image> = rois.iter().collect();
    let means = channel_means(&roi_refs);
    let mut inputs = Vec::with_capacity(rois.len());
    for r in &rois {
        inputs.push(preprocess(r, edge, &means)?);
    }

    let mut lr = cfg.embedder.lr;
    let mut schedule = PlateauSchedule::from_cfg(&cfg.train);
    let mut outcome = TrainOutcome {
        epoch_losses: Vec::new(),
        final_lr: lr,
        lr_drops: 0,
        stopped_early: false,
    };
    'epochs: for epoch in 0..cfg.embedder.epochs {
        let order = epoch_order(inputs.len(), seed, epoch);
        let opt = Sgd {
            lr,
            momentum: cfg.train.momentum,
            weight_decay: cfg.train.weight_decay,
        };
        let mut loss_sum = 0.0f64;
        for (bi, chunk) in order.chunks(cfg.embedder.batch).enumerate() {
            let rows: Vec<Tensor> = chunk.iter().map(|i| inputs[*i].clone()).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|i| labels[*i]).collect();
            let mut g = Graph::new();
            let x = g.leaf(stack_batch(&rows));
            let mut binds = Binds::new();
            let drop_seed = seed ^ ((epoch as u64) << 24) ^ (bi as u64);
            let (main, aux) = net.forward_train(&mut g, x, &mut binds, drop_seed)?;
            let loss = net.classification_loss(&mut g, main, &aux, &batch_labels)?;
            loss_sum += g.scalar_value(loss) as f64 * chunk.len() as f64;
            g.backward(loss)?;
            net.visit_params(&mut |p| binds.harvest(&g, p));
            net.visit_params(&mut |p| opt.step(p));
        }
        let epoch_loss = loss_sum / inputs.len() as f64;
        outcome.epoch_losses.push(epoch_loss);
        log(&format!("epoch {epoch}: loss {epoch_loss:.6} lr {lr}"));
        match schedule.observe(epoch_loss) {
            LrAction::Keep => {}
            LrAction::Drop => {
                lr *= 0.1;
                log(&format!("plateau: learning rate dropped to {lr}"));
            }
            LrAction::Stop => {
                log("plateau: drop budget exhausted, stopping");
                outcome.stopped_early = true;
                break 'epochs;
            }
        }
    }
    outcome.final_lr = lr;
    outcome.lr_drops = schedule.drops();
    Ok((net, means, outcome))
}

/// Fraction of samples whose classifier argmax matches the label.
pub fn classification_accuracy(
    net: &EmbedderNet,
    rois: &[Image],
    labels: &[usize],
    means: &[f32],
) -> Result<f64> {
    let edge = net.config().input_edge;
    let mut hits = 0usize;
    for (roi, label) in rois.iter().zip(labels) {
        let x = preprocess(roi, edge, means)?;
        let logits = net.infer_logits(&x)?;
        let row = logits.data();
        let mut best = 0usize;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / rois.len() as f64)
}

// ---------------------------------------------------------------------------
// trained-model bundle and the image-to-template path
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Segmenter mask zeroes everything that is not iris texture.
    Segmented,
    /// Boxes only: iris crop with the pupil disc blotted out.
    BboxOnly,
    /// Iris annulus unrolled to a polar sheet, then squared.
    PolarRemap,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Segmented => "segmented",
            Variant::BboxOnly => "bbox-only",
            Variant::PolarRemap => "polar-remap",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "segmented" => Some(Variant::Segmented),
            "bbox-only" => Some(Variant::BboxOnly),
            "polar-remap" => Some(Variant::PolarRemap),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub struct Models {
    pub detector: DetectorNet,
    pub det_means: Vec<f32>,
    pub segmenter: Option<(SegmenterNet, Vec<f32>)>,
    pub embedder: EmbedderNet,
    pub emb_means: Vec<f32>,
    pub conf_threshold: f32,
}

/// Loads the model bundle saved under `dir`. The segmenter file is only
/// required when the variant needs it.
pub fn load_models(dir: &Path, variant: Variant, conf_threshold: f32) -> Result<Models> {
    let (detector, det_means) = load_detector(&dir.join(DETECTOR_FILE))?;
    let segmenter = if variant == Variant::Segmented {
        Some(load_segmenter(&dir.join(SEGMENTER_FILE))?)
    } else {
        None
    };
    let (embedder, emb_means) = load_embedder(&dir.join(EMBEDDER_FILE))?;
    Ok(Models {
        detector,
        det_means,
        segmenter,
        embedder,
        emb_means,
        conf_threshold,
    })
}

/// Per-sample identity metadata carried into the template.
#[derive(Debug, Clone)]
pub struct SampleMeta {
    pub subject: String,
    pub eye: Eye,
    pub spectrum: Spectrum,
    pub sample: u32,
}

/// A pipeline run either yields a template or reports that no usable eye
/// geometry was found. The latter is an expected outcome, not an error.
#[derive(Debug, Clone)]
pub enum Outcome {
    Template(IrisTemplate),
    NoDetection(String),
}

impl Outcome {
    pub fn into_template(self) -> Result<IrisTemplate> {
        match self {
            Outcome::Template(t) => Ok(t),
            Outcome::NoDetection(reason) => Err(Error::NotFound(format!("no detection: {reason}"))),
        }
    }
}

/// Runs the detector on a full eye image and decodes one candidate box per
/// class at the bundle's confidence threshold.
pub fn detect_boxes(models: &Models, img: &Image) -> Result<(Option<BBox>, Option<BBox>)> {
    let x = preprocess(img, models.detector.config().input_edge, &models.det_means)?;
    let pred = models.detector.infer(&x)?;
    let grid = models.detector.grid_from_row(&pred, 0)?;
    let dets = decode_detections(&grid, models.conf_threshold);
    let take = |c: ObjClass| dets.get(c.index()).and_then(|d| d.as_ref()).map(|d| d.bbox);
    Ok((take(ObjClass::Iris), take(ObjClass::Pupil)))
}

pub fn extract_features(net: &EmbedderNet, means: &[f32], roi: &Image) -> Result<Vec<f32>> {
    let x = preprocess(roi, net.config().input_edge, means)?;
    Ok(net.infer_features(&x)?.into_data())
}

fn template_from_roi(
    net: &EmbedderNet,
    means: &[f32],
    roi: &Image,
    binarize: bool,
    meta: &SampleMeta,
) -> Result<Outcome> {
    let feats = extract_features(net, means, roi)?;
    let payload = if binarize {
        Payload::Binary(IrisCode::from_features(&feats)?)
    } else {
        Payload::Real(feats)
    };
    Ok(Outcome::Template(IrisTemplate {
        subject: meta.subject.clone(),
        eye: meta.eye,
        spectrum: meta.spectrum,
        sample: meta.sample,
        payload,
    }))
}

/// Polar iris sheet: the annulus between the pupil and iris rims unrolled to
/// POLAR_ROWS x POLAR_COLS, then remapped into a square. Returns None with a
/// reason when the detected geometry is unusable.
fn polar_square(
    img: &Image,
    iris: &BBox,
    pupil: &BBox,
) -> Result<std::result::Result<Image, String>> {
    let (w, h) = (img.w as f32, img.h as f32);
    let r_pupil = (pupil.w * w + pupil.h * h) / 4.0;
    let r_iris = (iris.w * w + iris.h * h) / 4.0;
    if r_iris <= r_pupil || r_pupil <= 0.0 {
        return Ok(Err(format!(
            "degenerate annulus: pupil radius {r_pupil:.2}px vs iris radius {r_iris:.2}px"
        )));
    }
    let strip = sample_annulus(
        img,
        pupil.cy * h,
        pupil.cx * w,
        r_pupil,
        r_iris,
        POLAR_ROWS,
        POLAR_COLS,
    );
    Ok(Ok(crate::synth::polar_remap(&strip)?))
}

/// Full image-to-template path: detect boxes, cut the iris region the way
/// the variant prescribes, embed, and optionally binarize. `Ok(NoDetection)`
/// reports absent or degenerate eye geometry; `Err` is reserved for real
/// failures (missing models, shape mismatches, I/O).
pub fn end_to_end(
    img: &Image,
    models: &Models,
    variant: Variant,
    binarize: bool,
    meta: &SampleMeta,
) -> Result<Outcome> {
    let (iris, pupil) = detect_boxes(models, img)?;
    let Some(iris) = iris else {
        return Ok(Outcome::NoDetection("no iris box above the confidence threshold".into()));
    };
    let roi = match variant {
        Variant::Segmented => {
            let (seg, seg_means) = models.segmenter.as_ref().ok_or_else(|| {
                Error::Uninitialized("segmented variant needs a segmenter model".into())
            })?;
            let edge = seg.config().input_edge;
            let (y0, x0, ch, cw) = crop_rect(img.h, img.w, &iris);
            let roi = resize_bilinear(&crop(img, y0, x0, ch, cw), edge, edge);
            let x = preprocess(&roi, edge, seg_means)?;
            let labels = &seg.predict(&x)?[0];
            let mut masked = roi;
            for y in 0..edge {
                for x in 0..edge {
                    if labels[y * edge + x] != LABEL_IRIS {
                        for c in 0..masked.channels {
                            masked.set(c, y, x, 0.0);
                        }
                    }
                }
            }
            masked
        }
        Variant::BboxOnly => {
            let Some(pupil) = pupil else {
                return Ok(Outcome::NoDetection(
                    "no pupil box above the confidence threshold".into(),
                ));
            };
            mask_from_boxes(img, &iris, &pupil, models.embedder.config().input_edge)?
        }
        Variant::PolarRemap => {
            let Some(pupil) = pupil else {
                return Ok(Outcome::NoDetection(
                    "no pupil box above the confidence threshold".into(),
                ));
            };
            match polar_square(img, &iris, &pupil)? {
                Ok(square) => square,
                Err(reason) => return Ok(Outcome::NoDetection(reason)),
            }
        }
    };
    template_from_roi(&models.embedder, &models.emb_means, &roi, binarize, meta)
}

/// Ground-truth stand-ins for the detector and segmenter outputs.
pub struct GroundTruth<'a> {
    pub boxes: &'a [BBox],
    /// Label raster at the full image extent; required for Segmented.
    pub mask: Option<&'a [u8]>,
}

/// The template path with the trained detector/segmenter bypassed by ground
/// truth; only the embedder runs. With the Segmented variant the template
/// equals `extract_features` of `oracle_roi` by construction.
pub fn end_to_end_oracle(
    img: &Image,
    embedder: &EmbedderNet,
    emb_means: &[f32],
    variant: Variant,
    binarize: bool,
    meta: &SampleMeta,
    gt: &GroundTruth,
) -> Result<Outcome> {
    let find = |c: ObjClass| gt.boxes.iter().find(|b| b.class == c);
    let Some(iris) = find(ObjClass::Iris) else {
        return Ok(Outcome::NoDetection("ground truth has no iris box".into()));
    };
    let edge = embedder.config().input_edge;
    let roi = match variant {
        Variant::Segmented => {
            let mask = gt.mask.ok_or_else(|| {
                Error::Uninitialized("segmented oracle path needs a ground-truth mask".into())
            })?;
            oracle_roi(img, mask, iris, edge)?
        }
        Variant::BboxOnly => {
            let Some(pupil) = find(ObjClass::Pupil) else {
                return Ok(Outcome::NoDetection("ground truth has no pupil box".into()));
            };
            mask_from_boxes(img, iris, pupil, edge)?
        }
        Variant::PolarRemap => {
            let Some(pupil) = find(ObjClass::Pupil) else {
                return Ok(Outcome::NoDetection("ground truth has no pupil box".into()));
            };
            match polar_square(img, iris, pupil)? {
                Ok(square) => square,
                Err(reason) => return Ok(Outcome::NoDetection(reason)),
            }
        }
    };
    template_from_roi(embedder, emb_means, &roi, binarize, meta)
}

// ---------------------------------------------------------------------------
// enrollment and evaluation drivers
// ---------------------------------------------------------------------------

fn meta_for(sample: &AnnotatedSample, counters: &mut BTreeMap<String, u32>) -> SampleMeta {
    let identity = sample.identity_key();
    let n = counters.entry(identity).or_insert(0);
    let meta = SampleMeta {
        subject: format!("s{:03}", sample.subject),
        eye: sample.eye,
        spectrum: sample.spectrum,
        sample: *n,
    };
    *n += 1;
    meta
}

/// Templates for a whole dataset through the trained pipeline. Samples with
/// no usable detection are skipped and counted, not failed. Images are
/// independent, so `threads > 1` fans them out over worker threads; results
/// merge in dataset order, so the output is identical for any thread count.
pub fn templates_from_dataset(
    samples: &[AnnotatedSample],
    models: &Models,
    variant: Variant,
    binarize: bool,
    threads: usize,
) -> Result<(Vec<IrisTemplate>, usize)> {
    let mut counters = BTreeMap::new();
    let metas: Vec<SampleMeta> = samples.iter().map(|s| meta_for(s, &mut counters)).collect();
    let mut results: Vec<Option<Result<Outcome>>> = samples.iter().map(|_| None).collect();
    let threads = threads.clamp(1, samples.len().max(1));
    if threads == 1 {
        for (i, s) in samples.iter().enumerate() {
            results[i] = Some(end_to_end(&s.image, models, variant, binarize, &metas[i]));
        }
    } else {
        let chunk = samples.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..threads {
                let lo = w * chunk;
                let hi = ((w + 1) * chunk).min(samples.len());
                if lo >= hi {
                    break;
                }
                let metas = &metas;
                handles.push(scope.spawn(move || {
                    (lo..hi)
                        .map(|i| {
                            (i, end_to_end(&samples[i].image, models, variant, binarize, &metas[i]))
                        })
                        .collect::<Vec<_>>()
                }));
            }
            for h in handles {
                for (i, r) in h.join().expect("template worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }
    let mut templates = Vec::new();
    let mut skipped = 0usize;
    for r in results {
        match r.expect("every sample index is assigned to a worker")? {
            Outcome::Template(t) => templates.push(t),
            Outcome::NoDetection(_) => skipped += 1,
        }
    }
    Ok((templates, skipped))
}

pub struct EvalArtifacts {
    pub outcome: ProtocolOutcome,
    pub report: String,
    pub roc: String,
    pub scores_text: String,
    pub no_detection: usize,
}

/// Enroll/probe split, scoring, and report rendering over a dataset.
pub fn evaluate_dataset(
    samples: &[AnnotatedSample],
    models: &Models,
    variant: Variant,
    metric: Metric,
    spec: &ProtocolSpec,
    threads: usize,
) -> Result<EvalArtifacts> {
    let binarize = metric == Metric::Hamming;
    let (templates, no_detection) =
        templates_from_dataset(samples, models, variant, binarize, threads)?;
    if templates.is_empty() {
        return Err(Error::Uninitialized(
            "no sample produced a template (every detection failed)".into(),
        ));
    }
    let outcome = run_protocol(&templates, spec, metric)?;
    let mut extras = vec![
        ("rank1".to_string(), outcome.rank1),
        ("no_detection_count".to_string(), no_detection as f64),
    ];
    if binarize {
        let mut density = 0.0f64;
        let mut n = 0usize;
        for t in &templates {
            if let Payload::Binary(code) = &t.payload {
                density += code.density();
                n += 1;
            }
        }
        extras.push(("code_density".to_string(), density / n.max(1) as f64));
    }
    let report = write_report(&outcome.scores, &extras)?;
    let roc = roc_csv(&outcome.scores.roc()?);
    let scores_text = outcome.scores.to_text();
    Ok(EvalArtifacts {
        outcome,
        report,
        roc,
        scores_text,
        no_detection,
    })
}

/// Builds a gallery from every sample in the dataset.
pub fn enroll_dataset(
    samples: &[AnnotatedSample],
    models: &Models,
    variant: Variant,
    binarize: bool,
    threads: usize,
) -> Result<(Gallery, usize)> {
    let (templates, skipped) =
        templates_from_dataset(samples, models, variant, binarize, threads)?;
    if templates.is_empty() {
        return Err(Error::Uninitialized(
            "no sample produced a template (every detection failed)".into(),
        ));
    }
    Ok((Gallery::new(templates)?, skipped))
}

// convenience save wrappers so the CLI writes every artifact the same way
pub fn save_models_detector(dir: &Path, net: &DetectorNet, means: &[f32]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(DETECTOR_FILE);
    save_detector(&path, net, means)?;
    Ok(path)
}

pub fn save_models_segmenter(dir: &Path, net: &SegmenterNet, means: &[f32]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(SEGMENTER_FILE);
    save_segmenter(&path, net, means)?;
    Ok(path)
}

pub fn save_models_embedder(dir: &Path, net: &EmbedderNet, means: &[f32]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(EMBEDDER_FILE);
    save_embedder(&path, net, means)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_dataset, load_dataset, GenConfig};

    #[test]
    fn config_text_round_trips() {
        let cfg = Config::default();
        let text = cfg.to_text();
        let back = Config::parse(&text, Path::new("cfg.ini")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_rejects_unknowns_with_line_numbers() {
        let err = Config::parse("[detector]\nwarp_factor = 3\n", Path::new("c.ini"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("c.ini:2"), "{err}");
        assert!(err.contains("warp_factor"), "{err}");
        let err = Config::parse("[warp]\n", Path::new("c.ini")).unwrap_err().to_string();
        assert!(err.contains("unknown section"), "{err}");
        let err = Config::parse("lr = 1\n", Path::new("c.ini")).unwrap_err().to_string();
        assert!(err.contains("before any [section]"), "{err}");
        let err = Config::parse("[detector]\nlr = fast\n", Path::new("c.ini"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("bad value"), "{err}");
    }

    #[test]
    fn config_accepts_comments_and_partial_overrides() {
        let text = "# comment\n[detector]\nepochs = 3 ; trailing\n\n[train]\nmomentum = 0.8\n";
        let cfg = Config::parse(text, Path::new("c.ini")).unwrap();
        assert_eq!(cfg.detector.epochs, 3);
        assert_eq!(cfg.train.momentum, 0.8);
        // untouched keys keep defaults
        assert_eq!(cfg.embedder.epochs, Config::default().embedder.epochs);
    }

    #[test]
    fn plateau_schedule_drops_then_stops() {
        let mut s = PlateauSchedule::new(1e-4, 3, 2);
        assert_eq!(s.observe(1.0), LrAction::Keep);
        // improvement below epsilon counts as stale
        assert_eq!(s.observe(1.0 - 5e-5), LrAction::Keep);
        assert_eq!(s.observe(1.0), LrAction::Keep);
        assert_eq!(s.observe(1.0), LrAction::Drop);
        assert_eq!(s.drops(), 1);
        // real improvement resets the counter
        assert_eq!(s.observe(0.5), LrAction::Keep);
        assert_eq!(s.observe(0.5), LrAction::Keep);
        assert_eq!(s.observe(0.5), LrAction::Keep);
        assert_eq!(s.observe(0.5), LrAction::Drop);
        assert_eq!(s.observe(0.5), LrAction::Keep);
        assert_eq!(s.observe(0.5), LrAction::Keep);
        assert_eq!(s.observe(0.5), LrAction::Stop);
    }

    #[test]
    fn manifest_records_hash_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_text = Config::default().to_text();
        let path = write_run_manifest(dir.path(), "train-detector", &cfg_text, 42, &[
            DETECTOR_FILE.to_string(),
        ])
        .unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("command train-detector"));
        assert!(text.contains("seed 42"));
        assert!(text.contains(&format!("config_sha256 {}", config_hash(&cfg_text))));
        assert!(text.contains("artifact detector.model"));
        // the resolved config is byte-identical to what was hashed
        let resolved = fs::read_to_string(dir.path().join("config.resolved.ini")).unwrap();
        assert_eq!(resolved, cfg_text);
        assert_eq!(config_hash(&resolved), config_hash(&cfg_text));
    }

    #[test]
    fn crop_labels_zero_fills_outside() {
        let mask = vec![1u8, 2, 3, 4]; // 2x2
        let out = crop_labels(&mask, 2, 2, -1, 1, 2, 2);
        assert_eq!(out, vec![0, 0, 2, 0]);
    }

    #[test]
    fn epoch_order_is_seed_deterministic() {
        assert_eq!(epoch_order(10, 7, 3), epoch_order(10, 7, 3));
        assert_ne!(epoch_order(100, 7, 3), epoch_order(100, 7, 4));
        assert_ne!(epoch_order(100, 7, 3), epoch_order(100, 8, 3));
    }

    fn tiny_dataset(dir: &Path) -> Vec<AnnotatedSample> {
        let cfg = GenConfig {
            subjects: 2,
            shots_per_eye: 2,
            edge: 96,
            spectrum: Spectrum::Nir,
            seed: 5,
        };
        gen_dataset(&cfg, dir).unwrap();
        load_dataset(dir).unwrap()
    }

    fn quick_config() -> Config {
        let mut cfg = Config::default();
        cfg.detector.epochs = 2;
        cfg.detector.batch = 4;
        cfg.detector.width_scale = 0.03125;
        cfg.segmenter.epochs = 2;
        cfg.segmenter.input_edge = 40;
        cfg.segmenter.width_scale = 0.03125;
        cfg.embedder.epochs = 2;
        cfg.embedder.input_edge = 48;
        cfg.embedder.width_scale = 0.03125;
        cfg
    }

    #[test]
    fn detector_training_runs_and_is_deterministic() {
        let data_dir = tempfile::tempdir().unwrap();
        let samples = tiny_dataset(data_dir.path());
        let cfg = quick_config();
        let mut logs = Vec::new();
        let (net, means, out) =
            train_detector(&samples, &cfg, 7, &mut |l| logs.push(l.to_string())).unwrap();
        assert_eq!(out.epoch_losses.len(), 2);
        assert!(out.epoch_losses.iter().all(|l| l.is_finite()));
        assert!(logs.iter().any(|l| l.contains("epoch 0")));

        let (net2, means2, _) = train_detector(&samples, &cfg, 7, &mut |_| {}).unwrap();
        assert_eq!(means, means2);
        let dir = tempfile::tempdir().unwrap();
        let p1 = save_models_detector(&dir.path().join("a"), &net, &means).unwrap();
        let p2 = save_models_detector(&dir.path().join("b"), &net2, &means2).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn oracle_template_matches_direct_feature_extraction() {
        let data_dir = tempfile::tempdir().unwrap();
        let samples = tiny_dataset(data_dir.path());
        let cfg = quick_config();
        let (net, means, _) = train_embedder(&samples, &cfg, 3, &mut |_| {}).unwrap();

        let s = &samples[0];
        let meta = SampleMeta {
            subject: format!("s{:03}", s.subject),
            eye: s.eye,
            spectrum: s.spectrum,
            sample: 0,
        };
        let gt = GroundTruth { boxes: &s.boxes, mask: Some(&s.mask) };
        let out = end_to_end_oracle(&s.image, &net, &means, Variant::Segmented, false, &meta, &gt)
            .unwrap();
        let Outcome::Template(t) = out else { panic!("oracle path must detect") };
        let iris = s.find_box(ObjClass::Iris).unwrap();
        let roi = oracle_roi(&s.image, &s.mask, iris, net.config().input_edge).unwrap();
        let direct = extract_features(&net, &means, &roi).unwrap();
        assert_eq!(t.payload, Payload::Real(direct));
    }

    #[test]
    fn degenerate_oracle_geometry_reports_no_detection() {
        let data_dir = tempfile::tempdir().unwrap();
        let samples = tiny_dataset(data_dir.path());
        let cfg = quick_config();
        let (net, means, _) = train_embedder(&samples, &cfg, 3, &mut |_| {}).unwrap();
        let s = &samples[0];
        let meta = SampleMeta {
            subject: "s000".into(),
            eye: s.eye,
            spectrum: s.spectrum,
            sample: 0,
        };
        // pupil wider than the iris: polar annulus is impossible
        let boxes = vec![
            BBox::new(ObjClass::Iris, 0.5, 0.5, 0.2, 0.2),
            BBox::new(ObjClass::Pupil, 0.5, 0.5, 0.4, 0.4),
        ];
        let gt = GroundTruth { boxes: &boxes, mask: None };
        let out = end_to_end_oracle(&s.image, &net, &means, Variant::PolarRemap, false, &meta, &gt)
            .unwrap();
        assert!(matches!(out, Outcome::NoDetection(_)));
        // missing boxes entirely are also a no-detection outcome
        let gt = GroundTruth { boxes: &[], mask: None };
        let out = end_to_end_oracle(&s.image, &net, &means, Variant::BboxOnly, false, &meta, &gt)
            .unwrap();
        assert!(matches!(out, Outcome::NoDetection(_)));
    }

    #[test]
    fn untrained_detector_with_impossible_threshold_yields_no_detection() {
        let data_dir = tempfile::tempdir().unwrap();
        let samples = tiny_dataset(data_dir.path());
        let cfg = quick_config();
        // no training: scores are sigmoid products < 1, so threshold 1.0
        // can never be exceeded
        let dcfg = DetectorConfig {
            grid_w: cfg.detector.grid_w,
            input_edge: cfg.detector.input_edge,
            in_channels: 1,
            width_scale: cfg.detector.width_scale,
            ..DetectorConfig::default()
        };
        let detector = DetectorNet::new(dcfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (embedder, emb_means, _) = train_embedder(&samples, &cfg, 3, &mut |_| {}).unwrap();
        let mut models = Models {
            detector,
            det_means: vec![0.5],
            segmenter: None,
            embedder,
            emb_means,
            conf_threshold: 1.0,
        };
        let meta = SampleMeta {
            subject: "s000".into(),
            eye: Eye::Left,
            spectrum: Spectrum::Nir,
            sample: 0,
        };
        let out = end_to_end(&samples[0].image, &models, Variant::BboxOnly, false, &meta).unwrap();
        assert!(matches!(out, Outcome::NoDetection(_)));
        // distinct from a real failure: once boxes do decode, segmented
        // without a segmenter model is an error, not a no-detection
        models.conf_threshold = 0.0;
        assert!(end_to_end(&samples[0].image, &models, Variant::Segmented, false, &meta).is_err());
    }
}
