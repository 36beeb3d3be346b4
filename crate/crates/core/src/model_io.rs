//! Model files: an ordered set of named f32 tensors with a small manifest.
//!
//! Layout (all integers little-endian): magic "IDLN", format version u32,
//! entry count u32, then per entry kind u8, name length u32 + UTF-8 name,
//! rank u32 + one u32 per dimension, and the raw f32 payload. Entries are
//! written in network visiting order, so saving the same state twice yields
//! byte-identical files.
//!
//! Network weights load by name with shape validation; batch-norm running
//! statistics and the preprocessing channel means travel in the same file as
//! stat/meta tensors, and each network's configuration rides along as a small
//! meta tensor so a model file alone reconstructs the architecture.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detect::{DetectorConfig, DetectorNet};
use crate::embed::{EmbedderConfig, EmbedderNet};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Param};
use crate::segment::{SegmenterConfig, SegmenterNet};

pub const MODEL_MAGIC: &[u8; 4] = b"IDLN";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    /// Trainable weight.
    Param,
    /// Non-trainable state tracked during training (batch-norm statistics).
    Stat,
    /// Configuration or preprocessing constants.
    Meta,
}

impl EntryKind {
    fn tag(self) -> u8 {
        match self {
            EntryKind::Param => 0,
            EntryKind::Stat => 1,
            EntryKind::Meta => 2,
        }
    }

    fn from_tag(t: u8) -> Option<EntryKind> {
        match t {
            0 => Some(EntryKind::Param),
            1 => Some(EntryKind::Stat),
            2 => Some(EntryKind::Meta),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct ModelFile {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ModelFile {
    pub fn new() -> ModelFile {
        ModelFile::default()
    }

    pub fn add(
        &mut self,
        name: &str,
        kind: EntryKind,
        shape: &[usize],
        data: &[f32],
    ) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::arg("model_file", format!("duplicate tensor name {name:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "model_file",
                format!("tensor {name:?} declares shape {shape:?} but holds {} values", data.len()),
            ));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            kind,
            shape: shape.to_vec(),
            data: data.to_vec(),
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.index
            .get(name)
            .map(|i| (self.entries[*i].shape.as_slice(), self.entries[*i].data.as_slice()))
    }

    /// Tensor by name with an exact shape check.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("model file has no tensor {name:?}")))?;
        let e = &self.entries[i];
        if e.shape != shape {
            return Err(Error::shape(
                "model_file",
                format!("tensor {name:?} has shape {:?}, expected {shape:?}", e.shape),
            ));
        }
        Ok(&e.data)
    }

    pub fn names(&self) -> impl Iterator<Item = (&str, EntryKind, &[usize])> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.kind, e.shape.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.push(e.kind.tag());
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<ModelFile> {
        struct Cursor<'a> {
            bytes: &'a [u8],
            pos: usize,
        }
        impl<'a> Cursor<'a> {
            fn take(&mut self, n: usize) -> Option<&'a [u8]> {
                let chunk = self.bytes.get(self.pos..self.pos + n)?;
                self.pos += n;
                Some(chunk)
            }
            fn u32(&mut self) -> Option<u32> {
                self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            }
        }
        let fail = |detail: String| Error::parse(origin, 0, detail);
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4) != Some(MODEL_MAGIC) {
            return Err(fail("not a model file (bad magic)".into()));
        }
        let version = cur.u32().ok_or_else(|| fail("truncated header".into()))?;
        if version != MODEL_VERSION {
            return Err(fail(format!("unsupported model version {version}")));
        }
        let count = cur.u32().ok_or_else(|| fail("truncated header".into()))?;
        let mut file = ModelFile::new();
        for i in 0..count {
            let fail = |what: &str| fail(format!("entry {i}: truncated {what}"));
            let kind = cur.take(1).ok_or_else(|| fail("kind"))?[0];
            let kind = EntryKind::from_tag(kind)
                .ok_or_else(|| Error::parse(origin, 0, format!("entry {i}: unknown kind {kind}")))?;
            let name_len = cur.u32().ok_or_else(|| fail("name length"))? as usize;
            let name = cur.take(name_len).ok_or_else(|| fail("name"))?;
            let name = std::str::from_utf8(name)
                .map_err(|e| Error::parse(origin, 0, format!("entry {i}: name not UTF-8: {e}")))?
                .to_string();
            let rank = cur.u32().ok_or_else(|| fail("rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32().ok_or_else(|| fail("shape"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(4 * numel).ok_or_else(|| fail("payload"))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect::<Vec<f32>>();
            file.add(&name, kind, &shape, &data)?;
        }
        if cur.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ModelFile> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ModelFile::from_bytes(&bytes, path)
    }
}

// ---------------------------------------------------------------------------
// param / batch-norm packing shared by the three networks
// ---------------------------------------------------------------------------

fn add_param(file: &mut ModelFile, p: &Param) -> Result<()> {
    file.add(&p.name, EntryKind::Param, &p.shape, &p.data)
}

fn load_param(file: &ModelFile, p: &mut Param) -> Result<()> {
    p.data = file.require(&p.name, &p.shape)?.to_vec();
    // momentum restarts from rest; only weights persist
    p.vel = vec![0.0; p.data.len()];
    Ok(())
}

fn add_bn(file: &mut ModelFile, bn: &BatchNorm2d) -> Result<()> {
    let c = bn.running_mean.len();
    let name = bn.name();
    file.add(&format!("{name}.running_mean"), EntryKind::Stat, &[c], &bn.running_mean)?;
    file.add(&format!("{name}.running_var"), EntryKind::Stat, &[c], &bn.running_var)?;
    file.add(
        &format!("{name}.initialized"),
        EntryKind::Stat,
        &[1],
        &[if bn.initialized { 1.0 } else { 0.0 }],
    )
}

fn load_bn(file: &ModelFile, bn: &mut BatchNorm2d) -> Result<()> {
    let c = bn.running_mean.len();
    let name = bn.name().to_string();
    bn.running_mean = file.require(&format!("{name}.running_mean"), &[c])?.to_vec();
    bn.running_var = file.require(&format!("{name}.running_var"), &[c])?.to_vec();
    bn.initialized = file.require(&format!("{name}.initialized"), &[1])?[0] != 0.0;
    Ok(())
}

fn add_means(file: &mut ModelFile, means: &[f32], channels: usize) -> Result<()> {
    if means.len() != channels {
        return Err(Error::shape(
            "model_file",
            format!("{} channel means for {channels} input channels", means.len()),
        ));
    }
    file.add("preprocess.channel_means", EntryKind::Meta, &[channels], means)
}

fn load_means(file: &ModelFile, channels: usize) -> Result<Vec<f32>> {
    Ok(file.require("preprocess.channel_means", &[channels])?.to_vec())
}

// collect-then-add keeps the io Result out of the visitor closures
fn collected_params(visit: impl FnOnce(&mut dyn FnMut(&Param))) -> Vec<Param> {
    let mut out = Vec::new();
    visit(&mut |p: &Param| out.push(p.clone()));
    out
}

// ---------------------------------------------------------------------------
// detector
// ---------------------------------------------------------------------------

fn detector_config_vec(cfg: &DetectorConfig) -> Vec<f32> {
    vec![
        cfg.grid_w as f32,
        cfg.boxes_per_cell as f32,
        cfg.classes as f32,
        cfg.input_edge as f32,
        cfg.in_channels as f32,
        cfg.width_scale,
        cfg.lambda_coord,
        cfg.lambda_noobj,
    ]
}

pub fn save_detector(path: &Path, net: &DetectorNet, means: &[f32]) -> Result<()> {
    let cfg = net.config();
    let mut file = ModelFile::new();
    file.add("config.detector", EntryKind::Meta, &[8], &detector_config_vec(cfg))?;
    add_means(&mut file, means, cfg.in_channels)?;
    for p in collected_params(|f| net.visit_params_ref(f)) {
        add_param(&mut file, &p)?;
    }
    file.save(path)
}

pub fn load_detector(path: &Path) -> Result<(DetectorNet, Vec<f32>)> {
    let file = ModelFile::load(path)?;
    let c = file.require("config.detector", &[8])?;
    let cfg = DetectorConfig {
        grid_w: c[0] as usize,
        boxes_per_cell: c[1] as usize,
        classes: c[2] as usize,
        input_edge: c[3] as usize,
        in_channels: c[4] as usize,
        width_scale: c[5],
        lambda_coord: c[6],
        lambda_noobj: c[7],
    };
    // weights are overwritten below; the seed only feeds the throwaway init
    let mut net = DetectorNet::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut res = Ok(());
    net.visit_params(&mut |p| {
        if res.is_ok() {
            res = load_param(&file, p);
        }
    });
    res?;
    let means = load_means(&file, cfg.in_channels)?;
    Ok((net, means))
}

// ---------------------------------------------------------------------------
// segmenter
// ---------------------------------------------------------------------------

fn segmenter_config_vec(cfg: &SegmenterConfig) -> Vec<f32> {
    vec![
        cfg.input_edge as f32,
        cfg.in_channels as f32,
        cfg.width_scale,
        cfg.classes as f32,
    ]
}

pub fn save_segmenter(path: &Path, net: &SegmenterNet, means: &[f32]) -> Result<()> {
    let cfg = net.config();
    let mut file = ModelFile::new();
    file.add("config.segmenter", EntryKind::Meta, &[4], &segmenter_config_vec(cfg))?;
    add_means(&mut file, means, cfg.in_channels)?;
    for p in collected_params(|f| net.visit_params_ref(f)) {
        add_param(&mut file, &p)?;
    }
    let mut bns = Vec::new();
    net.visit_bn_ref(&mut |bn| bns.push(bn.clone()));
    for bn in &bns {
        add_bn(&mut file, bn)?;
    }
    file.save(path)
}

pub fn load_segmenter(path: &Path) -> Result<(SegmenterNet, Vec<f32>)> {
    let file = ModelFile::load(path)?;
    let c = file.require("config.segmenter", &[4])?;
    let cfg = SegmenterConfig {
        input_edge: c[0] as usize,
        in_channels: c[1] as usize,
        width_scale: c[2],
        classes: c[3] as usize,
    };
    let mut net = SegmenterNet::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut res = Ok(());
    net.visit_params(&mut |p| {
        if res.is_ok() {
            res = load_param(&file, p);
        }
    });
    res?;
    let mut res = Ok(());
    net.visit_bn(&mut |bn| {
        if res.is_ok() {
            res = load_bn(&file, bn);
        }
    });
    res?;
    let means = load_means(&file, cfg.in_channels)?;
    Ok((net, means))
}

// ---------------------------------------------------------------------------
// embedder
// ---------------------------------------------------------------------------

fn embedder_config_vec(cfg: &EmbedderConfig) -> Vec<f32> {
    vec![
        cfg.input_edge as f32,
        cfg.in_channels as f32,
        cfg.width_scale,
        cfg.classes as f32,
        cfg.aux_weight,
        cfg.dropout,
    ]
}

pub fn save_embedder(path: &Path, net: &EmbedderNet, means: &[f32]) -> Result<()> {
    let cfg = net.config();
    let mut file = ModelFile::new();
    file.add("config.embedder", EntryKind::Meta, &[6], &embedder_config_vec(cfg))?;
    add_means(&mut file, means, cfg.in_channels)?;
    for p in collected_params(|f| net.visit_params_ref(f)) {
        add_param(&mut file, &p)?;
    }
    let mut bns = Vec::new();
    net.visit_bn_ref(&mut |bn| bns.push(bn.clone()));
    for bn in &bns {
        add_bn(&mut file, bn)?;
    }
    file.save(path)
}

pub fn load_embedder(path: &Path) -> Result<(EmbedderNet, Vec<f32>)> {
    let file = ModelFile::load(path)?;
    let c = file.require("config.embedder", &[6])?;
    let cfg = EmbedderConfig {
        input_edge: c[0] as usize,
        in_channels: c[1] as usize,
        width_scale: c[2],
        classes: c[3] as usize,
        aux_weight: c[4],
        dropout: c[5],
    };
    let mut net = EmbedderNet::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut res = Ok(());
    net.visit_params(&mut |p| {
        if res.is_ok() {
            res = load_param(&file, p);
        }
    });
    res?;
    let mut res = Ok(());
    net.visit_bn(&mut |bn| {
        if res.is_ok() {
            res = load_bn(&file, bn);
        }
    });
    res?;
    let means = load_means(&file, cfg.in_channels)?;
    Ok((net, means))
}
