//! Iris templates: real-valued feature vectors, zero-thresholded binary
//! codes, the similarity metrics over each, and the enrolled gallery.
//!
//! Binary codes pack bit i into word i/64 at bit position i%64 (little-endian
//! bit order); unused tail bits are kept zero so word-level popcounts are
//! exact. An exact-zero activation maps to bit 0. A code occupies 1/32 of the
//! bytes its source f32 vector does, which is the point of having it.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::{Eye, Spectrum};

/// Packed binary code over `dim` bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrisCode {
    dim: usize,
    words: Vec<u64>,
}

impl IrisCode {
    /// Zero-threshold binarization: bit = 1 iff the feature is > 0 (exact
    /// zero maps to 0). Non-finite features are rejected.
    pub fn from_features(features: &[f32]) -> Result<IrisCode> {
        if features.is_empty() {
            return Err(Error::arg("binarize", "empty feature vector"));
        }
        for (i, v) in features.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::arg("binarize", format!("feature {i} is {v}")));
            }
        }
        let dim = features.len();
        let mut words = vec![0u64; dim.div_ceil(64)];
        for (i, v) in features.iter().enumerate() {
            if *v > 0.0 {
                words[i / 64] |= 1u64 << (i % 64);
            }
        }
        Ok(IrisCode { dim, words })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.dim, "bit {i} of a {}-bit code", self.dim);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    /// Fraction of set bits.
    pub fn density(&self) -> f64 {
        let ones: u32 = self.words.iter().map(|w| w.count_ones()).sum();
        ones as f64 / self.dim as f64
    }

    /// Serialized payload: ceil(dim/8) little-endian bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.dim.div_ceil(8));
        for i in 0..self.dim.div_ceil(8) {
            out.push((self.words[i / 8] >> (8 * (i % 8))) as u8);
        }
        out
    }

    pub fn byte_len(dim: usize) -> usize {
        dim.div_ceil(8)
    }

    pub fn from_bytes(dim: usize, bytes: &[u8]) -> Result<IrisCode> {
        if bytes.len() != Self::byte_len(dim) {
            return Err(Error::shape(
                "iris_code",
                format!("{} bytes for a {dim}-bit code (need {})", bytes.len(), Self::byte_len(dim)),
            ));
        }
        let mut words = vec![0u64; dim.div_ceil(64)];
        for (i, b) in bytes.iter().enumerate() {
            words[i / 8] |= (*b as u64) << (8 * (i % 8));
        }
        // mask any tail garbage so popcounts stay exact
        if dim % 64 != 0 {
            let last = words.len() - 1;
            words[last] &= (1u64 << (dim % 64)) - 1;
        }
        Ok(IrisCode { dim, words })
    }

    /// Normalized Hamming distance in [0, 1]: differing bits / total bits.
    pub fn hamming(&self, other: &IrisCode) -> Result<f64> {
        if self.dim != other.dim {
            return Err(Error::shape(
                "hamming",
                format!("codes of {} and {} bits", self.dim, other.dim),
            ));
        }
        let diff: u32 = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum();
        Ok(diff as f64 / self.dim as f64)
    }

    pub fn complement(&self) -> IrisCode {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        if self.dim % 64 != 0 {
            let last = words.len() - 1;
            words[last] &= (1u64 << (self.dim % 64)) - 1;
        }
        IrisCode { dim: self.dim, words }
    }
}

/// Cosine similarity with f64 accumulation. Zero-norm vectors have no
/// direction and are rejected.
pub fn cosine_score(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_score",
            format!("vectors of {} and {} entries", a.len(), b.len()),
        ));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += *x as f64 * *x as f64;
        nb += *y as f64 * *y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::arg("cosine_score", "zero-norm vector has no direction"));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    Hamming,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Hamming => "hamming",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        match s {
            "cosine" => Some(Metric::Cosine),
            "hamming" => Some(Metric::Hamming),
            _ => None,
        }
    }

    /// Whether larger scores mean more similar (cosine) or less (hamming).
    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Cosine)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Template payload; a gallery holds one representation throughout.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Real(Vec<f32>),
    Binary(IrisCode),
}

impl Payload {
    pub fn dim(&self) -> usize {
        match self {
            Payload::Real(v) => v.len(),
            Payload::Binary(c) => c.dim(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Payload::Real(_) => 0,
            Payload::Binary(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrisTemplate {
    pub subject: String,
    pub eye: Eye,
    pub spectrum: Spectrum,
    pub sample: u32,
    pub payload: Payload,
}

impl IrisTemplate {
    /// Unique key: subject, eye, and sample index.
    pub fn key(&self) -> String {
        format!("{}_{}_{:02}", self.subject, self.eye, self.sample)
    }

    /// Identity label for genuine/impostor decisions: subject + eye.
    pub fn identity(&self) -> String {
        format!("{}_{}", self.subject, self.eye)
    }

    pub fn binarized(&self) -> Result<IrisTemplate> {
        match &self.payload {
            Payload::Real(v) => Ok(IrisTemplate {
                payload: Payload::Binary(IrisCode::from_features(v)?),
                ..self.clone()
            }),
            Payload::Binary(_) => Ok(self.clone()),
        }
    }
}

/// Similarity (cosine) or distance (hamming) between two same-representation
/// payloads.
pub fn score_templates(a: &IrisTemplate, b: &IrisTemplate) -> Result<f64> {
    match (&a.payload, &b.payload) {
        (Payload::Real(x), Payload::Real(y)) => cosine_score(x, y),
        (Payload::Binary(x), Payload::Binary(y)) => x.hamming(y),
        _ => Err(Error::arg(
            "score_templates",
            "templates mix real and binary representations",
        )),
    }
}

/// One ranked match.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchEntry {
    pub key: String,
    pub identity: String,
    pub score: f64,
}

/// Immutable enrolled template store; all entries share one representation
/// and dimension.
#[derive(Debug, Clone)]
pub struct Gallery {
    templates: Vec<IrisTemplate>,
}

impl Gallery {
    pub fn new(templates: Vec<IrisTemplate>) -> Result<Gallery> {
        if templates.is_empty() {
            return Err(Error::Uninitialized("gallery built with no templates".into()));
        }
        let tag = templates[0].payload.tag();
        let dim = templates[0].payload.dim();
        let mut keys = std::collections::BTreeSet::new();
        for t in &templates {
            if t.payload.tag() != tag {
                return Err(Error::arg(
                    "gallery",
                    format!("template {} has a different payload representation", t.key()),
                ));
            }
            if t.payload.dim() != dim {
                return Err(Error::shape(
                    "gallery",
                    format!("template {} has dimension {}, gallery uses {dim}", t.key(), t.payload.dim()),
                ));
            }
            if !keys.insert(t.key()) {
                return Err(Error::arg("gallery", format!("duplicate template key {}", t.key())));
            }
        }
        Ok(Gallery { templates })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[IrisTemplate] {
        &self.templates
    }

    pub fn dim(&self) -> usize {
        self.templates[0].payload.dim()
    }

    pub fn is_binary(&self) -> bool {
        matches!(self.templates[0].payload, Payload::Binary(_))
    }

    /// Scores the probe against every template and returns the full ranking:
    /// best first (highest cosine similarity / lowest Hamming distance), ties
    /// broken by ascending key.
    pub fn match_probe(&self, probe: &IrisTemplate) -> Result<Vec<MatchEntry>> {
        let mut entries = Vec::with_capacity(self.templates.len());
        for t in &self.templates {
            entries.push(MatchEntry {
                key: t.key(),
                identity: t.identity(),
                score: score_templates(probe, t)?,
            });
        }
        let better = if self.is_binary() {
            |a: f64, b: f64| a < b // distances rank ascending
        } else {
            |a: f64, b: f64| a > b
        };
        entries.sort_by(|x, y| {
            if better(x.score, y.score) {
                std::cmp::Ordering::Less
            } else if better(y.score, x.score) {
                std::cmp::Ordering::Greater
            } else {
                x.key.cmp(&y.key)
            }
        });
        Ok(entries)
    }

    /// Identity of the best-ranked template.
    pub fn rank1_identity(&self, probe: &IrisTemplate) -> Result<String> {
        Ok(self.match_probe(probe)?[0].identity.clone())
    }
}

// ---------------------------------------------------------------------------
// gallery persistence: fixed-width binary records + text key index
// ---------------------------------------------------------------------------

const GALLERY_MAGIC: &[u8; 4] = b"IGAL";
const GALLERY_VERSION: u32 = 1;

/// Writes `<base>.bin` (header + fixed-width payload records) and
/// `<base>.keys` (text: subject,eye,spectrum,sample per line, record order).
pub fn save_gallery(base: &Path, gallery: &Gallery) -> Result<()> {
    let dim = gallery.dim();
    let mut bin = Vec::new();
    bin.extend_from_slice(GALLERY_MAGIC);
    bin.extend_from_slice(&GALLERY_VERSION.to_le_bytes());
    bin.push(gallery.templates[0].payload.tag());
    bin.extend_from_slice(&[0u8; 3]); // pad to a 4-byte boundary
    bin.extend_from_slice(&(dim as u32).to_le_bytes());
    bin.extend_from_slice(&(gallery.len() as u32).to_le_bytes());
    let mut keys = String::new();
    for t in gallery.templates() {
        match &t.payload {
            Payload::Real(v) => {
                for x in v {
                    bin.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::Binary(c) => bin.extend_from_slice(&c.to_bytes()),
        }
        keys.push_str(&format!("{},{},{},{}\n", t.subject, t.eye, t.spectrum, t.sample));
    }
    let bin_path = base.with_extension("bin");
    fs::write(&bin_path, bin).map_err(|e| Error::io(&bin_path, e))?;
    let key_path = base.with_extension("keys");
    fs::write(&key_path, keys).map_err(|e| Error::io(&key_path, e))?;
    Ok(())
}

pub fn load_gallery(base: &Path) -> Result<Gallery> {
    let bin_path = base.with_extension("bin");
    let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let fail = |detail: String| Error::parse(&bin_path, 0, detail);
    if bin.len() < 20 || &bin[0..4] != GALLERY_MAGIC {
        return Err(fail("not a gallery file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bin[4..8].try_into().unwrap());
    if version != GALLERY_VERSION {
        return Err(fail(format!("unsupported gallery version {version}")));
    }
    let tag = bin[8];
    let dim = u32::from_le_bytes(bin[12..16].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bin[16..20].try_into().unwrap()) as usize;
    let record = match tag {
        0 => dim * 4,
        1 => IrisCode::byte_len(dim),
        t => return Err(fail(format!("unknown representation tag {t}"))),
    };
    if bin.len() != 20 + count * record {
        return Err(fail(format!(
            "payload size {} does not match {count} records of {record} bytes",
            bin.len() - 20
        )));
    }

    let key_path = base.with_extension("keys");
    let keys_text = fs::read_to_string(&key_path).map_err(|e| Error::io(&key_path, e))?;
    let mut metas = Vec::with_capacity(count);
    for (ln, line) in keys_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let fail = |detail: String| Error::parse(&key_path, ln + 1, detail);
        if parts.len() != 4 {
            return Err(fail(format!("expected 4 fields, got {}", parts.len())));
        }
        let eye = Eye::parse(parts[1]).ok_or_else(|| fail(format!("bad eye {:?}", parts[1])))?;
        let spectrum = Spectrum::parse(parts[2])
            .ok_or_else(|| fail(format!("bad spectrum {:?}", parts[2])))?;
        let sample: u32 = parts[3]
            .parse()
            .map_err(|e| fail(format!("bad sample index {:?}: {e}", parts[3])))?;
        metas.push((parts[0].to_string(), eye, spectrum, sample));
    }
    if metas.len() != count {
        return Err(Error::parse(
            &key_path,
            0,
            format!("{} keys for {count} records", metas.len()),
        ));
    }

    let mut templates = Vec::with_capacity(count);
    for (i, (subject, eye, spectrum, sample)) in metas.into_iter().enumerate() {
        let chunk = &bin[20 + i * record..20 + (i + 1) * record];
        let payload = match tag {
            0 => Payload::Real(
                chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            _ => Payload::Binary(IrisCode::from_bytes(dim, chunk)?),
        };
        templates.push(IrisTemplate {
            subject,
            eye,
            spectrum,
            sample,
            payload,
        });
    }
    Gallery::new(templates)
}

/// Match ranking as text: "key,score" with 6 decimals, best first.
pub fn format_match_list(entries: &[MatchEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!("{},{:.6}\n", e.key, e.score));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn code_from_bits(bits: &[bool]) -> IrisCode {
        let feats: Vec<f32> = bits.iter().map(|b| if *b { 1.0 } else { -1.0 }).collect();
        IrisCode::from_features(&feats).unwrap()
    }

    #[test]
    fn binarize_thresholds_at_zero() {
        let code = IrisCode::from_features(&[0.5, -0.5, 0.0, 1e-30, -0.0]).unwrap();
        assert!(code.bit(0));
        assert!(!code.bit(1));
        assert!(!code.bit(2), "exact zero maps to 0");
        assert!(code.bit(3));
        assert!(!code.bit(4), "negative zero maps to 0");
        assert_eq!(code.dim(), 5);
    }

    #[test]
    fn binarize_rejects_non_finite() {
        assert!(IrisCode::from_features(&[1.0, f32::NAN]).is_err());
        assert!(IrisCode::from_features(&[f32::INFINITY]).is_err());
        assert!(IrisCode::from_features(&[]).is_err());
    }

    #[test]
    fn hamming_hand_cases() {
        let a = code_from_bits(&[true, false, true, false]);
        assert_eq!(a.hamming(&a).unwrap(), 0.0);
        assert_eq!(a.hamming(&a.complement()).unwrap(), 1.0);
        let b = code_from_bits(&[true, true, true, false]);
        assert_eq!(a.hamming(&b).unwrap(), 0.25);
        let c = code_from_bits(&[true; 5]);
        assert!(a.hamming(&c).is_err());
    }

    #[test]
    fn byte_round_trip_and_storage_ratio() {
        let feats: Vec<f32> = (0..1024).map(|i| ((i * 37) % 19) as f32 - 9.0).collect();
        let code = IrisCode::from_features(&feats).unwrap();
        let bytes = code.to_bytes();
        assert_eq!(bytes.len(), 128);
        // 1024 f32s serialize to 4096 bytes; the code is exactly 1/32 of that
        assert_eq!(bytes.len() * 32, feats.len() * 4);
        let back = IrisCode::from_bytes(1024, &bytes).unwrap();
        assert_eq!(back, code);
        // non-multiple-of-64 tail
        let small = IrisCode::from_features(&feats[..70]).unwrap();
        let b2 = small.to_bytes();
        assert_eq!(b2.len(), 9);
        assert_eq!(IrisCode::from_bytes(70, &b2).unwrap(), small);
    }

    #[test]
    fn cosine_hand_cases() {
        let a = [1.0f32, 0.0, 0.0];
        let b = [0.0f32, 1.0, 0.0];
        assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert!(cosine_score(&a, &b).unwrap().abs() < 1e-6);
        assert!(cosine_score(&a, &[0.0, 0.0, 0.0]).is_err());
        assert!(cosine_score(&a, &[1.0, 2.0]).is_err());
        let neg = [-1.0f32, 0.0, 0.0];
        assert!((cosine_score(&a, &neg).unwrap() + 1.0).abs() < 1e-6);
    }

    fn template(subject: &str, sample: u32, payload: Payload) -> IrisTemplate {
        IrisTemplate {
            subject: subject.to_string(),
            eye: Eye::Left,
            spectrum: Spectrum::Nir,
            sample,
            payload,
        }
    }

    #[test]
    fn match_probe_ranks_and_breaks_ties_by_key() {
        let g = Gallery::new(vec![
            template("s2", 0, Payload::Real(vec![0.0, 1.0])),
            template("s1", 0, Payload::Real(vec![1.0, 0.0])),
            template("s3", 0, Payload::Real(vec![0.0, 1.0])),
        ])
        .unwrap();
        let probe = template("p", 0, Payload::Real(vec![0.0, 2.0]));
        let ranked = g.match_probe(&probe).unwrap();
        // s2 and s3 tie at similarity 1; key order breaks the tie
        assert_eq!(ranked[0].key, "s2_L_00");
        assert_eq!(ranked[1].key, "s3_L_00");
        assert_eq!(ranked[2].key, "s1_L_00");
        assert_eq!(g.rank1_identity(&probe).unwrap(), "s2_L");
    }

    #[test]
    fn hamming_gallery_ranks_ascending() {
        let near = code_from_bits(&[true, true, true, false]);
        let far = code_from_bits(&[false, false, false, true]);
        let g = Gallery::new(vec![
            template("far", 0, Payload::Binary(far)),
            template("near", 0, Payload::Binary(near)),
        ])
        .unwrap();
        let probe = template("p", 0, Payload::Binary(code_from_bits(&[true, true, true, true])));
        let ranked = g.match_probe(&probe).unwrap();
        assert_eq!(ranked[0].key, "near_L_00");
        assert!(ranked[0].score < ranked[1].score);
    }

    #[test]
    fn gallery_rejects_mixed_representations_and_duplicates() {
        let real = template("a", 0, Payload::Real(vec![1.0, 2.0]));
        let bin = template("b", 0, Payload::Binary(code_from_bits(&[true, false])));
        assert!(Gallery::new(vec![real.clone(), bin]).is_err());
        assert!(Gallery::new(vec![real.clone(), real.clone()]).is_err());
        assert!(Gallery::new(vec![]).is_err());
        let probe_bin = template("p", 0, Payload::Binary(code_from_bits(&[true, false])));
        let g = Gallery::new(vec![real]).unwrap();
        assert!(g.match_probe(&probe_bin).is_err());
    }

    #[test]
    fn gallery_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for binary in [false, true] {
            let make = |s: &str, i: u32, v: Vec<f32>| {
                let payload = if binary {
                    Payload::Binary(IrisCode::from_features(&v).unwrap())
                } else {
                    Payload::Real(v)
                };
                IrisTemplate {
                    subject: s.to_string(),
                    eye: if i % 2 == 0 { Eye::Left } else { Eye::Right },
                    spectrum: Spectrum::Nir,
                    sample: i,
                    payload,
                }
            };
            let g = Gallery::new(vec![
                make("s001", 0, vec![0.25, -1.5, 3.0, 0.0]),
                make("s001", 1, vec![1.0, 2.0, -3.0, 4.0]),
                make("s002", 2, vec![-1.0, -2.0, 3.5, -4.0]),
            ])
            .unwrap();
            let base = dir.path().join(format!("gal_{binary}"));
            save_gallery(&base, &g).unwrap();
            let back = load_gallery(&base).unwrap();
            assert_eq!(back.templates(), g.templates());
        }
    }

    #[test]
    fn binary_gallery_records_are_exactly_one_thirty_second() {
        let dir = tempfile::tempdir().unwrap();
        let feats: Vec<f32> = (0..64).map(|i| i as f32 - 31.5).collect();
        let real = Gallery::new(vec![template("s", 0, Payload::Real(feats.clone()))]).unwrap();
        let bin = Gallery::new(vec![template(
            "s",
            0,
            Payload::Binary(IrisCode::from_features(&feats).unwrap()),
        )])
        .unwrap();
        save_gallery(&dir.path().join("real"), &real).unwrap();
        save_gallery(&dir.path().join("bin"), &bin).unwrap();
        let real_len = std::fs::metadata(dir.path().join("real.bin")).unwrap().len() - 20;
        let bin_len = std::fs::metadata(dir.path().join("bin.bin")).unwrap().len() - 20;
        assert_eq!(real_len, 32 * bin_len);
    }

    #[test]
    fn match_list_formatting() {
        let entries = vec![MatchEntry {
            key: "s001_L_00".into(),
            identity: "s001_L".into(),
            score: 0.98765432,
        }];
        assert_eq!(format_match_list(&entries), "s001_L_00,0.987654\n");
    }

    proptest! {
        #[test]
        fn binarize_matches_sign_oracle(v in proptest::collection::vec(-10.0f32..10.0, 1..200)) {
            let code = IrisCode::from_features(&v).unwrap();
            for (i, x) in v.iter().enumerate() {
                prop_assert_eq!(code.bit(i), *x > 0.0);
            }
        }

        #[test]
        fn hamming_matches_bit_loop_oracle(
            a in proptest::collection::vec(any::<bool>(), 130),
            b in proptest::collection::vec(any::<bool>(), 130),
        ) {
            let ca = code_from_bits(&a);
            let cb = code_from_bits(&b);
            let mut diff = 0usize;
            for i in 0..a.len() {
                if a[i] != b[i] {
                    diff += 1;
                }
            }
            prop_assert_eq!(ca.hamming(&cb).unwrap(), diff as f64 / a.len() as f64);
        }

        #[test]
        fn hamming_is_a_metric(
            a in proptest::collection::vec(any::<bool>(), 96),
            b in proptest::collection::vec(any::<bool>(), 96),
            c in proptest::collection::vec(any::<bool>(), 96),
        ) {
            let (ca, cb, cc) = (code_from_bits(&a), code_from_bits(&b), code_from_bits(&c));
            let (ab, ba) = (ca.hamming(&cb).unwrap(), cb.hamming(&ca).unwrap());
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(ca.hamming(&ca).unwrap(), 0.0);
            prop_assert!((ab == 0.0) == (a == b));
            let (bc, ac) = (cb.hamming(&cc).unwrap(), ca.hamming(&cc).unwrap());
            prop_assert!(ac <= ab + bc + 1e-15);
        }

        #[test]
        fn cosine_is_scale_invariant(
            v in proptest::collection::vec(-5.0f32..5.0, 8),
            w in proptest::collection::vec(-5.0f32..5.0, 8),
            lambda in 0.1f32..10.0,
        ) {
            prop_assume!(v.iter().any(|x| *x != 0.0) && w.iter().any(|x| *x != 0.0));
            let scaled: Vec<f32> = v.iter().map(|x| x * lambda).collect();
            let s1 = cosine_score(&v, &w).unwrap();
            let s2 = cosine_score(&scaled, &w).unwrap();
            prop_assert!((s1 - s2).abs() <= 1e-6, "{} vs {}", s1, s2);
        }

        #[test]
        fn binarize_is_idempotent_on_sign_mapped_values(
            v in proptest::collection::vec(-10.0f32..10.0, 1..100),
        ) {
            let code = IrisCode::from_features(&v).unwrap();
            let mapped: Vec<f32> = (0..v.len()).map(|i| if code.bit(i) { 1.0 } else { -1.0 }).collect();
            let again = IrisCode::from_features(&mapped).unwrap();
            prop_assert_eq!(again, code);
        }
    }
}
