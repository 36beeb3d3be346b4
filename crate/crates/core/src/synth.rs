//! Synthetic eye-image generator with pixel-exact annotations.
//!
//! Each (subject, eye) pair owns a fixed radial-angular texture spectrum;
//! each shot draws a pose (center jitter, radius scale, pupil dilation, lid
//! opening, lighting, noise). The texture is anchored to the normalized
//! annulus coordinate (rho = 0 at the pupil edge, 1 at the iris edge), so it
//! deforms with the pupil exactly like live tissue under a rubber-sheet
//! model and stays matchable across dilation.
//!
//! Mask labels: 0 background/occluded, 1 visible iris, 2 pupil. Boxes bound
//! the full geometric discs, so every labeled pixel center falls inside its
//! class box by construction; augmentation preserves that invariant or skips
//! the variant.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::{BBox, ObjClass};
use crate::error::{Error, Result};
use crate::image::{load_image, load_mask, save_image, save_mask, Image};
use crate::nn::gaussian;
use crate::tensor::Tensor;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_IRIS: u8 = 1;
pub const LABEL_PUPIL: u8 = 2;
pub const NUM_LABELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Spectrum {
    Nir,
    Vis,
}

impl Spectrum {
    pub fn channels(self) -> usize {
        match self {
            Spectrum::Nir => 1,
            Spectrum::Vis => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Spectrum::Nir => "nir",
            Spectrum::Vis => "vis",
        }
    }

    pub fn parse(s: &str) -> Option<Spectrum> {
        match s {
            "nir" => Some(Spectrum::Nir),
            "vis" => Some(Spectrum::Vis),
            _ => None,
        }
    }
}

impl fmt::Display for Spectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Eye {
    Left,
    Right,
}

impl Eye {
    pub fn as_str(self) -> &'static str {
        match self {
            Eye::Left => "L",
            Eye::Right => "R",
        }
    }

    pub fn parse(s: &str) -> Option<Eye> {
        match s {
            "L" => Some(Eye::Left),
            "R" => Some(Eye::Right),
            _ => None,
        }
    }
}

impl fmt::Display for Eye {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const HARMONICS: usize = 8;

/// Per-(subject, eye) appearance: what stays constant across shots.
#[derive(Debug, Clone)]
pub struct SyntheticIdentity {
    pub iris_radius_frac: f32, // iris radius as a fraction of the image edge
    pub pupil_ratio: f32,      // pupil radius / iris radius at rest
    pub iris_base: f32,
    pub sclera_base: f32,
    pub pupil_base: f32,
    pub skin_base: f32,
    pub texture_amp: f32,
    pub lid_curvature: f32,
    // texture spectrum: amplitude, angular order, angular phase, radial
    // order, radial phase
    pub amp: [f32; HARMONICS],
    pub ang_order: [f32; HARMONICS],
    pub ang_phase: [f32; HARMONICS],
    pub rad_order: [f32; HARMONICS],
    pub rad_phase: [f32; HARMONICS],
    // visible-light tint (ignored for NIR)
    pub iris_tint: [f32; 3],
}

impl SyntheticIdentity {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut amp = [0.0f32; HARMONICS];
        let mut ang_order = [0.0f32; HARMONICS];
        let mut ang_phase = [0.0f32; HARMONICS];
        let mut rad_order = [0.0f32; HARMONICS];
        let mut rad_phase = [0.0f32; HARMONICS];
        let mut amp_sum = 0.0f32;
        for k in 0..HARMONICS {
            amp[k] = rng.gen_range(0.3..1.0);
            amp_sum += amp[k];
            ang_order[k] = rng.gen_range(2..18) as f32;
            ang_phase[k] = rng.gen_range(0.0..std::f32::consts::TAU);
            rad_order[k] = rng.gen_range(1..6) as f32;
            rad_phase[k] = rng.gen_range(0.0..std::f32::consts::TAU);
        }
        for a in amp.iter_mut() {
            *a /= amp_sum; // sum of |amplitudes| = 1 keeps texture in [-1, 1]
        }
        SyntheticIdentity {
            iris_radius_frac: rng.gen_range(0.30..0.36),
            pupil_ratio: rng.gen_range(0.28..0.42),
            iris_base: rng.gen_range(0.38..0.52),
            sclera_base: rng.gen_range(0.78..0.86),
            pupil_base: rng.gen_range(0.03..0.08),
            skin_base: rng.gen_range(0.60..0.72),
            texture_amp: rng.gen_range(0.25..0.40),
            lid_curvature: rng.gen_range(0.45..0.85),
            amp,
            ang_order,
            ang_phase,
            rad_order,
            rad_phase,
            iris_tint: [
                rng.gen_range(0.35..0.95),
                rng.gen_range(0.45..0.95),
                rng.gen_range(0.55..1.0),
            ],
        }
    }

    /// Radial-angular texture value in [-1, 1]; `rho` is 0 at the pupil
    /// boundary and 1 at the iris boundary.
    pub fn texture(&self, rho: f32, theta: f32) -> f32 {
        let mut t = 0.0f32;
        for k in 0..HARMONICS {
            t += self.amp[k]
                * (self.ang_order[k] * theta + self.ang_phase[k]).cos()
                * (self.rad_order[k] * std::f32::consts::PI * rho + self.rad_phase[k]).cos();
        }
        t
    }
}

/// Per-shot capture conditions.
#[derive(Debug, Clone)]
pub struct Pose {
    pub center_dy: f32, // fraction of edge
    pub center_dx: f32,
    pub radius_scale: f32,
    pub pupil_dilation: f32,
    pub lid_open: f32,
    pub grad_y: f32,
    pub grad_x: f32,
    pub noise_sigma: f32,
    pub noise_seed: u64,
}

impl Pose {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Pose {
            center_dy: rng.gen_range(-0.04..0.04),
            center_dx: rng.gen_range(-0.04..0.04),
            radius_scale: rng.gen_range(0.92..1.08),
            pupil_dilation: rng.gen_range(0.85..1.15),
            lid_open: rng.gen_range(0.78..1.0),
            grad_y: rng.gen_range(-0.06..0.06),
            grad_x: rng.gen_range(-0.06..0.06),
            noise_sigma: rng.gen_range(0.005..0.015),
            noise_seed: rng.gen(),
        }
    }

    /// A neutral pose: centered, resting pupil, lid fully open, no noise.
    pub fn neutral() -> Self {
        Pose {
            center_dy: 0.0,
            center_dx: 0.0,
            radius_scale: 1.0,
            pupil_dilation: 1.0,
            lid_open: 1.0,
            grad_y: 0.0,
            grad_x: 0.0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }
}

/// An image with its pixel-exact annotations.
#[derive(Debug, Clone)]
pub struct AnnotatedSample {
    pub image: Image,
    pub mask: Vec<u8>, // image.h * image.w labels
    pub boxes: Vec<BBox>,
    pub subject: u32,
    pub eye: Eye,
    pub spectrum: Spectrum,
}

impl AnnotatedSample {
    pub fn find_box(&self, class: ObjClass) -> Option<&BBox> {
        self.boxes.iter().find(|b| b.class == class)
    }

    /// Key identifying who this sample belongs to (matching treats each eye
    /// as its own identity).
    pub fn identity_key(&self) -> String {
        format!("s{:03}_{}", self.subject, self.eye)
    }
}

/// Renders one eye image with mask and boxes. The sampled parameter ranges
/// always keep the discs inside the frame; hand-built parameters that push
/// the iris out or collapse the pupil/iris gap are rejected.
pub fn render_eye(
    id: &SyntheticIdentity,
    pose: &Pose,
    spectrum: Spectrum,
    edge: usize,
    subject: u32,
    eye: Eye,
) -> Result<AnnotatedSample> {
    let e = edge as f32;
    let cy = e * (0.5 + pose.center_dy);
    let cx = e * (0.5 + pose.center_dx);
    let r_iris = e * id.iris_radius_frac * pose.radius_scale;
    let r_pupil = (r_iris * id.pupil_ratio * pose.pupil_dilation).min(r_iris * 0.48);
    if !(r_pupil > 0.0 && r_pupil < r_iris) {
        return Err(Error::arg(
            "render_eye",
            format!("pupil radius {r_pupil} must sit strictly inside iris radius {r_iris}"),
        ));
    }
    if cx - r_iris < 0.0 || cy - r_iris < 0.0 || cx + r_iris > e || cy + r_iris > e {
        return Err(Error::arg(
            "render_eye",
            format!("iris disc (center {cx},{cy}, radius {r_iris}) leaves the {edge}px frame"),
        ));
    }
    let lid_base = cy - pose.lid_open * r_iris;

    let channels = spectrum.channels();
    let mut img = Image::new(channels, edge, edge);
    let mut mask = vec![LABEL_BACKGROUND; edge * edge];
    let mut noise_rng = ChaCha8Rng::seed_from_u64(pose.noise_seed);

    // channel tints: NIR is untinted; VIS tints iris by identity eye color,
    // sclera warm white, skin warm.
    let tint_for = |region: u8| -> [f32; 3] {
        match (spectrum, region) {
            (Spectrum::Nir, _) => [1.0, 1.0, 1.0],
            (Spectrum::Vis, LABEL_IRIS) => id.iris_tint,
            (Spectrum::Vis, LABEL_PUPIL) => [1.0, 1.0, 1.0],
            (Spectrum::Vis, _) => [1.0, 0.94, 0.90],
        }
    };

    for y in 0..edge {
        let py = y as f32 + 0.5;
        for x in 0..edge {
            let px = x as f32 + 0.5;
            let dy = py - cy;
            let dx = px - cx;
            let d = (dy * dy + dx * dx).sqrt();
            let lid_y = lid_base + id.lid_curvature * dx * dx / r_iris;
            let under_lid = py < lid_y;

            let (region, mut val) = if d < r_pupil {
                (LABEL_PUPIL, id.pupil_base)
            } else if d < r_iris && !under_lid {
                let rho = (d - r_pupil) / (r_iris - r_pupil);
                let theta = dy.atan2(dx);
                (
                    LABEL_IRIS,
                    id.iris_base + 0.5 * id.texture_amp * id.texture(rho, theta),
                )
            } else if under_lid {
                // skin over the eye, softly darker toward the lash line
                let t = ((lid_y - py) / (0.25 * r_iris)).min(1.0);
                (LABEL_BACKGROUND, id.skin_base - 0.08 * (1.0 - t))
            } else {
                (LABEL_BACKGROUND, id.sclera_base)
            };

            val += pose.grad_x * (px / e - 0.5) + pose.grad_y * (py / e - 0.5);
            let noise = gaussian(&mut noise_rng) * pose.noise_sigma;
            let tint = tint_for(region);
            for c in 0..channels {
                img.set(c, y, x, (val * tint[c] + noise).clamp(0.0, 1.0));
            }
            mask[y * edge + x] = region;
        }
    }

    let boxes = vec![
        BBox::new(ObjClass::Iris, cx / e, cy / e, 2.0 * r_iris / e, 2.0 * r_iris / e),
        BBox::new(ObjClass::Pupil, cx / e, cy / e, 2.0 * r_pupil / e, 2.0 * r_pupil / e),
    ];

    Ok(AnnotatedSample {
        image: img,
        mask,
        boxes,
        subject,
        eye,
        spectrum,
    })
}

/// Seed-driven shot: the pose is derived entirely from `pose_seed`, so the
/// same (identity, seed) pair regenerates a bit-identical sample.
pub fn synth_eye(
    id: &SyntheticIdentity,
    pose_seed: u64,
    spectrum: Spectrum,
    edge: usize,
    subject: u32,
    eye: Eye,
) -> Result<AnnotatedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(pose_seed);
    render_eye(id, &Pose::sample(&mut rng), spectrum, edge, subject, eye)
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

fn shift_sample(s: &AnnotatedSample, dy: isize, dx: isize) -> Option<AnnotatedSample> {
    let (h, w) = (s.image.h, s.image.w);
    let mut img = Image::new(s.image.channels, h, w);
    let mut mask = vec![LABEL_BACKGROUND; h * w];
    for y in 0..h {
        let sy = y as isize - dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize - dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            for c in 0..s.image.channels {
                img.set(c, y, x, s.image.at(c, sy as usize, sx as usize));
            }
            mask[y * w + x] = s.mask[sy as usize * w + sx as usize];
        }
    }
    let mut boxes = Vec::with_capacity(s.boxes.len());
    for b in &s.boxes {
        let nb = BBox::new(
            b.class,
            b.cx + dx as f32 / w as f32,
            b.cy + dy as f32 / h as f32,
            b.w,
            b.h,
        );
        let (l, t, r, bo) = nb.edges();
        if l < 0.0 || t < 0.0 || r > 1.0 || bo > 1.0 {
            return None; // object would leave the frame
        }
        boxes.push(nb);
    }
    Some(AnnotatedSample {
        image: img,
        mask,
        boxes,
        ..(*s).clone()
    })
}

/// Per-class bounds of mask pixel centers in normalized coords, if any.
fn mask_extent(mask: &[u8], h: usize, w: usize, label: u8) -> Option<(f32, f32, f32, f32)> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] == label {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    any.then(|| {
        (
            (x0 as f32 + 0.5) / w as f32,
            (y0 as f32 + 0.5) / h as f32,
            (x1 as f32 + 0.5) / w as f32,
            (y1 as f32 + 0.5) / h as f32,
        )
    })
}

fn label_of(class: ObjClass) -> u8 {
    match class {
        ObjClass::Iris => LABEL_IRIS,
        ObjClass::Pupil => LABEL_PUPIL,
    }
}

fn scale_sample(s: &AnnotatedSample, f: f32) -> Option<AnnotatedSample> {
    let (h, w) = (s.image.h, s.image.w);
    let mut img = Image::new(s.image.channels, h, w);
    let mut mask = vec![LABEL_BACKGROUND; h * w];
    let (hc, wc) = (h as f32 / 2.0, w as f32 / 2.0);
    for y in 0..h {
        let sy = hc + (y as f32 + 0.5 - hc) / f;
        for x in 0..w {
            let sx = wc + (x as f32 + 0.5 - wc) / f;
            for c in 0..s.image.channels {
                img.set(c, y, x, s.image.sample_or(c, sy - 0.5, sx - 0.5, 0.0));
            }
            let iy = sy.floor();
            let ix = sx.floor();
            if iy >= 0.0 && ix >= 0.0 && iy < h as f32 && ix < w as f32 {
                mask[y * w + x] = s.mask[iy as usize * w + ix as usize];
            }
        }
    }
    let mut boxes = Vec::with_capacity(s.boxes.len());
    for b in &s.boxes {
        // analytic transform about the image center, then widened just enough
        // to cover every surviving mask pixel center of the class (nearest
        // resampling can spill at most ~one pixel past the analytic edge)
        let (mut l, mut t, mut r, mut bo) = BBox::new(
            b.class,
            0.5 + (b.cx - 0.5) * f,
            0.5 + (b.cy - 0.5) * f,
            b.w * f,
            b.h * f,
        )
        .edges();
        if let Some((mx0, my0, mx1, my1)) = mask_extent(&mask, h, w, label_of(b.class)) {
            l = l.min(mx0 - 0.5 / w as f32);
            t = t.min(my0 - 0.5 / h as f32);
            r = r.max(mx1 + 0.5 / w as f32);
            bo = bo.max(my1 + 0.5 / h as f32);
        }
        if l < 0.0 || t < 0.0 || r > 1.0 || bo > 1.0 {
            return None;
        }
        boxes.push(BBox::new(b.class, (l + r) / 2.0, (t + bo) / 2.0, r - l, bo - t));
    }
    Some(AnnotatedSample {
        image: img,
        mask,
        boxes,
        ..(*s).clone()
    })
}

fn flip_sample(s: &AnnotatedSample) -> AnnotatedSample {
    let (h, w) = (s.image.h, s.image.w);
    let mut img = Image::new(s.image.channels, h, w);
    let mut mask = vec![LABEL_BACKGROUND; h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..s.image.channels {
                img.set(c, y, x, s.image.at(c, y, w - 1 - x));
            }
            mask[y * w + x] = s.mask[y * w + (w - 1 - x)];
        }
    }
    let boxes = s
        .boxes
        .iter()
        .map(|b| BBox::new(b.class, 1.0 - b.cx, b.cy, b.w, b.h))
        .collect();
    AnnotatedSample {
        image: img,
        mask,
        boxes,
        ..(*s).clone()
    }
}

pub const SCALE_FACTORS: [f32; 3] = [0.8, 0.9, 1.1];
pub const SHIFT_FRACTION: f32 = 0.08;

/// Expands one sample into its training variants: the original, four
/// axis-aligned shifts of +-8% of the edge, and three rescales; with
/// `include_flip` a horizontal mirror joins the set. Variants whose boxes
/// would leave the frame are dropped; the second return value counts them.
pub fn augment(s: &AnnotatedSample, include_flip: bool) -> (Vec<AnnotatedSample>, usize) {
    let d = ((s.image.w as f32 * SHIFT_FRACTION).round() as isize).max(1);
    let mut out = vec![s.clone()];
    let mut skipped = 0;
    for (dy, dx) in [(d, 0), (-d, 0), (0, d), (0, -d)] {
        match shift_sample(s, dy, dx) {
            Some(v) => out.push(v),
            None => skipped += 1,
        }
    }
    for f in SCALE_FACTORS {
        match scale_sample(s, f) {
            Some(v) => out.push(v),
            None => skipped += 1,
        }
    }
    if include_flip {
        out.push(flip_sample(s));
    }
    (out, skipped)
}

// ---------------------------------------------------------------------------
// polar strip <-> square remap
// ---------------------------------------------------------------------------

/// Re-tiles an `h x 4h` strip into a `2h x 2h` square: the left half of the
/// strip becomes the top block, the right half the bottom. A pure pixel
/// permutation, inverted exactly by [`polar_restore`].
pub fn polar_remap(strip: &Image) -> Result<Image> {
    let h = strip.h;
    if strip.w != 4 * h || h == 0 {
        return Err(Error::shape(
            "polar_remap",
            format!("need h x 4h strip, got {}x{}", strip.h, strip.w),
        ));
    }
    let mut out = Image::new(strip.channels, 2 * h, 2 * h);
    for c in 0..strip.channels {
        for y in 0..2 * h {
            let (sy, off) = if y < h { (y, 0) } else { (y - h, 2 * h) };
            for x in 0..2 * h {
                out.set(c, y, x, strip.at(c, sy, off + x));
            }
        }
    }
    Ok(out)
}

/// Inverse of [`polar_remap`].
pub fn polar_restore(square: &Image) -> Result<Image> {
    let e = square.h;
    if square.w != e || e % 2 != 0 || e == 0 {
        return Err(Error::shape(
            "polar_restore",
            format!("need even square, got {}x{}", square.h, square.w),
        ));
    }
    let h = e / 2;
    let mut out = Image::new(square.channels, h, 4 * h);
    for c in 0..square.channels {
        for y in 0..h {
            for x in 0..2 * h {
                out.set(c, y, x, square.at(c, y, x));
                out.set(c, y, 2 * h + x, square.at(c, y + h, x));
            }
        }
    }
    Ok(out)
}

/// Resizes to `edge` square and subtracts per-channel means, producing a
/// [1, C, edge, edge] tensor. `means` must have one entry per channel.
pub fn preprocess(img: &Image, edge: usize, means: &[f32]) -> Result<Tensor> {
    if means.len() != img.channels {
        return Err(Error::shape(
            "preprocess",
            format!("{} means for {} channels", means.len(), img.channels),
        ));
    }
    let resized = if img.h == edge && img.w == edge {
        img.clone()
    } else {
        crate::image::resize_bilinear(img, edge, edge)
    };
    let mut data = resized.data;
    for c in 0..img.channels {
        let m = means[c];
        for v in &mut data[c * edge * edge..(c + 1) * edge * edge] {
            *v -= m;
        }
    }
    Tensor::new(vec![1, img.channels, edge, edge], data)
}

/// Per-channel means over a set of images (all must share channel count).
pub fn channel_means(images: &[&Image]) -> Vec<f32> {
    if images.is_empty() {
        return Vec::new();
    }
    let channels = images[0].channels;
    let mut sums = vec![0.0f64; channels];
    let mut counts = vec![0.0f64; channels];
    for img in images {
        for c in 0..channels {
            for v in img.plane(c) {
                sums[c] += *v as f64;
            }
            counts[c] += (img.h * img.w) as f64;
        }
    }
    sums.iter().zip(&counts).map(|(s, n)| (s / n) as f32).collect()
}

// ---------------------------------------------------------------------------
// dataset generation and on-disk form
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub subjects: u32,
    pub shots_per_eye: u32,
    pub edge: usize,
    pub spectrum: Spectrum,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            subjects: 8,
            shots_per_eye: 4,
            edge: 128,
            spectrum: Spectrum::Nir,
            seed: 7,
        }
    }
}

/// Generates all samples in memory, deterministically for a given config.
/// Identities are re-derived from (seed, subject, eye) so the stream does not
/// depend on iteration history.
pub fn generate(cfg: &GenConfig) -> Vec<AnnotatedSample> {
    let mut out = Vec::with_capacity((cfg.subjects * 2 * cfg.shots_per_eye) as usize);
    for subject in 0..cfg.subjects {
        for eye in [Eye::Left, Eye::Right] {
            let tag = ((subject as u64) << 20) | ((eye == Eye::Right) as u64) << 8;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000 ^ tag);
            let id = SyntheticIdentity::sample(&mut rng);
            for _ in 0..cfg.shots_per_eye {
                let pose = Pose::sample(&mut rng);
                let s = render_eye(&id, &pose, cfg.spectrum, cfg.edge, subject, eye)
                    .expect("sampled geometry stays in frame by construction");
                out.push(s);
            }
        }
    }
    out
}

fn sample_stem(s: &AnnotatedSample, shot: usize) -> String {
    format!("s{:03}_{}_{}_{:02}", s.subject, s.eye, s.spectrum, shot)
}

fn format_boxes(boxes: &[BBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            b.class.name(),
            b.cx,
            b.cy,
            b.w,
            b.h
        ));
    }
    out
}

pub fn parse_boxes(text: &str, path: &Path) -> Result<Vec<BBox>> {
    let mut boxes = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let fail = |detail: String| Error::parse(path, ln + 1, detail);
        if parts.len() != 5 {
            return Err(fail(format!("expected 5 comma-separated fields, got {}", parts.len())));
        }
        let class = ObjClass::from_name(parts[0])
            .ok_or_else(|| fail(format!("unknown class {:?}", parts[0])))?;
        let mut nums = [0.0f32; 4];
        for (i, p) in parts[1..].iter().enumerate() {
            nums[i] = p
                .parse()
                .map_err(|e| fail(format!("bad number {p:?}: {e}")))?;
        }
        boxes.push(BBox::new(class, nums[0], nums[1], nums[2], nums[3]));
    }
    Ok(boxes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub boxes: String,
    pub subject: u32,
    pub eye: Eye,
    pub spectrum: Spectrum,
}

const MANIFEST_HEADER: &str = "image,mask,boxes,subject,eye,spectrum";

/// Writes images (PGM/PPM), masks (PGM of raw labels), box lists, and a
/// manifest.csv tying them together. Returns the manifest entries in order.
pub fn gen_dataset(cfg: &GenConfig, dir: &Path) -> Result<Vec<ManifestEntry>> {
    let samples = generate(cfg);
    for sub in ["images", "masks", "boxes"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(&dir.join(sub), e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let mut shot_counter: BTreeMap<(u32, Eye), usize> = BTreeMap::new();
    for s in &samples {
        let shot = shot_counter.entry((s.subject, s.eye)).or_insert(0);
        let stem = sample_stem(s, *shot);
        *shot += 1;
        let img_ext = if s.spectrum == Spectrum::Vis { "ppm" } else { "pgm" };
        let entry = ManifestEntry {
            image: format!("images/{stem}.{img_ext}"),
            mask: format!("masks/{stem}_mask.pgm"),
            boxes: format!("boxes/{stem}.txt"),
            subject: s.subject,
            eye: s.eye,
            spectrum: s.spectrum,
        };
        save_image(&dir.join(&entry.image), &s.image)?;
        save_mask(&dir.join(&entry.mask), &s.mask, s.image.h, s.image.w)?;
        let bpath = dir.join(&entry.boxes);
        fs::write(&bpath, format_boxes(&s.boxes)).map_err(|e| Error::io(&bpath, e))?;
        manifest.push_str(&format!(
            "{},{},{},{},{},{}\n",
            entry.image, entry.mask, entry.boxes, entry.subject, entry.eye, entry.spectrum
        ));
        entries.push(entry);
    }
    let mpath = dir.join("manifest.csv");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mpath = dir.join("manifest.csv");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        other => {
            return Err(Error::parse(
                &mpath,
                1,
                format!("expected header {MANIFEST_HEADER:?}, got {:?}", other.map(|(_, h)| h)),
            ))
        }
    }
    let mut entries = Vec::new();
    for (ln, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let fail = |detail: String| Error::parse(&mpath, ln + 1, detail);
        if parts.len() != 6 {
            return Err(fail(format!("expected 6 fields, got {}", parts.len())));
        }
        entries.push(ManifestEntry {
            image: parts[0].to_string(),
            mask: parts[1].to_string(),
            boxes: parts[2].to_string(),
            subject: parts[3]
                .parse()
                .map_err(|e| fail(format!("bad subject {:?}: {e}", parts[3])))?,
            eye: Eye::parse(parts[4]).ok_or_else(|| fail(format!("bad eye {:?}", parts[4])))?,
            spectrum: Spectrum::parse(parts[5])
                .ok_or_else(|| fail(format!("bad spectrum {:?}", parts[5])))?,
        });
    }
    Ok(entries)
}

pub fn load_sample(dir: &Path, entry: &ManifestEntry) -> Result<AnnotatedSample> {
    let image = load_image(&dir.join(&entry.image))?;
    let (mask, mh, mw) = load_mask(&dir.join(&entry.mask), (NUM_LABELS - 1) as u8)?;
    if (mh, mw) != (image.h, image.w) {
        return Err(Error::shape(
            "load_sample",
            format!("mask {mh}x{mw} vs image {}x{}", image.h, image.w),
        ));
    }
    let bpath = dir.join(&entry.boxes);
    let btext = fs::read_to_string(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let boxes = parse_boxes(&btext, &bpath)?;
    Ok(AnnotatedSample {
        image,
        mask,
        boxes,
        subject: entry.subject,
        eye: entry.eye,
        spectrum: entry.spectrum,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<AnnotatedSample>> {
    read_manifest(dir)?
        .iter()
        .map(|e| load_sample(dir, e))
        .collect()
}

/// Relative paths of every file a dataset directory holds, for integrity
/// hashing: manifest first, then each entry's files in manifest order.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = vec![PathBuf::from("manifest.csv")];
    for e in read_manifest(dir)? {
        files.push(PathBuf::from(e.image));
        files.push(PathBuf::from(e.mask));
        files.push(PathBuf::from(e.boxes));
    }
    Ok(files)
}
