//! Minimal raster support: CHW float images in [0, 1], binary PGM/PPM files,
//! bilinear/nearest resampling, cropping, and annular (ring) sampling.
//!
//! Grayscale images round-trip through 8-bit P5 files, color through P6.
//! Label masks are stored as raw 8-bit P5 with the label values themselves
//! (not scaled to full range), so a mask file is also a valid PGM.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Float image, channel-major (CHW), values nominally in [0, 1].
#[derive(Debug, Clone)]
pub struct Image {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, h: usize, w: usize) -> Self {
        Image {
            channels,
            h,
            w,
            data: vec![0.0; channels * h * w],
        }
    }

    pub fn from_data(channels: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * h * w {
            return Err(Error::shape(
                "image",
                format!(
                    "{channels}x{h}x{w} image needs {} values, got {}",
                    channels * h * w,
                    data.len()
                ),
            ));
        }
        Ok(Image {
            channels,
            h,
            w,
            data,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    /// Batch-of-one NCHW tensor view of the image.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.channels, self.h, self.w], self.data.clone())
            .expect("image invariant: buffer matches extents")
    }

    /// Bilinear read with edge clamping, fractional pixel coordinates.
    pub fn sample_clamped(&self, c: usize, py: f32, px: f32) -> f32 {
        let x0f = px.floor();
        let y0f = py.floor();
        let fx = px - x0f;
        let fy = py - y0f;
        let cl = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let (x0, y0) = (x0f as isize, y0f as isize);
        let v00 = self.at(c, cl(y0, self.h), cl(x0, self.w));
        let v01 = self.at(c, cl(y0, self.h), cl(x0 + 1, self.w));
        let v10 = self.at(c, cl(y0 + 1, self.h), cl(x0, self.w));
        let v11 = self.at(c, cl(y0 + 1, self.h), cl(x0 + 1, self.w));
        v00 * (1.0 - fx) * (1.0 - fy)
            + v01 * fx * (1.0 - fy)
            + v10 * (1.0 - fx) * fy
            + v11 * fx * fy
    }

    /// Bilinear read that returns `fill` once the gather window leaves the
    /// raster entirely (corners outside contribute `fill`).
    pub fn sample_or(&self, c: usize, py: f32, px: f32, fill: f32) -> f32 {
        let x0f = px.floor();
        let y0f = py.floor();
        let fx = px - x0f;
        let fy = py - y0f;
        let (x0, y0) = (x0f as isize, y0f as isize);
        let read = |y: isize, x: isize| -> f32 {
            if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
                fill
            } else {
                self.at(c, y as usize, x as usize)
            }
        };
        read(y0, x0) * (1.0 - fx) * (1.0 - fy)
            + read(y0, x0 + 1) * fx * (1.0 - fy)
            + read(y0 + 1, x0) * (1.0 - fx) * fy
            + read(y0 + 1, x0 + 1) * fx * fy
    }
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

/// Half-pixel-center bilinear resize (the convention shared by mainstream
/// image libraries): src = (dst + 0.5) * in/out - 0.5, edges clamped.
pub fn resize_bilinear(img: &Image, oh: usize, ow: usize) -> Image {
    let mut out = Image::new(img.channels, oh, ow);
    let sy = img.h as f32 / oh as f32;
    let sx = img.w as f32 / ow as f32;
    for c in 0..img.channels {
        for y in 0..oh {
            let py = (y as f32 + 0.5) * sy - 0.5;
            for x in 0..ow {
                let px = (x as f32 + 0.5) * sx - 0.5;
                out.set(c, y, x, img.sample_clamped(c, py, px));
            }
        }
    }
    out
}

/// Nearest-neighbor resize for label rasters.
pub fn resize_nearest(labels: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    assert_eq!(labels.len(), h * w);
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    let mut out = vec![0u8; oh * ow];
    for y in 0..oh {
        let py = (((y as f32 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(h - 1);
        for x in 0..ow {
            let px = (((x as f32 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(w - 1);
            out[y * ow + x] = labels[py * w + px];
        }
    }
    out
}

/// Axis-aligned crop; pixels outside the source read as zero.
pub fn crop(img: &Image, y0: isize, x0: isize, h: usize, w: usize) -> Image {
    let mut out = Image::new(img.channels, h, w);
    for c in 0..img.channels {
        for y in 0..h {
            let sy = y0 + y as isize;
            if sy < 0 || sy >= img.h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x0 + x as isize;
                if sx < 0 || sx >= img.w as isize {
                    continue;
                }
                out.set(c, y, x, img.at(c, sy as usize, sx as usize));
            }
        }
    }
    out
}

/// Samples an annulus between radii r0 (inner) and r1 (outer) around
/// (cy, cx) into a `rows x cols` strip: row = radial step outward, column =
/// angle (counter-clockwise from the +x axis). Out-of-frame reads are zero.
pub fn sample_annulus(
    img: &Image,
    cy: f32,
    cx: f32,
    r0: f32,
    r1: f32,
    rows: usize,
    cols: usize,
) -> Image {
    let mut out = Image::new(img.channels, rows, cols);
    for ri in 0..rows {
        let t = (ri as f32 + 0.5) / rows as f32;
        let r = r0 + t * (r1 - r0);
        for ai in 0..cols {
            let ang = 2.0 * std::f32::consts::PI * (ai as f32 + 0.5) / cols as f32;
            let py = cy + r * ang.sin();
            let px = cx + r * ang.cos();
            for c in 0..img.channels {
                out.set(c, ri, ai, img.sample_or(c, py, px, 0.0));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// PGM / PPM
// ---------------------------------------------------------------------------

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes P5 (1 channel) or P6 (3 channels), maxval 255.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let p = path.display().to_string();
    let (magic, interleave): (&str, bool) = match img.channels {
        1 => ("P5", false),
        3 => ("P6", true),
        c => {
            return Err(Error::arg(
                "save_image",
                format!("{c} channels; only 1 (PGM) or 3 (PPM) supported"),
            ))
        }
    };
    let mut buf = format!("{magic}\n{} {}\n255\n", img.w, img.h).into_bytes();
    if interleave {
        for y in 0..img.h {
            for x in 0..img.w {
                for c in 0..3 {
                    buf.push(quantize(img.at(c, y, x)));
                }
            }
        }
    } else {
        buf.extend(img.plane(0).iter().map(|v| quantize(*v)));
    }
    write_atomic(path, &buf).map_err(|e| Error::io(p, e))
}

/// Raw label raster as P5 with unscaled values; `max_label` bounds validity.
pub fn save_mask(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<()> {
    let p = path.display().to_string();
    if labels.len() != h * w {
        return Err(Error::shape(
            "save_mask",
            format!("{h}x{w} mask needs {} labels, got {}", h * w, labels.len()),
        ));
    }
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(labels);
    write_atomic(path, &buf).map_err(|e| Error::io(p, e))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

struct PnmHeader {
    channels: usize,
    w: usize,
    h: usize,
    data_start: usize,
}

fn parse_pnm_header(bytes: &[u8], path: &str) -> Result<PnmHeader> {
    let channels = match bytes.get(0..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::parse(path, 1, "not a binary PGM/PPM (P5/P6)")),
    };
    // Tokenize: whitespace-separated fields, # starts a comment to EOL.
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::parse(path, 1, "truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, 1, "expected a decimal field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf8");
        *field = text
            .parse()
            .map_err(|_| Error::parse(path, 1, format!("bad field {text:?}")))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::parse(path, 1, format!("maxval {maxval}, expected 255")));
    }
    if bytes.get(pos).map_or(true, |b| !b.is_ascii_whitespace()) {
        return Err(Error::parse(path, 1, "missing whitespace before pixel data"));
    }
    Ok(PnmHeader {
        channels,
        w,
        h,
        data_start: pos + 1,
    })
}

/// Loads a P5/P6 file as floats in [0, 1].
pub fn load_image(path: &Path) -> Result<Image> {
    let p = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(p.clone(), e))?;
    let hd = parse_pnm_header(&bytes, &p)?;
    let need = hd.channels * hd.w * hd.h;
    let raw = bytes
        .get(hd.data_start..hd.data_start + need)
        .ok_or_else(|| Error::parse(&p, 1, format!("pixel payload shorter than {need} bytes")))?;
    let mut img = Image::new(hd.channels, hd.h, hd.w);
    if hd.channels == 1 {
        for (d, b) in img.data.iter_mut().zip(raw) {
            *d = *b as f32 / 255.0;
        }
    } else {
        for y in 0..hd.h {
            for x in 0..hd.w {
                for c in 0..3 {
                    img.set(c, y, x, raw[(y * hd.w + x) * 3 + c] as f32 / 255.0);
                }
            }
        }
    }
    Ok(img)
}

/// Loads a label mask stored by [`save_mask`]; every label must be at most
/// `max_label`.
pub fn load_mask(path: &Path, max_label: u8) -> Result<(Vec<u8>, usize, usize)> {
    let p = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(p.clone(), e))?;
    let hd = parse_pnm_header(&bytes, &p)?;
    if hd.channels != 1 {
        return Err(Error::parse(&p, 1, "mask must be single-channel P5"));
    }
    let need = hd.w * hd.h;
    let raw = bytes
        .get(hd.data_start..hd.data_start + need)
        .ok_or_else(|| Error::parse(&p, 1, format!("label payload shorter than {need} bytes")))?;
    if let Some(bad) = raw.iter().position(|b| *b > max_label) {
        return Err(Error::parse(
            &p,
            1,
            format!(
                "label {} at pixel {bad} exceeds maximum {max_label}",
                raw[bad]
            ),
        ));
    }
    Ok((raw.to_vec(), hd.h, hd.w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_image_round_trips_through_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let img = Image::from_data(
            1,
            2,
            3,
            vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.33],
        )
        .unwrap();
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!((back.channels, back.h, back.w), (1, 2, 3));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6, "{a} vs {b}");
        }
        // Quantize-stability: a second round trip is bit-exact.
        save_image(&path, &back).unwrap();
        let again = load_image(&path).unwrap();
        assert_eq!(back.data, again.data);
    }

    #[test]
    fn color_image_round_trips_through_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let img = Image::from_data(3, 1, 2, vec![0.1, 0.9, 0.2, 0.8, 0.3, 0.7]).unwrap();
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!((back.channels, back.h, back.w), (3, 1, 2));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn mask_labels_validate_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        save_mask(&path, &[0, 1, 2, 2], 2, 2).unwrap();
        let (labels, h, w) = load_mask(&path, 2).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(labels, vec![0, 1, 2, 2]);
        let err = load_mask(&path, 1).unwrap_err();
        assert!(err.to_string().contains("label 2"), "{err}");
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        fs::write(&path, b"P5\n# made by hand\n2 1\n255\n\x10\x20").unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!((img.h, img.w), (1, 2));
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = Image::from_data(1, 4, 4, vec![0.5; 16]).unwrap();
        let out = resize_bilinear(&img, 7, 3);
        assert!(out.data.iter().all(|v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn resize_to_same_extent_is_identity() {
        let img = Image::from_data(1, 3, 5, (0..15).map(|i| i as f32 / 15.0).collect()).unwrap();
        let out = resize_bilinear(&img, 3, 5);
        for (a, b) in img.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_fills_outside_with_zero() {
        let img = Image::from_data(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = crop(&img, -1, 0, 2, 2);
        assert_eq!(out.data, vec![0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn annulus_sampling_reads_rings() {
        // Image with value = distance band: inner disc 0.2, ring 0.8.
        let mut img = Image::new(1, 21, 21);
        for y in 0..21 {
            for x in 0..21 {
                let d = (((y as f32 - 10.0).powi(2) + (x as f32 - 10.0).powi(2)) as f32).sqrt();
                img.set(0, y, x, if d < 5.0 { 0.2 } else { 0.8 });
            }
        }
        let strip = sample_annulus(&img, 10.0, 10.0, 1.0, 4.0, 4, 16);
        // all radii below 5 -> entirely inner value
        assert!(strip.data.iter().all(|v| (v - 0.2).abs() < 0.05));
        let strip = sample_annulus(&img, 10.0, 10.0, 6.0, 9.0, 4, 16);
        assert!(strip.data.iter().all(|v| (v - 0.8).abs() < 0.05));
    }
}
