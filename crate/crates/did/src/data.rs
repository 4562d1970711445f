//! Dataset ingestion, deterministic preprocessing, and the seeded synthetic
//! multi-domain forgery generator.
//!
//! Synthetic real images are smooth random fields (2-5 Gaussian blobs plus a
//! low-frequency sinusoid). A fake of domain j starts from a fresh real field
//! and corrupts it inside a random ellipse: j=1 additive checkerboard, j=2
//! local Gaussian blur, j=3 local gamma warp, j=4 additive high-frequency
//! sinusoid; families 5+ cycle with perturbed parameters. Every family also
//! adds the shared cue - a bright ridge along the ellipse boundary that
//! elevates local gradient energy - which is the domain-invariant "deepfake"
//! signal. The interior texture is the domain-specific signal.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DidError, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

// ---- core types -------------------------------------------------------------

/// One image with binary real/fake label and one-hot domain vector.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Grayscale H x W, values in [0,1].
    pub image: Tensor,
    /// 0 real, 1 fake.
    pub label: u8,
    /// One-hot over k+1 domains; index 0 is the real domain.
    pub domain: Vec<u8>,
}

impl Sample {
    pub fn new(image: Tensor, label: u8, domain: Vec<u8>) -> Result<Self> {
        let ones = domain.iter().filter(|&&v| v == 1).count();
        if ones != 1 || domain.iter().any(|&v| v > 1) {
            return Err(DidError::Data(
                "domain vector must be one-hot over k+1 entries".into(),
            ));
        }
        let idx = domain.iter().position(|&v| v == 1).unwrap();
        match (label, idx) {
            (0, 0) | (1, _) if label == 1 && idx >= 1 || label == 0 => {}
            _ => {
                return Err(DidError::Data(format!(
                    "label {label} inconsistent with domain index {idx}"
                )))
            }
        }
        Ok(Sample {
            image,
            label,
            domain,
        })
    }

    pub fn domain_index(&self) -> usize {
        self.domain.iter().position(|&v| v == 1).expect("one-hot")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub label: u8,
    pub domain: usize,
}

/// A dataset listing: records plus the fake-domain count k. Relative record
/// paths resolve against `base_dir`.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub k: usize,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn class_counts(&self) -> (usize, usize) {
        let fakes = self.records.iter().filter(|r| r.label == 1).count();
        (self.records.len() - fakes, fakes)
    }
}

/// Parameters of the synthetic dataset generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    /// Fake-domain count.
    pub k: usize,
    pub samples_per_domain: usize,
    pub seed: u64,
    /// Scales every corruption amplitude; in (0, 1].
    pub corruption_strength: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 64,
            k: 4,
            samples_per_domain: 100,
            seed: 0,
            corruption_strength: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(DidError::Config(format!(
                "image_size must be at least 16, got {}",
                self.image_size
            )));
        }
        if self.k < 1 {
            return Err(DidError::Config("k must be at least 1".into()));
        }
        if self.samples_per_domain < 1 {
            return Err(DidError::Config(
                "samples_per_domain must be at least 1".into(),
            ));
        }
        if !(self.corruption_strength > 0.0 && self.corruption_strength <= 1.0) {
            return Err(DidError::Config(format!(
                "corruption_strength must be in (0, 1], got {}",
                self.corruption_strength
            )));
        }
        Ok(())
    }
}

// ---- manifest I/O -----------------------------------------------------------

/// Parses a JSON-Lines manifest, infers k, and verifies every referenced file.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = fs::File::open(path)
        .map_err(|e| DidError::io(format!("opening manifest {}", path.display()), e))?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line =
            line.map_err(|e| DidError::io(format!("reading manifest line {lineno}"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            DidError::Data(format!("manifest line {lineno}: malformed record: {e}"))
        })?;
        if record.label > 1 {
            return Err(DidError::Data(format!(
                "manifest line {lineno}: label must be 0 or 1, got {}",
                record.label
            )));
        }
        if record.label == 0 && record.domain != 0 {
            return Err(DidError::Data(format!(
                "manifest line {lineno}: real record has fake domain {}",
                record.domain
            )));
        }
        if record.label == 1 && record.domain == 0 {
            return Err(DidError::Data(format!(
                "manifest line {lineno}: fake record has the real domain 0"
            )));
        }
        records.push(record);
    }
    let manifest = Manifest {
        k: records.iter().map(|r| r.domain).max().unwrap_or(0),
        records,
        base_dir,
    };
    let (reals, fakes) = manifest.class_counts();
    if reals == 0 || fakes == 0 {
        return Err(DidError::Data(
            "manifest must contain at least one real and one fake record".into(),
        ));
    }
    for record in &manifest.records {
        let p = manifest.resolve(record);
        if !p.is_file() {
            return Err(DidError::Data(format!(
                "manifest references missing file {}",
                p.display()
            )));
        }
    }
    Ok(manifest)
}

/// Writes a manifest as JSON-Lines. Paths are absolutized when the target
/// directory differs from the manifest's base directory.
pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let target_dir = path.parent().unwrap_or(Path::new("."));
    let rewrite = target_dir != manifest.base_dir;
    let mut out = String::new();
    for record in &manifest.records {
        let record = if rewrite {
            let resolved = manifest.resolve(record);
            let absolute = std::path::absolute(&resolved).unwrap_or(resolved);
            ManifestRecord {
                path: absolute.to_string_lossy().into_owned(),
                ..record.clone()
            }
        } else {
            record.clone()
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out)
        .map_err(|e| DidError::io(format!("writing manifest {}", path.display()), e))
}

// ---- preprocessing ----------------------------------------------------------

/// BT.601 grayscale conversion, bilinear resize, values in [0,1].
pub fn preprocess(image: &DynamicImage, size: usize) -> Result<Tensor> {
    if size < 16 {
        return Err(DidError::Config(format!(
            "target size must be at least 16, got {size}"
        )));
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(DidError::Data("zero-area image".into()));
    }
    let gray = match image {
        DynamicImage::ImageLuma8(img) => {
            let data = img.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect();
            Tensor::from_vec(&[h, w], data)
        }
        other => {
            let rgb = other.to_rgb8();
            let data = rgb
                .pixels()
                .map(|p| {
                    0.299 * (f64::from(p.0[0]) / 255.0)
                        + 0.587 * (f64::from(p.0[1]) / 255.0)
                        + 0.114 * (f64::from(p.0[2]) / 255.0)
                })
                .collect();
            Tensor::from_vec(&[h, w], data)
        }
    };
    preprocess_gray(&gray, size)
}

/// Resize-only path for tensors that are already grayscale in [0,1].
pub fn preprocess_gray(gray: &Tensor, size: usize) -> Result<Tensor> {
    if size < 16 {
        return Err(DidError::Config(format!(
            "target size must be at least 16, got {size}"
        )));
    }
    let shape = gray.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(DidError::Data(format!(
            "expected a nonempty H x W tensor, got shape {shape:?}"
        )));
    }
    Ok(bilinear_resize(gray, size, size))
}

/// Bilinear resampling with half-pixel centers; exact identity when sizes match.
fn bilinear_resize(src: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w) = (src.shape()[0], src.shape()[1]);
    if h == out_h && w == out_w {
        return src.clone();
    }
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    let mut data = Vec::with_capacity(out_h * out_w);
    for dy in 0..out_h {
        let sy = ((dy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = sy - y0 as f64;
        for dx in 0..out_w {
            let sx = ((dx as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = sx - x0 as f64;
            let top = src.data()[y0 * w + x0] * (1.0 - wx) + src.data()[y0 * w + x1] * wx;
            let bot = src.data()[y1 * w + x0] * (1.0 - wx) + src.data()[y1 * w + x1] * wx;
            data.push(top * (1.0 - wy) + bot * wy);
        }
    }
    Tensor::from_vec(&[out_h, out_w], data)
}

pub fn gray_image_to_tensor(img: &image::GrayImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect();
    Tensor::from_vec(&[h, w], data)
}

pub fn tensor_to_gray_image(t: &Tensor) -> image::GrayImage {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (pixel, &v) in img.pixels_mut().zip(t.iter()) {
        pixel.0[0] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    img
}

// ---- synthetic generator ------------------------------------------------------

/// Corruption region descriptor recorded in the sidecar metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Normalized elliptic radius: 1 on the boundary, < 1 inside.
    pub fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (sin, cos) = self.angle.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    /// Boolean interior mask (rho <= 1) over an image of the given size.
    pub fn interior_mask(&self, size: usize) -> Vec<bool> {
        let mut mask = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                mask[y * size + x] = self.rho(x as f64, y as f64) <= 1.0;
            }
        }
        mask
    }
}

/// Per-sample sidecar record with the corruption parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub path: String,
    pub label: u8,
    pub domain: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub family: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ellipse: Option<Ellipse>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ring_amp: Option<f64>,
}

/// An in-memory synthesized sample; fakes keep their clean progenitor so the
/// gradient-energy contract can be checked directly.
pub struct SynthSample {
    pub image: Tensor,
    pub clean: Option<Tensor>,
    pub meta: SampleMeta,
}

const RING_BASE_AMP: f64 = 0.065;
const RING_WIDTH: f64 = 0.07;
// Normalizes u * exp(-u^2) to unit peak.
const RING_DIPOLE_NORM: f64 = 2.3316439198090330;

fn smooth_field(rng: &mut ChaCha12Rng, size: usize) -> Tensor {
    let s = size as f64;
    let base = rng.gen_range(0.35..0.65);
    let nblobs = rng.gen_range(2..=5);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..nblobs)
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(s / 8.0..s / 3.0),
                rng.gen_range(-0.25..0.25),
            )
        })
        .collect();
    let sin_amp = rng.gen_range(0.05..0.15);
    let sin_freq = rng.gen_range(0.5..1.5);
    let sin_theta = rng.gen_range(0.0..std::f64::consts::PI);
    let sin_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (st, ct) = sin_theta.sin_cos();
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = base;
            for &(cx, cy, sigma, amp) in &blobs {
                let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            let phase = std::f64::consts::TAU * sin_freq * (xf * ct + yf * st) / s + sin_phase;
            v += sin_amp * phase.sin();
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::from_vec(&[size, size], data)
}

fn random_ellipse(rng: &mut ChaCha12Rng, size: usize) -> Ellipse {
    let s = size as f64;
    Ellipse {
        cx: rng.gen_range(0.3 * s..0.7 * s),
        cy: rng.gen_range(0.3 * s..0.7 * s),
        a: rng.gen_range(0.15 * s..0.28 * s),
        b: rng.gen_range(0.15 * s..0.28 * s),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
    }
}

/// Logistic interior weight: ~1 well inside the ellipse, ~0 outside.
fn interior_weight(rho: f64) -> f64 {
    1.0 / (1.0 + ((rho - 0.92) / 0.04).exp())
}

fn separable_gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    let size = img.shape()[0];
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|v| v / norm).collect();
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = (x as isize + ki as isize - radius).clamp(0, size as isize - 1);
                acc += kv * img.data()[y * size + sx as usize];
            }
            tmp[y * size + x] = acc;
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = (y as isize + ki as isize - radius).clamp(0, size as isize - 1);
                acc += kv * tmp[sy as usize * size + x];
            }
            out[y * size + x] = acc;
        }
    }
    Tensor::from_vec(&[size, size], out)
}

struct FamilyParams {
    family: usize,
    cell: f64,
    texture_amp: f64,
    blur_sigma: f64,
    gamma: f64,
    freq: f64,
    theta: f64,
    phase: f64,
}

fn draw_family_params(rng: &mut ChaCha12Rng, domain: usize) -> FamilyParams {
    let family = (domain - 1) % 4 + 1;
    let tier = ((domain - 1) / 4) as f64;
    FamilyParams {
        family,
        cell: rng.gen_range(3.0..5.0) / (1.0 + 0.35 * tier),
        texture_amp: rng.gen_range(0.25..0.40),
        blur_sigma: rng.gen_range(2.0..2.8) * (1.0 + 0.25 * tier),
        gamma: if rng.gen_bool(0.5) {
            rng.gen_range(2.2..3.2) * (1.0 + 0.15 * tier)
        } else {
            rng.gen_range(0.30..0.45) / (1.0 + 0.15 * tier)
        },
        freq: rng.gen_range(10.0..16.0) * (1.0 + 0.3 * tier),
        theta: rng.gen_range(0.0..std::f64::consts::PI),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}

fn apply_interior_corruption(
    clean: &Tensor,
    ellipse: &Ellipse,
    fp: &FamilyParams,
    strength: f64,
) -> Tensor {
    let size = clean.shape()[0];
    let blurred = if fp.family == 2 {
        Some(separable_gaussian_blur(clean, fp.blur_sigma))
    } else {
        None
    };
    let (st, ct) = fp.theta.sin_cos();
    let mut out = clean.clone();
    for y in 0..size {
        for x in 0..size {
            let idx = y * size + x;
            let rho = ellipse.rho(x as f64, y as f64);
            let w = interior_weight(rho);
            if w < 1e-4 {
                continue;
            }
            let (xf, yf) = (x as f64, y as f64);
            let v = clean.data()[idx];
            let corrupted = match fp.family {
                1 => {
                    let checker = (std::f64::consts::PI * xf / fp.cell).sin()
                        * (std::f64::consts::PI * yf / fp.cell).sin();
                    v + strength * fp.texture_amp * checker
                }
                2 => blurred.as_ref().expect("blur precomputed").data()[idx],
                3 => v.max(1e-4).powf(fp.gamma),
                4 => {
                    let phase = std::f64::consts::TAU * fp.freq * (xf * ct + yf * st)
                        / size as f64
                        + fp.phase;
                    v + strength * fp.texture_amp * phase.sin()
                }
                other => unreachable!("family {other} outside the 1..=4 cycle"),
            };
            out.data_mut()[idx] = (v + w * (corrupted - v)).clamp(0.0, 1.0);
        }
    }
    out
}

// Zero-mean edge dipole along the ellipse boundary: elevates local gradient
// energy without shifting mean brightness.
fn add_boundary_ring(img: &Tensor, ellipse: &Ellipse, amp: f64, polarity: f64) -> Tensor {
    let size = img.shape()[0];
    let mut out = img.clone();
    for y in 0..size {
        for x in 0..size {
            let rho = ellipse.rho(x as f64, y as f64);
            let u = (rho - 1.0) / RING_WIDTH;
            let ridge = RING_DIPOLE_NORM * u * (-u * u).exp();
            if ridge.abs() > 1e-4 {
                let idx = y * size + x;
                out.data_mut()[idx] =
                    (out.data()[idx] + polarity * amp * ridge).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn quantize(img: &Tensor) -> Tensor {
    let data = img
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    Tensor::from_vec(img.shape(), data)
}

/// Mean central-difference gradient magnitude over masked pixels.
pub fn mean_gradient_magnitude(img: &Tensor, mask: &[bool]) -> f64 {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    assert_eq!(mask.len(), h * w, "mask size mismatch");
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if !mask[y * w + x] {
                continue;
            }
            let gx = (img.data()[y * w + x + 1] - img.data()[y * w + x - 1]) / 2.0;
            let gy = (img.data()[(y + 1) * w + x] - img.data()[(y - 1) * w + x]) / 2.0;
            sum += (gx * gx + gy * gy).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Synthesizes one sample deterministically from (spec, domain, index).
pub fn synthesize_sample(spec: &SyntheticSpec, domain: usize, index: usize) -> SynthSample {
    let seed = derive_seed(derive_seed(spec.seed, domain as u64), index as u64);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let path = format!("images/d{domain}_{index:05}.png");
    if domain == 0 {
        let image = quantize(&smooth_field(&mut rng, size));
        return SynthSample {
            image,
            clean: None,
            meta: SampleMeta {
                path,
                label: 0,
                domain: 0,
                family: None,
                ellipse: None,
                ring_amp: None,
            },
        };
    }

    let clean = smooth_field(&mut rng, size);
    let ellipse = random_ellipse(&mut rng, size);
    let fp = draw_family_params(&mut rng, domain);
    let corrupted = apply_interior_corruption(&clean, &ellipse, &fp, spec.corruption_strength);

    // The boundary ridge must strictly elevate mean gradient energy inside the
    // ellipse relative to the clean field; boost until the contract holds on
    // the quantized image.
    let polarity = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let amp_jitter = rng.gen_range(0.8..1.0);
    let mask = ellipse.interior_mask(size);
    let clean_q = quantize(&clean);
    let clean_grad = mean_gradient_magnitude(&clean_q, &mask);
    let mut ring_amp = spec.corruption_strength * RING_BASE_AMP * amp_jitter;
    let image = loop {
        let candidate =
            quantize(&add_boundary_ring(&corrupted, &ellipse, ring_amp, polarity));
        if mean_gradient_magnitude(&candidate, &mask) > clean_grad {
            break candidate;
        }
        ring_amp *= 1.4;
    };

    SynthSample {
        image,
        clean: Some(clean_q),
        meta: SampleMeta {
            path,
            label: 1,
            domain,
            family: Some(fp.family),
            ellipse: Some(ellipse),
            ring_amp: Some(ring_amp),
        },
    }
}

/// Writes `samples_per_domain` PNGs per domain 0..k, a manifest, and a sidecar
/// metadata file. Identical specs reproduce byte-identical trees.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir)
        .map_err(|e| DidError::io(format!("creating {}", images_dir.display()), e))?;

    let mut records = Vec::new();
    let mut meta_lines = String::new();
    for domain in 0..=spec.k {
        for index in 0..spec.samples_per_domain {
            let sample = synthesize_sample(spec, domain, index);
            let file = out_dir.join(&sample.meta.path);
            tensor_to_gray_image(&sample.image)
                .save(&file)
                .map_err(|e| DidError::Data(format!("writing {}: {e}", file.display())))?;
            records.push(ManifestRecord {
                path: sample.meta.path.clone(),
                label: sample.meta.label,
                domain: sample.meta.domain,
            });
            meta_lines.push_str(&serde_json::to_string(&sample.meta).expect("meta serializes"));
            meta_lines.push('\n');
        }
    }

    let manifest = Manifest {
        records,
        k: spec.k,
        base_dir: out_dir.to_path_buf(),
    };
    save_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    let meta_path = out_dir.join("metadata.jsonl");
    let mut f = fs::File::create(&meta_path)
        .map_err(|e| DidError::io(format!("creating {}", meta_path.display()), e))?;
    f.write_all(meta_lines.as_bytes())
        .map_err(|e| DidError::io(format!("writing {}", meta_path.display()), e))?;
    Ok(manifest)
}

/// Loads the sidecar metadata written by [`generate_synthetic`].
pub fn load_metadata(path: &Path) -> Result<Vec<SampleMeta>> {
    let file = fs::File::open(path)
        .map_err(|e| DidError::io(format!("opening metadata {}", path.display()), e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DidError::io(format!("reading metadata line {}", lineno + 1), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            DidError::Data(format!("metadata line {}: malformed record: {e}", lineno + 1))
        })?);
    }
    Ok(out)
}

// ---- leave-one-domain-out split ----------------------------------------------

/// Splits fakes of `held_out` (plus the tail share of reals) into a test
/// manifest; the train manifest keeps everything else with fake domains
/// re-indexed densely to 0..k-1. Held-out fakes map to domain 1 in the test
/// manifest.
pub fn split_leave_one_domain_out(
    manifest: &Manifest,
    held_out: usize,
    real_train_fraction: f64,
) -> Result<(Manifest, Manifest)> {
    if held_out == 0 {
        return Err(DidError::Config(
            "the real domain 0 cannot be held out".into(),
        ));
    }
    if manifest.k < 2 {
        return Err(DidError::Config(
            "leave-one-domain-out needs at least two fake domains".into(),
        ));
    }
    if held_out > manifest.k {
        return Err(DidError::Config(format!(
            "held_out {held_out} exceeds the domain count k={}",
            manifest.k
        )));
    }
    if !(real_train_fraction > 0.0 && real_train_fraction < 1.0) {
        return Err(DidError::Config(
            "real_train_fraction must be strictly between 0 and 1".into(),
        ));
    }

    let n_real = manifest.records.iter().filter(|r| r.label == 0).count();
    let n_train_real = ((n_real as f64) * real_train_fraction).floor() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut seen_real = 0usize;
    for record in &manifest.records {
        if record.label == 0 {
            if seen_real < n_train_real {
                train.push(record.clone());
            } else {
                test.push(record.clone());
            }
            seen_real += 1;
        } else if record.domain == held_out {
            test.push(ManifestRecord {
                domain: 1,
                ..record.clone()
            });
        } else {
            // Dense re-index: domains above the held-out one shift down.
            let domain = if record.domain > held_out {
                record.domain - 1
            } else {
                record.domain
            };
            train.push(ManifestRecord {
                domain,
                ..record.clone()
            });
        }
    }
    let train = Manifest {
        records: train,
        k: manifest.k - 1,
        base_dir: manifest.base_dir.clone(),
    };
    let test = Manifest {
        records: test,
        k: 1,
        base_dir: manifest.base_dir.clone(),
    };
    for (name, m) in [("train", &train), ("test", &test)] {
        let (reals, fakes) = m.class_counts();
        if reals == 0 || fakes == 0 {
            return Err(DidError::Data(format!(
                "{name} split lost a class (reals={reals}, fakes={fakes})"
            )));
        }
    }
    Ok((train, test))
}

// ---- loading and batching -----------------------------------------------------

/// A manifest with every image decoded, preprocessed, and held in memory.
pub struct LoadedDataset {
    pub samples: Vec<Sample>,
    pub ids: Vec<String>,
    pub k: usize,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn from_samples(samples: Vec<Sample>, ids: Vec<String>, k: usize) -> Self {
        LoadedDataset { samples, ids, k }
    }
}

/// Reads and preprocesses every manifest record to `input_size`.
pub fn load_dataset(manifest: &Manifest, input_size: usize) -> Result<LoadedDataset> {
    let mut samples = Vec::with_capacity(manifest.len());
    let mut ids = Vec::with_capacity(manifest.len());
    for record in &manifest.records {
        let path = manifest.resolve(record);
        let img = image::open(&path)
            .map_err(|e| DidError::Data(format!("decoding {}: {e}", path.display())))?;
        let tensor = preprocess(&img, input_size)?;
        let mut domain = vec![0u8; manifest.k + 1];
        domain[record.domain] = 1;
        samples.push(Sample::new(tensor, record.label, domain)?);
        ids.push(record.path.clone());
    }
    Ok(LoadedDataset {
        samples,
        ids,
        k: manifest.k,
    })
}

/// Repeatable mixed-class batch index stream.
///
/// Each epoch is a fresh uniform shuffle from (seed, epoch); a shuffle whose
/// batches are not all mixed-class is re-drawn deterministically. Trailing
/// samples that do not fill a batch are dropped.
pub struct BatchStream {
    labels: Vec<u8>,
    batch_size: usize,
    seed: u64,
}

impl BatchStream {
    pub fn new(labels: Vec<u8>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(DidError::Config("batch_size must be at least 2".into()));
        }
        if labels.len() < batch_size {
            return Err(DidError::Config(format!(
                "dataset of {} samples cannot fill a batch of {batch_size}",
                labels.len()
            )));
        }
        let fakes = labels.iter().filter(|&&l| l == 1).count();
        if fakes == 0 || fakes == labels.len() {
            return Err(DidError::Data(
                "batch stream needs both classes present in the dataset".into(),
            ));
        }
        Ok(BatchStream {
            labels,
            batch_size,
            seed,
        })
    }

    /// Batches for one epoch: every batch contains both classes.
    pub fn epoch_batches(&self, epoch: u64) -> Result<Vec<Vec<usize>>> {
        let n = self.labels.len();
        let n_batches = n / self.batch_size;
        let epoch_seed = derive_seed(self.seed, epoch);
        for attempt in 0..100u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(epoch_seed, attempt));
            let mut order: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            order.truncate(n_batches * self.batch_size);
            let batches: Vec<Vec<usize>> = order
                .chunks_exact(self.batch_size)
                .map(|c| c.to_vec())
                .collect();
            let mixed = batches.iter().all(|batch| {
                let fakes = batch.iter().filter(|&&i| self.labels[i] == 1).count();
                fakes > 0 && fakes < batch.len()
            });
            if mixed {
                return Ok(batches);
            }
        }
        Err(DidError::Data(
            "could not draw mixed-class batches in 100 attempts; dataset is too imbalanced"
                .into(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn write_manifest_lines(dir: &Path, lines: &[&str]) -> PathBuf {
        let path = dir.join("manifest.jsonl");
        fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    fn touch_png(dir: &Path, name: &str) {
        let file = dir.join(name);
        fs::create_dir_all(file.parent().unwrap()).unwrap();
        image::GrayImage::new(16, 16).save(&file).unwrap();
    }

    #[test]
    fn load_manifest_minimal() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(dir.path(), "a.png");
        touch_png(dir.path(), "b.png");
        let path = write_manifest_lines(
            dir.path(),
            &[
                r#"{"path":"a.png","label":0,"domain":0}"#,
                r#"{"path":"b.png","label":1,"domain":1}"#,
            ],
        );
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.k, 1);
        assert_eq!(m.len(), 2);
        assert_eq!(m.records[0].path, "a.png");
    }

    #[test]
    fn load_manifest_infers_k4_from_five_domains() {
        let dir = tempfile::tempdir().unwrap();
        let mut lines = Vec::new();
        for d in 0..=4 {
            touch_png(dir.path(), &format!("f{d}.png"));
            let label = u8::from(d > 0);
            lines.push(format!(
                r#"{{"path":"f{d}.png","label":{label},"domain":{d}}}"#
            ));
        }
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let path = write_manifest_lines(dir.path(), &refs);
        assert_eq!(load_manifest(&path).unwrap().k, 4);
    }

    #[test]
    fn load_manifest_reports_offending_line() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(dir.path(), "a.png");
        let path = write_manifest_lines(
            dir.path(),
            &[
                r#"{"path":"a.png","label":0,"domain":0}"#,
                r#"{"path":"a.png","label":2,"domain":1}"#,
            ],
        );
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "missing line number: {err}");
    }

    #[test]
    fn load_manifest_rejects_label_domain_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(dir.path(), "a.png");
        for bad in [
            r#"{"path":"a.png","label":0,"domain":3}"#,
            r#"{"path":"a.png","label":1,"domain":0}"#,
        ] {
            let path = write_manifest_lines(dir.path(), &[bad]);
            assert!(load_manifest(&path).is_err(), "accepted: {bad}");
        }
    }

    #[test]
    fn load_manifest_rejects_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(dir.path(), "a.png");
        let path = write_manifest_lines(
            dir.path(),
            &[
                r#"{"path":"a.png","label":0,"domain":0}"#,
                r#"{"path":"ghost.png","label":1,"domain":1}"#,
            ],
        );
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("ghost.png"));
        assert!(load_manifest(&dir.path().join("absent.jsonl")).is_err());
    }

    #[test]
    fn preprocess_constant_white_upscales_to_ones() {
        let img = DynamicImage::ImageRgb8(image::RgbImage::from_pixel(
            32,
            32,
            image::Rgb([255, 255, 255]),
        ));
        let t = preprocess(&img, 64).unwrap();
        assert_eq!(t.shape(), &[64, 64]);
        for &v in t.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn preprocess_applies_bt601_weights() {
        let img = DynamicImage::ImageRgb8(image::RgbImage::from_pixel(
            16,
            16,
            image::Rgb([255, 0, 0]),
        ));
        let t = preprocess(&img, 16).unwrap();
        assert!((t.data()[0] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn preprocess_grayscale_identity_and_idempotence() {
        let mut img = image::GrayImage::new(24, 24);
        for (i, p) in img.pixels_mut().enumerate() {
            p.0[0] = (i % 251) as u8;
        }
        let t = preprocess(&DynamicImage::ImageLuma8(img.clone()), 24).unwrap();
        for (got, p) in t.iter().zip(img.pixels()) {
            assert_eq!(*got, f64::from(p.0[0]) / 255.0);
        }
        // Idempotence on already-sized [0,1] grayscale input.
        let once = preprocess_gray(&t, 24).unwrap();
        assert!(once.max_abs_diff(&t) <= 1e-6);
        let resized = preprocess_gray(&t, 32).unwrap();
        let twice = preprocess_gray(&resized, 32).unwrap();
        assert!(twice.max_abs_diff(&resized) <= 1e-6);
    }

    #[test]
    fn preprocess_rejects_bad_inputs() {
        let img = DynamicImage::ImageRgb8(image::RgbImage::new(8, 8));
        assert!(preprocess(&img, 8).is_err(), "size below 16 must fail");
        assert!(preprocess_gray(&Tensor::zeros(&[0, 4]), 16).is_err());
    }

    #[test]
    fn synthetic_generation_is_reproducible() {
        let spec = SyntheticSpec {
            image_size: 32,
            k: 2,
            samples_per_domain: 3,
            seed: 7,
            corruption_strength: 0.8,
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic(&spec, d1.path()).unwrap();
        generate_synthetic(&spec, d2.path()).unwrap();
        let mut checked = 0;
        for domain in 0..=2 {
            for idx in 0..3 {
                let rel = format!("images/d{domain}_{idx:05}.png");
                let a = fs::read(d1.path().join(&rel)).unwrap();
                let b = fs::read(d2.path().join(&rel)).unwrap();
                assert_eq!(a, b, "bytes differ for {rel}");
                checked += 1;
            }
        }
        assert_eq!(checked, 9);
        assert_eq!(
            fs::read(d1.path().join("manifest.jsonl")).unwrap(),
            fs::read(d2.path().join("manifest.jsonl")).unwrap()
        );
        assert_eq!(
            fs::read(d1.path().join("metadata.jsonl")).unwrap(),
            fs::read(d2.path().join("metadata.jsonl")).unwrap()
        );
    }

    #[test]
    fn synthetic_minimal_case_k1() {
        let spec = SyntheticSpec {
            image_size: 16,
            k: 1,
            samples_per_domain: 1,
            seed: 3,
            corruption_strength: 1.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(manifest.len(), 2);
        assert_eq!(manifest.k, 1);
        let reloaded = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(reloaded.len(), 2);
    }

    #[test]
    fn synthetic_families_cycle_beyond_four() {
        let spec = SyntheticSpec {
            image_size: 24,
            k: 6,
            samples_per_domain: 1,
            seed: 11,
            corruption_strength: 1.0,
        };
        let s5 = synthesize_sample(&spec, 5, 0);
        assert_eq!(s5.meta.family, Some(1));
        let s6 = synthesize_sample(&spec, 6, 0);
        assert_eq!(s6.meta.family, Some(2));
    }

    #[test]
    fn fake_gradient_energy_exceeds_clean_inside_ellipse() {
        let spec = SyntheticSpec {
            image_size: 48,
            k: 4,
            samples_per_domain: 6,
            seed: 19,
            corruption_strength: 0.7,
        };
        for domain in 1..=spec.k {
            for index in 0..spec.samples_per_domain {
                let s = synthesize_sample(&spec, domain, index);
                let ellipse = s.meta.ellipse.unwrap();
                let mask = ellipse.interior_mask(spec.image_size);
                let fake = mean_gradient_magnitude(&s.image, &mask);
                let clean = mean_gradient_magnitude(s.clean.as_ref().unwrap(), &mask);
                assert!(
                    fake > clean,
                    "domain {domain} index {index}: fake {fake} <= clean {clean}"
                );
            }
        }
    }

    #[test]
    fn sidecar_metadata_round_trips() {
        let spec = SyntheticSpec {
            image_size: 16,
            k: 2,
            samples_per_domain: 2,
            seed: 23,
            corruption_strength: 1.0,
        };
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&spec, dir.path()).unwrap();
        let meta = load_metadata(&dir.path().join("metadata.jsonl")).unwrap();
        assert_eq!(meta.len(), 6);
        for m in &meta {
            assert_eq!(m.ellipse.is_some(), m.label == 1);
            assert_eq!(m.ring_amp.is_some(), m.label == 1);
        }
    }

    fn toy_manifest(k: usize, per_domain: usize) -> Manifest {
        let mut records = Vec::new();
        for d in 0..=k {
            for i in 0..per_domain {
                records.push(ManifestRecord {
                    path: format!("d{d}_{i}.png"),
                    label: u8::from(d > 0),
                    domain: d,
                });
            }
        }
        Manifest {
            records,
            k,
            base_dir: PathBuf::from("."),
        }
    }

    #[test]
    fn split_partitions_domains() {
        let manifest = toy_manifest(4, 10);
        let (train, test) = split_leave_one_domain_out(&manifest, 4, 0.8).unwrap();
        assert_eq!(train.k, 3);
        let train_domains: HashSet<usize> =
            train.records.iter().map(|r| r.domain).collect();
        assert_eq!(train_domains, HashSet::from([0, 1, 2, 3]));
        assert!(test.records.iter().all(|r| r.domain == 0 || r.domain == 1));
        assert_eq!(test.records.iter().filter(|r| r.label == 1).count(), 10);
    }

    #[test]
    fn split_is_exhaustive_and_disjoint() {
        let manifest = toy_manifest(4, 50);
        let (train, test) = split_leave_one_domain_out(&manifest, 2, 0.8).unwrap();
        assert_eq!(train.len() + test.len(), manifest.len());
        let train_paths: HashSet<&str> =
            train.records.iter().map(|r| r.path.as_str()).collect();
        for r in &test.records {
            assert!(!train_paths.contains(r.path.as_str()), "overlap at {}", r.path);
        }
        // Re-indexing is a bijection from surviving old domains to 0..k-1.
        let train_by_path: std::collections::HashMap<&str, usize> = train
            .records
            .iter()
            .map(|r| (r.path.as_str(), r.domain))
            .collect();
        let mut mapping = std::collections::HashMap::new();
        for orig in &manifest.records {
            if let Some(&re) = train_by_path.get(orig.path.as_str()) {
                if let Some(prev) = mapping.insert(orig.domain, re) {
                    assert_eq!(prev, re, "domain {} mapped twice", orig.domain);
                }
            }
        }
        let values: HashSet<usize> = mapping.values().copied().collect();
        assert_eq!(values, HashSet::from([0, 1, 2, 3]));
        assert_eq!(mapping.len(), values.len());
    }

    #[test]
    fn split_rejects_bad_arguments() {
        let manifest = toy_manifest(4, 5);
        assert!(split_leave_one_domain_out(&manifest, 0, 0.8).is_err());
        assert!(split_leave_one_domain_out(&manifest, 5, 0.8).is_err());
        let single = toy_manifest(1, 5);
        assert!(split_leave_one_domain_out(&single, 1, 0.8).is_err());
    }

    #[test]
    fn batch_stream_counts_and_mixing() {
        // 150 samples: 50 reals, 100 fakes.
        let labels: Vec<u8> = (0..150).map(|i| u8::from(i % 3 != 0)).collect();
        let stream = BatchStream::new(labels.clone(), 15, 42).unwrap();
        let batches = stream.epoch_batches(0).unwrap();
        assert_eq!(batches.len(), 10);
        let mut seen = HashSet::new();
        for batch in &batches {
            assert_eq!(batch.len(), 15);
            let fakes = batch.iter().filter(|&&i| labels[i] == 1).count();
            assert!(fakes > 0 && fakes < 15, "single-class batch");
            seen.extend(batch.iter().copied());
        }
        assert_eq!(seen.len(), 150, "epoch must visit every sample once");
    }

    #[test]
    fn batch_stream_is_deterministic_and_epoch_varying() {
        let labels: Vec<u8> = (0..60).map(|i| u8::from(i % 2 == 0)).collect();
        let a = BatchStream::new(labels.clone(), 6, 9).unwrap();
        let b = BatchStream::new(labels, 6, 9).unwrap();
        assert_eq!(a.epoch_batches(0).unwrap(), b.epoch_batches(0).unwrap());
        assert_ne!(a.epoch_batches(0).unwrap(), a.epoch_batches(1).unwrap());
    }

    #[test]
    fn batch_stream_rejects_single_class() {
        let labels = vec![1u8; 30];
        assert!(BatchStream::new(labels, 5, 1).is_err());
    }
}
