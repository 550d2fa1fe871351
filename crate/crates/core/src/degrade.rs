//! Synthetic deterioration: free-form masks, Gaussian noise and JPEG artefacts.

use std::f64::consts::TAU;
use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::seed::derive_seed;

/// Binary deterioration mask; 1 marks a damaged pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Precondition("mask values must be 0 or 1".into()));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn popcount(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn coverage(&self) -> f64 {
        self.popcount() as f64 / self.data.len() as f64
    }

    /// 3x3 binary erosion (out-of-image counts as unmasked).
    pub fn eroded(&self) -> Mask {
        self.morph(false)
    }

    /// 3x3 binary dilation.
    pub fn dilated(&self) -> Mask {
        self.morph(true)
    }

    fn morph(&self, dilate: bool) -> Mask {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut out = Mask::zeros(self.height, self.width);
        for y in 0..h {
            for x in 0..w {
                let mut any = false;
                let mut all = true;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        let v = yy >= 0 && xx >= 0 && yy < h && xx < w && self.get(yy as usize, xx as usize);
                        any |= v;
                        all &= v;
                    }
                }
                out.data[(y * w + x) as usize] = if dilate { any } else { all } as u8;
            }
        }
        out
    }
}

/// Inclusive integer interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub min: u32,
    pub max: u32,
}

impl Span {
    pub const fn new(min: u32, max: u32) -> Self {
        Span { min, max }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        rng.random_range(self.min..=self.max)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.min > self.max {
            return Err(Error::Config(format!("{what}: empty interval {}..{}", self.min, self.max)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskParams {
    pub stroke_count: Span,
    pub segment_count: Span,
    pub segment_length: Span,
    pub thickness: Span,
    pub blob_count: Span,
    /// Full ellipse axis lengths in pixels.
    pub blob_axis: Span,
    /// Accepted `[low, high]` fraction of masked pixels.
    pub coverage_band: [f64; 2],
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            stroke_count: Span::new(3, 8),
            segment_count: Span::new(4, 12),
            segment_length: Span::new(5, 40),
            thickness: Span::new(3, 15),
            blob_count: Span::new(0, 4),
            blob_axis: Span::new(5, 30),
            coverage_band: [0.05, 0.25],
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        self.stroke_count.validate("stroke_count")?;
        self.segment_count.validate("segment_count")?;
        self.segment_length.validate("segment_length")?;
        self.thickness.validate("thickness")?;
        self.blob_count.validate("blob_count")?;
        self.blob_axis.validate("blob_axis")?;
        let [lo, hi] = self.coverage_band;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "coverage_band [{lo}, {hi}] must satisfy 0 < low <= high < 1"
            )));
        }
        Ok(())
    }

    fn in_band(&self, coverage: f64) -> bool {
        coverage >= self.coverage_band[0] && coverage <= self.coverage_band[1]
    }
}

/// Maximum heading change between consecutive stroke segments, radians.
const HEADING_JITTER: f64 = 0.6;
const MASK_ATTEMPTS: u64 = 32;

/// Draws a random free-form mask whose coverage lies in `params.coverage_band`.
///
/// Up to 32 seeded attempts are drawn; if none lands in the band, the attempt
/// closest to it is eroded or dilated one 3x3 step at a time until it does.
pub fn synthesize_mask(height: usize, width: usize, params: &MaskParams, seed: u64) -> Result<Mask> {
    if height == 0 || width == 0 {
        return Err(Error::Precondition("mask dims must be positive".into()));
    }
    params.validate()?;
    let [lo, hi] = params.coverage_band;
    let mut best: Option<(f64, Mask)> = None;
    for attempt in 0..MASK_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("mask-attempt-{attempt}")));
        let mask = draw_mask(height, width, params, &mut rng);
        let cov = mask.coverage();
        if params.in_band(cov) {
            return Ok(mask);
        }
        let dist = if cov < lo { lo - cov } else { cov - hi };
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, mask));
        }
    }
    let (_, mut mask) = best.expect("at least one attempt");
    let growing = mask.coverage() < lo;
    loop {
        let next = if growing { mask.dilated() } else { mask.eroded() };
        let cov = next.coverage();
        if params.in_band(cov) {
            return Ok(next);
        }
        let stuck = next == mask;
        let overshot = if growing { cov > hi } else { cov < lo };
        if stuck || overshot {
            return Err(Error::MaskSynthesis(format!(
                "coverage band [{lo}, {hi}] unreachable for a {height}x{width} mask (stopped at {cov:.4})"
            )));
        }
        mask = next;
    }
}

fn draw_mask(height: usize, width: usize, p: &MaskParams, rng: &mut ChaCha8Rng) -> Mask {
    let mut mask = Mask::zeros(height, width);
    let (hf, wf) = (height as f64, width as f64);
    for _ in 0..p.stroke_count.sample(rng) {
        let thickness = p.thickness.sample(rng) as f64;
        let mut y = rng.random_range(0.0..hf);
        let mut x = rng.random_range(0.0..wf);
        let mut heading = rng.random_range(0.0..TAU);
        for _ in 0..p.segment_count.sample(rng) {
            heading += rng.random_range(-HEADING_JITTER..=HEADING_JITTER);
            let len = p.segment_length.sample(rng) as f64;
            let ny = (y + len * heading.sin()).clamp(0.0, hf - 1.0);
            let nx = (x + len * heading.cos()).clamp(0.0, wf - 1.0);
            draw_capsule(&mut mask, (y, x), (ny, nx), thickness / 2.0);
            y = ny;
            x = nx;
        }
    }
    for _ in 0..p.blob_count.sample(rng) {
        let cy = rng.random_range(0.0..hf);
        let cx = rng.random_range(0.0..wf);
        let ry = p.blob_axis.sample(rng) as f64 / 2.0;
        let rx = p.blob_axis.sample(rng) as f64 / 2.0;
        draw_ellipse(&mut mask, (cy, cx), (ry, rx));
    }
    mask
}

fn draw_capsule(mask: &mut Mask, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (h, w) = (mask.height as f64, mask.width as f64);
    let y0 = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
    let y1 = (a.0.max(b.0) + radius).ceil().min(h - 1.0) as usize;
    let x0 = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
    let x1 = (a.1.max(b.1) + radius).ceil().min(w - 1.0) as usize;
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (py, px) = (y as f64 - a.0, x as f64 - a.1);
            let t = if len2 > 0.0 {
                ((py * dy + px * dx) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ey, ex) = (py - t * dy, px - t * dx);
            if ey * ey + ex * ex <= radius * radius {
                mask.data[y * mask.width + x] = 1;
            }
        }
    }
}

fn draw_ellipse(mask: &mut Mask, c: (f64, f64), r: (f64, f64)) {
    let (h, w) = (mask.height as f64, mask.width as f64);
    let y0 = (c.0 - r.0).floor().max(0.0) as usize;
    let y1 = (c.0 + r.0).ceil().min(h - 1.0) as usize;
    let x0 = (c.1 - r.1).floor().max(0.0) as usize;
    let x1 = (c.1 + r.1).ceil().min(w - 1.0) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let ny = (y as f64 - c.0) / r.0;
            let nx = (x as f64 - c.1) / r.1;
            if ny * ny + nx * nx <= 1.0 {
                mask.data[y * mask.width + x] = 1;
            }
        }
    }
}

/// Replaces masked pixels (all channels) with `fill`.
pub fn apply_mask(img: &ImageTensor, mask: &Mask, fill: f32) -> Result<ImageTensor> {
    if img.height() != mask.height || img.width() != mask.width {
        return Err(Error::Shape(format!(
            "image {}x{} vs mask {}x{}",
            img.height(),
            img.width(),
            mask.height,
            mask.width
        )));
    }
    if !(0.0..=1.0).contains(&fill) {
        return Err(Error::Precondition(format!("fill value {fill} outside [0, 1]")));
    }
    let plane = img.height() * img.width();
    let mut data = img.data().to_vec();
    for chunk in data.chunks_mut(plane) {
        for (v, &m) in chunk.iter_mut().zip(&mask.data) {
            if m == 1 {
                *v = fill;
            }
        }
    }
    ImageTensor::new(img.channels(), img.height(), img.width(), data)
}

/// Adds i.i.d. Gaussian noise with standard deviation `sigma / 255` and clamps.
pub fn add_gaussian_noise(img: &ImageTensor, sigma: f64, seed: u64) -> Result<ImageTensor> {
    if !(sigma >= 0.0) {
        return Err(Error::Precondition(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma / 255.0).expect("finite positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    ImageTensor::new(img.channels(), img.height(), img.width(), data)
}

/// Baseline JPEG encode at `quality`, then decode.
///
/// 3-channel images are encoded as YCbCr, 1-channel images as grayscale JPEG.
pub fn jpeg_roundtrip(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Precondition(format!("jpeg quality {quality} outside 1..=100")));
    }
    let color = match img.channels() {
        3 => ExtendedColorType::Rgb8,
        1 => ExtendedColorType::L8,
        c => return Err(Error::UnsupportedChannels(c)),
    };
    let bytes = img.to_interleaved_u8();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode(&bytes, img.width() as u32, img.height() as u32, color)
        .map_err(|e| Error::Format(e.to_string()))?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg).map_err(|e| Error::Format(e.to_string()))?;
    ImageTensor::from_dynamic(&decoded, img.channels())
}

/// A full degradation recipe: optional mask, noise and compression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationSpec {
    pub mask: Option<MaskParams>,
    /// Noise standard deviation in 8-bit intensity units.
    pub gaussian_sigma: Option<f64>,
    pub jpeg_quality: Option<u8>,
    pub fill_value: f32,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec {
            mask: Some(MaskParams::default()),
            gaussian_sigma: None,
            jpeg_quality: None,
            fill_value: 1.0,
        }
    }
}

impl DegradationSpec {
    pub fn mask_only(params: MaskParams) -> Self {
        DegradationSpec {
            mask: Some(params),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.mask {
            m.validate()?;
        }
        if let Some(s) = self.gaussian_sigma {
            if !(s >= 0.0) {
                return Err(Error::Config(format!("gaussian_sigma must be >= 0, got {s}")));
            }
        }
        if let Some(q) = self.jpeg_quality {
            if !(1..=100).contains(&q) {
                return Err(Error::Config(format!("jpeg_quality {q} outside 1..=100")));
            }
        }
        if !(0.0..=1.0).contains(&self.fill_value) {
            return Err(Error::Config(format!("fill_value {} outside [0, 1]", self.fill_value)));
        }
        Ok(())
    }

    /// Applies noise then JPEG (whichever are present); masks are handled by the caller.
    pub fn apply_overlay(&self, img: &ImageTensor, seed: u64) -> Result<ImageTensor> {
        let mut out = img.clone();
        if let Some(sigma) = self.gaussian_sigma {
            out = add_gaussian_noise(&out, sigma, seed)?;
        }
        if let Some(q) = self.jpeg_quality {
            out = jpeg_roundtrip(&out, q)?;
        }
        Ok(out)
    }
}
