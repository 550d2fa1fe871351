//! Image tensors, PNG I/O, size normalization, patch grids and paired datasets.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{apply_mask, synthesize_mask, DegradationSpec, Mask};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::{Real, Tensor};

/// Every network input is resized to a multiple of this before inference.
///
/// 12 is the least common multiple of the 6-pixel divisibility the resampler
/// stack is built around and the downscale factor 2.
pub const SIZE_MULTIPLE: usize = 12;

/// A channel-major image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::UnsupportedChannels(channels));
        }
        if height == 0 || width == 0 {
            return Err(Error::DegenerateSize(format!("{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Precondition(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    /// Builds an image from one batch entry of a tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, sample: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        let data = t
            .sample(sample)
            .iter()
            .map(|v| {
                let f = v.as_f64();
                if f.is_nan() {
                    0.0
                } else {
                    f.clamp(0.0, 1.0) as f32
                }
            })
            .collect();
        Self::new(c, h, w, data)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("consistent dims")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> OrigDims {
        OrigDims {
            height: self.height,
            width: self.width,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// 8-bit interleaved samples, `round(v * 255)`.
    pub fn to_interleaved_u8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(self.data.len());
        for p in 0..plane {
            for c in 0..self.channels {
                out.push(quantize(self.data[c * plane + p]));
            }
        }
        out
    }

    /// Converts a decoded image, forcing `channels` (1 = luma, 3 = RGB).
    pub fn from_dynamic(img: &DynamicImage, channels: usize) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let mut data = vec![0.0f32; channels * plane];
        match channels {
            1 => {
                for (i, p) in img.to_luma8().pixels().enumerate() {
                    data[i] = p.0[0] as f32 / 255.0;
                }
            }
            3 => {
                for (i, p) in img.to_rgb8().pixels().enumerate() {
                    for c in 0..3 {
                        data[c * plane + i] = p.0[c] as f32 / 255.0;
                    }
                }
            }
            c => return Err(Error::UnsupportedChannels(c)),
        }
        Self::new(channels, h, w, data)
    }

    fn crop(&self, y0: usize, x0: usize, size: usize) -> ImageTensor {
        let mut data = Vec::with_capacity(self.channels * size * size);
        for c in 0..self.channels {
            for y in y0..y0 + size {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + size]);
            }
        }
        ImageTensor {
            channels: self.channels,
            height: size,
            width: size,
            data,
        }
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Dimensions of an image before size normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrigDims {
    pub height: usize,
    pub width: usize,
}

/// Reads an 8-bit PNG (or any format the decoder recognises). Gray and
/// gray+alpha images load as one channel; everything else as RGB.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let channels = match img.color().channel_count() {
        1 | 2 => 1,
        _ => 3,
    };
    ImageTensor::from_dynamic(&img, channels)
}

/// Writes an 8-bit PNG with `round(v * 255)` quantization.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width as u32, img.height as u32);
    let bytes = img.to_interleaved_u8();
    let res = if img.channels == 1 {
        GrayImage::from_raw(w, h, bytes).expect("buffer size").save(path)
    } else {
        RgbImage::from_raw(w, h, bytes).expect("buffer size").save(path)
    };
    res.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })
}

pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .expect("buffer size")
        .save(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(other.to_string()),
        })
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let img = load_image(path)?;
    let plane = img.height * img.width;
    let data = img.data[..plane].iter().map(|&v| (v >= 0.5) as u8).collect();
    Mask::from_vec(img.height, img.width, data)
}

fn nearest_multiple(dim: usize, m: usize) -> usize {
    (dim + m / 2) / m * m
}

/// Bicubic (Catmull-Rom) resize with output clamped to `[0, 1]`.
pub fn resize_bicubic(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(Error::DegenerateSize(format!("{height}x{width}")));
    }
    if height == img.height && width == img.width {
        return Ok(img.clone());
    }
    let (w, h) = (img.width as u32, img.height as u32);
    let plane = img.height * img.width;
    let out_plane = height * width;
    let mut data = vec![0.0f32; img.channels * out_plane];
    if img.channels == 1 {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w, h, img.data.clone()).expect("buffer size");
        let out = imageops::resize(&buf, width as u32, height as u32, FilterType::CatmullRom);
        for (d, s) in data.iter_mut().zip(out.into_raw()) {
            *d = s.clamp(0.0, 1.0);
        }
    } else {
        let mut inter = Vec::with_capacity(img.data.len());
        for p in 0..plane {
            for c in 0..3 {
                inter.push(img.data[c * plane + p]);
            }
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_raw(w, h, inter).expect("buffer size");
        let out = imageops::resize(&buf, width as u32, height as u32, FilterType::CatmullRom).into_raw();
        for p in 0..out_plane {
            for c in 0..3 {
                data[c * out_plane + p] = out[p * 3 + c].clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(img.channels, height, width, data)
}

/// Resizes so both dims are the nearest multiple of `m` (ties round up).
pub fn resize_to_multiple(img: &ImageTensor, m: usize) -> Result<(ImageTensor, OrigDims)> {
    if m == 0 {
        return Err(Error::Precondition("multiple must be >= 1".into()));
    }
    let (h, w) = (nearest_multiple(img.height, m), nearest_multiple(img.width, m));
    if h == 0 || w == 0 {
        return Err(Error::DegenerateSize(format!(
            "{}x{} rounds to {h}x{w} at multiple {m}",
            img.height, img.width
        )));
    }
    Ok((resize_bicubic(img, h, w)?, img.dims()))
}

/// Bicubic resize back to the recorded dimensions.
pub fn restore_size(img: &ImageTensor, dims: OrigDims) -> Result<ImageTensor> {
    resize_bicubic(img, dims.height, dims.width)
}

/// Square patch origins that cover an image with minimal overlap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub origins: Vec<(usize, usize)>,
    pub stride_r: usize,
    pub stride_c: usize,
}

/// Origins along one axis: `ceil(dim / size)` patches spread evenly, first
/// at 0 and last at `dim - size`.
fn axis_origins(dim: usize, size: usize) -> (Vec<usize>, usize) {
    let n = dim.div_ceil(size);
    if n == 1 {
        return (vec![0], 0);
    }
    let span = dim - size;
    let origins = (0..n).map(|i| i * span / (n - 1)).collect();
    (origins, span / (n - 1))
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, size: usize) -> Result<Self> {
        if size == 0 || size > height.min(width) {
            return Err(Error::Precondition(format!(
                "patch size {size} does not fit a {height}x{width} image"
            )));
        }
        let (rows, stride_r) = axis_origins(height, size);
        let (cols, stride_c) = axis_origins(width, size);
        let origins = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        Ok(PatchGrid {
            patch_size: size,
            origins,
            stride_r,
            stride_c,
        })
    }

    pub fn crop(&self, img: &ImageTensor, index: usize) -> ImageTensor {
        let (y, x) = self.origins[index];
        img.crop(y, x, self.patch_size)
    }

    pub fn crop_mask(&self, mask: &Mask, index: usize) -> Mask {
        let (y0, x0) = self.origins[index];
        let s = self.patch_size;
        let mut data = Vec::with_capacity(s * s);
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                data.push(mask.get(y, x) as u8);
            }
        }
        Mask::from_vec(s, s, data).expect("binary mask crop")
    }
}

pub fn extract_patches(img: &ImageTensor, size: usize) -> Result<(PatchGrid, Vec<ImageTensor>)> {
    let grid = PatchGrid::new(img.height, img.width, size)?;
    let patches = (0..grid.origins.len()).map(|i| grid.crop(img, i)).collect();
    Ok((grid, patches))
}

/// A clean image, its deterioration mask and the deteriorated input.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub clean: ImageTensor,
    pub mask: Mask,
    pub deteriorated: ImageTensor,
}

impl PairedSample {
    pub fn new(id: impl Into<String>, clean: ImageTensor, mask: Mask, deteriorated: ImageTensor) -> Result<Self> {
        let dims = (clean.height, clean.width);
        if (mask.height(), mask.width()) != dims || (deteriorated.height, deteriorated.width) != dims {
            return Err(Error::Shape("triplet members must share height and width".into()));
        }
        if clean.channels != deteriorated.channels {
            return Err(Error::Shape("clean and deteriorated channel counts differ".into()));
        }
        Ok(PairedSample {
            id: id.into(),
            clean,
            mask,
            deteriorated,
        })
    }

    /// True when the deteriorated image equals the clean one outside the mask.
    pub fn agrees_outside_mask(&self) -> bool {
        let plane = self.clean.height * self.clean.width;
        (0..self.clean.channels).all(|c| {
            (0..plane).all(|p| self.mask.data()[p] == 1 || self.clean.data[c * plane + p] == self.deteriorated.data[c * plane + p])
        })
    }
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Degrades one clean image. The mask seed depends only on `(seed, id)`.
pub fn degrade_sample(id: &str, clean: ImageTensor, spec: &DegradationSpec, seed: u64) -> Result<PairedSample> {
    let (h, w) = (clean.height, clean.width);
    let mask = match &spec.mask {
        Some(p) => synthesize_mask(h, w, p, derive_seed(seed, &format!("mask/{id}")))?,
        None => Mask::zeros(h, w),
    };
    let masked = apply_mask(&clean, &mask, spec.fill_value)?;
    let deteriorated = spec.apply_overlay(&masked, derive_seed(seed, &format!("overlay/{id}")))?;
    PairedSample::new(id, clean, mask, deteriorated)
}

/// Builds one triplet per PNG in `clean_dir` (sorted by file name).
///
/// Clean images are first resized to a multiple of [`SIZE_MULTIPLE`]. The
/// deteriorated image is the masked clean image, followed by the spec's noise
/// and JPEG overlays when present.
pub fn build_dataset(clean_dir: impl AsRef<Path>, spec: &DegradationSpec, seed: u64) -> Result<Vec<PairedSample>> {
    let dir = clean_dir.as_ref();
    spec.validate()?;
    let files = png_files(dir)?;
    let mut out = Vec::with_capacity(files.len());
    for f in &files {
        let img = match load_image(f) {
            Ok(img) => img,
            Err(Error::Format(msg)) => {
                log::warn!("skipping undecodable {msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let (img, _) = resize_to_multiple(&img, SIZE_MULTIPLE)?;
        out.push(degrade_sample(&stem(f), img, spec, seed)?);
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus(dir.to_path_buf()));
    }
    Ok(out)
}

/// Writes `clean/`, `mask/` and `deteriorated/` PNGs with matching stems.
pub fn write_triplets(dir: impl AsRef<Path>, samples: &[PairedSample]) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["clean", "mask", "deteriorated"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in samples {
        let name = format!("{}.png", s.id);
        save_image(&s.clean, dir.join("clean").join(&name))?;
        save_mask(&s.mask, dir.join("mask").join(&name))?;
        save_image(&s.deteriorated, dir.join("deteriorated").join(&name))?;
    }
    Ok(())
}

/// Reads triplets written by [`write_triplets`], sorted by stem.
pub fn load_triplets(dir: impl AsRef<Path>) -> Result<Vec<PairedSample>> {
    let dir = dir.as_ref();
    let clean_dir = dir.join("clean");
    let mut out = Vec::new();
    for f in png_files(&clean_dir)? {
        let id = stem(&f);
        let name = format!("{id}.png");
        let clean = load_image(&f)?;
        let mask = load_mask(dir.join("mask").join(&name))?;
        let det = load_image(dir.join("deteriorated").join(&name))?;
        out.push(PairedSample::new(id, clean, mask, det)?);
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus(clean_dir));
    }
    Ok(out)
}

/// A procedurally generated, painting-like RGB image: an ochre/earth-tone
/// gradient ground with soft coloured figures and brushy texture. Never
/// contains pure white, so a white fill is always a visible deterioration.
pub fn synthetic_painting(height: usize, width: usize, seed: u64) -> ImageTensor {
    const PALETTE: [[f64; 3]; 8] = [
        [0.62, 0.42, 0.26],
        [0.45, 0.23, 0.17],
        [0.23, 0.42, 0.38],
        [0.71, 0.60, 0.41],
        [0.30, 0.25, 0.40],
        [0.55, 0.16, 0.12],
        [0.18, 0.30, 0.22],
        [0.78, 0.68, 0.50],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic-painting"));
    let (hf, wf) = (height as f64, width as f64);
    let top = PALETTE[rng.random_range(0..PALETTE.len())];
    let bottom = PALETTE[rng.random_range(0..PALETTE.len())];
    let plane = height * width;
    let mut px = vec![[0.0f64; 3]; plane];
    for y in 0..height {
        let t = y as f64 / (hf - 1.0).max(1.0);
        for x in 0..width {
            for c in 0..3 {
                px[y * width + x][c] = top[c] * (1.0 - t) + bottom[c] * t;
            }
        }
    }
    let figures = rng.random_range(4..9);
    for _ in 0..figures {
        let color = PALETTE[rng.random_range(0..PALETTE.len())];
        let cy = rng.random_range(0.0..hf);
        let cx = rng.random_range(0.0..wf);
        let ry = rng.random_range(0.08..0.35) * hf;
        let rx = rng.random_range(0.08..0.35) * wf;
        let alpha = rng.random_range(0.5..0.9);
        for y in 0..height {
            for x in 0..width {
                let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                // soft edge over the outer 30% of the radius
                let a = alpha * (1.0 - ((d.sqrt() - 0.7) / 0.3).clamp(0.0, 1.0));
                if a > 0.0 {
                    let p = &mut px[y * width + x];
                    for c in 0..3 {
                        p[c] = p[c] * (1.0 - a) + color[c] * a;
                    }
                }
            }
        }
    }
    let fy = rng.random_range(0.15..0.6);
    let fx = rng.random_range(0.15..0.6);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..height {
        for x in 0..width {
            let tex = 0.04 * ((y as f64 * fy + phase).sin() * (x as f64 * fx).cos());
            let grain = rng.random_range(-0.015..0.015);
            for c in 0..3 {
                let v = px[y * width + x][c] + tex + grain;
                data[c * plane + y * width + x] = v.clamp(0.02, 0.92) as f32;
            }
        }
    }
    ImageTensor::new(3, height, width, data).expect("generated values are in range")
}
