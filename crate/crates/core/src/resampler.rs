//! Kernel-prediction network and the content-adaptive downscaler.
//!
//! The network sees the HR image through a stem convolution and two
//! space-to-depth downsample blocks, refines features with residual blocks,
//! returns to LR resolution with a sub-pixel upsample block, and ends in two
//! heads: one for per-pixel kernel weights (softplus, then normalized to sum
//! to one) and one for per-tap sub-pixel offsets (`tanh` scaled by the
//! offset bound). Every hidden convolution is followed by Leaky-ReLU.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::ops::DownscaleGeometry;
use crate::params::{conv, Bound, Initializer, ParamSet};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Gain applied to the fan-in bound of the two head output layers, so the
/// initial kernels are close to uniform and the offsets close to zero.
const HEAD_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResamplerConfig {
    pub scale: usize,
    pub kernel_size: usize,
    pub feature_width: usize,
    pub residual_blocks: usize,
    /// Bound on each tap offset, in HR pixels.
    pub offset_max: f64,
    pub channels: usize,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        ResamplerConfig {
            scale: 2,
            kernel_size: 6,
            feature_width: 32,
            residual_blocks: 3,
            offset_max: 3.0,
            channels: 3,
        }
    }
}

impl ResamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 && self.scale != 4 {
            return Err(Error::Config(format!("unsupported scale {} (2 or 4)", self.scale)));
        }
        if self.kernel_size == 0 {
            return Err(Error::Config("kernel_size must be >= 1".into()));
        }
        if self.feature_width == 0 {
            return Err(Error::Config("feature_width must be >= 1".into()));
        }
        if !(self.offset_max >= 0.0) {
            return Err(Error::Config("offset_max must be >= 0".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::UnsupportedChannels(self.channels));
        }
        Ok(())
    }

    pub fn geometry(&self) -> DownscaleGeometry {
        DownscaleGeometry {
            scale: self.scale,
            kernel_size: self.kernel_size,
        }
    }

    /// Spatial dims must divide by this (two 2x downsample blocks and the scale).
    pub fn divisor(&self) -> usize {
        self.scale.max(4)
    }

    fn taps(&self) -> usize {
        self.kernel_size * self.kernel_size
    }
}

/// Resampler weights together with the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampler<T = f32> {
    pub cfg: ResamplerConfig,
    pub params: ParamSet<T>,
}

/// Per-LR-pixel kernels: weights `[1, k*k, h, w]`, offsets `[1, 2*k*k, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField<T = f32> {
    pub kernel_size: usize,
    pub weights: Tensor<T>,
    pub offsets: Tensor<T>,
}

impl<T: Real> KernelField<T> {
    pub fn lr_height(&self) -> usize {
        self.weights.height()
    }

    pub fn lr_width(&self) -> usize {
        self.weights.width()
    }

    pub fn weight(&self, i: usize, j: usize, u: usize, v: usize) -> T {
        self.weights.at(0, u * self.kernel_size + v, i, j)
    }

    /// `(row, column)` offset of tap `(u, v)`.
    pub fn offset(&self, i: usize, j: usize, u: usize, v: usize) -> (T, T) {
        let t = u * self.kernel_size + v;
        (self.offsets.at(0, 2 * t, i, j), self.offsets.at(0, 2 * t + 1, i, j))
    }
}

impl<T: Real> Resampler<T> {
    pub fn init(cfg: ResamplerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer::new(&mut rng);
        let (c, f, kk) = (cfg.channels, cfg.feature_width, cfg.taps());
        let up = 4 / cfg.scale;
        init.conv("stem", c, f, 3, 1.0);
        init.conv("down1", 4 * f, f, 3, 1.0);
        init.conv("down2", 4 * f, f, 3, 1.0);
        for i in 0..cfg.residual_blocks {
            init.conv(&format!("res{i}.conv1"), f, f, 3, 1.0);
            init.conv(&format!("res{i}.conv2"), f, f, 3, 1.0);
        }
        init.conv("up", f, f * up * up, 3, 1.0);
        init.conv("weight_head.conv1", f, f, 3, 1.0);
        init.conv("weight_head.conv2", f, kk, 3, HEAD_GAIN);
        init.conv("offset_head.conv1", f, f, 3, 1.0);
        init.conv("offset_head.conv2", f, 2 * kk, 3, HEAD_GAIN);
        Ok(Resampler {
            cfg,
            params: init.finish(),
        })
    }

    pub fn from_params(cfg: ResamplerConfig, params: ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        params.check_layout(&Resampler::<T>::init(cfg.clone(), 0)?.params)?;
        Ok(Resampler { cfg, params })
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let d = self.cfg.divisor();
        if height % d != 0 || width % d != 0 {
            return Err(Error::Shape(format!(
                "resampler input {height}x{width} must be divisible by {d}"
            )));
        }
        Ok(())
    }

    /// Records kernel prediction on `g`; returns `(weights, offsets)` nodes.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, img: Var) -> (Var, Var) {
        let p = &self.params;
        let slope = T::from_f64(LEAKY_SLOPE);
        let up = 4 / self.cfg.scale;

        let mut h = conv(g, p, bound, "stem", img);
        h = g.leaky_relu(h, slope);
        for name in ["down1", "down2"] {
            h = g.pixel_unshuffle(h, 2);
            h = conv(g, p, bound, name, h);
            h = g.leaky_relu(h, slope);
        }
        for i in 0..self.cfg.residual_blocks {
            let mut r = conv(g, p, bound, &format!("res{i}.conv1"), h);
            r = g.leaky_relu(r, slope);
            r = conv(g, p, bound, &format!("res{i}.conv2"), r);
            h = g.add(h, r);
        }
        h = conv(g, p, bound, "up", h);
        if up > 1 {
            h = g.pixel_shuffle(h, up);
        }
        h = g.leaky_relu(h, slope);

        let mut w = conv(g, p, bound, "weight_head.conv1", h);
        w = g.leaky_relu(w, slope);
        w = conv(g, p, bound, "weight_head.conv2", w);
        w = g.softplus(w);
        let weights = g.normalize_channels(w);

        let mut o = conv(g, p, bound, "offset_head.conv1", h);
        o = g.leaky_relu(o, slope);
        o = conv(g, p, bound, "offset_head.conv2", o);
        let offsets = g.tanh_scale(o, T::from_f64(self.cfg.offset_max));
        (weights, offsets)
    }

    /// Kernel prediction followed by the adaptive downscale, on `g`.
    pub fn forward_downscale(&self, g: &mut Graph<T>, bound: &Bound, img: Var) -> Var {
        let (w, o) = self.forward(g, bound, img);
        g.downscale(img, w, o, self.cfg.geometry())
    }
}

/// Builds a resampler with deterministic fan-in-scaled weights.
pub fn init_resampler(cfg: ResamplerConfig, seed: u64) -> Result<Resampler> {
    Resampler::init(cfg, seed)
}

/// Predicts the kernel field for one image.
pub fn predict_kernels<T: Real>(model: &Resampler<T>, img: &ImageTensor) -> Result<KernelField<T>> {
    if img.channels() != model.cfg.channels {
        return Err(Error::Shape(format!(
            "resampler expects {} channels, got {}",
            model.cfg.channels,
            img.channels()
        )));
    }
    model.check_input(img.height(), img.width())?;
    let mut g = Graph::new();
    let bound = model.params.bind_frozen(&mut g);
    let x = g.input(img.to_tensor());
    let (w, o) = model.forward(&mut g, &bound, x);
    Ok(KernelField {
        kernel_size: model.cfg.kernel_size,
        weights: g.value(w).clone(),
        offsets: g.value(o).clone(),
    })
}

/// Applies a kernel field to an HR image (see [`crate::ops::downscale`]).
pub fn downscale_tensor<T: Real>(img: &Tensor<T>, kf: &KernelField<T>, cfg: &ResamplerConfig) -> Result<Tensor<T>> {
    let [_, _, h, w] = img.shape();
    let k = cfg.kernel_size;
    let (lh, lw) = (h / cfg.scale, w / cfg.scale);
    if h % cfg.scale != 0 || w % cfg.scale != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by scale {}", cfg.scale)));
    }
    if kf.kernel_size != k
        || kf.weights.shape()[1..] != [k * k, lh, lw]
        || kf.offsets.shape()[1..] != [2 * k * k, lh, lw]
        || kf.weights.batch() != img.batch()
        || kf.offsets.batch() != img.batch()
    {
        return Err(Error::Shape(format!(
            "kernel field {:?}/{:?} inconsistent with image {h}x{w}, k={k}, s={}",
            kf.weights.shape(),
            kf.offsets.shape(),
            cfg.scale
        )));
    }
    Ok(crate::ops::downscale(img, &kf.weights, &kf.offsets, cfg.geometry()))
}

pub fn downscale(img: &ImageTensor, kf: &KernelField<f32>, cfg: &ResamplerConfig) -> Result<ImageTensor> {
    let out = downscale_tensor(&img.to_tensor::<f32>(), kf, cfg)?;
    ImageTensor::from_tensor(&out, 0)
}
