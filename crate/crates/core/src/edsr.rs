//! EDSR-style super-resolution upscaler.
//!
//! Head convolution, a body of residual blocks (conv, ReLU, conv, scaled and
//! added to the block input) closed by one more convolution, a global skip
//! from the head, then a sub-pixel convolution upsampler and a tail
//! convolution back to image channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::params::{conv, Bound, Initializer, ParamSet};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdsrConfig {
    pub scale: usize,
    pub residual_blocks: usize,
    pub feature_width: usize,
    pub residual_scaling: f64,
    pub channels: usize,
}

impl Default for EdsrConfig {
    fn default() -> Self {
        EdsrConfig {
            scale: 2,
            residual_blocks: 8,
            feature_width: 64,
            residual_scaling: 1.0,
            channels: 3,
        }
    }
}

impl EdsrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 1 {
            return Err(Error::Config("scale must be >= 1".into()));
        }
        if self.feature_width == 0 || self.residual_blocks == 0 {
            return Err(Error::Config("feature_width and residual_blocks must be >= 1".into()));
        }
        if !self.residual_scaling.is_finite() {
            return Err(Error::Config("residual_scaling must be finite".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::UnsupportedChannels(self.channels));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edsr<T = f32> {
    pub cfg: EdsrConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> Edsr<T> {
    pub fn init(cfg: EdsrConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer::new(&mut rng);
        let (c, f, s) = (cfg.channels, cfg.feature_width, cfg.scale);
        init.conv("head", c, f, 3, 1.0);
        for i in 0..cfg.residual_blocks {
            init.conv(&format!("body{i}.conv1"), f, f, 3, 1.0);
            init.conv(&format!("body{i}.conv2"), f, f, 3, 1.0);
        }
        init.conv("body.conv", f, f, 3, 1.0);
        init.conv("up", f, f * s * s, 3, 1.0);
        init.conv("tail", f, c, 3, 1.0);
        Ok(Edsr {
            cfg,
            params: init.finish(),
        })
    }

    pub fn from_params(cfg: EdsrConfig, params: ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        params.check_layout(&Edsr::<T>::init(cfg.clone(), 0)?.params)?;
        Ok(Edsr { cfg, params })
    }

    /// Records the upscale on `g`; the output is not clamped.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, lr: Var) -> Var {
        let p = &self.params;
        let head = conv(g, p, bound, "head", lr);
        let mut h = head;
        for i in 0..self.cfg.residual_blocks {
            let mut r = conv(g, p, bound, &format!("body{i}.conv1"), h);
            r = g.relu(r);
            r = conv(g, p, bound, &format!("body{i}.conv2"), r);
            if self.cfg.residual_scaling != 1.0 {
                r = g.scale(r, T::from_f64(self.cfg.residual_scaling));
            }
            h = g.add(h, r);
        }
        h = conv(g, p, bound, "body.conv", h);
        h = g.add(head, h);
        h = conv(g, p, bound, "up", h);
        if self.cfg.scale > 1 {
            h = g.pixel_shuffle(h, self.cfg.scale);
        }
        conv(g, p, bound, "tail", h)
    }
}

pub fn init_edsr(cfg: EdsrConfig, seed: u64) -> Result<Edsr> {
    Edsr::init(cfg, seed)
}

/// Upscales one image; the result is clamped to `[0, 1]`.
pub fn upscale<T: Real>(model: &Edsr<T>, lr: &ImageTensor) -> Result<ImageTensor> {
    if lr.channels() != model.cfg.channels {
        return Err(Error::Shape(format!(
            "upscaler expects {} channels, got {}",
            model.cfg.channels,
            lr.channels()
        )));
    }
    let mut g = Graph::new();
    let bound = model.params.bind_frozen(&mut g);
    let x = g.input(lr.to_tensor());
    let y = model.forward(&mut g, &bound, x);
    ImageTensor::from_tensor(g.value(y), 0)
}
