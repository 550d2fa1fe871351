//! Two-stage U-Net restorer built from Half Instance Normalization blocks.
//!
//! Each stage predicts a residual. Stage one sees the input `x`, stage two
//! sees `x + R1`, and stage-one encoder features are fused into the stage-two
//! encoder through 1x1 projections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::params::{conv, Bound, Initializer, ParamSet};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HinetConfig {
    pub depth: usize,
    pub base_width: usize,
    pub hin_blocks_per_level: usize,
    pub channels: usize,
}

impl Default for HinetConfig {
    fn default() -> Self {
        HinetConfig {
            depth: 3,
            base_width: 16,
            hin_blocks_per_level: 1,
            channels: 3,
        }
    }
}

impl HinetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.base_width == 0 || self.base_width % 2 != 0 {
            return Err(Error::Config(format!(
                "base_width must be even and positive, got {}",
                self.base_width
            )));
        }
        if self.hin_blocks_per_level == 0 {
            return Err(Error::Config("hin_blocks_per_level must be >= 1".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::UnsupportedChannels(self.channels));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial dims must divide by this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Per-stage outputs; `restored_i` is the stage input plus `residual_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputs<V> {
    pub residual_1: V,
    pub residual_2: V,
    pub restored_1: V,
    pub restored_2: V,
}

impl<V> StageOutputs<V> {
    pub fn map<U>(self, mut f: impl FnMut(V) -> U) -> StageOutputs<U> {
        StageOutputs {
            residual_1: f(self.residual_1),
            residual_2: f(self.residual_2),
            restored_1: f(self.restored_1),
            restored_2: f(self.restored_2),
        }
    }
}

fn init_hin_block<T: Real>(init: &mut Initializer<'_, T>, prefix: &str, cin: usize, cout: usize) {
    init.conv(&format!("{prefix}.conv1"), cin, cout, 3, 1.0);
    init.constant(&format!("{prefix}.norm.gamma"), [1, cout / 2, 1, 1], 1.0);
    init.constant(&format!("{prefix}.norm.beta"), [1, cout / 2, 1, 1], 0.0);
    init.conv(&format!("{prefix}.conv2"), cout, cout, 3, 1.0);
    init.conv(&format!("{prefix}.skip"), cin, cout, 1, 1.0);
}

fn hin_block_graph<T: Real>(g: &mut Graph<T>, p: &ParamSet<T>, bound: &Bound, prefix: &str, x: Var) -> Var {
    let slope = T::from_f64(LEAKY_SLOPE);
    let mut h = conv(g, p, bound, &format!("{prefix}.conv1"), x);
    let gamma = bound.var(p, &format!("{prefix}.norm.gamma"));
    let beta = bound.var(p, &format!("{prefix}.norm.beta"));
    h = g.half_instance_norm(h, gamma, beta);
    h = g.leaky_relu(h, slope);
    h = conv(g, p, bound, &format!("{prefix}.conv2"), h);
    let skip = conv(g, p, bound, &format!("{prefix}.skip"), x);
    g.add(h, skip)
}

/// A standalone HIN block: conv, half instance norm, Leaky-ReLU, conv, plus a
/// 1x1-projected skip.
#[derive(Clone, Debug, PartialEq)]
pub struct HinBlock<T = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub params: ParamSet<T>,
}

impl<T: Real> HinBlock<T> {
    pub fn init(in_channels: usize, out_channels: usize, seed: u64) -> Result<Self> {
        if out_channels == 0 || out_channels % 2 != 0 {
            return Err(Error::Shape(format!("HIN block needs an even channel count, got {out_channels}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer::new(&mut rng);
        init_hin_block(&mut init, "block", in_channels, out_channels);
        Ok(HinBlock {
            in_channels,
            out_channels,
            params: init.finish(),
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        let c = g.value(x).channels();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "HIN block expects {} channels, got {c}",
                self.in_channels
            )));
        }
        Ok(hin_block_graph(g, &self.params, bound, "block", x))
    }
}

/// Applies a HIN block to a feature tensor.
pub fn hin_block<T: Real>(block: &HinBlock<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = block.params.bind_frozen(&mut g);
    let x = g.input(features.clone());
    let y = block.forward(&mut g, &bound, x)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hinet<T = f32> {
    pub cfg: HinetConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> Hinet<T> {
    pub fn init(cfg: HinetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer::new(&mut rng);
        for stage in 1..=2 {
            let s = format!("s{stage}");
            init.conv(&format!("{s}.in"), cfg.channels, cfg.width(0), 3, 1.0);
            for l in 0..cfg.depth {
                let w = cfg.width(l);
                for b in 0..cfg.hin_blocks_per_level {
                    init_hin_block(&mut init, &format!("{s}.enc{l}.hin{b}"), w, w);
                }
                if stage == 2 {
                    init.conv(&format!("{s}.fuse{l}"), w, w, 1, 1.0);
                }
                if l + 1 < cfg.depth {
                    init.conv(&format!("{s}.down{l}"), 4 * w, cfg.width(l + 1), 3, 1.0);
                }
            }
            for l in (0..cfg.depth - 1).rev() {
                let w = cfg.width(l);
                init.conv(&format!("{s}.up{l}"), cfg.width(l + 1), 4 * w, 1, 1.0);
                init.conv(&format!("{s}.dec{l}.conv1"), w, w, 3, 1.0);
                init.conv(&format!("{s}.dec{l}.conv2"), w, w, 3, 1.0);
            }
            init.zero_conv(&format!("{s}.out"), cfg.width(0), cfg.channels, 3);
        }
        Ok(Hinet {
            cfg,
            params: init.finish(),
        })
    }

    pub fn from_params(cfg: HinetConfig, params: ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        params.check_layout(&Hinet::<T>::init(cfg.clone(), 0)?.params)?;
        Ok(Hinet { cfg, params })
    }

    pub fn check_input(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        if channels != self.cfg.channels {
            return Err(Error::Shape(format!(
                "restorer expects {} channels, got {channels}",
                self.cfg.channels
            )));
        }
        let d = self.cfg.divisor();
        if height % d != 0 || width % d != 0 {
            return Err(Error::Shape(format!(
                "restorer input {height}x{width} must be divisible by {d}"
            )));
        }
        Ok(())
    }

    /// One U-Net stage; returns the residual and the encoder features.
    fn stage(&self, g: &mut Graph<T>, bound: &Bound, stage: usize, x: Var, fuse: Option<&[Var]>) -> (Var, Vec<Var>) {
        let p = &self.params;
        let cfg = &self.cfg;
        let slope = T::from_f64(LEAKY_SLOPE);
        let s = format!("s{stage}");

        let mut h = conv(g, p, bound, &format!("{s}.in"), x);
        let mut skips = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            for b in 0..cfg.hin_blocks_per_level {
                h = hin_block_graph(g, p, bound, &format!("{s}.enc{l}.hin{b}"), h);
            }
            if let Some(prev) = fuse {
                let f = conv(g, p, bound, &format!("{s}.fuse{l}"), prev[l]);
                h = g.add(h, f);
            }
            skips.push(h);
            if l + 1 < cfg.depth {
                h = g.pixel_unshuffle(h, 2);
                h = conv(g, p, bound, &format!("{s}.down{l}"), h);
                h = g.leaky_relu(h, slope);
            }
        }
        for l in (0..cfg.depth - 1).rev() {
            h = conv(g, p, bound, &format!("{s}.up{l}"), h);
            h = g.pixel_shuffle(h, 2);
            h = g.add(h, skips[l]);
            let mut r = conv(g, p, bound, &format!("{s}.dec{l}.conv1"), h);
            r = g.leaky_relu(r, slope);
            r = conv(g, p, bound, &format!("{s}.dec{l}.conv2"), r);
            h = g.add(h, r);
        }
        (conv(g, p, bound, &format!("{s}.out"), h), skips)
    }

    /// Records both stages on `g`. Outputs are not clamped.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> StageOutputs<Var> {
        let (residual_1, enc1) = self.stage(g, bound, 1, x, None);
        let restored_1 = g.add(x, residual_1);
        let (residual_2, _) = self.stage(g, bound, 2, restored_1, Some(&enc1));
        let restored_2 = g.add(restored_1, residual_2);
        StageOutputs {
            residual_1,
            residual_2,
            restored_1,
            restored_2,
        }
    }
}

pub fn init_hinet(cfg: HinetConfig, seed: u64) -> Result<Hinet> {
    Hinet::init(cfg, seed)
}

/// Runs both stages on a batch `[n, c, h, w]`; outputs are unclamped.
pub fn hinet_forward<T: Real>(model: &Hinet<T>, x: &Tensor<T>) -> Result<StageOutputs<Tensor<T>>> {
    model.check_input(x.channels(), x.height(), x.width())?;
    let mut g = Graph::new();
    let bound = model.params.bind_frozen(&mut g);
    let xv = g.input(x.clone());
    let out = model.forward(&mut g, &bound, xv);
    Ok(out.map(|v| g.value(v).clone()))
}

/// Restores one image of any size: reflect-pads to the divisor, runs both
/// stages, crops back and clamps `restored_2` to `[0, 1]`.
pub fn restore<T: Real>(model: &Hinet<T>, img: &ImageTensor) -> Result<ImageTensor> {
    let d = model.cfg.divisor();
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (h.div_ceil(d) * d, w.div_ceil(d) * d);
    let x = img.to_tensor::<T>().reflect_pad_to(ph, pw);
    let out = hinet_forward(model, &x)?;
    ImageTensor::from_tensor(&out.restored_2.crop(h, w), 0)
}
