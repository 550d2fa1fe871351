//! The jointly trained resampler + upscaler pair.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::edsr::{Edsr, EdsrConfig};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::params::{Bound, ParamSet};
use crate::resampler::{Resampler, ResamplerConfig};
use crate::seed::derive_seed;
use crate::tensor::{Real, Tensor};

const RESAMPLER_PREFIX: &str = "resampler.";
const EDSR_PREFIX: &str = "edsr.";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarConfig {
    pub resampler: ResamplerConfig,
    pub edsr: EdsrConfig,
}

impl CarConfig {
    pub fn validate(&self) -> Result<()> {
        self.resampler.validate()?;
        self.edsr.validate()?;
        if self.resampler.scale != self.edsr.scale {
            return Err(Error::Config(format!(
                "resampler scale {} differs from upscaler scale {}",
                self.resampler.scale, self.edsr.scale
            )));
        }
        if self.resampler.channels != self.edsr.channels {
            return Err(Error::Config("resampler and upscaler channel counts differ".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CarModel<T = f32> {
    pub resampler: Resampler<T>,
    pub edsr: Edsr<T>,
}

impl<T: Real> CarModel<T> {
    pub fn init(cfg: &CarConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(CarModel {
            resampler: Resampler::init(cfg.resampler.clone(), derive_seed(seed, "init/resampler"))?,
            edsr: Edsr::init(cfg.edsr.clone(), derive_seed(seed, "init/edsr"))?,
        })
    }

    pub fn config(&self) -> CarConfig {
        CarConfig {
            resampler: self.resampler.cfg.clone(),
            edsr: self.edsr.cfg.clone(),
        }
    }

    /// All arrays in one set, names prefixed `resampler.` and `edsr.`.
    pub fn params(&self) -> ParamSet<T> {
        let mut all = self.resampler.params.prefixed(RESAMPLER_PREFIX);
        all.extend(self.edsr.params.prefixed(EDSR_PREFIX));
        all
    }

    pub fn from_params(cfg: &CarConfig, params: &ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        let resampler = params.strip_prefix(RESAMPLER_PREFIX);
        let edsr = params.strip_prefix(EDSR_PREFIX);
        if resampler.len() + edsr.len() != params.len() {
            return Err(Error::Shape("unexpected parameter names in CAR set".into()));
        }
        Ok(CarModel {
            resampler: Resampler::from_params(cfg.resampler.clone(), resampler)?,
            edsr: Edsr::from_params(cfg.edsr.clone(), edsr)?,
        })
    }

    /// Binds both halves as trainable leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> (Bound, Bound) {
        (self.resampler.params.bind(g), self.edsr.params.bind(g))
    }

    pub fn bind_frozen(&self, g: &mut Graph<T>) -> (Bound, Bound) {
        (self.resampler.params.bind_frozen(g), self.edsr.params.bind_frozen(g))
    }

    /// Returns `(lr, reconstruction)`; neither is clamped.
    pub fn forward(&self, g: &mut Graph<T>, bound: &(Bound, Bound), x: Var) -> (Var, Var) {
        let lr = self.resampler.forward_downscale(g, &bound.0, x);
        let rec = self.edsr.forward(g, &bound.1, lr);
        (lr, rec)
    }

    /// Gradients from a backward pass, in the order of [`CarModel::params`].
    pub fn gradients(&self, bound: &(Bound, Bound), grads: &mut crate::autodiff::Gradients<T>) -> ParamSet<T> {
        let mut all = self
            .resampler
            .params
            .gradients(&bound.0, grads)
            .prefixed(RESAMPLER_PREFIX);
        all.extend(self.edsr.params.gradients(&bound.1, grads).prefixed(EDSR_PREFIX));
        all
    }

    /// Unclamped reconstruction of a batch.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.channels() != self.resampler.cfg.channels {
            return Err(Error::Shape(format!(
                "CAR expects {} channels, got {}",
                self.resampler.cfg.channels,
                x.channels()
            )));
        }
        self.resampler.check_input(x.height(), x.width())?;
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let xv = g.input(x.clone());
        let (_, rec) = self.forward(&mut g, &bound, xv);
        Ok(g.value(rec).clone())
    }

    /// Downscale then upscale one image, clamped to `[0, 1]`.
    pub fn restore(&self, img: &ImageTensor) -> Result<ImageTensor> {
        ImageTensor::from_tensor(&self.reconstruct(&img.to_tensor())?, 0)
    }
}
