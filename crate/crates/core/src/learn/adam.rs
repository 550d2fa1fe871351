//! Bias-corrected Adam with optional global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub clip_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_grad_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("adam_epsilon must be > 0".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_grad_norm must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: usize,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || {
            let mut s = ParamSet::new();
            for (k, t) in params.iter() {
                s.insert(k.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Real>(grads: &ParamSet<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|&g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// One Adam update in place. Aborts before touching anything if a gradient
/// is non-finite.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(&state.m)?;
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                name: name.clone(),
                iteration: state.step + 1,
            });
        }
    }
    let clip = match cfg.clip_grad_norm {
        Some(max) => {
            let norm = grad_norm(grads);
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("layout checked");
        let m = state.m.get_mut(name).expect("layout checked");
        let v = state.v.get_mut(name).expect("layout checked");
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = g.as_f64() * clip;
            let mn = b1 * m.as_f64() + (1.0 - b1) * g;
            let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
            *m = T::from_f64(mn);
            *v = T::from_f64(vn);
            let update = cfg.learning_rate * (mn / c1) / ((vn / c2).sqrt() + cfg.epsilon);
            *p = T::from_f64(p.as_f64() - update);
        }
    }
    Ok(())
}
