//! Named parameter collections shared by the three networks.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ordered map of parameter name to array. Order is insertion order and is
/// what checkpoints and optimizer state follow.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Prefixes every name, e.g. `"edsr."`.
    pub fn prefixed(&self, prefix: &str) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
                .collect(),
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet<T>) {
        self.entries.extend(other.entries);
    }

    /// Checks that `self` has exactly the names and shapes of `reference`.
    pub fn check_layout(&self, reference: &ParamSet<T>) -> Result<()> {
        if self.len() != reference.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter arrays, found {}",
                reference.len(),
                self.len()
            )));
        }
        for (name, t) in reference.iter() {
            match self.get(name) {
                Some(mine) if mine.shape() == t.shape() => {}
                Some(mine) => {
                    return Err(Error::Shape(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        mine.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Shape(format!("missing parameter `{name}`"))),
            }
        }
        Ok(())
    }

    /// Registers every array as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.entries.values().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Registers every array as a constant leaf (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.entries.values().map(|t| g.input(t.clone())).collect(),
        }
    }

    pub(crate) fn index_of(&self, name: &str) -> usize {
        self.entries
            .get_index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Collects gradients for every bound parameter (zeros where untouched).
    pub fn gradients(&self, bound: &Bound, grads: &mut Gradients<T>) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .zip(&bound.vars)
                .map(|((k, t), &v)| {
                    let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()));
                    (k.clone(), g)
                })
                .collect(),
        }
    }
}

/// Graph handles for a bound [`ParamSet`], in the set's order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var<T: Real>(&self, params: &ParamSet<T>, name: &str) -> Var {
        self.vars[params.index_of(name)]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Builds parameter sets with fan-in-scaled uniform initialization.
///
/// Values are drawn in `f64` and cast, so `f32` and `f64` parameter sets
/// built from the same seed agree to `f32` precision.
pub(crate) struct Initializer<'a, T> {
    pub rng: &'a mut ChaCha8Rng,
    pub params: ParamSet<T>,
}

impl<'a, T: Real> Initializer<'a, T> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Initializer {
            rng,
            params: ParamSet::new(),
        }
    }

    /// Conv weight `[out, in, k, k]` uniform in `±gain/sqrt(in*k*k)`, bias likewise.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
        let bound = gain / ((cin * k * k) as f64).sqrt();
        let w: Vec<T> = (0..cout * cin * k * k)
            .map(|_| T::from_f64(self.rng.random_range(-bound..=bound)))
            .collect();
        let b: Vec<T> = (0..cout)
            .map(|_| T::from_f64(self.rng.random_range(-bound..=bound)))
            .collect();
        self.params.insert(
            format!("{name}.weight"),
            Tensor::from_vec([cout, cin, k, k], w).expect("conv weight shape"),
        );
        self.params
            .insert(format!("{name}.bias"), Tensor::from_vec([cout, 1, 1, 1], b).expect("bias"));
    }

    pub fn zero_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.params
            .insert(format!("{name}.weight"), Tensor::zeros([cout, cin, k, k]));
        self.params
            .insert(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1]));
    }

    pub fn constant(&mut self, name: &str, shape: [usize; 4], value: f64) {
        self.params.insert(name, Tensor::full(shape, T::from_f64(value)));
    }

    pub fn finish(self) -> ParamSet<T> {
        self.params
    }
}

/// Applies a named conv from `params` on the graph.
pub(crate) fn conv<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    bound: &Bound,
    name: &str,
    x: Var,
) -> Var {
    let w = bound.var(params, &format!("{name}.weight"));
    let b = bound.var(params, &format!("{name}.bias"));
    g.conv2d(x, w, b)
}
