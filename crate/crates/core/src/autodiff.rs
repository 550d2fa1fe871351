//! A small reverse-mode tape over [`Tensor`] operations.
//!
//! A [`Graph`] records each operation's output together with what its
//! backward pass needs. [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every node that depends on a parameter leaf.

use crate::ops::{self, DownscaleGeometry, HalfNormStats};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Cap and floor used wherever PSNR is computed.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const MSE_FLOOR: f64 = 1e-12;

/// PSNR in dB for peak 1.0, floored MSE and capped result.
pub fn psnr_from_mse(mse: f64) -> f64 {
    (10.0 * (1.0 / mse.max(MSE_FLOOR)).log10()).min(PSNR_CAP_DB)
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Scale(Var, T),
    LeakyRelu(Var, T),
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    Softplus(Var),
    TanhScale(Var, T),
    NormalizeChannels(Var),
    Downscale {
        img: Var,
        weights: Var,
        offsets: Var,
        geom: DownscaleGeometry,
    },
    HalfInstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: HalfNormStats<T>,
    },
    L1(Var, Var),
    Psnr { a: Var, b: Var, mse: Vec<f64> },
    Dot(Var, Tensor<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`].
/// Audit view of one half-instance-norm node.
#[derive(Clone, Debug)]
pub struct NormProbe<T> {
    /// The normalized half of the node input, `[n, c/2, h, w]`.
    pub input: Tensor<T>,
    pub normalized: Tensor<T>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant leaf (no gradient is tracked).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b));
        let ng = self.needs(&[x, w, b]);
        self.push(out, Op::Conv2d { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self
            .value(a)
            .map(|v| if v > T::zero() { v } else { v * slope });
        let ng = self.needs(&[a]);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Var {
        let out = ops::pixel_shuffle(self.value(a), r);
        let ng = self.needs(&[a]);
        self.push(out, Op::PixelShuffle(a, r), ng)
    }

    pub fn pixel_unshuffle(&mut self, a: Var, r: usize) -> Var {
        let out = ops::pixel_unshuffle(self.value(a), r);
        let ng = self.needs(&[a]);
        self.push(out, Op::PixelUnshuffle(a, r), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::softplus);
        let ng = self.needs(&[a]);
        self.push(out, Op::Softplus(a), ng)
    }

    /// `s * tanh(a)`
    pub fn tanh_scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v.tanh() * s);
        let ng = self.needs(&[a]);
        self.push(out, Op::TanhScale(a, s), ng)
    }

    pub fn normalize_channels(&mut self, a: Var) -> Var {
        let out = ops::normalize_channels(self.value(a));
        let ng = self.needs(&[a]);
        self.push(out, Op::NormalizeChannels(a), ng)
    }

    pub fn downscale(&mut self, img: Var, weights: Var, offsets: Var, geom: DownscaleGeometry) -> Var {
        let out = ops::downscale(self.value(img), self.value(weights), self.value(offsets), geom);
        let ng = self.needs(&[img, weights, offsets]);
        self.push(
            out,
            Op::Downscale {
                img,
                weights,
                offsets,
                geom,
            },
            ng,
        )
    }

    pub fn half_instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (out, stats) = ops::half_instance_norm(self.value(x), self.value(gamma), self.value(beta));
        let ng = self.needs(&[x, gamma, beta]);
        self.push(
            out,
            Op::HalfInstanceNorm {
                x,
                gamma,
                beta,
                stats,
            },
            ng,
        )
    }

    /// Mean absolute difference over every element; a scalar node.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "l1 shape mismatch");
        let sum: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y).abs().as_f64())
            .sum();
        let out = Tensor::scalar(T::from_f64(sum / va.len() as f64));
        let ng = self.needs(&[a, b]);
        self.push(out, Op::L1(a, b), ng)
    }

    /// Batch-mean of per-sample PSNR (peak 1.0, capped); a scalar node.
    pub fn psnr(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "psnr shape mismatch");
        let n = va.batch();
        let mse: Vec<f64> = (0..n)
            .map(|s| {
                let (xa, xb) = (va.sample(s), vb.sample(s));
                let se: f64 = xa
                    .iter()
                    .zip(xb)
                    .map(|(&x, &y)| {
                        let d = x.as_f64() - y.as_f64();
                        d * d
                    })
                    .sum();
                se / xa.len() as f64
            })
            .collect();
        let mean = mse.iter().map(|&m| psnr_from_mse(m)).sum::<f64>() / n as f64;
        let ng = self.needs(&[a, b]);
        self.push(Tensor::scalar(T::from_f64(mean)), Op::Psnr { a, b, mse }, ng)
    }

    /// `sum(a * weights)`, a scalar node; weights are constants.
    pub fn dot(&mut self, a: Var, weights: Tensor<T>) -> Var {
        assert_eq!(self.value(a).shape(), weights.shape(), "dot shape mismatch");
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&x, &w)| acc + x * w);
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Dot(a, weights), ng)
    }

    /// Every half-instance-norm node in recording order, with the half it
    /// normalizes and that half's pre-affine normalized values.
    pub fn instance_norm_probes(&self) -> Vec<NormProbe<T>> {
        self.nodes
            .iter()
            .filter_map(|node| match &node.op {
                Op::HalfInstanceNorm { x, stats, .. } => {
                    let xv = self.value(*x);
                    let [n, c, h, w] = xv.shape();
                    let half = c / 2;
                    let mut input = Tensor::zeros([n, half, h, w]);
                    let mut normalized = Tensor::zeros([n, half, h, w]);
                    for b in 0..n {
                        for ch in 0..half {
                            let mu = stats.mean[b * half + ch];
                            let inv = stats.inv_std[b * half + ch];
                            for y in 0..h {
                                for xx in 0..w {
                                    let v = xv.at(b, ch, y, xx);
                                    *input.at_mut(b, ch, y, xx) = v;
                                    *normalized.at_mut(b, ch, y, xx) = (v - mu) * inv;
                                }
                            }
                        }
                    }
                    Some(NormProbe { input, normalized })
                }
                _ => None,
            })
            .collect()
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut contribs: Vec<(Var, Tensor<T>)> = Vec::new();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b } => {
                    let need_x = self.nodes[x.0].needs_grad;
                    let (gx, gw, gb) = ops::conv2d_backward(self.value(*x), self.value(*w), &g, need_x);
                    if let Some(gx) = gx {
                        contribs.push((*x, gx));
                    }
                    contribs.push((*w, gw));
                    let bshape = self.value(*b).shape();
                    contribs.push((*b, gb.reshape(bshape).expect("bias shape")));
                }
                Op::Add(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g.clone()));
                }
                Op::Scale(a, s) => contribs.push((*a, g.map(|v| v * *s))),
                Op::LeakyRelu(a, slope) => {
                    let xa = self.value(*a);
                    let mut ga = g.clone();
                    for (d, &x) in ga.data_mut().iter_mut().zip(xa.data()) {
                        if x <= T::zero() {
                            *d = *d * *slope;
                        }
                    }
                    contribs.push((*a, ga));
                }
                Op::PixelShuffle(a, r) => contribs.push((*a, ops::pixel_unshuffle(&g, *r))),
                Op::PixelUnshuffle(a, r) => contribs.push((*a, ops::pixel_shuffle(&g, *r))),
                Op::Softplus(a) => {
                    let xa = self.value(*a);
                    let mut ga = g.clone();
                    for (d, &x) in ga.data_mut().iter_mut().zip(xa.data()) {
                        *d = *d * ops::sigmoid(x);
                    }
                    contribs.push((*a, ga));
                }
                Op::TanhScale(a, s) => {
                    let xa = self.value(*a);
                    let mut ga = g.clone();
                    for (d, &x) in ga.data_mut().iter_mut().zip(xa.data()) {
                        let t = x.tanh();
                        *d = *d * *s * (T::one() - t * t);
                    }
                    contribs.push((*a, ga));
                }
                Op::NormalizeChannels(a) => {
                    contribs.push((*a, ops::normalize_channels_backward(self.value(*a), &g)));
                }
                Op::Downscale {
                    img,
                    weights,
                    offsets,
                    geom,
                } => {
                    let gr = ops::downscale_backward(
                        self.value(*img),
                        self.value(*weights),
                        self.value(*offsets),
                        *geom,
                        &g,
                    );
                    contribs.push((*img, gr.img));
                    contribs.push((*weights, gr.weights));
                    contribs.push((*offsets, gr.offsets));
                }
                Op::HalfInstanceNorm { x, gamma, beta, stats } => {
                    let (gx, gg, gb) =
                        ops::half_instance_norm_backward(self.value(*x), self.value(*gamma), stats, &g);
                    contribs.push((*x, gx));
                    let shape = self.value(*gamma).shape();
                    contribs.push((*gamma, gg.reshape(shape).expect("gamma shape")));
                    contribs.push((*beta, gb.reshape(shape).expect("beta shape")));
                }
                Op::L1(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let scale = g.data()[0] / T::from_f64(va.len() as f64);
                    let mut ga = Tensor::zeros(va.shape());
                    for ((d, &x), &y) in ga.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        let diff = x - y;
                        *d = if diff > T::zero() {
                            scale
                        } else if diff < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        };
                    }
                    contribs.push((*b, ga.map(|v| -v)));
                    contribs.push((*a, ga));
                }
                Op::Psnr { a, b, mse } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let n = va.batch();
                    let per = va.len() / n;
                    let upstream = g.data()[0].as_f64();
                    let mut ga = Tensor::zeros(va.shape());
                    for (s, &m) in mse.iter().enumerate() {
                        // flat inside the floor and above the cap
                        if m <= MSE_FLOOR || psnr_from_mse(m) >= PSNR_CAP_DB {
                            continue;
                        }
                        let dpsnr_dmse = -10.0 / (std::f64::consts::LN_10 * m);
                        let coef = upstream * dpsnr_dmse * 2.0 / (per as f64 * n as f64);
                        let (xa, xb) = (va.sample(s), vb.sample(s));
                        for ((d, &x), &y) in ga.sample_mut(s).iter_mut().zip(xa).zip(xb) {
                            *d = T::from_f64(coef * (x.as_f64() - y.as_f64()));
                        }
                    }
                    contribs.push((*b, ga.map(|v| -v)));
                    contribs.push((*a, ga));
                }
                Op::Dot(a, w) => {
                    let s = g.data()[0];
                    contribs.push((*a, w.map(|v| v * s)));
                }
            }
            for (v, t) in contribs {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Gradients { grads }
    }
}
