//! Fixtures, gradient-check harnesses and desk-scale training setups shared
//! by the integration and acceptance tests.

use std::cell::RefCell;

use arin::autodiff::{Gradients, Graph, Var};
use arin::degrade::{DegradationSpec, MaskParams};
use arin::edsr::Edsr;
use arin::hinet::HinBlock;
use arin::imaging::{degrade_sample, synthetic_painting};
use arin::learn::gradcheck::{flatten, grad_check, unflatten, GradCheck};
use arin::learn::loss::psnr_loss_graph;
use arin::learn::{Checkpoint, ModelSpec, StageInput, TrainConfig};
use arin::ops::DownscaleGeometry;
use arin::params::{Bound, ParamSet};
use arin::seed::derive_seed;
use arin::{CarConfig, EdsrConfig, Hinet, HinetConfig, ImageTensor, PairedSample, ResamplerConfig, StageOutputs, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: [usize; 4], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_image(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut r = rng(seed);
    ImageTensor::new(c, h, w, (0..c * h * w).map(|_| r.random_range(0.0f32..=1.0)).collect()).unwrap()
}

/// Positive weights normalized per LR pixel and offsets uniform in `±max_offset`.
pub fn random_kernel_field(n: usize, lh: usize, lw: usize, k: usize, max_offset: f64, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut w = random_tensor([n, k * k, lh, lw], 0.05, 1.0, seed);
    for b in 0..n {
        for i in 0..lh {
            for j in 0..lw {
                let s: f64 = (0..k * k).map(|t| w.at(b, t, i, j)).sum();
                for t in 0..k * k {
                    *w.at_mut(b, t, i, j) /= s;
                }
            }
        }
    }
    let o = random_tensor([n, 2 * k * k, lh, lw], -max_offset, max_offset, seed ^ 0x5eed);
    (w, o)
}

/// Pulls parameter gradients, in the set's order, out of a backward pass.
pub type Collect = Box<dyn FnOnce(&mut Gradients<f64>) -> ParamSet<f64>>;

/// Scalar loss over a parameter set (bound by the closure) and leaf tensors.
pub trait LossFn: Fn(&mut Graph<f64>, &ParamSet<f64>, &[Var]) -> (Var, Collect) {}
impl<F: Fn(&mut Graph<f64>, &ParamSet<f64>, &[Var]) -> (Var, Collect)> LossFn for F {}

/// Binds `ps` as tracked leaves.
pub fn bind(g: &mut Graph<f64>, ps: &ParamSet<f64>) -> (Bound, Collect) {
    let bound = ps.bind(g);
    let (ps, b2) = (ps.clone(), Bound::clone(&bound));
    (bound, Box::new(move |gr| ps.gradients(&b2, gr)))
}

fn evaluate(params: &ParamSet<f64>, leaves: &[(&str, Tensor<f64>)], flat: &[f64], f: &impl LossFn, grad: bool) -> (f64, Vec<f64>) {
    let np = params.num_scalars();
    let ps = unflatten(params, &flat[..np]);
    let mut g = Graph::new();
    let mut at = np;
    let mut vars = Vec::with_capacity(leaves.len());
    for (_, t) in leaves {
        let n = t.len();
        vars.push(g.param(Tensor::from_vec(t.shape(), flat[at..at + n].to_vec()).unwrap()));
        at += n;
    }
    let (loss, collect) = f(&mut g, &ps, &vars);
    let value = g.value(loss).data()[0];
    if !grad {
        return (value, Vec::new());
    }
    let mut grads = g.backward(loss);
    let mut out = flatten(&collect(&mut grads));
    for (v, (_, t)) in vars.iter().zip(leaves) {
        match grads.get(*v) {
            Some(gt) => out.extend_from_slice(gt.data()),
            None => out.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    (value, out)
}

/// Central-difference check of every parameter and leaf, reported per
/// segment: `params` (when non-empty) followed by each named leaf.
pub fn check_gradients(params: &ParamSet<f64>, leaves: &[(&str, Tensor<f64>)], f: impl LossFn) -> Vec<(String, GradCheck)> {
    let mut point = flatten(params);
    for (_, t) in leaves {
        point.extend_from_slice(t.data());
    }
    let (_, analytic) = evaluate(params, leaves, &point, &f, true);
    let mut segments = Vec::new();
    if !params.is_empty() {
        segments.push(("params".to_string(), 0, params.num_scalars()));
    }
    let mut at = params.num_scalars();
    for (name, t) in leaves {
        segments.push((name.to_string(), at, at + t.len()));
        at += t.len();
    }
    segments
        .into_iter()
        .map(|(name, lo, hi)| {
            let buf = RefCell::new(point.clone());
            let check = grad_check(
                |seg| {
                    let mut b = buf.borrow_mut();
                    b[lo..hi].copy_from_slice(seg);
                    evaluate(params, leaves, &b, &f, false).0
                },
                &analytic[lo..hi],
                &point[lo..hi],
                FD_STEP,
            );
            (name, check)
        })
        .collect()
}

/// Max relative error over all segments.
pub fn worst(checks: &[(String, GradCheck)]) -> f64 {
    checks.iter().map(|(_, c)| c.max_rel_error).fold(0.0, f64::max)
}

pub fn gradcheck_downscale(seed: u64) -> Vec<(String, GradCheck)> {
    let (s, k) = (2, 6);
    let img = random_tensor([1, 3, 8, 8], 0.0, 1.0, seed);
    let (w, o) = random_kernel_field(1, 4, 4, k, 1.5, seed + 1);
    let probe = random_tensor([1, 3, 4, 4], -1.0, 1.0, seed + 2);
    check_gradients(&ParamSet::new(), &[("image", img), ("weights", w), ("offsets", o)], move |g, ps, v| {
        let (_, collect) = bind(g, ps);
        let y = g.downscale(v[0], v[1], v[2], DownscaleGeometry { scale: s, kernel_size: k });
        (g.dot(y, probe.clone()), collect)
    })
}

pub fn tiny_edsr() -> EdsrConfig {
    EdsrConfig {
        scale: 2,
        residual_blocks: 1,
        feature_width: 4,
        residual_scaling: 1.0,
        channels: 3,
    }
}

pub fn gradcheck_upscale(seed: u64) -> Vec<(String, GradCheck)> {
    let cfg = tiny_edsr();
    let model = Edsr::<f64>::init(cfg.clone(), seed).unwrap();
    let lr = random_tensor([1, 3, 8, 8], 0.0, 1.0, seed + 1);
    let probe = random_tensor([1, 3, 16, 16], -1.0, 1.0, seed + 2);
    check_gradients(&model.params, &[("input", lr)], move |g, ps, v| {
        let (b, collect) = bind(g, ps);
        let m = Edsr {
            cfg: cfg.clone(),
            params: ps.clone(),
        };
        let y = m.forward(g, &b, v[0]);
        (g.dot(y, probe.clone()), collect)
    })
}

pub fn gradcheck_hin_block(seed: u64) -> Vec<(String, GradCheck)> {
    let mut block = HinBlock::<f64>::init(3, 4, seed).unwrap();
    // Move the affine parameters off their identity initialization.
    for name in ["block.norm.gamma", "block.norm.beta"] {
        let t = block.params.get_mut(name).unwrap();
        *t = random_tensor(t.shape(), 0.5, 1.5, seed + 7);
    }
    let x = random_tensor([2, 3, 8, 8], -1.0, 1.0, seed + 1);
    let probe = random_tensor([2, 4, 8, 8], -1.0, 1.0, seed + 2);
    let (cin, cout) = (block.in_channels, block.out_channels);
    check_gradients(&block.params, &[("features", x)], move |g, ps, v| {
        let (b, collect) = bind(g, ps);
        let blk = HinBlock {
            in_channels: cin,
            out_channels: cout,
            params: ps.clone(),
        };
        let y = blk.forward(g, &b, v[0]).unwrap();
        (g.dot(y, probe.clone()), collect)
    })
}

pub fn gradcheck_l1(seed: u64) -> Vec<(String, GradCheck)> {
    let a = random_tensor([2, 3, 8, 8], 0.0, 1.0, seed);
    let c = random_tensor([2, 3, 8, 8], 0.0, 1.0, seed + 1);
    check_gradients(&ParamSet::new(), &[("x_rec", a), ("x_c", c)], |g, ps, v| {
        let (_, collect) = bind(g, ps);
        (g.l1(v[0], v[1]), collect)
    })
}

pub fn gradcheck_psnr_loss(seed: u64) -> Vec<(String, GradCheck)> {
    let c = random_tensor([2, 3, 8, 8], 0.0, 1.0, seed);
    let r1 = random_tensor([2, 3, 8, 8], 0.0, 1.0, seed + 1);
    let r2 = random_tensor([2, 3, 8, 8], 0.0, 1.0, seed + 2);
    check_gradients(
        &ParamSet::new(),
        &[("restored_1", r1), ("restored_2", r2), ("x_c", c)],
        |g, ps, v| {
            let (_, collect) = bind(g, ps);
            let stages = StageOutputs {
                residual_1: v[0],
                residual_2: v[1],
                restored_1: v[0],
                restored_2: v[1],
            };
            (psnr_loss_graph(g, &stages, v[2]), collect)
        },
    )
}

pub fn tiny_hinet() -> HinetConfig {
    HinetConfig {
        depth: 2,
        base_width: 4,
        hin_blocks_per_level: 1,
        channels: 3,
    }
}

/// Whole two-stage restorer under the two-stage PSNR objective, with the
/// zero-initialized output convs randomized so every path carries gradient.
pub fn gradcheck_hinet_psnr(seed: u64) -> Vec<(String, GradCheck)> {
    let cfg = tiny_hinet();
    let mut model = Hinet::<f64>::init(cfg.clone(), seed).unwrap();
    for (i, name) in ["s1.out.weight", "s1.out.bias", "s2.out.weight", "s2.out.bias"].iter().enumerate() {
        let t = model.params.get_mut(name).unwrap();
        *t = random_tensor(t.shape(), -0.1, 0.1, seed + 10 + i as u64);
    }
    let x = random_tensor([1, 3, 8, 8], 0.0, 1.0, seed + 1);
    let c = random_tensor([1, 3, 8, 8], 0.0, 1.0, seed + 2);
    check_gradients(&model.params, &[("input", x)], move |g, ps, v| {
        let (b, collect) = bind(g, ps);
        let m = Hinet {
            cfg: cfg.clone(),
            params: ps.clone(),
        };
        let stages = m.forward(g, &b, v[0]);
        let target = g.input(c.clone());
        (psnr_loss_graph(g, &stages, target), collect)
    })
}

pub fn tiny_car() -> CarConfig {
    CarConfig {
        resampler: ResamplerConfig {
            feature_width: 4,
            residual_blocks: 1,
            ..Default::default()
        },
        edsr: tiny_edsr(),
    }
}

/// Resampler, downscale, upscaler and L1 composed end to end.
pub fn gradcheck_car_l1(seed: u64) -> Vec<(String, GradCheck)> {
    let cfg = tiny_car();
    let model = arin::CarModel::<f64>::init(&cfg, seed).unwrap();
    let x = random_tensor([1, 3, 8, 8], 0.0, 1.0, seed + 1);
    let c = random_tensor([1, 3, 8, 8], 0.0, 1.0, seed + 2);
    check_gradients(&model.params(), &[("input", x)], move |g, ps, v| {
        let m = arin::CarModel::<f64>::from_params(&cfg, ps).unwrap();
        let bound = m.bind(g);
        let (_, rec) = m.forward(g, &bound, v[0]);
        let target = g.input(c.clone());
        let loss = g.l1(rec, target);
        (loss, Box::new(move |gr: &mut Gradients<f64>| m.gradients(&bound, gr)) as Collect)
    })
}

/// Desk-scale CAR used by the overfit suite.
pub fn desk_car() -> CarConfig {
    CarConfig {
        resampler: ResamplerConfig {
            feature_width: 16,
            residual_blocks: 2,
            ..Default::default()
        },
        edsr: EdsrConfig {
            feature_width: 32,
            residual_blocks: 4,
            ..Default::default()
        },
    }
}

pub fn desk_train(base: TrainConfig, iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 4,
        patch_size: 48,
        seed,
        checkpoint_schedule: vec![],
        log_interval: 100,
        ..base
    }
}

/// `count` synthetic paintings with mask-only deterioration.
pub fn synthetic_triplets(count: usize, size: usize, seed: u64) -> Vec<PairedSample> {
    let spec = DegradationSpec::mask_only(MaskParams::default());
    (0..count)
        .map(|i| {
            let id = format!("img{i:04}");
            let clean = synthetic_painting(size, size, derive_seed(seed, &format!("painting/{id}")));
            degrade_sample(&id, clean, &spec, seed).unwrap()
        })
        .collect()
}

pub fn fresh_car_checkpoint(cfg: &CarConfig, seed: u64) -> Checkpoint {
    Checkpoint {
        model: ModelSpec::Car { car: cfg.clone() },
        train: TrainConfig::car(),
        iteration: 0,
        seed,
        history: vec![],
        params: arin::CarModel::<f32>::init(cfg, seed).unwrap().params(),
    }
}

pub fn fresh_hinet_checkpoint(cfg: HinetConfig, stage_input: StageInput, seed: u64) -> Checkpoint {
    Checkpoint {
        model: ModelSpec::Hinet {
            hinet: cfg.clone(),
            stage_input,
            car_source: None,
        },
        train: TrainConfig::hinet(),
        iteration: 0,
        seed,
        history: vec![],
        params: Hinet::<f32>::init(cfg, seed).unwrap().params,
    }
}
