//! Reference implementations written directly from the definitions, with no
//! shared code paths with the library.

use arin::{ImageTensor, Tensor};

/// Mirror index with period `2(n - 1)`, edge samples not repeated.
pub fn mirror(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as i64;
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m >= n { period - m } else { m }) as usize
}

fn bilinear(img: &Tensor<f64>, b: usize, c: usize, py: f64, px: f64) -> f64 {
    let (h, w) = (img.height(), img.width());
    let (y0, x0) = (py.floor(), px.floor());
    let (ty, tx) = (py - y0, px - x0);
    let mut acc = 0.0;
    for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
            let y = mirror(y0 as i64 + dy, h);
            let x = mirror(x0 as i64 + dx, w);
            acc += wy * wx * img.at(b, c, y, x);
        }
    }
    acc
}

/// Per-pixel, per-tap loop over the downscale definition.
pub fn naive_downscale(img: &Tensor<f64>, weights: &Tensor<f64>, offsets: &Tensor<f64>, s: usize, k: usize) -> Tensor<f64> {
    let [n, c, h, w] = img.shape();
    let (lh, lw) = (h / s, w / s);
    let mut out = Tensor::zeros([n, c, lh, lw]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..lh {
                for j in 0..lw {
                    let cy = (i as f64 + 0.5) * s as f64 - 0.5;
                    let cx = (j as f64 + 0.5) * s as f64 - 0.5;
                    let mut acc = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            let t = u * k + v;
                            let py = cy + u as f64 - (k as f64 - 1.0) / 2.0 + offsets.at(b, 2 * t, i, j);
                            let px = cx + v as f64 - (k as f64 - 1.0) / 2.0 + offsets.at(b, 2 * t + 1, i, j);
                            acc += weights.at(b, t, i, j) * bilinear(img, b, ch, py, px);
                        }
                    }
                    *out.at_mut(b, ch, i, j) = acc;
                }
            }
        }
    }
    out
}

pub fn loop_mse(a: &[f32], b: &[f32]) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        se += d * d;
    }
    se / a.len() as f64
}

pub fn loop_psnr(a: &[f32], b: &[f32]) -> f64 {
    let mse = loop_mse(a, b);
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

pub fn loop_l1(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

/// Masked pixels (all channels) replaced by `fill`.
pub fn loop_apply_mask(img: &ImageTensor, mask: &[u8], fill: f32) -> Vec<f32> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.push(if mask[y * w + x] == 1 { fill } else { img.get(ch, y, x) });
            }
        }
    }
    out
}

/// SSIM with an explicit 2-D 11x11 Gaussian window (sigma 1.5), weighted
/// two-pass moments, valid positions only, averaged over channels.
pub fn naive_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    const R: usize = 5;
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (dy, row) in win.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (y, x) = (dy as f64 - R as f64, dx as f64 - R as f64);
            *v = (-(y * y + x * x) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    for row in win.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (a.height(), a.width());
    let mut sum = 0.0;
    for ch in 0..a.channels() {
        let mut plane = 0.0;
        let mut count = 0;
        for y in R..h - R {
            for x in R..w - R {
                let (mut ma, mut mb) = (0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wt = win[dy][dx];
                        ma += wt * a.get(ch, y + dy - R, x + dx - R) as f64;
                        mb += wt * b.get(ch, y + dy - R, x + dx - R) as f64;
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wt = win[dy][dx];
                        let da = a.get(ch, y + dy - R, x + dx - R) as f64 - ma;
                        let db = b.get(ch, y + dy - R, x + dx - R) as f64 - mb;
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                plane += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        sum += plane / count as f64;
    }
    sum / a.channels() as f64
}

/// `(x - mean) / sqrt(var + eps)` with mean and variance from separate passes.
pub fn two_pass_normalize(plane: &[f64], eps: f64) -> Vec<f64> {
    let n = plane.len() as f64;
    let mut mean = 0.0;
    for v in plane {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in plane {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    plane.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

pub fn mean_and_var(plane: &[f64]) -> (f64, f64) {
    let n = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Textbook Adam on a vector; returns the iterate after every step.
pub fn adam_trace(
    x0: &[f64],
    grad: impl Fn(&[f64]) -> Vec<f64>,
    steps: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Vec<Vec<f64>> {
    let mut x = x0.to_vec();
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let mut trace = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = grad(&x);
        for i in 0..x.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - beta1.powi(t as i32));
            let v_hat = v[i] / (1.0 - beta2.powi(t as i32));
            x[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        trace.push(x.clone());
    }
    trace
}
