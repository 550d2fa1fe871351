//! Forward and backward kernels for the differentiable operations.
//!
//! These are plain functions over [`Tensor`]s; [`crate::autodiff`] records
//! them on a tape and routes gradients between them.

use crate::tensor::{reflect_index, Real, Tensor};

/// Zero-padded "same" 2-D convolution with odd kernel size and stride 1.
///
/// `w` is `[out, in, k, k]`, `b` holds `out` biases.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, k, _] = w.shape();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    assert_eq!(b.len(), cout);
    let hw = h * wd;
    let ckk = cin * k * k;
    let mut out = Tensor::zeros([n, cout, h, wd]);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    for s in 0..n {
        let xs = x.sample(s);
        let cols: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, cin, h, wd, k, &mut col);
            &col
        };
        let os = out.sample_mut(s);
        for (co, chunk) in os.chunks_mut(hw).enumerate() {
            chunk.fill(b.data()[co]);
        }
        T::gemm(
            cout,
            ckk,
            hw,
            T::one(),
            w.data(),
            ckk as isize,
            1,
            cols,
            hw as isize,
            1,
            T::one(),
            os,
            hw as isize,
            1,
        );
    }
    out
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_x: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let hw = h * wd;
    let ckk = cin * k * k;
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros([cout, 1, 1, 1]);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    let mut dcol = vec![T::zero(); if need_x && k != 1 { ckk * hw } else { 0 }];
    for s in 0..n {
        let gy = grad_out.sample(s);
        for (co, chunk) in gy.chunks(hw).enumerate() {
            let acc = chunk.iter().fold(T::zero(), |a, &v| a + v);
            gb.data_mut()[co] = gb.data()[co] + acc;
        }
        let xs = x.sample(s);
        let cols: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, cin, h, wd, k, &mut col);
            &col
        };
        // dW += dY * col^T
        T::gemm(
            cout,
            hw,
            ckk,
            T::one(),
            gy,
            hw as isize,
            1,
            cols,
            1,
            hw as isize,
            T::one(),
            gw.data_mut(),
            ckk as isize,
            1,
        );
        if let Some(gx) = gx.as_mut() {
            // dcol = W^T * dY
            if k == 1 {
                T::gemm(
                    ckk,
                    cout,
                    hw,
                    T::one(),
                    w.data(),
                    1,
                    ckk as isize,
                    gy,
                    hw as isize,
                    1,
                    T::zero(),
                    gx.sample_mut(s),
                    hw as isize,
                    1,
                );
            } else {
                T::gemm(
                    ckk,
                    cout,
                    hw,
                    T::one(),
                    w.data(),
                    1,
                    ckk as isize,
                    gy,
                    hw as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    hw as isize,
                    1,
                );
                col2im(&dcol, cin, h, wd, k, gx.sample_mut(s));
            }
        }
    }
    (gx, gw, gb)
}

fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let dst = &mut col[row..row + hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                // valid output columns: 0 <= x + dx < w
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize) - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let line = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    line[..x_lo].fill(T::zero());
                    line[x_hi..].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    line[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], cin: usize, h: usize, w: usize, k: usize, gx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    gx.fill(T::zero());
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let src = &col[row..row + hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize) - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = c * hw + sy as usize * w;
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst = &mut gx[base + s0..base + s0 + (x_hi - x_lo)];
                    for (d, &v) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Depth-to-space: `[n, c*r*r, h, w] -> [n, c, h*r, w*r]`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let [n, crr, h, w] = x.shape();
    assert_eq!(crr % (r * r), 0, "pixel_shuffle channel count");
    let c = crr / (r * r);
    let mut out = Tensor::zeros([n, c, h * r, w * r]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = ch * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            *out.at_mut(b, ch, y * r + i, xx * r + j) = x.at(b, src_c, y, xx);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Space-to-depth: `[n, c, h, w] -> [n, c*r*r, h/r, w/r]`.
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert!(h % r == 0 && w % r == 0, "pixel_unshuffle needs divisible dims");
    let (oh, ow) = (h / r, w / r);
    let mut out = Tensor::zeros([n, c * r * r, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let dst_c = ch * r * r + i * r + j;
                    for y in 0..oh {
                        for xx in 0..ow {
                            *out.at_mut(b, dst_c, y, xx) = x.at(b, ch, y * r + i, xx * r + j);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Stable `ln(1 + e^x)`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Offset added to the per-pixel kernel sum before normalization.
pub const KERNEL_NORM_EPS: f64 = 1e-8;

/// Divides each pixel's channel vector by its sum (plus [`KERNEL_NORM_EPS`]).
pub fn normalize_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let eps = T::from_f64(KERNEL_NORM_EPS);
    let mut out = x.clone();
    for b in 0..n {
        let s = out.sample_mut(b);
        for p in 0..hw {
            let mut sum = eps;
            for ch in 0..c {
                sum = sum + s[ch * hw + p];
            }
            for ch in 0..c {
                s[ch * hw + p] = s[ch * hw + p] / sum;
            }
        }
    }
    out
}

pub fn normalize_channels_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let eps = T::from_f64(KERNEL_NORM_EPS);
    let mut gx = Tensor::zeros(x.shape());
    for b in 0..n {
        let xs = x.sample(b);
        let gs = grad_out.sample(b);
        let out = gx.sample_mut(b);
        for p in 0..hw {
            let mut sum = eps;
            let mut dot = T::zero();
            for ch in 0..c {
                sum = sum + xs[ch * hw + p];
                dot = dot + gs[ch * hw + p] * xs[ch * hw + p];
            }
            let inv = T::one() / sum;
            let corr = dot * inv * inv;
            for ch in 0..c {
                out[ch * hw + p] = gs[ch * hw + p] * inv - corr;
            }
        }
    }
    gx
}

/// Geometry of the content-adaptive downscale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DownscaleGeometry {
    pub scale: usize,
    pub kernel_size: usize,
}

impl DownscaleGeometry {
    /// HR coordinate that LR index `i` is centred on.
    #[inline]
    pub fn anchor(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.scale as f64 - 0.5
    }

    /// Displacement of tap `u` from the anchor before learned offsets.
    #[inline]
    pub fn tap(&self, u: usize) -> f64 {
        u as f64 - (self.kernel_size as f64 - 1.0) / 2.0
    }
}

struct Bilinear<T> {
    idx: [usize; 4],
    wts: [T; 4],
    fy: T,
    fx: T,
}

#[inline]
fn bilinear_at<T: Real>(py: T, px: T, h: usize, w: usize) -> Bilinear<T> {
    let y0 = py.floor();
    let x0 = px.floor();
    let fy = py - y0;
    let fx = px - x0;
    let y0i = y0.as_f64() as isize;
    let x0i = x0.as_f64() as isize;
    let ya = reflect_index(y0i, h);
    let yb = reflect_index(y0i + 1, h);
    let xa = reflect_index(x0i, w);
    let xb = reflect_index(x0i + 1, w);
    let one = T::one();
    Bilinear {
        idx: [ya * w + xa, ya * w + xb, yb * w + xa, yb * w + xb],
        wts: [
            (one - fy) * (one - fx),
            (one - fy) * fx,
            fy * (one - fx),
            fy * fx,
        ],
        fy,
        fx,
    }
}

/// Applies per-LR-pixel kernels with sub-pixel offsets to an HR image.
///
/// `weights` is `[n, k*k, h/s, w/s]`; `offsets` is `[n, 2*k*k, h/s, w/s]` with
/// channel `2t` the row offset and `2t + 1` the column offset of tap `t = u*k + v`.
/// Samples are bilinear with mirror-reflect padding; channels share kernels.
pub fn downscale<T: Real>(
    img: &Tensor<T>,
    weights: &Tensor<T>,
    offsets: &Tensor<T>,
    geom: DownscaleGeometry,
) -> Tensor<T> {
    let [n, c, h, w] = img.shape();
    let [_, kk, lh, lw] = weights.shape();
    let k = geom.kernel_size;
    debug_assert_eq!(kk, k * k);
    let lhw = lh * lw;
    let mut out = Tensor::zeros([n, c, lh, lw]);
    for b in 0..n {
        let src = img.sample(b);
        let ws = weights.sample(b);
        let os = offsets.sample(b);
        let dst = out.sample_mut(b);
        for i in 0..lh {
            let ay = geom.anchor(i);
            for j in 0..lw {
                let ax = geom.anchor(j);
                let p = i * lw + j;
                for u in 0..k {
                    for v in 0..k {
                        let t = u * k + v;
                        let wt = ws[t * lhw + p];
                        let py = T::from_f64(ay + geom.tap(u)) + os[2 * t * lhw + p];
                        let px = T::from_f64(ax + geom.tap(v)) + os[(2 * t + 1) * lhw + p];
                        let bl = bilinear_at(py, px, h, w);
                        for ch in 0..c {
                            let plane = &src[ch * h * w..(ch + 1) * h * w];
                            let mut sample = T::zero();
                            for q in 0..4 {
                                sample = sample + bl.wts[q] * plane[bl.idx[q]];
                            }
                            dst[ch * lhw + p] = dst[ch * lhw + p] + wt * sample;
                        }
                    }
                }
            }
        }
    }
    out
}

pub struct DownscaleGrads<T> {
    pub img: Tensor<T>,
    pub weights: Tensor<T>,
    pub offsets: Tensor<T>,
}

pub fn downscale_backward<T: Real>(
    img: &Tensor<T>,
    weights: &Tensor<T>,
    offsets: &Tensor<T>,
    geom: DownscaleGeometry,
    grad_out: &Tensor<T>,
) -> DownscaleGrads<T> {
    let [n, c, h, w] = img.shape();
    let [_, _, lh, lw] = weights.shape();
    let k = geom.kernel_size;
    let lhw = lh * lw;
    let mut g_img = Tensor::zeros(img.shape());
    let mut g_w = Tensor::zeros(weights.shape());
    let mut g_o = Tensor::zeros(offsets.shape());
    for b in 0..n {
        let src = img.sample(b);
        let ws = weights.sample(b);
        let os = offsets.sample(b);
        let gy = grad_out.sample(b);
        for i in 0..lh {
            let ay = geom.anchor(i);
            for j in 0..lw {
                let ax = geom.anchor(j);
                let p = i * lw + j;
                for u in 0..k {
                    for v in 0..k {
                        let t = u * k + v;
                        let wt = ws[t * lhw + p];
                        let py = T::from_f64(ay + geom.tap(u)) + os[2 * t * lhw + p];
                        let px = T::from_f64(ax + geom.tap(v)) + os[(2 * t + 1) * lhw + p];
                        let bl = bilinear_at(py, px, h, w);
                        let one = T::one();
                        let mut gw = T::zero();
                        let mut gpy = T::zero();
                        let mut gpx = T::zero();
                        for ch in 0..c {
                            let g = gy[ch * lhw + p];
                            let plane = &src[ch * h * w..(ch + 1) * h * w];
                            let [i00, i01, i10, i11] = bl.idx.map(|q| plane[q]);
                            let mut sample = T::zero();
                            for q in 0..4 {
                                sample = sample + bl.wts[q] * plane[bl.idx[q]];
                            }
                            gw = gw + g * sample;
                            let gs = g * wt;
                            let gplane = &mut g_img.sample_mut(b)[ch * h * w..(ch + 1) * h * w];
                            for q in 0..4 {
                                gplane[bl.idx[q]] = gplane[bl.idx[q]] + gs * bl.wts[q];
                            }
                            gpy = gpy + gs * ((one - bl.fx) * (i10 - i00) + bl.fx * (i11 - i01));
                            gpx = gpx + gs * ((one - bl.fy) * (i01 - i00) + bl.fy * (i11 - i10));
                        }
                        let gws = g_w.sample_mut(b);
                        gws[t * lhw + p] = gws[t * lhw + p] + gw;
                        let gos = g_o.sample_mut(b);
                        gos[2 * t * lhw + p] = gos[2 * t * lhw + p] + gpy;
                        gos[(2 * t + 1) * lhw + p] = gos[(2 * t + 1) * lhw + p] + gpx;
                    }
                }
            }
        }
    }
    DownscaleGrads {
        img: g_img,
        weights: g_w,
        offsets: g_o,
    }
}

/// Variance offset inside the instance-norm square root.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-(sample, channel) statistics of the normalized half.
pub struct HalfNormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Instance-normalizes the first half of the channels and applies a learned
/// affine; the second half passes through unchanged.
pub fn half_instance_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, HalfNormStats<T>) {
    let [n, c, h, w] = x.shape();
    let half = c / 2;
    let hw = h * w;
    let m = T::from_f64(hw as f64);
    let eps = T::from_f64(INSTANCE_NORM_EPS);
    let mut out = x.clone();
    let mut mean = Vec::with_capacity(n * half);
    let mut inv_std = Vec::with_capacity(n * half);
    for b in 0..n {
        let s = out.sample_mut(b);
        for ch in 0..half {
            let plane = &mut s[ch * hw..(ch + 1) * hw];
            let mu = plane.iter().fold(T::zero(), |a, &v| a + v) / m;
            let var = plane.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / m;
            let inv = T::one() / (var + eps).sqrt();
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            for v in plane.iter_mut() {
                *v = g * (*v - mu) * inv + be;
            }
            mean.push(mu);
            inv_std.push(inv);
        }
    }
    (out, HalfNormStats { mean, inv_std })
}

pub fn half_instance_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &HalfNormStats<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.shape();
    let half = c / 2;
    let hw = h * w;
    let m = T::from_f64(hw as f64);
    let mut gx = grad_out.clone();
    let mut gg = Tensor::zeros(gamma.shape());
    let mut gb = Tensor::zeros(gamma.shape());
    for b in 0..n {
        let xs = x.sample(b);
        let gs = grad_out.sample(b);
        let dst = gx.sample_mut(b);
        for ch in 0..half {
            let mu = stats.mean[b * half + ch];
            let inv = stats.inv_std[b * half + ch];
            let g = gamma.data()[ch];
            let range = ch * hw..(ch + 1) * hw;
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for (&xv, &dy) in xs[range.clone()].iter().zip(&gs[range.clone()]) {
                let xhat = (xv - mu) * inv;
                sum_dy = sum_dy + dy;
                sum_dy_xhat = sum_dy_xhat + dy * xhat;
            }
            gg.data_mut()[ch] = gg.data()[ch] + sum_dy_xhat;
            gb.data_mut()[ch] = gb.data()[ch] + sum_dy;
            // dxhat = g * dy, so the sums scale by g as well
            let scale = g * inv / m;
            for ((d, &xv), &dy) in dst[range.clone()]
                .iter_mut()
                .zip(&xs[range.clone()])
                .zip(&gs[range])
            {
                let xhat = (xv - mu) * inv;
                *d = scale * (m * dy - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    (gx, gg, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4]) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape();
        let [cout, _, k, _] = w.shape();
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros([n, cout, h, wd]);
        for s in 0..n {
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += w.at(co, ci, ky, kx) * x.at(s, ci, sy as usize, sx as usize);
                                }
                            }
                        }
                        *out.at_mut(s, co, y, xx) = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        for k in [1, 3, 5] {
            let x = ramp([2, 3, 5, 7]);
            let w = ramp([4, 3, k, k]).map(|v| v * 0.5);
            let b = Tensor::from_vec([4, 1, 1, 1], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
            let got = conv2d(&x, &w, &b);
            let want = naive_conv(&x, &w, &b);
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12, "k={k}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn shuffle_and_unshuffle_are_inverse() {
        let x = ramp([2, 8, 3, 5]);
        let y = pixel_shuffle(&x, 2);
        assert_eq!(y.shape(), [2, 2, 6, 10]);
        assert_eq!(pixel_unshuffle(&y, 2), x);
    }

    #[test]
    fn normalize_channels_sums_to_one() {
        let x = ramp([1, 9, 4, 4]).map(|v| v.abs() + 0.01);
        let y = normalize_channels(&x);
        for p in 0..16 {
            let s: f64 = (0..9).map(|c| y.data()[c * 16 + p]).sum();
            assert!((s - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
