//! Forward and backward passes of the U-Net building blocks.

use super::tensor::{Real, Tensor};

/// Upper bound on im2col buffer elements; larger convolutions are processed
/// in bands of output rows.
const COL_BUDGET: usize = 1 << 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn band_rows(&self, ow: usize, oh: usize) -> usize {
        (COL_BUDGET / (self.patch_len() * ow).max(1)).clamp(1, oh)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], h: usize, w: usize, g: &ConvGeom, ow: usize, oy0: usize, oy1: usize, col: &mut [T]) {
    let n = (oy1 - oy0) * ow;
    let k = g.kernel;
    for ic in 0..g.in_c {
        let plane = &x[ic * h * w..(ic + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ic * k + ky) * k + kx) * n..][..n];
                for oy in oy0..oy1 {
                    let dst = &mut row[(oy - oy0) * ow..][..ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(col: &[T], h: usize, w: usize, g: &ConvGeom, ow: usize, oy0: usize, oy1: usize, dx: &mut [T]) {
    let n = (oy1 - oy0) * ow;
    let k = g.kernel;
    for ic in 0..g.in_c {
        let plane = &mut dx[ic * h * w..(ic + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ic * k + ky) * k + kx) * n..][..n];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[(oy - oy0) * ow..][..ow];
                    let dst = &mut plane[iy as usize * w..][..w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Weights are `[out_c, in_c, k, k]` row-major.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], g: &ConvGeom) -> Tensor<T> {
    let [n, c, h, w] = x.shape;
    assert_eq!(c, g.in_c, "conv input channels");
    let (oh, ow) = g.out_hw(h, w);
    let p = oh * ow;
    let kk = g.patch_len();
    let mut out: Tensor<T> = Tensor::zeros([n, g.out_c, oh, ow]);
    let band = g.band_rows(ow, oh);
    let mut col = vec![T::zero(); kk * band * ow];
    for b in 0..n {
        let xin = x.item(b);
        let y = out.item_mut(b);
        let mut oy0 = 0;
        while oy0 < oh {
            let oy1 = (oy0 + band).min(oh);
            let cols = (oy1 - oy0) * ow;
            im2col(xin, h, w, g, ow, oy0, oy1, &mut col[..kk * cols]);
            unsafe {
                T::gemm(
                    g.out_c,
                    kk,
                    cols,
                    T::one(),
                    weight.as_ptr(),
                    kk as isize,
                    1,
                    col.as_ptr(),
                    cols as isize,
                    1,
                    T::zero(),
                    y.as_mut_ptr().add(oy0 * ow),
                    p as isize,
                    1,
                );
            }
            oy0 = oy1;
        }
        for (oc, &bv) in bias.iter().enumerate() {
            for v in &mut y[oc * p..(oc + 1) * p] {
                *v += bv;
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    g: &ConvGeom,
    dweight: &mut [T],
    dbias: &mut [T],
) -> Tensor<T> {
    let [n, _, h, w] = x.shape;
    let (oh, ow) = (dy.height(), dy.width());
    let p = oh * ow;
    let kk = g.patch_len();
    let mut dx: Tensor<T> = Tensor::zeros(x.shape);
    let band = g.band_rows(ow, oh);
    let mut col = vec![T::zero(); kk * band * ow];
    let mut dcol = vec![T::zero(); kk * band * ow];
    for b in 0..n {
        let xin = x.item(b);
        let dyb = dy.item(b);
        for (oc, db) in dbias.iter_mut().enumerate() {
            let mut s = T::zero();
            for &v in &dyb[oc * p..(oc + 1) * p] {
                s += v;
            }
            *db += s;
        }
        let dxb = dx.item_mut(b);
        let mut oy0 = 0;
        while oy0 < oh {
            let oy1 = (oy0 + band).min(oh);
            let cols = (oy1 - oy0) * ow;
            im2col(xin, h, w, g, ow, oy0, oy1, &mut col[..kk * cols]);
            unsafe {
                // dW += dY · colᵀ
                T::gemm(
                    g.out_c,
                    cols,
                    kk,
                    T::one(),
                    dyb.as_ptr().add(oy0 * ow),
                    p as isize,
                    1,
                    col.as_ptr(),
                    1,
                    cols as isize,
                    T::one(),
                    dweight.as_mut_ptr(),
                    kk as isize,
                    1,
                );
                // dcol = Wᵀ · dY
                T::gemm(
                    kk,
                    g.out_c,
                    cols,
                    T::one(),
                    weight.as_ptr(),
                    1,
                    kk as isize,
                    dyb.as_ptr().add(oy0 * ow),
                    p as isize,
                    1,
                    T::zero(),
                    dcol.as_mut_ptr(),
                    cols as isize,
                    1,
                );
            }
            col2im(&dcol[..kk * cols], h, w, g, ow, oy0, oy1, dxb);
            oy0 = oy1;
        }
    }
    dx
}

pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

pub struct BnParams<'a, T> {
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub running_mean: &'a mut [T],
    pub running_var: &'a mut [T],
    pub momentum: f64,
    pub eps: f64,
}

/// Batch normalization over `(batch, height, width)` per channel. In
/// training mode batch statistics are used and the running estimates are
/// updated (unbiased variance); otherwise the running estimates are used.
pub fn batchnorm_forward<T: Real>(x: &Tensor<T>, p: BnParams<'_, T>, train: bool) -> (Tensor<T>, BnCache<T>) {
    let [n, c, h, w] = x.shape;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut inv_std = vec![T::zero(); c];
    let mut mean = vec![0.0f64; c];
    for ch in 0..c {
        if train {
            let mut s = 0.0;
            for b in 0..n {
                for &v in &x.item(b)[ch * hw..(ch + 1) * hw] {
                    s += v.as_f64();
                }
            }
            let m = s / count;
            let mut ss = 0.0;
            for b in 0..n {
                for &v in &x.item(b)[ch * hw..(ch + 1) * hw] {
                    let d = v.as_f64() - m;
                    ss += d * d;
                }
            }
            let var = ss / count;
            mean[ch] = m;
            inv_std[ch] = T::from_f64(1.0 / (var + p.eps).sqrt());
            let unbiased = if count > 1.0 { ss / (count - 1.0) } else { var };
            let mo = p.momentum;
            p.running_mean[ch] = T::from_f64((1.0 - mo) * p.running_mean[ch].as_f64() + mo * m);
            p.running_var[ch] = T::from_f64((1.0 - mo) * p.running_var[ch].as_f64() + mo * unbiased);
        } else {
            mean[ch] = p.running_mean[ch].as_f64();
            inv_std[ch] = T::from_f64(1.0 / (p.running_var[ch].as_f64() + p.eps).sqrt());
        }
    }
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut out = Tensor::zeros(x.shape);
    for b in 0..n {
        let off = b * c * hw;
        for ch in 0..c {
            let m = T::from_f64(mean[ch]);
            let (is, ga, be) = (inv_std[ch], p.gamma[ch], p.beta[ch]);
            for i in off + ch * hw..off + (ch + 1) * hw {
                let xh = (x.data[i] - m) * is;
                xhat[i] = xh;
                out.data[i] = ga * xh + be;
            }
        }
    }
    (out, BnCache { xhat, inv_std, train })
}

pub fn batchnorm_backward<T: Real>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let [n, c, h, w] = dy.shape;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut dx = Tensor::zeros(dy.shape);
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for b in 0..n {
            let off = b * c * hw + ch * hw;
            for i in off..off + hw {
                let g = dy.data[i].as_f64();
                sum_dy += g;
                sum_dy_xh += g * cache.xhat[i].as_f64();
            }
        }
        dgamma[ch] += T::from_f64(sum_dy_xh);
        dbeta[ch] += T::from_f64(sum_dy);
        let scale = gamma[ch].as_f64() * cache.inv_std[ch].as_f64();
        for b in 0..n {
            let off = b * c * hw + ch * hw;
            for i in off..off + hw {
                let g = dy.data[i].as_f64();
                let v = if cache.train {
                    scale * (g - sum_dy / count - cache.xhat[i].as_f64() * sum_dy_xh / count)
                } else {
                    scale * g
                };
                dx.data[i] = T::from_f64(v);
            }
        }
    }
    dx
}

/// Source taps for one output coordinate of a ×2 bilinear upsample
/// (half-pixel centers, edge clamped).
#[inline]
fn upsample_taps(o: usize, n: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

pub fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let xt: Vec<_> = (0..ow).map(|o| upsample_taps(o, w)).collect();
    let yt: Vec<_> = (0..oh).map(|o| upsample_taps(o, h)).collect();
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in yt.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                let fx = T::from_f64(fx);
                let top = src[y0 * w + x0] + (src[y0 * w + x1] - src[y0 * w + x0]) * fx;
                let bot = src[y1 * w + x0] + (src[y1 * w + x1] - src[y1 * w + x0]) * fx;
                dst[oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>, in_shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = Tensor::zeros(in_shape);
    let xt: Vec<_> = (0..ow).map(|o| upsample_taps(o, w)).collect();
    let yt: Vec<_> = (0..oh).map(|o| upsample_taps(o, h)).collect();
    for plane in 0..n * c {
        let g = &dy.data[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut dx.data[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in yt.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                let fx = T::from_f64(fx);
                let v = g[oy * ow + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                d[y0 * w + x0] += top * (T::one() - fx);
                d[y0 * w + x1] += top * fx;
                d[y1 * w + x0] += bot * (T::one() - fx);
                d[y1 * w + x1] += bot * fx;
            }
        }
    }
    dx
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64(slope);
    Tensor {
        shape: x.shape,
        data: x.data.iter().map(|&v| if v > T::zero() { v } else { v * s }).collect(),
    }
}

/// Gradient of [`leaky_relu`] given its input.
pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64(slope);
    Tensor {
        shape: x.shape,
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| if v > T::zero() { g } else { g * s })
            .collect(),
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    leaky_relu(x, 0.0)
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    leaky_relu_backward(x, dy, 0.0)
}

pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// `softplus(v) − ln 2`: zero at zero, smooth, bounded below by `−ln 2`.
pub fn shifted_softplus<T: Real>(v: T) -> T {
    let x = v.as_f64();
    let sp = if x > 30.0 { x } else { x.exp().ln_1p() };
    T::from_f64(sp - std::f64::consts::LN_2)
}
