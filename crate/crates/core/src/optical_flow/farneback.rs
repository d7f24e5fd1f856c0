//! Two-frame Farnebäck flow with certainty-weighted polynomial expansion.
//!
//! Each level fits `f(x) ≈ xᵀAx + bᵀx + c` around every pixel by normalized
//! convolution (pixels outside the fisheye disc carry zero certainty), then
//! solves for the displacement that best explains the change of the
//! coefficients over a Gaussian window. Coarse levels seed finer ones.

use crate::error::{ensure_same_dims, Result};
use crate::sky_image::SkyImage;

use super::{FarnebackParams, FlowField};

/// Minimum fraction of the applicability mass that must be valid for a
/// polynomial fit to be trusted.
const MIN_COVERAGE: f64 = 0.25;
/// Tikhonov term on the 2×2 displacement system, relative to its trace so
/// low-contrast texture is not shrunk toward zero.
const DISPLACEMENT_REG: f64 = 1e-3;

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            data: vec![0.0; w * h],
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable correlation with a symmetric kernel and reflected borders.
fn blur(src: &Plane, kernel: &[f64]) -> Plane {
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (src.w, src.h);
    let mut tmp = Plane::new(w, h);
    for y in 0..h {
        let row = &src.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0f64;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * row[reflect(x as isize + k as isize - r, w)] as f64;
            }
            tmp.data[y * w + x] = acc as f32;
        }
    }
    let mut out = Plane::new(w, h);
    for y in 0..h {
        for (k, &kv) in kernel.iter().enumerate() {
            let yy = reflect(y as isize + k as isize - r, h);
            let src_row = &tmp.data[yy * w..(yy + 1) * w];
            let dst = &mut out.data[y * w..(y + 1) * w];
            for x in 0..w {
                dst[x] += (kv * src_row[x] as f64) as f32;
            }
        }
    }
    out
}

/// Bilinear sample in pixel-index coordinates; `None` outside the grid.
#[inline]
fn bilinear_weights(x: f64, y: f64, w: usize, h: usize) -> Option<(usize, usize, f64, f64)> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    Some((x0, y0, x - x0 as f64, y - y0 as f64))
}

fn sample_clamped(p: &Plane, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (p.w - 1) as f64);
    let y = y.clamp(0.0, (p.h - 1) as f64);
    let (x0, y0, fx, fy) = bilinear_weights(x, y, p.w, p.h).expect("clamped");
    let x1 = (x0 + 1).min(p.w - 1);
    let y1 = (y0 + 1).min(p.h - 1);
    let top = p.at(x0, y0) as f64 * (1.0 - fx) + p.at(x1, y0) as f64 * fx;
    let bot = p.at(x0, y1) as f64 * (1.0 - fx) + p.at(x1, y1) as f64 * fx;
    top * (1.0 - fy) + bot * fy
}

/// Resizes signal and certainty together by normalized filtering.
fn downsample(signal: &Plane, cert: &Plane, scale: f64) -> (Plane, Plane) {
    let sigma = ((1.0 / scale - 1.0) * 0.5).max(0.3);
    let kernel = gaussian_kernel((3.0 * sigma).ceil().max(1.0) as usize, sigma);
    let weighted = Plane {
        w: signal.w,
        h: signal.h,
        data: signal.data.iter().zip(&cert.data).map(|(f, c)| f * c).collect(),
    };
    let bw = blur(&weighted, &kernel);
    let bc = blur(cert, &kernel);
    let nw = ((signal.w as f64 * scale).round() as usize).max(1);
    let nh = ((signal.h as f64 * scale).round() as usize).max(1);
    let sx = signal.w as f64 / nw as f64;
    let sy = signal.h as f64 / nh as f64;
    let mut out_f = Plane::new(nw, nh);
    let mut out_c = Plane::new(nw, nh);
    for y in 0..nh {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..nw {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let c = sample_clamped(&bc, fx, fy);
            let cf = sample_clamped(&bw, fx, fy);
            let i = y * nw + x;
            out_c.data[i] = c as f32;
            out_f.data[i] = if c > 1e-6 { (cf / c) as f32 } else { 0.0 };
        }
    }
    (out_f, out_c)
}

/// Quadratic fit per pixel: `[b_x, b_y, a_xx, a_yy, a_xy]` plus a weight
/// that is zero where the fit is unsupported.
struct PolyCoeffs {
    w: usize,
    h: usize,
    coeffs: Vec<[f32; 5]>,
    weight: Vec<f32>,
}

impl PolyCoeffs {
    /// Bilinearly interpolated coefficients and weight; zero weight off-grid.
    fn sample(&self, x: f64, y: f64) -> ([f64; 5], f64) {
        let Some((x0, y0, fx, fy)) = bilinear_weights(x, y, self.w, self.h) else {
            return ([0.0; 5], 0.0);
        };
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let taps = [
            (y0 * self.w + x0, (1.0 - fx) * (1.0 - fy)),
            (y0 * self.w + x1, fx * (1.0 - fy)),
            (y1 * self.w + x0, (1.0 - fx) * fy),
            (y1 * self.w + x1, fx * fy),
        ];
        let mut c = [0.0f64; 5];
        let mut wsum = 0.0;
        for (i, t) in taps {
            if t == 0.0 {
                continue;
            }
            for k in 0..5 {
                c[k] += t * self.coeffs[i][k] as f64;
            }
            wsum += t * self.weight[i] as f64;
        }
        (c, wsum)
    }
}

// Monomial exponents (p, q) for x^p y^q of the basis {1, x, y, x², y², xy}.
const BASIS: [(usize, usize); 6] = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)];

fn poly_expansion(signal: &Plane, cert: &Plane, n: usize, sigma: f64) -> PolyCoeffs {
    let (w, h) = (signal.w, signal.h);
    let taps = 2 * n + 1;
    let g: Vec<f64> = (0..taps)
        .map(|i| {
            let d = i as f64 - n as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let gsum: f64 = g.iter().sum();
    let full_mass = gsum * gsum;
    let offs: Vec<f64> = (0..taps).map(|i| i as f64 - n as f64).collect();

    // Row pass: certainty moments p = 0..4 and certainty·signal moments p = 0..2.
    let cf: Vec<f32> = signal.data.iter().zip(&cert.data).map(|(f, c)| f * c).collect();
    let mut hc = vec![vec![0.0f64; w * h]; 5];
    let mut hf = vec![vec![0.0f64; w * h]; 3];
    for y in 0..h {
        for x in 0..w {
            let mut mc = [0.0f64; 5];
            let mut mf = [0.0f64; 3];
            for k in 0..taps {
                let xx = reflect(x as isize + k as isize - n as isize, w);
                let c = cert.data[y * w + xx] as f64;
                let v = cf[y * w + xx] as f64;
                let gx = g[k];
                let dx = offs[k];
                let mut pw = gx;
                for p in 0..5 {
                    mc[p] += pw * c;
                    if p < 3 {
                        mf[p] += pw * v;
                    }
                    pw *= dx;
                }
            }
            let i = y * w + x;
            for p in 0..5 {
                hc[p][i] = mc[p];
            }
            for p in 0..3 {
                hf[p][i] = mf[p];
            }
        }
    }

    let mut coeffs = vec![[0.0f32; 5]; w * h];
    let mut weight = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            // mc[p][q] = Σ g g x^p y^q c ; mf[p][q] = Σ g g x^p y^q c f
            let mut mc = [[0.0f64; 5]; 5];
            let mut mf = [[0.0f64; 3]; 3];
            for k in 0..taps {
                let yy = reflect(y as isize + k as isize - n as isize, h);
                let j = yy * w + x;
                let dy = offs[k];
                let mut qw = g[k];
                for q in 0..5 {
                    for p in 0..(5 - q) {
                        mc[p][q] += qw * hc[p][j];
                    }
                    if q < 3 {
                        for p in 0..(3 - q) {
                            mf[p][q] += qw * hf[p][j];
                        }
                    }
                    qw *= dy;
                }
            }
            let coverage = mc[0][0] / full_mass;
            if coverage < MIN_COVERAGE {
                continue;
            }
            let mut gm = [[0.0f64; 6]; 6];
            let mut rhs = [0.0f64; 6];
            for (a, &(pa, qa)) in BASIS.iter().enumerate() {
                rhs[a] = mf[pa][qa];
                for (b, &(pb, qb)) in BASIS.iter().enumerate() {
                    gm[a][b] = mc[pa + pb][qa + qb];
                }
            }
            if let Some(r) = solve_spd6(gm, rhs) {
                let i = y * w + x;
                coeffs[i] = [r[1] as f32, r[2] as f32, r[3] as f32, r[4] as f32, r[5] as f32];
                weight[i] = cert.data[i].clamp(0.0, 1.0);
            }
        }
    }
    PolyCoeffs {
        w,
        h,
        coeffs,
        weight,
    }
}

/// Cholesky solve of a symmetric positive definite 6×6 system.
fn solve_spd6(mut a: [[f64; 6]; 6], mut b: [f64; 6]) -> Option<[f64; 6]> {
    let scale = (0..6).map(|i| a[i][i]).fold(0.0f64, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    for j in 0..6 {
        let mut d = a[j][j];
        for k in 0..j {
            d -= a[j][k] * a[j][k];
        }
        if d <= scale * 1e-12 {
            return None;
        }
        let d = d.sqrt();
        a[j][j] = d;
        for i in (j + 1)..6 {
            let mut s = a[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k];
            }
            a[i][j] = s / d;
        }
    }
    for i in 0..6 {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i][k] * b[k];
        }
        b[i] = s / a[i][i];
    }
    for i in (0..6).rev() {
        let mut s = b[i];
        for k in (i + 1)..6 {
            s -= a[k][i] * b[k];
        }
        b[i] = s / a[i][i];
    }
    Some(b)
}

/// One displacement refinement at a single pyramid level.
fn update_flow(r1: &PolyCoeffs, r2: &PolyCoeffs, flow: &mut [[f64; 2]], window: &[f64]) {
    let (w, h) = (r1.w, r1.h);
    let mut planes = vec![Plane::new(w, h); 5];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let w1 = r1.weight[i] as f64;
            if w1 == 0.0 {
                continue;
            }
            let d = flow[i];
            let (c2, w2) = r2.sample(x as f64 + d[0], y as f64 + d[1]);
            let wt = w1 * w2;
            if wt == 0.0 {
                continue;
            }
            let c1 = r1.coeffs[i];
            let a00 = 0.5 * (c1[2] as f64 + c2[2]);
            let a11 = 0.5 * (c1[3] as f64 + c2[3]);
            let a01 = 0.25 * (c1[4] as f64 + c2[4]);
            let db0 = -0.5 * (c2[0] - c1[0] as f64) + a00 * d[0] + a01 * d[1];
            let db1 = -0.5 * (c2[1] - c1[1] as f64) + a01 * d[0] + a11 * d[1];
            let vals = [
                a00 * a00 + a01 * a01,
                a01 * (a00 + a11),
                a01 * a01 + a11 * a11,
                a00 * db0 + a01 * db1,
                a01 * db0 + a11 * db1,
            ];
            for (p, v) in planes.iter_mut().zip(vals) {
                p.data[i] = (wt * v) as f32;
            }
        }
    }
    let blurred: Vec<Plane> = planes.iter().map(|p| blur(p, window)).collect();
    for i in 0..w * h {
        let g11 = blurred[0].data[i] as f64;
        let g12 = blurred[1].data[i] as f64;
        let g22 = blurred[2].data[i] as f64;
        let h1 = blurred[3].data[i] as f64;
        let h2 = blurred[4].data[i] as f64;
        let lambda = DISPLACEMENT_REG * (g11 + g22);
        let (g11, g22) = (g11 + lambda, g22 + lambda);
        let det = g11 * g22 - g12 * g12;
        flow[i] = if det > 0.0 {
            [(g22 * h1 - g12 * h2) / det, (g11 * h2 - g12 * h1) / det]
        } else {
            [0.0; 2]
        };
    }
}

fn resize_flow(flow: &[[f64; 2]], w: usize, h: usize, nw: usize, nh: usize) -> Vec<[f64; 2]> {
    let sx = w as f64 / nw as f64;
    let sy = h as f64 / nh as f64;
    let comp = |k: usize| Plane {
        w,
        h,
        data: flow.iter().map(|v| v[k] as f32).collect(),
    };
    let (pu, pv) = (comp(0), comp(1));
    let mut out = vec![[0.0; 2]; nw * nh];
    for y in 0..nh {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..nw {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            out[y * nw + x] = [sample_clamped(&pu, fx, fy) / sx, sample_clamped(&pv, fx, fy) / sy];
        }
    }
    out
}

/// Dense flow from `a` to `b`: `a(p) ≈ b(p + flow(p))`. Computed on
/// luminance; vectors outside the fisheye disc are zero.
pub fn farneback_flow(a: &SkyImage, b: &SkyImage, params: &FarnebackParams) -> Result<FlowField> {
    ensure_same_dims(a.dims(), b.dims())?;
    params.validate()?;
    let n = a.width();
    let to_plane = |img: &SkyImage| Plane {
        w: n,
        h: n,
        data: img.luminance().into_iter().map(|v| v * 255.0).collect(),
    };
    let cert = Plane {
        w: n,
        h: n,
        data: a.validity().iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    };

    let min_side = 2 * params.poly_n + 1;
    let mut pyr = vec![(to_plane(a), to_plane(b), cert.clone(), cert)];
    while pyr.len() < params.levels {
        let (fa, fb, ca, cb) = pyr.last().unwrap();
        let next = (fa.w as f64 * params.pyramid_scale).round() as usize;
        if next < min_side {
            break;
        }
        let (na, nca) = downsample(fa, ca, params.pyramid_scale);
        let (nb, ncb) = downsample(fb, cb, params.pyramid_scale);
        pyr.push((na, nb, nca, ncb));
    }

    let radius = params.window / 2;
    let window = gaussian_kernel(radius, (0.3 * radius as f64).max(0.5));
    let mut flow: Vec<[f64; 2]> = Vec::new();
    let mut dims = (0, 0);
    for (fa, fb, ca, cb) in pyr.iter().rev() {
        flow = if flow.is_empty() {
            vec![[0.0; 2]; fa.w * fa.h]
        } else {
            resize_flow(&flow, dims.0, dims.1, fa.w, fa.h)
        };
        dims = (fa.w, fa.h);
        let r1 = poly_expansion(fa, ca, params.poly_n, params.poly_sigma);
        let r2 = poly_expansion(fb, cb, params.poly_n, params.poly_sigma);
        for _ in 0..params.iterations {
            update_flow(&r1, &r2, &mut flow, &window);
        }
    }

    let valid = a.validity();
    let vectors = flow
        .iter()
        .zip(valid)
        .map(|(v, &ok)| {
            if ok && v[0].is_finite() && v[1].is_finite() {
                [v[0] as f32, v[1] as f32]
            } else {
                [0.0; 2]
            }
        })
        .collect();
    FlowField::from_vectors(n, n, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn poly_expansion_recovers_quadratic() {
        let (w, h) = (21, 21);
        let f = |x: f64, y: f64| 3.0 + 0.5 * x - 0.25 * y + 0.1 * x * x + 0.05 * y * y - 0.07 * x * y;
        let signal = Plane {
            w,
            h,
            data: (0..w * h).map(|i| f((i % w) as f64, (i / w) as f64) as f32).collect(),
        };
        let cert = Plane {
            w,
            h,
            data: vec![1.0; w * h],
        };
        let r = poly_expansion(&signal, &cert, 5, 1.1);
        // expansion around (10, 10): local gradient and second-order terms
        let c = r.coeffs[10 * w + 10];
        let bx = 0.5 + 0.2 * 10.0 - 0.07 * 10.0;
        let by = -0.25 + 0.1 * 10.0 - 0.07 * 10.0;
        assert!((c[0] as f64 - bx).abs() < 1e-3, "{c:?}");
        assert!((c[1] as f64 - by).abs() < 1e-3, "{c:?}");
        assert!((c[2] - 0.1).abs() < 1e-4);
        assert!((c[3] - 0.05).abs() < 1e-4);
        assert!((c[4] + 0.07).abs() < 1e-4);
    }

    #[test]
    fn spd_solver() {
        let mut a = [[0.0; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                a[i][j] = 1.0 / (1.0 + (i as f64 - j as f64).abs());
            }
            a[i][i] += 2.0;
        }
        let x = [1.0, -2.0, 0.5, 3.0, 0.0, -1.0];
        let mut b = [0.0; 6];
        for i in 0..6 {
            for j in 0..6 {
                b[i] += a[i][j] * x[j];
            }
        }
        let got = solve_spd6(a, b).unwrap();
        for i in 0..6 {
            assert!((got[i] - x[i]).abs() < 1e-10);
        }
        assert!(solve_spd6([[0.0; 6]; 6], b).is_none());
    }
}
