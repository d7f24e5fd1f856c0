//! Multi-timescale sequence synthesis: the recursive neural step between
//! keyframes and the piecewise advection/blend model between them.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::neural::{cloudnet_infer, flownet_infer, Role, UNetModel};
use crate::optical_flow::{farneback_flow, mask_flow, EncodedFlow, FarnebackParams, FlowField, ZERO_FLOW_EPS};
use crate::sky_image::{compute_cloud_mask, CloudMask, SkyImage, ToneCurve, DEFAULT_CLOUD_THRESHOLD};
use crate::sphere_map::{displace_on_sphere, FisheyeProjection};

pub const DEFAULT_DELTA_T: f64 = 10.0;
pub const DEFAULT_SUBSTEPS: usize = 30;
pub const DEFAULT_INPAINT_ITERATIONS: usize = 50;

/// Relative distance from a third of the interval at which `gamma` returns
/// the anchor frame itself.
const ANCHOR_SNAP: f64 = 1e-9;

/// Two consecutive keyframes and the flow between them.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyframePair {
    pub a: SkyImage,
    pub b: SkyImage,
    pub flow: FlowField,
    pub index: usize,
}

impl KeyframePair {
    pub fn new(a: SkyImage, b: SkyImage, flow: FlowField, index: usize) -> Result<Self> {
        ensure_same_dims(a.dims(), b.dims())?;
        ensure_same_dims(a.dims(), flow.dims())?;
        Ok(Self { a, b, flow, index })
    }

    /// Re-estimates the flow from `a` to `b`, keeps it on the clouds of `a`
    /// and diffuses it into cloud interiors where the estimate vanished.
    pub fn estimate(a: SkyImage, b: SkyImage, index: usize, cfg: &SequenceConfig) -> Result<Self> {
        let flow = farneback_flow(&a, &b, &cfg.farneback)?;
        let mask = compute_cloud_mask(&a, cfg.cloud_threshold);
        let flow = inpaint_flow(&mask_flow(&flow, &mask)?, &mask, cfg.inpaint_iterations)?;
        Self::new(a, b, flow, index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    /// Seconds between keyframes.
    pub delta_t: f64,
    pub keyframes: usize,
    /// Frames per keyframe interval; a multiple of 3.
    pub substeps: usize,
    pub projection: FisheyeProjection,
    pub tone_curve: ToneCurve,
    pub peak: f64,
    pub farneback: FarnebackParams,
    pub cloud_threshold: f32,
    pub inpaint_iterations: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            delta_t: DEFAULT_DELTA_T,
            keyframes: 1,
            substeps: DEFAULT_SUBSTEPS,
            projection: FisheyeProjection::new(256),
            tone_curve: ToneCurve::identity(),
            peak: 1.0,
            farneback: FarnebackParams::default(),
            cloud_threshold: DEFAULT_CLOUD_THRESHOLD,
            inpaint_iterations: DEFAULT_INPAINT_ITERATIONS,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_t.is_finite() && self.delta_t > 0.0) {
            return Err(Error::Config(format!("delta_t must be positive, got {}", self.delta_t)));
        }
        if self.keyframes == 0 {
            return Err(Error::Config("at least one keyframe step is required".into()));
        }
        if self.substeps < 3 || self.substeps % 3 != 0 {
            return Err(Error::Config(format!(
                "substeps must be a positive multiple of 3, got {}",
                self.substeps
            )));
        }
        if !(self.peak.is_finite() && self.peak > 0.0) {
            return Err(Error::Config(format!("peak must be positive, got {}", self.peak)));
        }
        if !(self.cloud_threshold.is_finite() && self.cloud_threshold > 0.0) {
            return Err(Error::Config(format!(
                "cloud threshold must be positive, got {}",
                self.cloud_threshold
            )));
        }
        self.tone_curve.validate()?;
        self.farneback.validate()
    }

    pub fn frame_count(&self) -> usize {
        self.keyframes * self.substeps + 1
    }

    pub fn time_of(&self, index: usize) -> f64 {
        index as f64 * self.delta_t / self.substeps as f64
    }

    pub fn kind_of(&self, index: usize) -> FrameKind {
        match index % self.substeps {
            0 => FrameKind::Keyframe,
            k if 3 * k == self.substeps || 3 * k == 2 * self.substeps => FrameKind::Anchor,
            _ => FrameKind::Blend,
        }
    }
}

/// ξ: one medium-timescale step, `C(I ⊕ F(I))`.
pub fn xi_step(flownet: &UNetModel, cloudnet: &UNetModel, img: &SkyImage) -> Result<(SkyImage, EncodedFlow)> {
    if flownet.role != Role::FlowNet || cloudnet.role != Role::CloudNet {
        return Err(Error::Precondition("xi_step needs a flownet and a cloudnet model".into()));
    }
    let flow = flownet_infer(flownet, img)?;
    let next = cloudnet_infer(cloudnet, img, &flow)?;
    Ok((next, flow))
}

/// Bilinear sample at continuous coordinate `p` (pixel centers at +0.5),
/// weighting only valid taps. Returns zero when no valid tap is reachable.
fn sample_bilinear(img: &SkyImage, p: [f64; 2]) -> [f32; 3] {
    let n = img.width() as isize;
    let (x, y) = (p[0] - 0.5, p[1] - 0.5);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let valid = img.validity();
    let px = img.pixels();
    let mut acc = [0.0f64; 3];
    let mut wsum = 0.0f64;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let w = wx * wy;
            let (xi, yi) = (x0 + dx, y0 + dy);
            if w == 0.0 || xi < 0 || yi < 0 || xi >= n || yi >= n {
                continue;
            }
            let i = (yi * n + xi) as usize;
            if !valid[i] {
                continue;
            }
            for c in 0..3 {
                acc[c] += w * px[i][c] as f64;
            }
            wsum += w;
        }
    }
    if wsum < 1e-12 {
        return [0.0; 3];
    }
    acc.map(|v| (v / wsum) as f32)
}

/// Λ: advects `img` along `flow` by the fraction `s` of one interval.
/// Backward warp: each output pixel samples the source at the point reached
/// by following the negated flow along a great arc.
pub fn advect(img: &SkyImage, flow: &FlowField, s: f64, proj: &FisheyeProjection) -> Result<SkyImage> {
    ensure_same_dims(img.dims(), flow.dims())?;
    ensure_same_dims(img.dims(), (proj.resolution, proj.resolution))?;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Precondition(format!("advection fraction {s} outside [0, 1]")));
    }
    let n = img.width();
    let vectors = flow.vectors();
    let mut failure = None;
    let out = img.map(|i, p| {
        let v = vectors[i];
        if s == 0.0 || v == [0.0, 0.0] {
            return p;
        }
        let q = [(i % n) as f64 + 0.5, (i / n) as f64 + 0.5];
        match displace_on_sphere(q, [-(v[0] as f64), -(v[1] as f64)], s, proj) {
            Ok(d) => sample_bilinear(img, d.coord),
            Err(e) => {
                failure.get_or_insert(e);
                [0.0; 3]
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Υ: per-pixel `(1 − w)·a + w·b`.
pub fn interpolate(a: &SkyImage, b: &SkyImage, w: f64) -> Result<SkyImage> {
    ensure_same_dims(a.dims(), b.dims())?;
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Precondition(format!("blend weight {w} outside [0, 1]")));
    }
    if w == 1.0 {
        return Ok(a.map(|i, _| b.pixels()[i]));
    }
    let w = w as f32;
    let bp = b.pixels();
    // `a + w·(b − a)` keeps equal inputs fixed exactly
    Ok(a.map(|i, p| [0, 1, 2].map(|c| p[c] + w * (bp[i][c] - p[c]))))
}

/// Diffuses flow from known cloud pixels into cloud pixels whose flow
/// vanished, by Jacobi averaging over 4-neighbors inside the mask.
pub fn inpaint_flow(flow: &FlowField, mask: &CloudMask, iterations: usize) -> Result<FlowField> {
    ensure_same_dims(flow.dims(), mask.dims())?;
    let n = flow.width();
    let bits = mask.bits();
    let holes: Vec<usize> = (0..n * n)
        .filter(|&i| {
            let v = flow.vectors()[i];
            bits[i] && v[0].hypot(v[1]) < ZERO_FLOW_EPS
        })
        .collect();
    let mut cur = flow.vectors().to_vec();
    for _ in 0..iterations {
        let prev = cur.clone();
        for &i in &holes {
            let (x, y) = (i % n, i / n);
            let mut acc = [0.0f32; 2];
            let mut count = 0;
            let neighbors = [
                (x > 0).then(|| i - 1),
                (x + 1 < n).then(|| i + 1),
                (y > 0).then(|| i - n),
                (y + 1 < n).then(|| i + n),
            ];
            for j in neighbors.into_iter().flatten() {
                if bits[j] {
                    acc[0] += prev[j][0];
                    acc[1] += prev[j][1];
                    count += 1;
                }
            }
            if count > 0 {
                cur[i] = [acc[0] / count as f32, acc[1] / count as f32];
            }
        }
    }
    FlowField::from_vectors(n, n, cur)
}

/// The two advection anchors of one interval, reusable across substeps.
#[derive(Clone, Debug)]
pub struct Anchors {
    pub first: SkyImage,
    pub second: SkyImage,
}

impl Anchors {
    pub fn new(pair: &KeyframePair, proj: &FisheyeProjection) -> Result<Self> {
        Ok(Self {
            first: advect(&pair.a, &pair.flow, 1.0 / 3.0, proj)?,
            second: advect(&pair.b, &pair.flow.negated(), 1.0 / 3.0, proj)?,
        })
    }
}

/// Γ with precomputed anchors.
pub fn gamma_with(pair: &KeyframePair, anchors: &Anchors, t: f64, delta_t: f64) -> Result<SkyImage> {
    if !(t > 0.0 && t < delta_t) {
        return Err(Error::TimeOutOfRange { t, delta_t });
    }
    let third = delta_t / 3.0;
    let snap = ANCHOR_SNAP * delta_t;
    if (t - third).abs() <= snap {
        return Ok(anchors.first.clone());
    }
    if (t - 2.0 * third).abs() <= snap {
        return Ok(anchors.second.clone());
    }
    let (lo, hi, ta) = if t < third {
        (&pair.a, &anchors.first, 0.0)
    } else if t < 2.0 * third {
        (&anchors.first, &anchors.second, third)
    } else {
        (&anchors.second, &pair.b, 2.0 * third)
    };
    interpolate(lo, hi, ((t - ta) / third).clamp(0.0, 1.0))
}

/// Γ: the frame at time `t ∈ (0, Δt)` between the keyframes of `pair`.
pub fn gamma(pair: &KeyframePair, t: f64, delta_t: f64, proj: &FisheyeProjection) -> Result<SkyImage> {
    if !(t > 0.0 && t < delta_t) {
        return Err(Error::TimeOutOfRange { t, delta_t });
    }
    gamma_with(pair, &Anchors::new(pair, proj)?, t, delta_t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameKind {
    Keyframe,
    Anchor,
    Blend,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub time: f64,
    pub kind: FrameKind,
    pub image: SkyImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub time: f64,
    pub kind: FrameKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub delta_t: f64,
    pub substeps: usize,
    pub keyframes: usize,
    pub resolution: usize,
    pub frames: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn for_config(cfg: &SequenceConfig, resolution: usize) -> Self {
        Self {
            version: 1,
            delta_t: cfg.delta_t,
            substeps: cfg.substeps,
            keyframes: cfg.keyframes,
            resolution,
            frames: (0..cfg.frame_count())
                .map(|index| ManifestEntry {
                    index,
                    time: cfg.time_of(index),
                    kind: cfg.kind_of(index),
                })
                .collect(),
        }
    }
}

/// Runs the full dispatch, handing each frame to `sink` in order.
pub fn synthesize_with(
    input: &SkyImage,
    flownet: &UNetModel,
    cloudnet: &UNetModel,
    cfg: &SequenceConfig,
    mut sink: impl FnMut(Frame) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    ensure_same_dims((cfg.projection.resolution, cfg.projection.resolution), input.dims())?;
    let s = cfg.substeps;
    let emit = |sink: &mut dyn FnMut(Frame) -> Result<()>, index: usize, image: SkyImage| {
        sink(Frame {
            index,
            time: cfg.time_of(index),
            kind: cfg.kind_of(index),
            image,
        })
    };
    emit(&mut sink, 0, input.clone())?;
    let mut current = input.clone();
    for i in 0..cfg.keyframes {
        let key = (i + 1) * s;
        let (next, _) = xi_step(flownet, cloudnet, &current).map_err(|e| e.in_frame(key))?;
        let pair = KeyframePair::estimate(current, next, i, cfg).map_err(|e| e.in_frame(key))?;
        let anchors = Anchors::new(&pair, &cfg.projection).map_err(|e| e.in_frame(i * s + s / 3))?;
        for k in 1..s {
            let index = i * s + k;
            let image = if 3 * k == s {
                anchors.first.clone()
            } else if 3 * k == 2 * s {
                anchors.second.clone()
            } else {
                gamma_with(&pair, &anchors, k as f64 * cfg.delta_t / s as f64, cfg.delta_t)
                    .map_err(|e| e.in_frame(index))?
            };
            emit(&mut sink, index, image)?;
        }
        emit(&mut sink, key, pair.b.clone())?;
        current = pair.b;
    }
    Ok(())
}

pub fn synthesize_sequence(
    input: &SkyImage,
    flownet: &UNetModel,
    cloudnet: &UNetModel,
    cfg: &SequenceConfig,
) -> Result<Vec<Frame>> {
    let mut frames = Vec::with_capacity(cfg.frame_count());
    synthesize_with(input, flownet, cloudnet, cfg, |f| {
        frames.push(f);
        Ok(())
    })?;
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{build_unet, UNetConfig};

    fn texture(n: usize) -> SkyImage {
        SkyImage::from_fn(n, |x, y| {
            let (x, y) = (x as f32, y as f32);
            [0.5 + 0.4 * (x * 0.3).sin(), 0.5 + 0.3 * (y * 0.2).cos(), 0.6]
        })
    }

    #[test]
    fn advect_identities() {
        let img = texture(32);
        let proj = FisheyeProjection::new(32);
        let zero = FlowField::zeros(32, 32);
        assert_eq!(advect(&img, &zero, 0.7, &proj).unwrap(), img);
        let f = FlowField::from_fn(32, |_, _| [2.0, -1.0]);
        assert_eq!(advect(&img, &f, 0.0, &proj).unwrap(), img);
    }

    #[test]
    fn uniform_shift_matches_oracle() {
        let n = 128;
        let proj = FisheyeProjection::new(n);
        let tex = |x: f64, y: f64| {
            let v = 0.5 + 0.2 * (x * 0.15).sin() + 0.2 * (y * 0.11).cos();
            [v as f32, (0.6 + 0.3 * (x * 0.07).cos()) as f32, 0.5]
        };
        let img = SkyImage::from_fn(n, |x, y| tex(x as f64 + 0.5, y as f64 + 0.5));
        let flow = FlowField::from_fn(n, |_, _| [4.0, 0.0]);
        let out = advect(&img, &flow, 1.0, &proj).unwrap();
        let (c, r) = (proj.center(), proj.radius());
        let mut se = 0.0;
        let mut count = 0;
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
                if dx.hypot(dy) > 0.25 * r {
                    continue;
                }
                let want = tex(x as f64 + 0.5 - 4.0, y as f64 + 0.5);
                let got = out.pixel(x, y);
                se += (0..3).map(|k| ((got[k] - want[k]) as f64).powi(2)).sum::<f64>() / 3.0;
                count += 1;
            }
        }
        let mse = se / count as f64;
        assert!(mse < 1e-4, "mse {mse}");
    }

    #[test]
    fn interpolate_endpoints() {
        let a = texture(16);
        let b = SkyImage::from_fn(16, |_, _| [1.0; 3]);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        let zero = SkyImage::black(16);
        let half = interpolate(&zero, &b, 0.5).unwrap();
        assert!(half.pixels().iter().zip(half.validity()).all(|(p, &v)| !v || *p == [0.5; 3]));
        assert!(interpolate(&a, &b, 1.5).is_err());
    }

    #[test]
    fn gamma_contract() {
        let n = 32;
        let proj = FisheyeProjection::new(n);
        let a = texture(n);
        let b = a.map(|_, p| [p[0] * 0.9, p[1], p[2]]);
        let flow = FlowField::from_fn(n, |_, _| [1.5, 0.5]);
        let pair = KeyframePair::new(a.clone(), b.clone(), flow.clone(), 0).unwrap();
        let dt = 10.0;
        assert_eq!(gamma(&pair, dt / 3.0, dt, &proj).unwrap(), advect(&a, &flow, 1.0 / 3.0, &proj).unwrap());
        assert_eq!(
            gamma(&pair, 2.0 * dt / 3.0, dt, &proj).unwrap(),
            advect(&b, &flow.negated(), 1.0 / 3.0, &proj).unwrap()
        );
        assert!(matches!(gamma(&pair, 0.0, dt, &proj), Err(Error::TimeOutOfRange { .. })));
        assert!(gamma(&pair, dt, dt, &proj).is_err());

        let still = KeyframePair::new(a.clone(), a.clone(), FlowField::zeros(n, n), 0).unwrap();
        for k in 1..30 {
            assert_eq!(gamma(&still, k as f64 * dt / 30.0, dt, &proj).unwrap(), a);
        }
    }

    #[test]
    fn gamma_limits_and_monotone_blend() {
        let n = 32;
        let dt = 10.0;
        let proj = FisheyeProjection::new(n);
        let a = texture(n);
        let b = a.map(|_, p| [p[2], p[0], p[1]]);
        let pair = KeyframePair::new(a.clone(), b.clone(), FlowField::from_fn(n, |_, _| [2.0, 1.0]), 0).unwrap();
        let anchors = Anchors::new(&pair, &proj).unwrap();
        let eps = dt / 1000.0;
        let tol = 2.0 * eps / (dt / 3.0);
        let max_diff = |x: &SkyImage, y: &SkyImage| {
            x.pixels()
                .iter()
                .zip(y.pixels())
                .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).abs()))
                .fold(0.0f32, f32::max) as f64
        };
        assert!(max_diff(&gamma_with(&pair, &anchors, eps, dt).unwrap(), &a) <= tol);
        assert!(max_diff(&gamma_with(&pair, &anchors, dt - eps, dt).unwrap(), &b) <= tol);

        // each pixel stays between the endpoints of its sub-interval
        let frames: Vec<_> = (1..30)
            .map(|k| gamma_with(&pair, &anchors, k as f64 * dt / 30.0, dt).unwrap())
            .collect();
        for w in frames[10..19].windows(2) {
            for (i, (p, q)) in w[0].pixels().iter().zip(w[1].pixels()).enumerate() {
                for c in 0..3 {
                    let (lo, hi) = (anchors.first.pixels()[i][c], anchors.second.pixels()[i][c]);
                    let step = q[c] - p[c];
                    assert!(step == 0.0 || step.signum() == (hi - lo).signum());
                }
            }
        }
    }

    #[test]
    fn inpaint_fills_cloud_interior() {
        let n = 16;
        let mask = CloudMask::filled(n, true);
        let flow = FlowField::from_fn(n, |x, _| if x < 6 { [2.0, 0.0] } else { [0.0, 0.0] });
        let filled = inpaint_flow(&flow, &mask, 50).unwrap();
        let v = filled.get(8, 8);
        assert!(v[0] > 0.5, "{v:?}");
        assert_eq!(filled.get(3, 8), [2.0, 0.0]);
    }

    #[test]
    fn counting_and_kinds() {
        let cfg = SequenceConfig {
            keyframes: 2,
            substeps: 6,
            projection: FisheyeProjection::new(16),
            ..SequenceConfig::default()
        };
        assert_eq!(cfg.frame_count(), 13);
        let m = Manifest::for_config(&cfg, 16);
        let kinds: Vec<_> = m.frames.iter().map(|f| f.kind).collect();
        use FrameKind::*;
        assert_eq!(
            kinds,
            [Keyframe, Blend, Anchor, Blend, Anchor, Blend, Keyframe, Blend, Anchor, Blend, Anchor, Blend, Keyframe]
        );
        assert!(SequenceConfig { substeps: 4, ..cfg.clone() }.validate().is_err());
    }

    #[test]
    fn synthesize_small() {
        let n = 16;
        let widths = [4, 8, 8];
        let f = build_unet(UNetConfig::flownet(n).with_widths(&widths), Role::FlowNet, 1).unwrap();
        let c = build_unet(UNetConfig::cloudnet(n).with_widths(&widths), Role::CloudNet, 2).unwrap();
        let cfg = SequenceConfig {
            keyframes: 1,
            substeps: 3,
            projection: FisheyeProjection::new(n),
            ..SequenceConfig::default()
        };
        let input = texture(n);
        let frames = synthesize_sequence(&input, &f, &c, &cfg).unwrap();
        assert_eq!(frames.len(), 4);
        assert_eq!(frames[0].image, input);
        assert_eq!(frames[3].image, xi_step(&f, &c, &input).unwrap().0);
        assert_eq!(frames[1].kind, FrameKind::Anchor);
        assert!(synthesize_sequence(&texture(32), &f, &c, &cfg).is_err());
    }
}
