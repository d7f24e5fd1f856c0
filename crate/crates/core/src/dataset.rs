//! Timelapse sequences: loading captured frames, temporal splits, training
//! pair construction and procedurally generated sequences with exact
//! ground-truth motion.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{flownet_infer, UNetModel};
use crate::optical_flow::{encode_flow, farneback_flow, mask_flow, EncodedFlow, FarnebackParams, FlowField};
use crate::sky_image::{compute_cloud_mask, load_png, save_png, Rgb, SkyImage};

pub const DEFAULT_INTERVAL_SECONDS: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetadata {
    #[serde(default = "default_interval")]
    pub interval: f64,
    #[serde(default)]
    pub device: String,
    #[serde(default)]
    pub location: String,
}

fn default_interval() -> f64 {
    DEFAULT_INTERVAL_SECONDS
}

impl Default for SequenceMetadata {
    fn default() -> Self {
        Self {
            interval: DEFAULT_INTERVAL_SECONDS,
            device: String::new(),
            location: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptureSequence {
    pub frames: Vec<SkyImage>,
    pub metadata: SequenceMetadata,
}

impl CaptureSequence {
    pub fn new(frames: Vec<SkyImage>, metadata: SequenceMetadata) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Precondition(format!(
                "a sequence needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let dims = frames[0].dims();
        if let Some(i) = frames.iter().position(|f| f.dims() != dims) {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: frames[i].dims(),
            }
            .in_frame(i));
        }
        if !(metadata.interval.is_finite() && metadata.interval > 0.0) {
            return Err(Error::Config(format!("interval must be > 0, got {}", metadata.interval)));
        }
        Ok(Self { frames, metadata })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.frames[0].width()
    }

    pub fn interval(&self) -> f64 {
        self.metadata.interval
    }
}

fn frame_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("frames");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// PNG files of a sequence directory in lexicographic order. Accepts either
/// `dir/frames/*.png` or PNGs directly inside `dir`.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let root = frame_dir(dir);
    let entries = fs::read_dir(&root).map_err(|e| Error::file(&root, e.to_string()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads `frames/NNNNNN.png` (sRGB → linear) and the optional
/// `sequence.json`. An explicit `interval` overrides the metadata file.
pub fn load_sequence(dir: &Path, interval: Option<f64>) -> Result<CaptureSequence> {
    let paths = list_frames(dir)?;
    if paths.is_empty() {
        return Err(Error::file(dir, "no PNG frames found"));
    }
    let meta_path = dir.join("sequence.json");
    let mut metadata = if meta_path.is_file() {
        let text = fs::read_to_string(&meta_path)?;
        serde_json::from_str(&text).map_err(|e| Error::file(&meta_path, e.to_string()))?
    } else {
        SequenceMetadata::default()
    };
    if let Some(iv) = interval {
        metadata.interval = iv;
    }
    let mut frames: Vec<SkyImage> = Vec::with_capacity(paths.len());
    for (i, path) in paths.iter().enumerate() {
        let img = load_png(path).map_err(|e| e.in_frame(i))?;
        if let Some(first) = frames.first() {
            if first.dims() != img.dims() {
                return Err(Error::file(
                    path,
                    format!(
                        "frame {i} is {}x{}, expected {}x{}",
                        img.width(),
                        img.height(),
                        first.width(),
                        first.height()
                    ),
                ));
            }
        }
        frames.push(img);
    }
    CaptureSequence::new(frames, metadata)
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Writes `frames/NNNNNN.png` and `sequence.json` under `dir`.
pub fn save_sequence(seq: &CaptureSequence, dir: &Path) -> Result<()> {
    let frames = dir.join("frames");
    fs::create_dir_all(&frames)?;
    for (i, f) in seq.frames.iter().enumerate() {
        save_png(f, &frames.join(frame_file_name(i)))?;
    }
    fs::write(dir.join("sequence.json"), serde_json::to_string_pretty(&seq.metadata)?)?;
    Ok(())
}

/// Contiguous temporal split: the earliest `round(fraction · N)` frames
/// train, the rest test.
pub fn split_train_test(seq: &CaptureSequence, fraction: f64) -> Result<(CaptureSequence, CaptureSequence)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {fraction}")));
    }
    let n = seq.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train < 2 || n - n_train.min(n) < 2 {
        return Err(Error::Precondition(format!(
            "split of {n} frames at {fraction} leaves fewer than 2 frames on one side"
        )));
    }
    let train = CaptureSequence::new(seq.frames[..n_train].to_vec(), seq.metadata.clone())?;
    let test = CaptureSequence::new(seq.frames[n_train..].to_vec(), seq.metadata.clone())?;
    Ok((train, test))
}

/// Masked, encoded flow between each frame and its successor.
pub fn flownet_target(a: &SkyImage, b: &SkyImage, params: &FarnebackParams, threshold: f32) -> Result<EncodedFlow> {
    let flow = farneback_flow(a, b, params)?;
    let masked = mask_flow(&flow, &compute_cloud_mask(a, threshold))?;
    Ok(encode_flow(&masked))
}

pub fn build_flownet_pairs(
    seq: &CaptureSequence,
    params: &FarnebackParams,
    threshold: f32,
) -> Result<Vec<(SkyImage, EncodedFlow)>> {
    seq.frames
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            flownet_target(&w[0], &w[1], params, threshold)
                .map(|t| (w[0].clone(), t))
                .map_err(|e| e.in_frame(i))
        })
        .collect()
}

pub fn build_cloudnet_pairs(
    seq: &CaptureSequence,
    flownet: &UNetModel,
) -> Result<Vec<(SkyImage, EncodedFlow, SkyImage)>> {
    seq.frames
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            flownet_infer(flownet, &w[0])
                .map(|f| (w[0].clone(), f, w[1].clone()))
                .map_err(|e| e.in_frame(i))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudLayerSpec {
    /// Pixels per frame, `[du, dv]`.
    pub velocity: [f64; 2],
    #[serde(default = "default_octaves")]
    pub octaves: usize,
    /// Lattice cells across the frame for the first octave.
    #[serde(default = "default_base_frequency")]
    pub base_frequency: usize,
    /// Fraction of the sky covered, in `(0, 1)`.
    pub coverage: f64,
    #[serde(default = "default_softness")]
    pub softness: f64,
    #[serde(default = "default_cloud_color")]
    pub color: Rgb,
}

fn default_octaves() -> usize {
    4
}

fn default_base_frequency() -> usize {
    8
}

fn default_softness() -> f64 {
    0.15
}

fn default_cloud_color() -> Rgb {
    [0.92, 0.92, 0.9]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkyGradientSpec {
    pub zenith: Rgb,
    pub horizon: Rgb,
}

impl Default for SkyGradientSpec {
    fn default() -> Self {
        Self {
            zenith: [0.08, 0.2, 0.55],
            horizon: [0.25, 0.42, 0.75],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub resolution: usize,
    pub layers: Vec<CloudLayerSpec>,
    #[serde(default)]
    pub sky: SkyGradientSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_interval")]
    pub interval: f64,
}

impl SyntheticSceneSpec {
    /// One textured layer moving at `velocity` that covers almost the whole
    /// sky, so every pixel carries the same motion.
    pub fn overcast(resolution: usize, velocity: [f64; 2], seed: u64) -> Self {
        Self {
            resolution,
            layers: vec![CloudLayerSpec {
                velocity,
                octaves: 4,
                base_frequency: 8,
                coverage: 0.995,
                softness: 0.05,
                color: [0.95, 0.95, 0.93],
            }],
            sky: SkyGradientSpec::default(),
            seed,
            interval: DEFAULT_INTERVAL_SECONDS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::Config(format!("resolution must be >= 2, got {}", self.resolution)));
        }
        if !(self.interval.is_finite() && self.interval > 0.0) {
            return Err(Error::Config("interval must be > 0".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if !(l.velocity[0].is_finite() && l.velocity[1].is_finite()) {
                return Err(Error::Config(format!("layer {i}: velocity must be finite")));
            }
            if !(l.coverage > 0.0 && l.coverage < 1.0) {
                return Err(Error::Config(format!("layer {i}: coverage must lie in (0, 1)")));
            }
            if l.octaves == 0 || l.base_frequency == 0 {
                return Err(Error::Config(format!("layer {i}: octaves and base_frequency must be >= 1")));
            }
            if !(l.softness > 0.0) {
                return Err(Error::Config(format!("layer {i}: softness must be > 0")));
            }
        }
        Ok(())
    }
}

/// Tileable fractal value noise in `[0, 1]`; the period is one frame width
/// for every octave.
#[derive(Clone, Debug)]
pub struct PeriodicValueNoise {
    period: f64,
    lattices: Vec<(usize, Vec<f64>)>,
}

impl PeriodicValueNoise {
    pub fn new(period: f64, base_frequency: usize, octaves: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lattices = (0..octaves)
            .map(|o| {
                let f = base_frequency << o;
                (f, (0..f * f).map(|_| rng.random::<f64>()).collect())
            })
            .collect();
        Self { period, lattices }
    }

    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let mut acc = 0.0;
        let mut amp = 1.0;
        let mut norm = 0.0;
        for (f, lattice) in &self.lattices {
            let u = (x / self.period).rem_euclid(1.0) * *f as f64;
            let v = (y / self.period).rem_euclid(1.0) * *f as f64;
            let (i0, j0) = (u.floor() as usize % f, v.floor() as usize % f);
            let (i1, j1) = ((i0 + 1) % f, (j0 + 1) % f);
            let (tx, ty) = (quintic(u - u.floor()), quintic(v - v.floor()));
            let at = |i: usize, j: usize| lattice[j * f + i];
            let top = at(i0, j0) + (at(i1, j0) - at(i0, j0)) * tx;
            let bot = at(i0, j1) + (at(i1, j1) - at(i0, j1)) * tx;
            acc += amp * (top + (bot - top) * ty);
            norm += amp;
            amp *= 0.5;
        }
        acc / norm
    }
}

fn quintic(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Generated frames together with the exact motion between them.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub sequence: CaptureSequence,
    /// `ground_truth[k]` is the displacement from frame `k` to `k + 1` of
    /// the front-most opaque layer (zero over clear sky).
    pub ground_truth: Vec<FlowField>,
}

struct LayerSampler<'a> {
    spec: &'a CloudLayerSpec,
    noise: PeriodicValueNoise,
}

impl LayerSampler<'_> {
    /// Opacity and density at pixel center `(x, y)` of frame `k`.
    fn sample(&self, x: f64, y: f64, k: usize) -> (f64, f64) {
        let px = x - self.spec.velocity[0] * k as f64;
        let py = y - self.spec.velocity[1] * k as f64;
        let n = self.noise.sample(px, py);
        let t = 1.0 - self.spec.coverage;
        let s = self.spec.softness;
        (smoothstep(t - s, t + s, n), n)
    }
}

/// Renders `frames` frames of the scene: value-noise layers translated by
/// their exact velocity over a radial sky gradient.
pub fn generate_synthetic_sequence(spec: &SyntheticSceneSpec, frames: usize) -> Result<SyntheticSequence> {
    spec.validate()?;
    if frames < 2 {
        return Err(Error::Precondition(format!("need at least 2 frames, got {frames}")));
    }
    let n = spec.resolution;
    let samplers: Vec<LayerSampler> = spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerSampler {
            spec: l,
            noise: PeriodicValueNoise::new(
                n as f64,
                l.base_frequency,
                l.octaves,
                spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64),
            ),
        })
        .collect();
    let c = n as f64 / 2.0;
    let render = |k: usize| {
        SkyImage::from_fn(n, |x, y| {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let r = ((fx - c).hypot(fy - c) / c).min(1.0);
            let mut px: [f64; 3] =
                std::array::from_fn(|ch| spec.sky.zenith[ch] as f64 * (1.0 - r) + spec.sky.horizon[ch] as f64 * r);
            for s in &samplers {
                let (alpha, density) = s.sample(fx, fy, k);
                let shade = 0.55 + 0.45 * density;
                for ch in 0..3 {
                    px[ch] = px[ch] * (1.0 - alpha) + s.spec.color[ch] as f64 * shade * alpha;
                }
            }
            px.map(|v| v as f32)
        })
    };
    let truth = |k: usize| {
        FlowField::from_fn(n, |x, y| {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            samplers
                .iter()
                .rev()
                .find(|s| s.sample(fx, fy, k).0 > 0.5)
                .map(|s| [s.spec.velocity[0] as f32, s.spec.velocity[1] as f32])
                .unwrap_or([0.0; 2])
        })
    };
    let images: Vec<SkyImage> = (0..frames).map(render).collect();
    let ground_truth = (0..frames - 1).map(truth).collect();
    let metadata = SequenceMetadata {
        interval: spec.interval,
        device: "synthetic".into(),
        location: format!("seed {}", spec.seed),
    };
    Ok(SyntheticSequence {
        sequence: CaptureSequence::new(images, metadata)?,
        ground_truth,
    })
}

/// Deterministic random test scene with a handful of layers.
pub fn random_scene(resolution: usize, seed: u64) -> SyntheticSceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..rng.random_range(1..=3))
        .map(|_| CloudLayerSpec {
            velocity: [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)],
            octaves: rng.random_range(2..=5),
            base_frequency: rng.random_range(2..=8),
            coverage: rng.random_range(0.1..0.9),
            softness: 0.15,
            color: default_cloud_color(),
        })
        .collect();
    SyntheticSceneSpec {
        resolution,
        layers,
        sky: SkyGradientSpec::default(),
        seed,
        interval: DEFAULT_INTERVAL_SECONDS,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn static_seq(n: usize) -> CaptureSequence {
        let img = SkyImage::from_fn(16, |x, y| [x as f32 / 16.0, y as f32 / 16.0, 0.5]);
        CaptureSequence::new(vec![img; n], SequenceMetadata::default()).unwrap()
    }

    #[test]
    fn split_examples() {
        let (train, test) = split_train_test(&static_seq(10), 0.8).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert!(split_train_test(&static_seq(2), 0.8).is_err());
        assert!(split_train_test(&static_seq(10), 1.0).is_err());
    }

    #[test]
    fn split_matches_reported_test_count() {
        let n = 3626usize;
        let n_train = (0.8 * n as f64).round() as usize;
        assert_eq!((n_train, n - n_train), (2901, 725));
    }

    #[test]
    fn split_is_contiguous() {
        let frames: Vec<SkyImage> = (0..7).map(|i| SkyImage::from_fn(8, |_, _| [i as f32 / 10.0; 3])).collect();
        let seq = CaptureSequence::new(frames.clone(), SequenceMetadata::default()).unwrap();
        let (train, test) = split_train_test(&seq, 0.6).unwrap();
        assert_eq!(train.frames, frames[..4]);
        assert_eq!(test.frames, frames[4..]);
    }

    #[test]
    fn sequence_requires_uniform_resolution() {
        let err = CaptureSequence::new(vec![SkyImage::black(8), SkyImage::black(16)], SequenceMetadata::default())
            .unwrap_err();
        assert!(matches!(err, Error::Frame { index: 1, .. }));
        assert!(CaptureSequence::new(vec![SkyImage::black(8)], SequenceMetadata::default()).is_err());
    }

    #[test]
    fn noise_is_periodic_and_bounded() {
        let noise = PeriodicValueNoise::new(64.0, 4, 3, 7);
        for i in 0..200 {
            let (x, y) = (i as f64 * 0.77, i as f64 * 1.31);
            let v = noise.sample(x, y);
            assert!((0.0..=1.0).contains(&v));
            assert!((v - noise.sample(x + 64.0, y - 128.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn static_synthetic_frames_identical() {
        let mut spec = random_scene(32, 3);
        for l in &mut spec.layers {
            l.velocity = [0.0, 0.0];
        }
        let s = generate_synthetic_sequence(&spec, 3).unwrap();
        assert_eq!(s.sequence.frames[0], s.sequence.frames[1]);
        assert_eq!(s.sequence.frames[1], s.sequence.frames[2]);
        assert!(generate_synthetic_sequence(&spec, 1).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = random_scene(32, 11);
        let a = generate_synthetic_sequence(&spec, 3).unwrap();
        let b = generate_synthetic_sequence(&spec, 3).unwrap();
        assert_eq!(a.sequence, b.sequence);
        assert_eq!(a.ground_truth, b.ground_truth);
    }

    #[test]
    fn single_layer_shift_is_exact() {
        let mut spec = SyntheticSceneSpec::overcast(64, [3.0, 0.0], 5);
        spec.layers[0].coverage = 0.5;
        spec.sky.horizon = spec.sky.zenith;
        let s = generate_synthetic_sequence(&spec, 3).unwrap();
        let f0 = &s.sequence.frames[0];
        for k in 1..3 {
            let fk = &s.sequence.frames[k];
            let mut se = 0.0f64;
            let mut count = 0;
            for y in 0..64 {
                for x in (3 * k)..64 {
                    if fk.is_valid(x, y) && f0.is_valid(x - 3 * k, y) {
                        for c in 0..3 {
                            se += (fk.pixel(x, y)[c] - f0.pixel(x - 3 * k, y)[c]).powi(2) as f64;
                        }
                        count += 3;
                    }
                }
            }
            assert!(se / (count as f64) < 1e-4);
        }
    }

    #[test]
    fn spec_json_rejects_unknown_fields() {
        let text = r#"{"resolution": 32, "layers": [], "bogus": 1}"#;
        assert!(serde_json::from_str::<SyntheticSceneSpec>(text).is_err());
        let bad = SyntheticSceneSpec {
            layers: vec![CloudLayerSpec {
                velocity: [f64::NAN, 0.0],
                octaves: 2,
                base_frequency: 2,
                coverage: 0.5,
                softness: 0.1,
                color: default_cloud_color(),
            }],
            ..SyntheticSceneSpec::overcast(16, [0.0, 0.0], 0)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn load_and_save_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_sequence(dir.path(), None).is_err());
        let seq = generate_synthetic_sequence(&random_scene(16, 1), 2).unwrap().sequence;
        save_sequence(&seq, dir.path()).unwrap();
        let loaded = load_sequence(dir.path(), None).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.metadata.device, "synthetic");

        let big = SkyImage::black(32);
        save_png(&big, &dir.path().join("frames").join("000002.png")).unwrap();
        let err = load_sequence(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("000002.png"), "{err}");
    }
}
