//! Image metrics over the fisheye disc, next-frame evaluation of a trained
//! predictor, flow-magnitude distribution comparison and the loss ablation.

use std::fmt::Write as _;

use serde::{Serialize, Serializer};

use crate::dataset::{build_cloudnet_pairs, build_flownet_pairs, CaptureSequence};
use crate::error::{ensure_same_dims, Error, Result};
use crate::neural::{train_cloudnet, train_flownet, TrainConfig, UNetConfig, UNetModel};
use crate::optical_flow::{farneback_flow, flow_magnitude_histogram, FarnebackParams};
use crate::sky_image::{compute_cloud_mask, luma, SkyImage};
use crate::temporal_engine::xi_step;

pub const SSIM_WINDOW: usize = 8;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Mean squared difference over valid pixels and all three channels.
pub fn mse(a: &SkyImage, b: &SkyImage) -> Result<f64> {
    ensure_same_dims(a.dims(), b.dims())?;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for ((p, q), &v) in a.pixels().iter().zip(b.pixels()).zip(a.validity()) {
        if v {
            for c in 0..3 {
                let d = p[c] as f64 - q[c] as f64;
                sum += d * d;
            }
            count += 3;
        }
    }
    if count == 0 {
        return Err(Error::Precondition("image has no valid pixels".into()));
    }
    Ok(sum / count as f64)
}

/// `10·log10(peak² / mse)`; `+∞` when `mse` is zero.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

pub fn psnr(a: &SkyImage, b: &SkyImage, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// Mean SSIM of luminance over every 8×8 window (stride 1) lying entirely
/// inside the disc. Window statistics use uniform weights and population
/// (co)variances.
pub fn ssim(a: &SkyImage, b: &SkyImage, peak: f64) -> Result<f64> {
    ensure_same_dims(a.dims(), b.dims())?;
    let n = a.width();
    let w = SSIM_WINDOW;
    if n < w {
        return Err(Error::Precondition(format!("image of size {n} is smaller than the SSIM window")));
    }
    let la: Vec<f64> = a.pixels().iter().map(|&p| luma(p) as f64).collect();
    let lb: Vec<f64> = b.pixels().iter().map(|&p| luma(p) as f64).collect();
    let valid = a.validity();
    // invalid[y][x] prefix sums to test window coverage in O(1)
    let mut bad = vec![0u32; (n + 1) * (n + 1)];
    for y in 0..n {
        for x in 0..n {
            bad[(y + 1) * (n + 1) + x + 1] = u32::from(!valid[y * n + x]) + bad[y * (n + 1) + x + 1]
                + bad[(y + 1) * (n + 1) + x]
                - bad[y * (n + 1) + x];
        }
    }
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let area = (w * w) as f64;
    let mut total = 0.0f64;
    let mut windows = 0usize;
    for y0 in 0..=n - w {
        for x0 in 0..=n - w {
            let (y1, x1) = (y0 + w, x0 + w);
            let holes = bad[y1 * (n + 1) + x1] + bad[y0 * (n + 1) + x0] - bad[y0 * (n + 1) + x1] - bad[y1 * (n + 1) + x0];
            if holes != 0 {
                continue;
            }
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    sa += la[y * n + x];
                    sb += lb[y * n + x];
                }
            }
            let (ma, mb) = (sa / area, sb / area);
            let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (da, db) = (la[y * n + x] - ma, lb[y * n + x] - mb);
                    vaa += da * da;
                    vbb += db * db;
                    vab += da * db;
                }
            }
            let (vaa, vbb, vab) = (vaa / area, vbb / area, vab / area);
            total += ((2.0 * ma * mb + c1) * (2.0 * vab + c2)) / ((ma * ma + mb * mb + c1) * (vaa + vbb + c2));
            windows += 1;
        }
    }
    if windows == 0 {
        return Err(Error::Precondition("no SSIM window fits inside the disc".into()));
    }
    Ok(total / windows as f64)
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub index: usize,
    pub mse: f64,
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mse: f64,
    /// Mean of per-frame PSNR; `+∞` if any frame is reproduced exactly.
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub frames: usize,
    /// How per-frame values are pooled.
    pub averaging: &'static str,
    pub per_frame: Vec<FrameMetrics>,
}

impl MetricReport {
    fn from_frames(per_frame: Vec<FrameMetrics>) -> Self {
        let k = per_frame.len() as f64;
        Self {
            mse: per_frame.iter().map(|f| f.mse).sum::<f64>() / k,
            psnr: per_frame.iter().map(|f| f.psnr).sum::<f64>() / k,
            ssim: per_frame.iter().map(|f| f.ssim).sum::<f64>() / k,
            frames: per_frame.len(),
            averaging: "per-frame",
            per_frame,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:>6}  {:>12}  {:>10}  {:>8}\n", "frame", "mse", "psnr_db", "ssim");
        let row = |s: &mut String, label: &str, mse: f64, psnr: f64, ssim: f64| {
            let _ = writeln!(s, "{label:>6}  {mse:>12.6e}  {psnr:>10.3}  {ssim:>8.5}");
        };
        for f in &self.per_frame {
            row(&mut s, &f.index.to_string(), f.mse, f.psnr, f.ssim);
        }
        row(&mut s, "mean", self.mse, self.psnr, self.ssim);
        s
    }
}

/// Scores `predict(i, frame_i)` against `frame_{i+1}` for every consecutive
/// pair of `test`.
pub fn evaluate_predictions(
    test: &CaptureSequence,
    peak: f64,
    mut predict: impl FnMut(usize, &SkyImage) -> Result<SkyImage>,
) -> Result<MetricReport> {
    if test.len() < 2 {
        return Err(Error::Precondition("evaluation needs at least 2 test frames".into()));
    }
    let mut per_frame = Vec::with_capacity(test.len() - 1);
    for (i, w) in test.frames.windows(2).enumerate() {
        let metrics = predict(i, &w[0]).and_then(|pred| {
            let m = mse(&pred, &w[1])?;
            Ok(FrameMetrics {
                index: i,
                mse: m,
                psnr: psnr_from_mse(m, peak),
                ssim: ssim(&pred, &w[1], peak)?,
            })
        });
        per_frame.push(metrics.map_err(|e| e.in_frame(i))?);
    }
    Ok(MetricReport::from_frames(per_frame))
}

/// Next-frame error of one ξ step on every test frame.
pub fn evaluate_test_set(test: &CaptureSequence, flownet: &UNetModel, cloudnet: &UNetModel) -> Result<MetricReport> {
    evaluate_predictions(test, 1.0, |_, img| Ok(xi_step(flownet, cloudnet, img)?.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramPair {
    pub index: usize,
    pub real: Vec<f64>,
    pub generated: Vec<f64>,
    /// L1 distance between the two normalized histograms.
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramComparison {
    pub edges: Vec<f64>,
    pub frames: Vec<HistogramPair>,
    pub mean_distance: f64,
}

impl HistogramComparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,bin_lo,bin_hi,real,generated\n");
        for f in &self.frames {
            for (k, (r, g)) in f.real.iter().zip(&f.generated).enumerate() {
                let _ = writeln!(s, "{},{},{},{},{}", f.index, self.edges[k], self.edges[k + 1], r, g);
            }
        }
        s
    }
}

/// Magnitude histogram of re-estimated flow on the clouds of each frame.
pub fn sequence_flow_histograms(
    frames: &[SkyImage],
    edges: &[f64],
    params: &FarnebackParams,
    threshold: f32,
) -> Result<Vec<Vec<f64>>> {
    if frames.len() < 2 {
        return Err(Error::Precondition("flow histograms need at least 2 frames".into()));
    }
    frames
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let flow = farneback_flow(&w[0], &w[1], params)?;
            flow_magnitude_histogram(&flow, &compute_cloud_mask(&w[0], threshold), edges).map_err(|e| e.in_frame(i))
        })
        .collect()
}

/// Compares flow-magnitude distributions frame by frame over the common
/// length of both sequences.
pub fn flow_histogram_compare(
    real: &CaptureSequence,
    generated: &[SkyImage],
    edges: &[f64],
    params: &FarnebackParams,
    threshold: f32,
) -> Result<HistogramComparison> {
    let k = real.len().min(generated.len());
    let hr = sequence_flow_histograms(&real.frames[..k], edges, params, threshold)?;
    let hg = sequence_flow_histograms(&generated[..k.min(generated.len())], edges, params, threshold)?;
    let frames: Vec<_> = hr
        .into_iter()
        .zip(hg)
        .enumerate()
        .map(|(index, (real, generated))| {
            let distance = real.iter().zip(&generated).map(|(a, b)| (a - b).abs()).sum();
            HistogramPair {
                index,
                real,
                generated,
                distance,
            }
        })
        .collect();
    let mean_distance = frames.iter().map(|f| f.distance).sum::<f64>() / frames.len() as f64;
    Ok(HistogramComparison {
        edges: edges.to_vec(),
        frames,
        mean_distance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationVariant {
    pub name: String,
    pub cosine_weight: f64,
    pub test_mse: f64,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub epochs: usize,
    pub seed: u64,
    pub variants: Vec<AblationVariant>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12}  {:>8}  {:>12}\n", "variant", "lambda", "test_mse");
        for v in &self.variants {
            let _ = writeln!(s, "{:<12}  {:>8.3}  {:>12.6e}", v.name, v.cosine_weight, v.test_mse);
        }
        s
    }
}

pub struct AblationSetup<'a> {
    pub train: &'a CaptureSequence,
    pub test: &'a CaptureSequence,
    pub flownet: &'a UNetConfig,
    pub cloudnet: &'a UNetConfig,
    pub farneback: FarnebackParams,
    pub cloud_threshold: f32,
    /// Shared by every variant; only `cosine_weight` is overridden.
    pub train_config: TrainConfig,
}

/// Trains FlowNet then CloudNet once per `(name, cosine_weight)` variant
/// with identical data, seed and budget, and reports next-frame test MSE.
pub fn ablation_run(setup: &AblationSetup<'_>, variants: &[(&str, f64)]) -> Result<AblationReport> {
    let flow_pairs = build_flownet_pairs(setup.train, &setup.farneback, setup.cloud_threshold)?;
    let mut out = Vec::with_capacity(variants.len());
    for &(name, lambda) in variants {
        let cfg = TrainConfig {
            cosine_weight: lambda,
            ..setup.train_config.clone()
        };
        let flownet = train_flownet(&flow_pairs, setup.flownet, &cfg)?.model;
        let triples = build_cloudnet_pairs(setup.train, &flownet)?;
        let cloud = train_cloudnet(&triples, setup.cloudnet, &cfg)?;
        let report = evaluate_test_set(setup.test, &flownet, &cloud.model)?;
        out.push(AblationVariant {
            name: name.to_string(),
            cosine_weight: lambda,
            test_mse: report.mse,
            final_train_loss: cloud.history.last().map_or(f64::NAN, |h| h.total),
        });
    }
    Ok(AblationReport {
        epochs: setup.train_config.epochs,
        seed: setup.train_config.seed,
        variants: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SequenceMetadata;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> SkyImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SkyImage::from_fn(n, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn mse_and_psnr_closed_forms() {
        let a = SkyImage::black(32);
        let b = a.map(|_, _| [0.1; 3]);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-9);
        assert_eq!(psnr_from_mse(0.01, 1.0), 20.0);
        assert!((psnr_from_mse(0.00536, 1.0) - 22.709).abs() < 1e-3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr_from_mse(0.02, 1.0) < psnr_from_mse(0.01, 1.0));
        assert!(mse(&a, &SkyImage::black(16)).is_err());
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let a = random(32, 1);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
        let bin = SkyImage::from_fn(32, |x, y| if (x / 2 + y / 3) % 2 == 0 { [1.0; 3] } else { [0.0; 3] });
        let inv = bin.map(|_, p| p.map(|v| 1.0 - v));
        assert!(ssim(&bin, &inv, 1.0).unwrap() < 0.0);
    }

    #[test]
    fn metrics_flip_invariant() {
        let (a, b) = (random(32, 2), random(32, 3));
        let (fa, fb) = (a.flip_horizontal(), b.flip_horizontal());
        assert!((mse(&a, &b).unwrap() - mse(&fa, &fb).unwrap()).abs() < 1e-12);
        assert!((ssim(&a, &b, 1.0).unwrap() - ssim(&fa, &fb, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_copy_predictors() {
        let frames: Vec<_> = (0..3).map(|i| random(16, i)).collect();
        let seq = CaptureSequence::new(frames, SequenceMetadata::default()).unwrap();
        let perfect = evaluate_predictions(&seq, 1.0, |i, _| Ok(seq.frames[i + 1].clone())).unwrap();
        assert_eq!((perfect.mse, perfect.ssim, perfect.frames), (0.0, 1.0, 2));
        assert!(perfect.psnr.is_infinite());
        assert!(perfect.to_json().unwrap().contains("\"inf\""));
        assert_eq!(perfect.to_table().lines().count(), 4);

        let still = CaptureSequence::new(vec![random(16, 7); 3], SequenceMetadata::default()).unwrap();
        let copy = evaluate_predictions(&still, 1.0, |_, img| Ok(img.clone())).unwrap();
        assert_eq!(copy.mse, 0.0);
    }
}
