//! Hemispherical sky rasters, cloud masks and dynamic-range curves.
//!
//! A [`SkyImage`] is a square fisheye frame whose valid region is the
//! inscribed disc. Pixels outside the disc are stored as exact zeros so that
//! every downstream consumer (flow estimation, convolutions, metrics) sees
//! finite values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rgb = [f32; 3];

/// Default red/blue ratio above which a pixel counts as cloud.
pub const DEFAULT_CLOUD_THRESHOLD: f32 = 0.46;

/// Per-pixel inside-disc flags for a `width`×`width` frame, row-major.
///
/// A pixel is valid when its center lies within the inscribed disc
/// (radius `width / 2`, centered on the frame).
pub fn disc_validity(width: usize) -> Vec<bool> {
    let c = width as f64 / 2.0;
    let r2 = c * c;
    let mut flags = Vec::with_capacity(width * width);
    for y in 0..width {
        let dy = y as f64 + 0.5 - c;
        for x in 0..width {
            let dx = x as f64 + 0.5 - c;
            flags.push(dx * dx + dy * dy <= r2);
        }
    }
    flags
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkyImage {
    size: usize,
    pixels: Vec<Rgb>,
    valid: Arc<Vec<bool>>,
}

impl SkyImage {
    /// All-zero image of the given side length.
    pub fn black(size: usize) -> Self {
        Self {
            size,
            pixels: vec![[0.0; 3]; size * size],
            valid: Arc::new(disc_validity(size)),
        }
    }

    /// Builds an image from a per-pixel generator. Values are clamped to
    /// `[0, 1]` and the outside of the disc is zeroed.
    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let valid = Arc::new(disc_validity(size));
        let mut pixels = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                if valid[y * size + x] {
                    pixels.push(f(x, y).map(clamp_unit));
                } else {
                    pixels.push([0.0; 3]);
                }
            }
        }
        Self {
            size,
            pixels,
            valid,
        }
    }

    /// Wraps raw pixels, rejecting non-finite or out-of-range values.
    /// Pixels outside the disc are zeroed.
    pub fn from_pixels(size: usize, mut pixels: Vec<Rgb>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::Precondition(format!(
                "expected {} pixels for a {size}x{size} image, got {}",
                size * size,
                pixels.len()
            )));
        }
        let valid = Arc::new(disc_validity(size));
        for (i, px) in pixels.iter_mut().enumerate() {
            if !valid[i] {
                *px = [0.0; 3];
                continue;
            }
            for (channel, &v) in px.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        x: i % size,
                        y: i / size,
                        channel,
                        value: v,
                    });
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Precondition(format!(
                        "pixel ({}, {}) channel {channel} = {v} outside [0, 1]",
                        i % size,
                        i / size
                    )));
                }
            }
        }
        Ok(Self {
            size,
            pixels,
            valid,
        })
    }

    /// Like [`SkyImage::from_pixels`] but clamps instead of rejecting;
    /// non-finite values become zero.
    pub fn from_pixels_clamped(size: usize, pixels: Vec<Rgb>) -> Self {
        Self::from_fn(size, |x, y| {
            pixels
                .get(y * size + x)
                .copied()
                .unwrap_or([0.0; 3])
                .map(|v| if v.is_finite() { v } else { 0.0 })
        })
    }

    pub fn width(&self) -> usize {
        self.size
    }

    pub fn height(&self) -> usize {
        self.size
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.size, self.size)
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.size + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.size + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Rec. 601 luma, the single channel used for flow and SSIM.
    pub fn luminance(&self) -> Vec<f32> {
        self.pixels.iter().map(|p| luma(*p)).collect()
    }

    /// Applies `f` to every valid pixel, clamping the result.
    pub fn map(&self, mut f: impl FnMut(usize, Rgb) -> Rgb) -> Self {
        let pixels = self
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                if self.valid[i] {
                    f(i, p).map(clamp_unit)
                } else {
                    [0.0; 3]
                }
            })
            .collect();
        Self {
            size: self.size,
            pixels,
            valid: Arc::clone(&self.valid),
        }
    }

    /// Mirror across the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let n = self.size;
        let mut pixels = vec![[0.0; 3]; n * n];
        for y in 0..n {
            for x in 0..n {
                pixels[y * n + x] = self.pixels[y * n + (n - 1 - x)];
            }
        }
        Self {
            size: n,
            pixels,
            valid: Arc::clone(&self.valid),
        }
    }

    pub(crate) fn from_parts_unchecked(size: usize, pixels: Vec<Rgb>, valid: Arc<Vec<bool>>) -> Self {
        debug_assert_eq!(pixels.len(), size * size);
        Self {
            size,
            pixels,
            valid,
        }
    }
}

pub fn luma(p: Rgb) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CloudMask {
    size: usize,
    bits: Vec<bool>,
}

impl CloudMask {
    pub fn new(size: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != size * size {
            return Err(Error::Precondition(format!(
                "mask needs {} entries, got {}",
                size * size,
                bits.len()
            )));
        }
        let valid = disc_validity(size);
        let bits = bits.into_iter().zip(valid).map(|(b, v)| b && v).collect();
        Ok(Self { size, bits })
    }

    pub fn filled(size: usize, value: bool) -> Self {
        Self::new(size, vec![value; size * size]).expect("length matches")
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.size, self.size)
    }

    pub fn width(&self) -> usize {
        self.size
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.size + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Red/blue ratio test for a single pixel. `B = 0` is treated as an
/// infinite ratio when `R > 0` and as zero otherwise.
pub fn is_cloud_pixel(p: Rgb, threshold: f32) -> bool {
    let (r, b) = (p[0], p[2]);
    if b == 0.0 {
        return r > 0.0;
    }
    r / b > threshold
}

pub fn compute_cloud_mask(img: &SkyImage, threshold: f32) -> CloudMask {
    let bits = img
        .pixels
        .iter()
        .zip(img.valid.iter())
        .map(|(&p, &v)| v && is_cloud_pixel(p, threshold))
        .collect();
    CloudMask {
        size: img.size,
        bits,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToneCurveKind {
    Identity,
    Gamma,
    ExponentialExpansion,
}

/// Monotone bijection between HDR radiance in `[0, scale]` and `[0, 1]`.
///
/// `forward` compresses (HDR → display range) and `inverse` expands. For
/// `gamma` the forward map is `x^(1/exponent)`; for `exponential-expansion`
/// it is `ln(1 + k·x) / ln(1 + k)` with `k = exponent`, whose inverse is the
/// exponential `((1 + k)^y − 1) / k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToneCurve {
    pub kind: ToneCurveKind,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn default_exponent() -> f64 {
    2.2
}

fn default_scale() -> f64 {
    1.0
}

impl Default for ToneCurve {
    fn default() -> Self {
        Self::identity()
    }
}

impl ToneCurve {
    pub fn identity() -> Self {
        Self {
            kind: ToneCurveKind::Identity,
            exponent: 1.0,
            scale: 1.0,
        }
    }

    pub fn gamma(exponent: f64) -> Self {
        Self {
            kind: ToneCurveKind::Gamma,
            exponent,
            scale: 1.0,
        }
    }

    pub fn exponential(k: f64) -> Self {
        Self {
            kind: ToneCurveKind::ExponentialExpansion,
            exponent: k,
            scale: 1.0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("tone scale must be > 0, got {}", self.scale)));
        }
        match self.kind {
            ToneCurveKind::Identity => Ok(()),
            ToneCurveKind::Gamma | ToneCurveKind::ExponentialExpansion
                if self.exponent.is_finite() && self.exponent > 0.0 =>
            {
                Ok(())
            }
            _ => Err(Error::Config(format!(
                "tone exponent must be > 0, got {}",
                self.exponent
            ))),
        }
    }

    /// Compression on the unit interval (input already divided by `scale`).
    pub fn forward(&self, x: f64) -> f64 {
        match self.kind {
            ToneCurveKind::Identity => x,
            ToneCurveKind::Gamma => x.powf(1.0 / self.exponent),
            ToneCurveKind::ExponentialExpansion => {
                let k = self.exponent;
                (k * x).ln_1p() / k.ln_1p()
            }
        }
    }

    /// Expansion on the unit interval.
    pub fn inverse(&self, y: f64) -> f64 {
        match self.kind {
            ToneCurveKind::Identity => y,
            ToneCurveKind::Gamma => y.powf(self.exponent),
            ToneCurveKind::ExponentialExpansion => {
                let k = self.exponent;
                (y * k.ln_1p()).exp_m1() / k
            }
        }
    }
}

/// Linear HDR raster (no range restriction beyond non-negativity).
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl HdrImage {
    pub fn new(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Precondition(format!(
                "expected {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }
}

/// Maps HDR radiance into `[0, 1]` through `curve`. Values above the
/// curve's scale saturate at 1.
pub fn normalize_hdr(raw: &HdrImage, curve: &ToneCurve) -> Result<SkyImage> {
    curve.validate()?;
    if raw.width != raw.height {
        return Err(Error::Precondition(format!(
            "sky images must be square, got {}x{}",
            raw.width, raw.height
        )));
    }
    let size = raw.width;
    let valid = Arc::new(disc_validity(size));
    let mut pixels = Vec::with_capacity(size * size);
    for (i, px) in raw.pixels.iter().enumerate() {
        for (channel, &v) in px.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    x: i % size,
                    y: i / size,
                    channel,
                    value: v,
                });
            }
            if v < 0.0 {
                return Err(Error::Precondition(format!(
                    "negative radiance {v} at pixel ({}, {})",
                    i % size,
                    i / size
                )));
            }
        }
        if !valid[i] {
            pixels.push([0.0; 3]);
            continue;
        }
        pixels.push(px.map(|v| {
            let x = (v as f64 / curve.scale).min(1.0);
            curve.forward(x).clamp(0.0, 1.0) as f32
        }));
    }
    Ok(SkyImage::from_parts_unchecked(size, pixels, valid))
}

/// Inverse of [`normalize_hdr`], scaled so that a unit pixel maps to `peak`.
pub fn expand_ldr(img: &SkyImage, curve: &ToneCurve, peak: f64) -> Result<HdrImage> {
    curve.validate()?;
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::Config(format!("peak must be > 0, got {peak}")));
    }
    let pixels = img
        .pixels
        .iter()
        .map(|px| px.map(|v| (peak * curve.inverse(v as f64)) as f32))
        .collect();
    Ok(HdrImage {
        width: img.size,
        height: img.size,
        pixels,
    })
}

pub fn srgb_to_linear(v: f32) -> f32 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f32) -> f32 {
    if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Loads an 8-bit PNG and decodes sRGB to linear `[0, 1]`.
pub fn load_png(path: &Path) -> Result<SkyImage> {
    let img = image::open(path)
        .map_err(|e| Error::file(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    if w != h {
        return Err(Error::file(path, format!("sky image must be square, got {w}x{h}")));
    }
    let lut: Vec<f32> = (0..256).map(|v| srgb_to_linear(v as f32 / 255.0)).collect();
    let pixels = img
        .pixels()
        .map(|p| [lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize]])
        .collect();
    Ok(SkyImage::from_pixels_clamped(w as usize, pixels))
}

pub fn encode_png_rgb(img: &SkyImage) -> Vec<u8> {
    img.pixels
        .iter()
        .flat_map(|p| p.map(|v| (linear_to_srgb(v.clamp(0.0, 1.0)) * 255.0).round() as u8))
        .collect()
}

/// Writes linear pixels as an sRGB-encoded 8-bit PNG.
pub fn save_png(img: &SkyImage, path: &Path) -> Result<()> {
    let n = img.size as u32;
    image::save_buffer(path, &encode_png_rgb(img), n, n, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::file(path, e.to_string()))
}

/// Writes a mask as a single-channel PNG with values 0 / 255.
pub fn save_mask_png(mask: &CloudMask, path: &Path) -> Result<()> {
    let n = mask.size as u32;
    let buf: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    image::save_buffer(path, &buf, n, n, image::ExtendedColorType::L8)
        .map_err(|e| Error::file(path, e.to_string()))
}

/// Serializes a little-endian color PFM (bottom-to-top scanlines).
pub fn write_pfm(hdr: &HdrImage, mut out: impl Write) -> Result<()> {
    write!(out, "PF\n{} {}\n-1.0\n", hdr.width, hdr.height)?;
    for y in (0..hdr.height).rev() {
        for px in &hdr.pixels[y * hdr.width..(y + 1) * hdr.width] {
            for v in px {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn save_pfm(hdr: &HdrImage, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e.to_string()))?);
    write_pfm(hdr, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Parses a color PFM in either byte order.
pub fn read_pfm(input: impl Read) -> Result<HdrImage> {
    let fmt = |m: &str| Error::Format {
        kind: "PFM",
        message: m.to_string(),
    };
    let mut r = BufReader::new(input);
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(fmt("truncated header"));
        }
        tokens.extend(line.split_whitespace().map(str::to_owned));
    }
    if tokens[0] != "PF" {
        return Err(fmt("only color PFM (PF) is supported"));
    }
    let width: usize = tokens[1].parse().map_err(|_| fmt("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| fmt("bad height"))?;
    let scale: f32 = tokens[3].parse().map_err(|_| fmt("bad scale"))?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; width * height * 12];
    r.read_exact(&mut raw).map_err(|_| fmt("truncated pixel data"))?;
    let mut pixels = vec![[0.0f32; 3]; width * height];
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let idx = k / 3;
        let (row_from_bottom, x) = (idx / width, idx % width);
        let y = height - 1 - row_from_bottom;
        pixels[y * width + x][k % 3] = v;
    }
    HdrImage::new(width, height, pixels)
}

pub fn load_pfm(path: &Path) -> Result<HdrImage> {
    read_pfm(File::open(path).map_err(|e| Error::file(path, e.to_string()))?)
}
