//! Dense flow fields between sky frames: estimation, cloud masking, the
//! three-channel direction/magnitude encoding and magnitude histograms.

mod farneback;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::sky_image::{disc_validity, CloudMask};

pub use farneback::farneback_flow;

/// Magnitude below which a vector is treated as zero by the encoding.
pub const ZERO_FLOW_EPS: f32 = 1e-6;

const FLOW_MAGIC: &[u8; 4] = b"SKFL";
const ENCODED_MAGIC: &[u8; 4] = b"SKF3";

/// Per-pixel displacement in pixels per time step, `[du, dv]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    vectors: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            vectors: vec![[0.0; 2]; width * height],
        }
    }

    /// Builds a square field from a generator; vectors outside the fisheye
    /// disc are forced to zero.
    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> [f32; 2]) -> Self {
        let valid = disc_validity(size);
        let mut vectors = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                vectors.push(if valid[y * size + x] { f(x, y) } else { [0.0; 2] });
            }
        }
        Self {
            width: size,
            height: size,
            vectors,
        }
    }

    pub fn from_vectors(width: usize, height: usize, vectors: Vec<[f32; 2]>) -> Result<Self> {
        if vectors.len() != width * height {
            return Err(Error::Precondition(format!(
                "flow needs {} vectors, got {}",
                width * height,
                vectors.len()
            )));
        }
        if let Some(i) = vectors.iter().position(|v| !(v[0].is_finite() && v[1].is_finite())) {
            return Err(Error::Precondition(format!(
                "non-finite flow vector at ({}, {})",
                i % width,
                i / width
            )));
        }
        Ok(Self {
            width,
            height,
            vectors,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn vectors(&self) -> &[[f32; 2]] {
        &self.vectors
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        self.vectors[y * self.width + x]
    }

    pub fn negated(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            vectors: self.vectors.iter().map(|v| [-v[0], -v[1]]).collect(),
        }
    }

    pub fn magnitudes(&self) -> impl Iterator<Item = f32> + '_ {
        self.vectors.iter().map(|v| v[0].hypot(v[1]))
    }
}

/// Flow as `(sin θ, cos θ, m)` per pixel, `θ = atan2(dv, du)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFlow {
    width: usize,
    height: usize,
    channels: Vec<[f32; 3]>,
}

impl EncodedFlow {
    pub fn new(width: usize, height: usize, channels: Vec<[f32; 3]>) -> Result<Self> {
        if channels.len() != width * height {
            return Err(Error::Precondition(format!(
                "encoded flow needs {} pixels, got {}",
                width * height,
                channels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            channels: vec![[0.0, 1.0, 0.0]; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn channels(&self) -> &[[f32; 3]] {
        &self.channels
    }
}

/// Farnebäck estimator settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FarnebackParams {
    pub levels: usize,
    pub pyramid_scale: f64,
    /// Side of the displacement averaging window (odd).
    pub window: usize,
    /// Half-width of the polynomial expansion neighborhood.
    pub poly_n: usize,
    pub poly_sigma: f64,
    pub iterations: usize,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        Self {
            levels: 4,
            pyramid_scale: 0.5,
            window: 15,
            poly_n: 5,
            poly_sigma: 1.1,
            iterations: 3,
        }
    }
}

impl FarnebackParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::Config(format!(
                "pyramid scale must lie in (0, 1), got {}",
                self.pyramid_scale
            )));
        }
        if self.levels == 0 || self.iterations == 0 || self.poly_n == 0 || self.window == 0 {
            return Err(Error::Config("Farneback counts must be >= 1".into()));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("window must be odd, got {}", self.window)));
        }
        if !(self.poly_sigma > 0.0) {
            return Err(Error::Config("polynomial sigma must be > 0".into()));
        }
        Ok(())
    }
}

/// Keeps vectors on cloud pixels and zeroes the rest.
pub fn mask_flow(flow: &FlowField, mask: &CloudMask) -> Result<FlowField> {
    ensure_same_dims(flow.dims(), mask.dims())?;
    let vectors = flow
        .vectors
        .iter()
        .zip(mask.bits())
        .map(|(&v, &m)| if m { v } else { [0.0; 2] })
        .collect();
    Ok(FlowField {
        width: flow.width,
        height: flow.height,
        vectors,
    })
}

pub fn encode_vector(v: [f32; 2]) -> [f32; 3] {
    let (du, dv) = (v[0] as f64, v[1] as f64);
    let m = du.hypot(dv);
    if m <= ZERO_FLOW_EPS as f64 {
        return [0.0, 1.0, m as f32];
    }
    [(dv / m) as f32, (du / m) as f32, m as f32]
}

/// Inverse of [`encode_vector`]; tolerates unnormalized angle channels and
/// negative magnitudes (clamped to zero).
pub fn decode_vector(e: [f32; 3]) -> [f32; 2] {
    let m = e[2].max(0.0) as f64;
    let (s, c) = (e[0] as f64, e[1] as f64);
    let norm = s.hypot(c);
    if m == 0.0 || norm < 1e-12 {
        return [0.0; 2];
    }
    [(m * c / norm) as f32, (m * s / norm) as f32]
}

pub fn encode_flow(flow: &FlowField) -> EncodedFlow {
    EncodedFlow {
        width: flow.width,
        height: flow.height,
        channels: flow.vectors.iter().map(|&v| encode_vector(v)).collect(),
    }
}

pub fn decode_flow(enc: &EncodedFlow) -> FlowField {
    FlowField {
        width: enc.width,
        height: enc.height,
        vectors: enc.channels.iter().map(|&e| decode_vector(e)).collect(),
    }
}

/// Normalized histogram of flow magnitudes over the pixels selected by
/// `mask`. Bin `i` covers `[edges[i], edges[i + 1])`; magnitudes beyond the
/// last edge fall into the last bin and those below the first edge into the
/// first.
pub fn flow_magnitude_histogram(flow: &FlowField, mask: &CloudMask, edges: &[f64]) -> Result<Vec<f64>> {
    ensure_same_dims(flow.dims(), mask.dims())?;
    validate_edges(edges)?;
    let bins = edges.len() - 1;
    let mut counts = vec![0u64; bins];
    let mut total = 0u64;
    for (m, &sel) in flow.magnitudes().zip(mask.bits()) {
        if !sel {
            continue;
        }
        counts[bin_index(edges, m as f64)] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(counts.into_iter().map(|c| c as f64 / total as f64).collect())
}

pub fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::Config("histogram needs at least two bin edges".into()));
    }
    if edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("bin edges must be strictly increasing".into()));
    }
    if !(edges[0] < 1.0) {
        return Err(Error::Config("first bin edge must lie below 1 px".into()));
    }
    Ok(())
}

fn bin_index(edges: &[f64], m: f64) -> usize {
    let bins = edges.len() - 1;
    // number of interior edges <= m
    let k = edges[1..bins].partition_point(|&e| e <= m);
    k.min(bins - 1)
}

fn write_header(out: &mut impl Write, magic: &[u8; 4], w: usize, h: usize) -> Result<()> {
    out.write_all(magic)?;
    out.write_all(&(w as u32).to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    Ok(())
}

fn read_header(input: &mut impl Read, magic: &[u8; 4], kind: &'static str) -> Result<(usize, usize)> {
    let mut head = [0u8; 12];
    input.read_exact(&mut head).map_err(|_| Error::Format {
        kind,
        message: "truncated header".into(),
    })?;
    if &head[..4] != magic {
        return Err(Error::Format {
            kind,
            message: format!("bad magic {:?}", String::from_utf8_lossy(&head[..4])),
        });
    }
    let w = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    Ok((w, h))
}

fn read_floats(input: &mut impl Read, count: usize, kind: &'static str) -> Result<Vec<f32>> {
    let mut raw = vec![0u8; count * 4];
    input.read_exact(&mut raw).map_err(|_| Error::Format {
        kind,
        message: "truncated payload".into(),
    })?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// `SKFL` container: magic, u32 width, u32 height, row-major f32 `(du, dv)`.
pub fn write_flow(flow: &FlowField, mut out: impl Write) -> Result<()> {
    write_header(&mut out, FLOW_MAGIC, flow.width, flow.height)?;
    for v in &flow.vectors {
        out.write_all(&v[0].to_le_bytes())?;
        out.write_all(&v[1].to_le_bytes())?;
    }
    Ok(())
}

pub fn read_flow(mut input: impl Read) -> Result<FlowField> {
    let (w, h) = read_header(&mut input, FLOW_MAGIC, "SKFL")?;
    let data = read_floats(&mut input, w * h * 2, "SKFL")?;
    FlowField::from_vectors(w, h, data.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

/// `SKF3` container: same header as `SKFL`, three f32 channels per pixel.
pub fn write_encoded_flow(enc: &EncodedFlow, mut out: impl Write) -> Result<()> {
    write_header(&mut out, ENCODED_MAGIC, enc.width, enc.height)?;
    for c in &enc.channels {
        for v in c {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_encoded_flow(mut input: impl Read) -> Result<EncodedFlow> {
    let (w, h) = read_header(&mut input, ENCODED_MAGIC, "SKF3")?;
    let data = read_floats(&mut input, w * h * 3, "SKF3")?;
    EncodedFlow::new(w, h, data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

pub fn save_flow(flow: &FlowField, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e.to_string()))?);
    write_flow(flow, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_flow(path: &Path) -> Result<FlowField> {
    read_flow(BufReader::new(File::open(path).map_err(|e| Error::file(path, e.to_string()))?))
}

pub fn save_encoded_flow(enc: &EncodedFlow, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e.to_string()))?);
    write_encoded_flow(enc, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_encoded_flow(path: &Path) -> Result<EncodedFlow> {
    read_encoded_flow(BufReader::new(File::open(path).map_err(|e| Error::file(path, e.to_string()))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        assert_eq!(encode_vector([0.0, 0.0]), [0.0, 1.0, 0.0]);
        assert_eq!(encode_vector([3.0, 0.0]), [0.0, 1.0, 3.0]);
        assert_eq!(encode_vector([0.0, -2.0]), [-1.0, 0.0, 2.0]);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_vector([0.0, 1.0, 0.0]), [0.0, 0.0]);
        assert_eq!(decode_vector([0.0, 1.0, 3.0]), [3.0, 0.0]);
        // unnormalized network output
        let v = decode_vector([0.0, 0.5, 2.0]);
        assert!((v[0] - 2.0).abs() < 1e-6 && v[1] == 0.0);
        assert_eq!(decode_vector([0.3, 0.3, -1.0]), [0.0, 0.0]);
    }

    #[test]
    fn mask_examples() {
        let n = 16;
        let flow = FlowField::from_fn(n, |_, _| [1.0, 1.0]);
        let ones = CloudMask::filled(n, true);
        assert_eq!(mask_flow(&flow, &ones).unwrap(), flow);
        let zeros = CloudMask::filled(n, false);
        assert!(mask_flow(&flow, &zeros).unwrap().vectors().iter().all(|v| *v == [0.0; 2]));

        let checker = CloudMask::new(n, (0..n * n).map(|i| (i % n + i / n) % 2 == 0).collect()).unwrap();
        let masked = mask_flow(&flow, &checker).unwrap();
        for (i, v) in masked.vectors().iter().enumerate() {
            let expect = if checker.bits()[i] { [1.0, 1.0] } else { [0.0, 0.0] };
            assert_eq!(*v, expect);
        }
        assert!(mask_flow(&flow, &CloudMask::filled(8, true)).is_err());
    }

    #[test]
    fn histogram_examples() {
        let n = 16;
        let mask = CloudMask::filled(n, true);
        let edges = [0.0, 1.0, 2.5, 5.0];
        let constant = FlowField::from_fn(n, |_, _| [2.0, 0.0]);
        assert_eq!(flow_magnitude_histogram(&constant, &mask, &edges).unwrap(), vec![0.0, 1.0, 0.0]);
        let zero = FlowField::zeros(n, n);
        assert_eq!(flow_magnitude_histogram(&zero, &mask, &edges).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            flow_magnitude_histogram(&zero, &CloudMask::filled(n, false), &edges),
            Err(Error::EmptyMask)
        ));
        assert!(flow_magnitude_histogram(&zero, &mask, &[2.0, 3.0]).is_err());
        assert!(flow_magnitude_histogram(&zero, &mask, &[0.0, 0.0, 3.0]).is_err());
    }

    #[test]
    fn histogram_matches_direct_count() {
        let n = 24;
        let flow = FlowField::from_fn(n, |x, y| [((x * 7 + y * 3) % 11) as f32 * 0.37, (y % 5) as f32 * 0.21]);
        let mask = CloudMask::new(n, (0..n * n).map(|i| i % 3 != 0).collect()).unwrap();
        let edges = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];
        let hist = flow_magnitude_histogram(&flow, &mask, &edges).unwrap();

        let mut counts = [0usize; 5];
        let mut total = 0;
        for i in 0..n * n {
            if !mask.bits()[i] {
                continue;
            }
            let v = flow.vectors()[i];
            let m = (v[0] as f64).hypot(v[1] as f64) as f32 as f64;
            let mut b = 4;
            for k in 0..5 {
                if m >= edges[k] && m < edges[k + 1] {
                    b = k;
                }
            }
            counts[b] += 1;
            total += 1;
        }
        for k in 0..5 {
            assert!((hist[k] - counts[k] as f64 / total as f64).abs() < 1e-12);
        }
        assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn file_formats() {
        let flow = FlowField::from_fn(8, |x, y| [x as f32 - 3.5, y as f32 * 0.25]);
        let mut buf = Vec::new();
        write_flow(&flow, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"SKFL");
        assert_eq!(&buf[4..8], &8u32.to_le_bytes());
        assert_eq!(buf.len(), 12 + 8 * 8 * 8);
        assert_eq!(read_flow(&buf[..]).unwrap(), flow);

        let enc = encode_flow(&flow);
        let mut buf3 = Vec::new();
        write_encoded_flow(&enc, &mut buf3).unwrap();
        assert_eq!(&buf3[..4], b"SKF3");
        assert_eq!(buf3.len(), 12 + 8 * 8 * 12);
        assert_eq!(read_encoded_flow(&buf3[..]).unwrap(), enc);
        assert!(read_flow(&buf3[..]).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(FarnebackParams::default().validate().is_ok());
        let even = FarnebackParams {
            window: 14,
            ..Default::default()
        };
        assert!(even.validate().is_err());
        let bad_scale = FarnebackParams {
            pyramid_scale: 1.0,
            ..Default::default()
        };
        assert!(bad_scale.validate().is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(du in -50.0f32..50.0, dv in -50.0f32..50.0) {
            let e = encode_vector([du, dv]);
            prop_assert!(e[2] >= 0.0);
            if e[2] > ZERO_FLOW_EPS {
                prop_assert!((e[0] * e[0] + e[1] * e[1] - 1.0).abs() < 1e-4);
            }
            let d = decode_vector(e);
            prop_assert!((d[0] - du).abs() < 1e-5 && (d[1] - dv).abs() < 1e-5);
        }

        #[test]
        fn masked_flow_zero_exactly_off_mask(seed in 0u64..1000) {
            let n = 12;
            let flow = FlowField::from_fn(n, |x, y| [1.0 + x as f32, 1.0 + (y as f32 + seed as f32) % 3.0]);
            let mask = CloudMask::new(n, (0..n * n).map(|i| (i as u64 * 2654435761 + seed) % 7 < 3).collect()).unwrap();
            let m = mask_flow(&flow, &mask).unwrap();
            for i in 0..n * n {
                let zero = m.vectors()[i] == [0.0, 0.0];
                let on = mask.bits()[i];
                prop_assert_eq!(zero, !on || flow.vectors()[i] == [0.0, 0.0]);
            }
        }
    }
}
