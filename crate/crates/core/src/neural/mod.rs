//! FlowNet (image → encoded flow) and CloudNet (image ⊕ flow → next image)
//! U-Nets with their loss, training loop, inference and checkpoints.

mod checkpoint;
mod gradcheck;
mod layers;
pub mod tensor;
mod train;
mod unet;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::optical_flow::EncodedFlow;
use crate::sky_image::{disc_validity, Rgb, SkyImage};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, probe_model, relative_error, GradCheckReport, GradientProbe};
pub use tensor::{Real, Tensor};
pub use train::{train_cloudnet, train_flownet, train_unet, Adam, TrainOutcome, TrainSample};
pub use unet::{Mode, Param, Tape, UNet, BN_EPS, BN_MOMENTUM};

/// Encoder widths of the full-size network.
pub const DEFAULT_WIDTHS: [usize; 8] = [64, 128, 256, 512, 512, 512, 512, 512];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "flownet")]
    FlowNet,
    #[serde(rename = "cloudnet")]
    CloudNet,
}

impl Role {
    pub fn input_channels(self) -> usize {
        match self {
            Role::FlowNet => 3,
            Role::CloudNet => 6,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Role::FlowNet => "flownet",
            Role::CloudNet => "cloudnet",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flownet" => Ok(Role::FlowNet),
            "cloudnet" => Ok(Role::CloudNet),
            other => Err(Error::Config(format!("unknown network role `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// One entry per encoder stage; the decoder mirrors it.
    pub widths: Vec<usize>,
    pub encoder_kernel: usize,
    pub decoder_kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    pub resolution: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            out_channels: 3,
            widths: DEFAULT_WIDTHS.to_vec(),
            encoder_kernel: 4,
            decoder_kernel: 3,
            stride: 2,
            leaky_slope: 0.2,
            resolution: 256,
        }
    }
}

impl UNetConfig {
    pub fn for_role(role: Role, resolution: usize) -> Self {
        Self {
            in_channels: role.input_channels(),
            resolution,
            ..Self::default()
        }
    }

    pub fn flownet(resolution: usize) -> Self {
        Self::for_role(Role::FlowNet, resolution)
    }

    pub fn cloudnet(resolution: usize) -> Self {
        Self::for_role(Role::CloudNet, resolution)
    }

    pub fn with_widths(mut self, widths: &[usize]) -> Self {
        self.widths = widths.to_vec();
        self
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("encoder widths must be non-empty and positive, got {:?}", self.widths));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.encoder_kernel != 4 || self.stride != 2 {
            return bad(format!(
                "encoder supports kernel 4 with stride 2, got kernel {} stride {}",
                self.encoder_kernel, self.stride
            ));
        }
        if self.decoder_kernel % 2 == 0 {
            return bad(format!("decoder kernel must be odd, got {}", self.decoder_kernel));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!("leaky slope must be finite and non-negative, got {}", self.leaky_slope));
        }
        let depth = self.depth();
        let factor = 1usize.checked_shl(depth as u32).filter(|_| depth < usize::BITS as usize);
        match factor {
            Some(f) if self.resolution >= f && self.resolution % f == 0 => Ok(()),
            _ => bad(format!(
                "resolution {} is not divisible by 2^{depth} required by a {depth}-stage encoder",
                self.resolution
            )),
        }
    }
}

/// Trained or freshly initialized single-precision network.
pub type UNetModel = UNet<f32>;

pub fn build_unet(config: UNetConfig, role: Role, seed: u64) -> Result<UNetModel> {
    config.validate()?;
    if config.in_channels != role.input_channels() || config.out_channels != 3 {
        return Err(Error::Config(format!(
            "{} expects {} input and 3 output channels, got {} and {}",
            role.label(),
            role.input_channels(),
            config.in_channels,
            config.out_channels
        )));
    }
    Ok(UNet::new(config, role, seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight λ of the cosine term.
    pub cosine_weight: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 1,
            learning_rate: 2e-4,
            cosine_weight: 1.0,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.cosine_weight.is_finite() && self.cosine_weight >= 0.0) {
            return Err(Error::Config(format!("cosine weight must be non-negative, got {}", self.cosine_weight)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub cosine: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.mse.is_finite() && self.cosine.is_finite() && self.total.is_finite()
    }
}

/// Below this norm an RGB vector has no direction and is left out of the
/// cosine term.
const COSINE_EPS: f64 = 1e-8;

/// MSE plus λ·(1 − cosine similarity) over the `valid` pixels of equally
/// sized three-channel rasters.
pub fn composite_loss(pred: &[Rgb], target: &[Rgb], valid: &[bool], lambda: f64) -> Result<LossReport> {
    if pred.len() != target.len() || pred.len() != valid.len() {
        return Err(Error::Precondition(format!(
            "loss operands differ in size: {}, {} and mask {}",
            pred.len(),
            target.len(),
            valid.len()
        )));
    }
    let to_tensor = |px: &[Rgb]| {
        let n = px.len();
        let mut data = vec![0.0f64; 3 * n];
        for (i, p) in px.iter().enumerate() {
            for c in 0..3 {
                data[c * n + i] = p[c] as f64;
            }
        }
        Tensor::from_vec([1, 3, 1, n], data)
    };
    let (report, _) = loss_and_grad(&to_tensor(pred), &to_tensor(target), valid, lambda);
    Ok(report)
}

/// Batch-averaged composite loss and its gradient w.r.t. `pred`.
pub(crate) fn loss_and_grad<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    valid: &[bool],
    lambda: f64,
) -> (LossReport, Tensor<T>) {
    assert_eq!(pred.shape, target.shape, "loss operand shapes");
    assert_eq!(pred.channels(), 3, "loss expects three channels");
    let plane = pred.plane();
    assert_eq!(valid.len(), plane, "loss mask size");
    let n_valid = valid.iter().filter(|&&v| v).count().max(1) as f64;
    let batch = pred.batch() as f64;
    let mut grad = Tensor::zeros(pred.shape);
    let (mut mse, mut cos_term) = (0.0f64, 0.0f64);
    let mse_scale = 2.0 / (3.0 * n_valid * batch);
    let cos_scale = lambda / (n_valid * batch);

    for b in 0..pred.batch() {
        let p = pred.item(b);
        let t = target.item(b);
        let g = grad.item_mut(b);
        for (i, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
            let pv = [0, 1, 2].map(|c| p[c * plane + i].as_f64());
            let tv = [0, 1, 2].map(|c| t[c * plane + i].as_f64());
            for c in 0..3 {
                let d = pv[c] - tv[c];
                mse += d * d;
                g[c * plane + i] = T::from_f64(mse_scale * d);
            }
            let pn = (pv[0] * pv[0] + pv[1] * pv[1] + pv[2] * pv[2]).sqrt();
            let tn = (tv[0] * tv[0] + tv[1] * tv[1] + tv[2] * tv[2]).sqrt();
            if pn < COSINE_EPS || tn < COSINE_EPS {
                continue;
            }
            let dot = pv[0] * tv[0] + pv[1] * tv[1] + pv[2] * tv[2];
            let cos = dot / (pn * tn);
            // 1 − cos = ½‖p̂ − t̂‖², exact zero for parallel vectors
            cos_term += 0.5 * (0..3).map(|c| (pv[c] / pn - tv[c] / tn).powi(2)).sum::<f64>();
            for c in 0..3 {
                // ∂(1 − cos)/∂p = −(t/(|p||t|) − cos·p/|p|²)
                let d = -(tv[c] / (pn * tn) - cos * pv[c] / (pn * pn));
                g[c * plane + i] += T::from_f64(cos_scale * d);
            }
        }
    }
    let mse = mse / (3.0 * n_valid * batch);
    let cosine = cos_term / (n_valid * batch);
    (
        LossReport {
            mse,
            cosine,
            total: mse + lambda * cosine,
        },
        grad,
    )
}

fn check_resolution(model: &UNetModel, dims: (usize, usize)) -> Result<()> {
    let r = model.config.resolution;
    ensure_same_dims((r, r), dims)
}

fn check_role(model: &UNetModel, role: Role) -> Result<()> {
    if model.role != role {
        return Err(Error::Precondition(format!(
            "expected a {} model, got {}",
            role.label(),
            model.role.label()
        )));
    }
    Ok(())
}

/// Channel-planar `[1, 3, N, N]` view of an image.
pub fn image_tensor(img: &SkyImage) -> Tensor<f32> {
    planar(img.pixels(), img.width())
}

pub fn flow_tensor(flow: &EncodedFlow) -> Tensor<f32> {
    planar(flow.channels(), flow.width())
}

fn planar(px: &[[f32; 3]], size: usize) -> Tensor<f32> {
    let n = px.len();
    let mut data = vec![0.0f32; 3 * n];
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            data[c * n + i] = p[c];
        }
    }
    Tensor::from_vec([1, 3, size, size], data)
}

fn interleave(t: &Tensor<f32>, b: usize) -> Vec<[f32; 3]> {
    let plane = t.plane();
    let item = t.item(b);
    (0..plane)
        .map(|i| [item[i], item[plane + i], item[2 * plane + i]])
        .collect()
}

pub(crate) fn decode_flownet_output(t: &Tensor<f32>, b: usize) -> Result<EncodedFlow> {
    let size = t.width();
    let valid = disc_validity(size);
    let channels = interleave(t, b)
        .into_iter()
        .zip(valid.iter())
        .map(|(c, &v)| if v { [c[0], c[1], c[2].max(0.0)] } else { [0.0, 1.0, 0.0] })
        .collect();
    EncodedFlow::new(size, size, channels)
}

pub(crate) fn decode_cloudnet_output(t: &Tensor<f32>, b: usize) -> SkyImage {
    let px = interleave(t, b)
        .into_iter()
        .map(|p| p.map(|v| v.clamp(0.0, 1.0)))
        .collect();
    SkyImage::from_pixels_clamped(t.width(), px)
}

pub fn cloudnet_input(img: &SkyImage, flow: &EncodedFlow) -> Result<Tensor<f32>> {
    ensure_same_dims(img.dims(), flow.dims())?;
    Ok(image_tensor(img).concat_channels(&flow_tensor(flow)))
}

pub fn flownet_infer(model: &UNetModel, img: &SkyImage) -> Result<EncodedFlow> {
    check_role(model, Role::FlowNet)?;
    check_resolution(model, img.dims())?;
    decode_flownet_output(&model.predict(&image_tensor(img)), 0)
}

pub fn cloudnet_infer(model: &UNetModel, img: &SkyImage, flow: &EncodedFlow) -> Result<SkyImage> {
    check_role(model, Role::CloudNet)?;
    check_resolution(model, img.dims())?;
    let input = cloudnet_input(img, flow)?;
    Ok(decode_cloudnet_output(&model.predict(&input), 0))
}
