use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    build_unet, cloudnet_input, flow_tensor, image_tensor, loss_and_grad, LossReport, Mode, Role, Tensor, TrainConfig,
    UNetConfig, UNetModel,
};
use crate::error::{ensure_same_dims, Error, Result};
use crate::optical_flow::EncodedFlow;
use crate::sky_image::{disc_validity, SkyImage};

const BETA1: f64 = 0.5;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &UNetModel, lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            m: model.zero_grads(),
            v: model.zero_grads(),
        }
    }

    pub fn step(&mut self, model: &mut UNetModel, grads: &[Vec<f32>]) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        let lr = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (ADAM_EPS * c2.sqrt()) as f32;
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        for (((p, g), m), v) in model.params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.value.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// `[1, C_in, N, N]`
    pub input: Tensor<f32>,
    /// `[1, 3, N, N]`
    pub target: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: UNetModel,
    /// Mean training loss per epoch.
    pub history: Vec<LossReport>,
}

fn stack(items: impl Iterator<Item = Tensor<f32>>) -> Tensor<f32> {
    let items: Vec<_> = items.collect();
    let [_, c, h, w] = items[0].shape;
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for t in &items {
        data.extend_from_slice(&t.data);
    }
    Tensor::from_vec([items.len(), c, h, w], data)
}

/// Trains in place; returns one mean loss report per epoch. Loss is taken
/// over the fisheye disc only.
pub fn train_unet(model: &mut UNetModel, samples: &[TrainSample], cfg: &TrainConfig) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let res = model.config.resolution;
    for s in samples {
        let [_, c, h, w] = s.input.shape;
        if c != model.config.in_channels || s.target.channels() != 3 {
            return Err(Error::Precondition(format!(
                "sample has {c} input and {} target channels, model expects {} and 3",
                s.target.channels(),
                model.config.in_channels
            )));
        }
        ensure_same_dims((res, res), (w, h))?;
        ensure_same_dims((res, res), (s.target.width(), s.target.height()))?;
    }
    let valid = disc_validity(res);
    let mut adam = Adam::new(model, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_0bd3);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossReport::default();
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let input = stack(batch.iter().map(|&i| samples[i].input.clone()));
            let target = stack(batch.iter().map(|&i| samples[i].target.clone()));
            let tape = model.forward(&input, Mode::Train);
            let (report, d_out) = loss_and_grad(&tape.output, &target, &valid, cfg.cosine_weight);
            if !report.is_finite() {
                return Err(Error::NumericFailure { step, seed: cfg.seed });
            }
            let grads = model.backward(&tape, &d_out);
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NumericFailure { step, seed: cfg.seed });
            }
            adam.step(model, &grads);
            let k = batch.len() as f64;
            acc.mse += report.mse * k;
            acc.cosine += report.cosine * k;
            acc.total += report.total * k;
            seen += batch.len();
            step += 1;
        }
        let n = seen as f64;
        history.push(LossReport {
            mse: acc.mse / n,
            cosine: acc.cosine / n,
            total: acc.total / n,
        });
    }
    Ok(history)
}

pub fn train_flownet(pairs: &[(SkyImage, EncodedFlow)], unet: &UNetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let samples = pairs
        .iter()
        .map(|(img, flow)| {
            ensure_same_dims(img.dims(), flow.dims())?;
            Ok(TrainSample {
                input: image_tensor(img),
                target: flow_tensor(flow),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = build_unet(unet.clone(), Role::FlowNet, cfg.seed)?;
    let history = train_unet(&mut model, &samples, cfg)?;
    Ok(TrainOutcome { model, history })
}

pub fn train_cloudnet(
    triples: &[(SkyImage, EncodedFlow, SkyImage)],
    unet: &UNetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let samples = triples
        .iter()
        .map(|(img, flow, next)| {
            ensure_same_dims(img.dims(), next.dims())?;
            Ok(TrainSample {
                input: cloudnet_input(img, flow)?,
                target: image_tensor(next),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = build_unet(unet.clone(), Role::CloudNet, cfg.seed)?;
    let history = train_unet(&mut model, &samples, cfg)?;
    Ok(TrainOutcome { model, history })
}
