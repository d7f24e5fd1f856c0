//! Central finite-difference check of the reverse pass, run in f64 with
//! batch normalization on running statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rand_distr::{Distribution, Normal};

use super::layers::{conv2d_forward, ConvGeom};
use super::{build_unet, loss_and_grad, Mode, Role, Tensor, UNet, UNetConfig, UNetModel};
use crate::error::Result;
use crate::sky_image::disc_validity;

/// Gradients smaller than this are compared absolutely.
const ABS_FLOOR: f64 = 1e-9;

pub struct GradientProbe {
    pub net: UNet<f64>,
    pub input: Tensor<f64>,
    pub target: Tensor<f64>,
    pub lambda: f64,
    valid: Vec<bool>,
}

impl GradientProbe {
    /// `target` defaults to a seeded pseudo-random image in `[0.1, 0.9]`.
    pub fn new(model: &UNetModel, input: &Tensor<f32>, target: Option<&Tensor<f32>>, lambda: f64, seed: u64) -> Self {
        let [n, _, h, w] = input.shape;
        let target = match target {
            Some(t) => t.cast(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Tensor::from_vec([n, 3, h, w], (0..n * 3 * h * w).map(|_| rng.random_range(0.1..0.9)).collect())
            }
        };
        Self {
            net: model.cast(),
            input: input.cast(),
            target,
            lambda,
            valid: disc_validity(w),
        }
    }

    pub fn loss(&self) -> f64 {
        let out = self.net.predict(&self.input);
        loss_and_grad(&out, &self.target, &self.valid, self.lambda).0.total
    }

    pub fn analytic(&self) -> Vec<Vec<f64>> {
        let tape = self.net.forward_eval(&self.input);
        let (_, d) = loss_and_grad(&tape.output, &self.target, &self.valid, self.lambda);
        self.net.backward(&tape, &d)
    }

    /// Central difference of the loss w.r.t. one scalar parameter.
    pub fn numeric(&mut self, param: usize, index: usize, h: f64) -> f64 {
        let orig = self.net.params[param].value[index];
        self.net.params[param].value[index] = orig + h;
        let up = self.loss();
        self.net.params[param].value[index] = orig - h;
        let down = self.loss();
        self.net.params[param].value[index] = orig;
        (up - down) / (2.0 * h)
    }
}

/// Distance of every hidden channel from its rectifier kink, in units of
/// the channel's spread.
const KINK_MARGIN: std::ops::Range<f64> = 2.5..4.0;
const OUTPUT_GAIN: f64 = 0.25;

fn margin(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.random_range(KINK_MARGIN);
    if rng.random::<bool>() {
        m
    } else {
        -m
    }
}

/// A small network on which central differences with a 1e-3 step are
/// well conditioned. Weights use unit-gain initialization; each hidden
/// channel is offset so that (almost) all of its activations sit on one
/// side of the rectifier, leaving both slopes exercised across channels but
/// few kinks within reach of a parameter step. Batch-norm running
/// statistics are calibrated on `input`.
pub fn probe_model(config: UNetConfig, role: Role, input: &Tensor<f32>, seed: u64) -> Result<UNetModel> {
    let depth = config.depth();
    let mut model = build_unet(config, role, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let last_conv = format!("dec{depth}.conv.weight");
    for p in &mut model.params {
        let name = p.name.as_str();
        if name.ends_with("conv.weight") {
            let fan_in: usize = p.shape[1..].iter().product();
            let gain = if name == last_conv { OUTPUT_GAIN } else { 1.0 };
            let normal = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("valid std");
            p.value.iter_mut().for_each(|v| *v = normal.sample(&mut rng) as f32);
        } else if name.ends_with("bn.weight") {
            p.value.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else {
            p.value.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    // β sits `margin` standard deviations (γ) away from zero
    for k in 0..model.params.len() {
        if model.params[k].name.ends_with("bn.bias") {
            let gamma = model.params[k - 1].value.clone();
            for (b, g) in model.params[k].value.iter_mut().zip(gamma) {
                *b = (margin(&mut rng) * g as f64) as f32;
            }
        }
    }
    // the first encoder stage has no normalization: offset its bias by
    // the measured per-channel statistics instead
    let geom = ConvGeom {
        in_c: model.config.in_channels,
        out_c: model.config.widths[0],
        kernel: model.config.encoder_kernel,
        stride: model.config.stride,
        pad: 1,
    };
    let zero = vec![0.0f32; geom.out_c];
    let z = conv2d_forward(input, &model.params[0].value, &zero, &geom);
    let plane = z.plane() * z.batch();
    for c in 0..geom.out_c {
        let vals: Vec<f64> = (0..z.batch())
            .flat_map(|b| z.item(b)[c * z.plane()..(c + 1) * z.plane()].to_vec())
            .map(f64::from)
            .collect();
        let mean = vals.iter().sum::<f64>() / plane as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64).sqrt();
        model.params[1].value[c] = (-mean + margin(&mut rng) * std.max(1e-3)) as f32;
    }
    model.forward(input, Mode::Calibrate);
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, element, analytic, numeric)`
    pub samples: Vec<(usize, usize, f64, f64)>,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR)
}

/// Compares analytic and finite-difference gradients on `count` parameters
/// drawn round-robin over the weight tensors.
pub fn gradient_check(model: &UNetModel, probe: &Tensor<f32>, count: usize, h: f64, seed: u64) -> GradCheckReport {
    let mut gp = GradientProbe::new(model, probe, None, 1.0, seed);
    let analytic = gp.analytic();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let n_tensors = gp.net.params.len();
    let mut samples = Vec::with_capacity(count);
    let mut max_rel_error = 0.0f64;
    for k in 0..count {
        let p = k % n_tensors;
        let i = rng.random_range(0..gp.net.params[p].value.len());
        let num = gp.numeric(p, i, h);
        let a = analytic[p][i];
        max_rel_error = max_rel_error.max(relative_error(a, num));
        samples.push((p, i, a, num));
    }
    GradCheckReport { max_rel_error, samples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{build_unet, Role, UNetConfig};

    #[test]
    fn zero_weights_zero_input() {
        let mut model = build_unet(UNetConfig::cloudnet(16).with_widths(&[4, 4, 4, 4]), Role::CloudNet, 0).unwrap();
        for p in &mut model.params {
            if p.name.ends_with("conv.weight") {
                p.value.fill(0.0);
            }
        }
        let probe = Tensor::zeros([1, 6, 16, 16]);
        let rep = gradient_check(&model, &probe, 40, 1e-3, 0);
        let last_bias = model.params.len() - 1;
        for &(p, _, a, n) in &rep.samples {
            if p != last_bias {
                assert_eq!(a, 0.0, "tensor {}", model.params[p].name);
                assert!(n.abs() < 1e-12);
            }
        }
        assert!(rep.max_rel_error < 1e-4, "{:?}", rep.samples);
    }

    fn probe_input() -> Tensor<f32> {
        Tensor::from_vec([1, 6, 32, 32], (0..6 * 1024).map(|i| (i as f32 * 0.731).sin() * 0.5 + 0.5).collect())
    }

    #[test]
    fn seeded_probe_matches_differences() {
        let input = probe_input();
        let cfg = UNetConfig::cloudnet(32).with_widths(&[8, 16, 16, 16]);
        let model = probe_model(cfg, Role::CloudNet, &input, 0).unwrap();
        let rep = gradient_check(&model, &input, 120, 1e-3, 0);
        assert_eq!(rep.samples.len(), 120);
        assert!(rep.max_rel_error < 1e-2, "{}", rep.max_rel_error);
    }

    #[test]
    fn truncation_error_is_second_order() {
        let input = probe_input();
        let cfg = UNetConfig::cloudnet(32).with_widths(&[8, 16, 16, 16]);
        let model = probe_model(cfg, Role::CloudNet, &input, 1).unwrap();
        let mut gp = GradientProbe::new(&model, &input, None, 1.0, 1);
        let a = gp.analytic();
        let last = gp.net.params.len() - 1;
        let e1 = (gp.numeric(last, 0, 0.02) - a[last][0]).abs();
        let e2 = (gp.numeric(last, 0, 0.04) - a[last][0]).abs();
        let ratio = e2 / e1;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }
}
