//! U-Net graph: strided 4×4 encoder, 3×3 conv + bilinear ×2 decoder with
//! skip connections, explicit forward tape and reverse pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, leaky_relu, leaky_relu_backward, relu,
    relu_backward, shifted_softplus, sigmoid, upsample2_backward, upsample2_forward, BnCache, BnParams, ConvGeom,
};
use super::tensor::{Real, Tensor};
use super::{Role, UNetConfig};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BnSlots {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    geom: ConvGeom,
    weight: usize,
    bias: usize,
    bn: Option<BnSlots>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are updated.
    Train,
    /// Running statistics only; the model is not modified.
    Eval,
    /// Batch statistics, which replace the running estimates.
    Calibrate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T> {
    pub config: UNetConfig,
    pub role: Role,
    /// Trainable tensors.
    pub params: Vec<Param<T>>,
    /// Batch-norm running statistics.
    pub buffers: Vec<Param<T>>,
    encoder: Vec<Stage>,
    decoder: Vec<Stage>,
}

pub struct Tape<T> {
    enc_in: Vec<Tensor<T>>,
    enc_act: Vec<Tensor<T>>,
    enc_bn: Vec<Option<BnCache<T>>>,
    enc_out_shapes: Vec<[usize; 4]>,
    dec_in: Vec<Tensor<T>>,
    dec_act: Vec<Tensor<T>>,
    dec_conv_shape: Vec<[usize; 4]>,
    dec_bn: Vec<Option<BnCache<T>>>,
    pre_activation: Tensor<T>,
    pub output: Tensor<T>,
}

impl<T: Real> UNet<T> {
    /// Builds the graph with N(0, 0.02) convolution weights, zero biases and
    /// unit/zero batch-norm affine terms.
    pub fn new(config: UNetConfig, role: Role, seed: u64) -> Self {
        let depth = config.widths.len();
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");

        let mut add_conv = |prefix: &str, geom: ConvGeom, params: &mut Vec<Param<T>>| {
            let weight = params.len();
            params.push(Param {
                name: format!("{prefix}.conv.weight"),
                shape: vec![geom.out_c, geom.in_c, geom.kernel, geom.kernel],
                value: (0..geom.weight_len())
                    .map(|_| T::from_f64(normal.sample(&mut rng)))
                    .collect(),
            });
            params.push(Param {
                name: format!("{prefix}.conv.bias"),
                shape: vec![geom.out_c],
                value: vec![T::zero(); geom.out_c],
            });
            (weight, weight + 1)
        };
        let add_bn = |prefix: &str, c: usize, params: &mut Vec<Param<T>>, buffers: &mut Vec<Param<T>>| {
            let gamma = params.len();
            params.push(Param {
                name: format!("{prefix}.bn.weight"),
                shape: vec![c],
                value: vec![T::one(); c],
            });
            params.push(Param {
                name: format!("{prefix}.bn.bias"),
                shape: vec![c],
                value: vec![T::zero(); c],
            });
            let mean = buffers.len();
            buffers.push(Param {
                name: format!("{prefix}.bn.running_mean"),
                shape: vec![c],
                value: vec![T::zero(); c],
            });
            buffers.push(Param {
                name: format!("{prefix}.bn.running_var"),
                shape: vec![c],
                value: vec![T::one(); c],
            });
            BnSlots {
                gamma,
                beta: gamma + 1,
                mean,
                var: mean + 1,
            }
        };

        let mut encoder = Vec::with_capacity(depth);
        let mut in_c = config.in_channels;
        for (k, &out_c) in config.widths.iter().enumerate() {
            let prefix = format!("enc{}", k + 1);
            let geom = ConvGeom {
                in_c,
                out_c,
                kernel: config.encoder_kernel,
                stride: config.stride,
                pad: 1,
            };
            let (weight, bias) = add_conv(&prefix, geom, &mut params);
            let bn = (k > 0 && k + 1 < depth).then(|| add_bn(&prefix, out_c, &mut params, &mut buffers));
            encoder.push(Stage {
                geom,
                weight,
                bias,
                bn,
            });
            in_c = out_c;
        }

        let mut decoder = Vec::with_capacity(depth);
        for j in 1..=depth {
            let prefix = format!("dec{j}");
            let in_c = if j == 1 {
                config.widths[depth - 1]
            } else {
                decoder_out_channels(&config, j - 1) + config.widths[depth - j]
            };
            let out_c = decoder_out_channels(&config, j);
            let geom = ConvGeom {
                in_c,
                out_c,
                kernel: config.decoder_kernel,
                stride: 1,
                pad: config.decoder_kernel / 2,
            };
            let (weight, bias) = add_conv(&prefix, geom, &mut params);
            let bn = (j < depth).then(|| add_bn(&prefix, out_c, &mut params, &mut buffers));
            decoder.push(Stage {
                geom,
                weight,
                bias,
                bn,
            });
        }

        Self {
            config,
            role,
            params,
            buffers,
            encoder,
            decoder,
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect()
    }

    /// Zeroes the output convolution so the untrained network emits the
    /// activation of a zero pre-activation everywhere.
    pub fn zero_output_layer(&mut self) {
        let last = self.decoder.last().expect("non-empty decoder").clone();
        self.params[last.weight].value.fill(T::zero());
        self.params[last.bias].value.fill(T::zero());
    }

    pub fn cast<U: Real>(&self) -> UNet<U> {
        let conv = |ps: &[Param<T>]| {
            ps.iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect()
        };
        UNet {
            config: self.config.clone(),
            role: self.role,
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    fn bn_forward(
        &self,
        buffers: &mut [Param<T>],
        x: &Tensor<T>,
        slots: BnSlots,
        mode: Mode,
    ) -> (Tensor<T>, BnCache<T>) {
        let (gamma, beta) = (&self.params[slots.gamma].value, &self.params[slots.beta].value);
        let (lo, hi) = buffers.split_at_mut(slots.var);
        batchnorm_forward(
            x,
            BnParams {
                gamma,
                beta,
                running_mean: &mut lo[slots.mean].value,
                running_var: &mut hi[0].value,
                momentum: if mode == Mode::Calibrate { 1.0 } else { BN_MOMENTUM },
                eps: BN_EPS,
            },
            mode != Mode::Eval,
        )
    }

    /// Runs the network, recording everything the reverse pass needs. In
    /// [`Mode::Train`] the batch-norm running statistics are updated.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Tape<T> {
        let mut buffers = std::mem::take(&mut self.buffers);
        let tape = self.run(&mut buffers, input, mode);
        self.buffers = buffers;
        tape
    }

    /// Inference-statistics forward pass that leaves the model untouched.
    pub fn forward_eval(&self, input: &Tensor<T>) -> Tape<T> {
        let mut buffers = self.buffers.clone();
        self.run(&mut buffers, input, Mode::Eval)
    }

    pub fn predict(&self, input: &Tensor<T>) -> Tensor<T> {
        self.forward_eval(input).output
    }

    fn run(&self, buffers: &mut [Param<T>], input: &Tensor<T>, mode: Mode) -> Tape<T> {
        let depth = self.depth();
        let slope = self.config.leaky_slope;
        let mut tape = Tape {
            enc_in: Vec::with_capacity(depth),
            enc_act: Vec::with_capacity(depth),
            enc_bn: Vec::with_capacity(depth),
            enc_out_shapes: Vec::with_capacity(depth),
            dec_in: Vec::with_capacity(depth),
            dec_act: Vec::with_capacity(depth),
            dec_conv_shape: Vec::with_capacity(depth),
            dec_bn: Vec::with_capacity(depth),
            pre_activation: Tensor::zeros([0, 0, 0, 0]),
            output: Tensor::zeros([0, 0, 0, 0]),
        };

        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(depth);
        let mut x = input.clone();
        for k in 0..depth {
            let stage = self.encoder[k].clone();
            let act = if k == 0 { x.clone() } else { leaky_relu(&x, slope) };
            let z = conv2d_forward(&act, &self.params[stage.weight].value, &self.params[stage.bias].value, &stage.geom);
            let (e, cache) = match stage.bn {
                Some(slots) => {
                    let (e, c) = self.bn_forward(buffers, &z, slots, mode);
                    (e, Some(c))
                }
                None => (z, None),
            };
            tape.enc_in.push(x);
            tape.enc_act.push(act);
            tape.enc_bn.push(cache);
            tape.enc_out_shapes.push(e.shape);
            skips.push(e.clone());
            x = e;
        }

        let mut y = x;
        for j in 1..=depth {
            let stage = self.decoder[j - 1].clone();
            let inp = if j == 1 { y } else { y.concat_channels(&skips[depth - j]) };
            let act = relu(&inp);
            let z = conv2d_forward(&act, &self.params[stage.weight].value, &self.params[stage.bias].value, &stage.geom);
            tape.dec_conv_shape.push(z.shape);
            let u = upsample2_forward(&z);
            let (out, cache) = match stage.bn {
                Some(slots) => {
                    let (o, c) = self.bn_forward(buffers, &u, slots, mode);
                    (o, Some(c))
                }
                None => (u, None),
            };
            tape.dec_in.push(inp);
            tape.dec_act.push(act);
            tape.dec_bn.push(cache);
            y = out;
        }

        tape.output = self.output_activation(&y);
        tape.pre_activation = y;
        tape
    }

    fn output_activation(&self, pre: &Tensor<T>) -> Tensor<T> {
        let mut out = pre.clone();
        let plane = pre.plane();
        for b in 0..pre.batch() {
            let item = out.item_mut(b);
            for (c, chunk) in item.chunks_mut(plane).enumerate() {
                for v in chunk {
                    *v = match (self.role, c) {
                        (Role::CloudNet, _) => sigmoid(*v),
                        (Role::FlowNet, 0 | 1) => v.tanh(),
                        (Role::FlowNet, _) => shifted_softplus(*v),
                    };
                }
            }
        }
        out
    }

    fn output_activation_backward(&self, tape: &Tape<T>, d_out: &Tensor<T>) -> Tensor<T> {
        let mut d = d_out.clone();
        let plane = d.plane();
        for b in 0..d.batch() {
            let pre = tape.pre_activation.item(b);
            let out = tape.output.item(b);
            let item = d.item_mut(b);
            for (i, g) in item.iter_mut().enumerate() {
                let c = i / plane;
                let deriv = match (self.role, c) {
                    (Role::CloudNet, _) => out[i] * (T::one() - out[i]),
                    (Role::FlowNet, 0 | 1) => T::one() - out[i] * out[i],
                    (Role::FlowNet, _) => sigmoid(pre[i]),
                };
                *g *= deriv;
            }
        }
        d
    }

    /// Reverse pass from the gradient of the loss w.r.t. the network output.
    /// Returns per-parameter gradients aligned with [`UNet::params`].
    pub fn backward(&self, tape: &Tape<T>, d_output: &Tensor<T>) -> Vec<Vec<T>> {
        let depth = self.depth();
        let slope = self.config.leaky_slope;
        let mut grads = self.zero_grads();
        let mut d_skip: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();

        let mut dy = self.output_activation_backward(tape, d_output);
        for j in (1..=depth).rev() {
            let stage = &self.decoder[j - 1];
            if let (Some(slots), Some(cache)) = (stage.bn, &tape.dec_bn[j - 1]) {
                let (dg, db) = two_mut(&mut grads, slots.gamma, slots.beta);
                dy = batchnorm_backward(&dy, cache, &self.params[slots.gamma].value, dg, db);
            }
            let dz = upsample2_backward(&dy, tape.dec_conv_shape[j - 1]);
            let (dw, db) = two_mut(&mut grads, stage.weight, stage.bias);
            let d_act = conv2d_backward(&tape.dec_act[j - 1], &self.params[stage.weight].value, &dz, &stage.geom, dw, db);
            let d_in = relu_backward(&tape.dec_in[j - 1], &d_act);
            if j == 1 {
                accumulate(&mut d_skip[depth - 1], d_in);
            } else {
                let prev_c = tape.dec_in[j - 1].channels() - tape.enc_out_shapes[depth - j][1];
                let (d_prev, d_enc) = d_in.split_channels(prev_c);
                accumulate(&mut d_skip[depth - j], d_enc);
                dy = d_prev;
            }
        }

        let mut carry: Option<Tensor<T>> = None;
        for k in (0..depth).rev() {
            let stage = &self.encoder[k];
            let mut de = d_skip[k].take().unwrap_or_else(|| Tensor::zeros(tape.enc_out_shapes[k]));
            if let Some(c) = carry.take() {
                add_into(&mut de, &c);
            }
            if let (Some(slots), Some(cache)) = (stage.bn, &tape.enc_bn[k]) {
                let (dg, db) = two_mut(&mut grads, slots.gamma, slots.beta);
                de = batchnorm_backward(&de, cache, &self.params[slots.gamma].value, dg, db);
            }
            let (dw, db) = two_mut(&mut grads, stage.weight, stage.bias);
            let d_act = conv2d_backward(&tape.enc_act[k], &self.params[stage.weight].value, &de, &stage.geom, dw, db);
            if k > 0 {
                carry = Some(leaky_relu_backward(&tape.enc_in[k], &d_act, slope));
            }
        }
        grads
    }
}

/// Output channels of decoder stage `j` (1-based): the width of the encoder
/// level it is concatenated with next, or the network output for the last.
fn decoder_out_channels(config: &UNetConfig, j: usize) -> usize {
    let depth = config.widths.len();
    if j == depth {
        config.out_channels
    } else {
        config.widths[depth - j - 1]
    }
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(acc) => add_into(acc, &t),
        None => *slot = Some(t),
    }
}

fn add_into<T: Real>(acc: &mut Tensor<T>, t: &Tensor<T>) {
    for (a, &b) in acc.data.iter_mut().zip(&t.data) {
        *a += b;
    }
}
