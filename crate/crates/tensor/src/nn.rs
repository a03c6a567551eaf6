//! Sequential layer stacks built from the primitive ops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::ops::{apply, Op};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One layer of a [`Sequential`] stack. Shapes exclude the batch dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    TransposedConv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Upsample2d {
        factor: usize,
    },
    Upsample1d {
        factor: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    Softplus,
    Sigmoid,
    Dropout {
        rate: f64,
    },
    /// Reinterprets each sample with the given per-sample shape.
    Reshape {
        shape: Vec<usize>,
    },
}

impl Layer {
    fn name(&self) -> &'static str {
        match self {
            Layer::Linear { .. } => "linear",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Conv1d { .. } => "conv1d",
            Layer::TransposedConv2d { .. } => "transposed_conv2d",
            Layer::Upsample2d { .. } => "upsample2d",
            Layer::Upsample1d { .. } => "upsample1d",
            Layer::LeakyRelu { .. } => "leaky_relu",
            Layer::Tanh => "tanh",
            Layer::Softplus => "softplus",
            Layer::Sigmoid => "sigmoid",
            Layer::Dropout { .. } => "dropout",
            Layer::Reshape { .. } => "reshape",
        }
    }

    /// Weight and bias shapes, with the fan-in used for initialisation.
    fn params(&self) -> Option<(Vec<usize>, Vec<usize>, usize)> {
        match *self {
            Layer::Linear { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs], inputs)),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
                in_channels * kernel * kernel,
            )),
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel],
                vec![out_channels],
                in_channels * kernel,
            )),
            Layer::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![in_channels, out_channels, kernel, kernel],
                vec![out_channels],
                out_channels * kernel * kernel,
            )),
            _ => None,
        }
    }

    fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        let bad = |detail: String| TensorError::shape(self.name(), detail);
        let extent = |i: usize, k: usize, st: usize, p: usize| -> Result<usize> {
            if st == 0 || i + 2 * p < k {
                return Err(bad(format!("kernel {k}/stride {st}/padding {p} do not fit extent {i}")));
            }
            Ok((i + 2 * p - k) / st + 1)
        };
        match self {
            Layer::Linear { inputs, outputs } => {
                if s != [*inputs] {
                    return Err(bad(format!("expects [{inputs}] per sample, got {s:?}")));
                }
                Ok(vec![*outputs])
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if s.len() != 3 || s[0] != *in_channels {
                    return Err(bad(format!("expects [{in_channels}, h, w], got {s:?}")));
                }
                Ok(vec![
                    *out_channels,
                    extent(s[1], *kernel, *stride, *padding)?,
                    extent(s[2], *kernel, *stride, *padding)?,
                ])
            }
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if s.len() != 2 || s[0] != *in_channels {
                    return Err(bad(format!("expects [{in_channels}, len], got {s:?}")));
                }
                Ok(vec![*out_channels, extent(s[1], *kernel, *stride, *padding)?])
            }
            Layer::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if s.len() != 3 || s[0] != *in_channels {
                    return Err(bad(format!("expects [{in_channels}, h, w], got {s:?}")));
                }
                let ext = |i: usize| -> Result<usize> {
                    let full = (i.max(1) - 1) * stride + kernel;
                    if i == 0 || full <= 2 * padding {
                        return Err(bad(format!("no output for extent {i}")));
                    }
                    Ok(full - 2 * padding)
                };
                Ok(vec![*out_channels, ext(s[1])?, ext(s[2])?])
            }
            Layer::Upsample2d { factor } => {
                if s.len() != 3 {
                    return Err(bad(format!("expects [c, h, w], got {s:?}")));
                }
                Ok(vec![s[0], s[1] * factor, s[2] * factor])
            }
            Layer::Upsample1d { factor } => {
                if s.len() != 2 {
                    return Err(bad(format!("expects [c, len], got {s:?}")));
                }
                Ok(vec![s[0], s[1] * factor])
            }
            Layer::Reshape { shape } => {
                if shape.iter().product::<usize>() != s.iter().product::<usize>() {
                    return Err(bad(format!("cannot view {s:?} as {shape:?}")));
                }
                Ok(shape.clone())
            }
            _ => Ok(s.to_vec()),
        }
    }

    fn op(&self, batch: usize, mode: Mode, index: usize) -> Op {
        match self {
            Layer::Linear { .. } => Op::Linear,
            Layer::Conv2d { stride, padding, .. } => Op::Conv2d {
                stride: *stride,
                padding: *padding,
            },
            Layer::Conv1d { stride, padding, .. } => Op::Conv1d {
                stride: *stride,
                padding: *padding,
            },
            Layer::TransposedConv2d { stride, padding, .. } => Op::TransposedConv2d {
                stride: *stride,
                padding: *padding,
            },
            Layer::Upsample2d { factor } => Op::Upsample2dNearest { factor: *factor },
            Layer::Upsample1d { factor } => Op::Upsample1dNearest { factor: *factor },
            Layer::LeakyRelu { slope } => Op::LeakyRelu { slope: *slope },
            Layer::Tanh => Op::Tanh,
            Layer::Softplus => Op::Softplus,
            Layer::Sigmoid => Op::Sigmoid,
            Layer::Dropout { rate } => match mode {
                Mode::Eval => Op::Dropout {
                    rate: *rate,
                    seed: 0,
                    training: false,
                },
                Mode::Train { seed } => Op::Dropout {
                    rate: *rate,
                    seed: crate::derive_seed(seed, index as u64),
                    training: true,
                },
            },
            Layer::Reshape { shape } => {
                let mut full = Vec::with_capacity(shape.len() + 1);
                full.push(batch);
                full.extend_from_slice(shape);
                Op::Reshape { shape: full }
            }
        }
    }
}

/// Forward-pass mode. Dropout is active only in `Train`, where `seed` keys
/// the per-layer masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((w, b, _)) = layer.params() {
                out.push((format!("{i}.{}.weight", layer.name()), w));
                out.push((format!("{i}.{}.bias", layer.name()), b));
            }
        }
        out
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        for layer in &self.layers {
            s = layer.out_shape(&s)?;
        }
        Ok(s)
    }

    pub fn has_dropout(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::Dropout { rate } if *rate > 0.0))
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Some((w, b, fan_in)) = layer.params() {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let len: usize = w.iter().product();
                let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
                out.push(Tensor::new(w, data).expect("shape and data agree"));
                out.push(Tensor::zeros(&b));
            }
        }
        out
    }

    fn check_params(&self, count: usize) -> Result<()> {
        let want = self.param_shapes().len();
        if want != count {
            return Err(TensorError::shape(
                "sequential",
                format!("expected {want} parameter tensors, got {count}"),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, params: &[Var], mode: Mode) -> Result<Var> {
        self.check_params(params.len())?;
        let batch = tape.value(x).shape().first().copied().unwrap_or(1);
        let mut h = x;
        let mut p = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let op = layer.op(batch, mode, i);
            h = if layer.params().is_some() {
                p += 2;
                tape.apply(op, &[h, params[p - 2], params[p - 1]])?
            } else {
                tape.apply(op, &[h])?
            };
        }
        Ok(h)
    }

    /// Pure forward pass; nothing is recorded.
    pub fn forward(&self, params: &[Tensor], x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_params(params.len())?;
        let batch = x.shape().first().copied().unwrap_or(1);
        let mut h = x.clone();
        let mut p = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let op = layer.op(batch, mode, i);
            h = if layer.params().is_some() {
                p += 2;
                apply(&op, &[&h, &params[p - 2], &params[p - 1]])?
            } else {
                apply(&op, &[&h])?
            };
        }
        Ok(h)
    }
}

/// A layer stack together with its parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: Sequential,
    pub params: Vec<Tensor>,
}

impl Network {
    pub fn new(arch: Sequential, seed: u64) -> Self {
        let params = arch.init_params(seed);
        Self { arch, params }
    }

    pub fn from_parts(arch: Sequential, params: Vec<Tensor>) -> Result<Self> {
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() {
            return Err(TensorError::shape(
                "network",
                format!("expected {} parameter tensors, got {}", shapes.len(), params.len()),
            ));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(TensorError::shape(
                    "network",
                    format!("parameter {name} has shape {:?}, expected {shape:?}", p.shape()),
                ));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.arch.param_shapes().into_iter().map(|(n, _)| n).collect()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.arch.forward(&self.params, x, mode)
    }

    /// Puts every parameter on the tape.
    pub fn leaves(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let t = p.clone();
                tape.leaf(if trainable { t.with_grad() } else { t })
            })
            .collect()
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var, leaves: &[Var], mode: Mode) -> Result<Var> {
        self.arch.forward_tape(tape, x, leaves, mode)
    }

    /// Clamps every parameter into `[-c, c]`.
    pub fn clamp(&mut self, c: f64) {
        for p in &mut self.params {
            p.data_mut().iter_mut().for_each(|v| *v = v.clamp(-c, c));
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }
}
