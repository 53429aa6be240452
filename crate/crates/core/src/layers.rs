//! Runtime layers and the forward pass over time-major sequences.
//!
//! A sequence of `T` steps with batch `B` travels as one node of shape
//! `[T·B, ...]`. Stateless layers (conv, linear, BN, pooling) treat the leading
//! axis as a flat batch, so batch-norm statistics are shared over batch and
//! time. Neurons split the sequence per step and thread their membrane state.

use rand::Rng;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Graph, Var};
use crate::block::{BlockKind, ResidualBlock};
use crate::error::Result;
use crate::neuron::{step_sequence, Leak, NeuronSpec};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN, dropout active.
    Train,
    /// Running statistics in BN, dropout off.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        weight: ParamId,
        stride: usize,
        padding: usize,
    },
    Linear {
        weight: ParamId,
        bias: Option<ParamId>,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        stats: usize,
    },
    Neuron {
        spec: NeuronSpec,
        raw_tau: Option<ParamId>,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Dropout {
        p: f64,
    },
    Block(Box<ResidualBlock>),
}

/// Values recorded at one block boundary during a forward pass.
#[derive(Clone, Debug)]
pub struct BlockCapture {
    pub kind: BlockKind,
    pub downsample: bool,
    /// `S^l`, the block input. Its gradient is retained.
    pub input: Var,
    /// `A^l = SN(F(S^l))` for SEW blocks.
    pub residual: Option<Var>,
    /// `O^l`.
    pub output: Var,
}

/// Mutable state of one forward pass.
pub struct Pass<'a> {
    pub g: &'a mut Graph,
    pub params: &'a [Var],
    pub running: &'a [RunningStats],
    pub mode: Mode,
    pub timesteps: usize,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub bn_updates: Vec<(usize, BatchStats)>,
    pub captures: Vec<BlockCapture>,
}

impl Pass<'_> {
    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }
}

pub fn run_layers(pass: &mut Pass<'_>, layers: &[Layer], mut x: Var) -> Result<Var> {
    for layer in layers {
        x = run_layer(pass, layer, x)?;
    }
    Ok(x)
}

pub fn run_layer(pass: &mut Pass<'_>, layer: &Layer, x: Var) -> Result<Var> {
    match layer {
        Layer::Conv {
            weight,
            stride,
            padding,
        } => {
            let w = pass.param(*weight);
            pass.g.conv2d(x, w, *stride, *padding)
        }
        Layer::Linear { weight, bias } => {
            let w = pass.param(*weight);
            let b = bias.map(|b| pass.param(b));
            pass.g.linear(x, w, b)
        }
        Layer::BatchNorm { gamma, beta, stats } => {
            let (gm, bt) = (pass.param(*gamma), pass.param(*beta));
            match pass.mode {
                Mode::Train => {
                    let (y, batch) = pass.g.batch_norm(x, gm, bt, None, BN_EPS)?;
                    if let Some(b) = batch {
                        pass.bn_updates.push((*stats, b));
                    }
                    Ok(y)
                }
                Mode::Eval => {
                    let rs = &pass.running[*stats];
                    let (y, _) = pass
                        .g
                        .batch_norm(x, gm, bt, Some((&rs.mean, &rs.var)), BN_EPS)?;
                    Ok(y)
                }
            }
        }
        Layer::Neuron { spec, raw_tau } => {
            let raw = raw_tau.map(|id| pass.param(id));
            let leak = Leak::for_spec(pass.g, spec, raw)?;
            step_sequence(pass.g, spec, leak, x, pass.timesteps)
        }
        Layer::MaxPool { kernel, stride } => pass.g.max_pool(x, *kernel, *stride),
        Layer::AvgPool { kernel, stride } => pass.g.avg_pool(x, *kernel, *stride),
        Layer::Dropout { p } => {
            if pass.mode == Mode::Eval || *p == 0.0 {
                return Ok(x);
            }
            let keep = 1.0 - p;
            let shape = pass.g.value(x).shape().to_vec();
            let n = pass.g.value(x).numel();
            let rng: &mut dyn RngCore = match pass.rng.as_deref_mut() {
                Some(r) => r,
                None => {
                    return Err(crate::error::Error::Unsupported(
                        "dropout in training mode needs a random source".into(),
                    ))
                }
            };
            let mask: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            let m = pass.g.constant(Tensor::new(shape, mask)?);
            pass.g.mul(x, m)
        }
        Layer::Block(block) => block.forward(pass, x),
    }
}

/// Allocates parameters with deterministic initialization.
///
/// Conv and linear weights are Kaiming-uniform (`±sqrt(6 / fan_in)`), linear
/// biases uniform in `±1/sqrt(fan_in)`, BN scale 1 and shift 0.
pub struct LayerFactory<'a> {
    pub params: &'a mut ParamStore,
    pub running: &'a mut Vec<RunningStats>,
    pub rng: &'a mut ChaCha8Rng,
}

impl LayerFactory<'_> {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    pub fn conv(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
    ) -> Layer {
        let fan_in = in_c * kernel * kernel;
        let w = self.uniform(&[out_c, in_c, kernel, kernel], (6.0 / fan_in as f64).sqrt());
        Layer::Conv {
            weight: self.params.push(format!("{name}.weight"), w),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, out: usize, bias: bool) -> Layer {
        let w = self.uniform(&[out, fan_in], (6.0 / fan_in as f64).sqrt());
        let weight = self.params.push(format!("{name}.weight"), w);
        let bias = bias.then(|| {
            let b = self.uniform(&[out], 1.0 / (fan_in as f64).sqrt());
            self.params.push(format!("{name}.bias"), b)
        });
        Layer::Linear { weight, bias }
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Layer {
        let gamma = self
            .params
            .push(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = self
            .params
            .push(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.running.push(RunningStats::new(channels));
        Layer::BatchNorm {
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }

    pub fn neuron(&mut self, name: &str, spec: NeuronSpec) -> Layer {
        let raw_tau = (spec.kind == crate::neuron::NeuronKind::PLIF).then(|| {
            self.params
                .push(format!("{name}.w"), Tensor::scalar(spec.plif_raw_init()))
        });
        Layer::Neuron { spec, raw_tau }
    }
}
