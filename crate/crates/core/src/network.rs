//! Whole networks: shape resolution, parameter initialization, zero init, and
//! the time-unrolled forward pass with output decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{parse_arch, ArchToken, BlockToken, Width};
use crate::autodiff::{BatchStats, Graph, Var};
use crate::block::{BlockForm, BlockKind, BlockSpec, ElementWise, ResidualBlock};
use crate::error::{Error, Result};
use crate::layers::{run_layers, BlockCapture, Layer, LayerFactory, Mode, Pass, RunningStats};
use crate::neuron::NeuronSpec;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// How per-step classifier outputs become logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decode {
    /// Mean over time of the classifier outputs.
    #[default]
    MeanLogits,
    /// Mean over time of spikes emitted by an IF readout on the classifier outputs.
    SpikeCount,
}

impl std::str::FromStr for Decode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean-logits" | "mean_logits" | "logits" => Ok(Decode::MeanLogits),
            "spike-count" | "spike_count" | "spikes" => Ok(Decode::SpikeCount),
            other => Err(format!(
                "unknown decode `{other}` (expected mean-logits or spike-count)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Linear {
        fan_in: usize,
        out: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Neuron(NeuronSpec),
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
    Block(BlockSpec),
}

/// A fully resolved network description.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// Canonical architecture string.
    pub arch: String,
    pub layers: Vec<LayerSpec>,
    /// Per-layer output shape (one sample, one time-step).
    pub shapes: Vec<Vec<usize>>,
    /// Per-sample input shape: `[C, H, W]` or `[features]`.
    pub input: Vec<usize>,
    pub timesteps: usize,
    pub neuron: NeuronSpec,
    pub decode: Decode,
    /// Whether the last layer is a classifier whose outputs are decoded into logits.
    pub has_head: bool,
}

pub const DROPOUT_P: f64 = 0.5;

impl NetworkSpec {
    /// Resolves an architecture string against an input shape.
    ///
    /// `neuron` supplies thresholds, surrogate and reset settings; the neuron model
    /// of each layer comes from the string. SEW blocks without an explicit `g` use `default_g`.
    pub fn from_arch(
        arch: &str,
        input: &[usize],
        timesteps: usize,
        neuron: NeuronSpec,
        default_g: ElementWise,
    ) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Parameter("T must be at least 1".into()));
        }
        neuron.validate()?;
        let parsed = parse_arch(arch)?;
        let shape_err = |i: usize, token: &ArchToken, detail: String| Error::Shape {
            op: "network",
            detail: format!("layer {i} (`{token}`): {detail}"),
        };
        let mut shape = input.to_vec();
        let mut layers = Vec::new();
        let mut shapes = Vec::new();
        for (i, (token, _)) in parsed.expanded().iter().enumerate() {
            let layer = match *token {
                ArchToken::Conv {
                    channels,
                    kernel,
                    stride,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(shape_err(
                            i,
                            token,
                            format!("needs a [C, H, W] input, got {shape:?}"),
                        ));
                    };
                    let pad = kernel / 2;
                    if h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return Err(shape_err(
                            i,
                            token,
                            format!("kernel larger than input {shape:?}"),
                        ));
                    }
                    shape = vec![
                        channels,
                        (h + 2 * pad - kernel) / stride + 1,
                        (w + 2 * pad - kernel) / stride + 1,
                    ];
                    LayerSpec::Conv {
                        in_channels: c,
                        out_channels: channels,
                        kernel,
                        stride,
                    }
                }
                ArchToken::Fc(out) => {
                    let fan_in = shape.iter().product();
                    shape = vec![out];
                    LayerSpec::Linear { fan_in, out }
                }
                ArchToken::BatchNorm => LayerSpec::BatchNorm { channels: shape[0] },
                ArchToken::Neuron(kind) => {
                    let n = neuron.with_kind(kind);
                    n.validate()?;
                    LayerSpec::Neuron(n)
                }
                ArchToken::MaxPool { kernel, stride } | ArchToken::AvgPool { kernel, stride } => {
                    let [c, h, w] = shape[..] else {
                        return Err(shape_err(
                            i,
                            token,
                            format!("needs a [C, H, W] input, got {shape:?}"),
                        ));
                    };
                    if h < kernel || w < kernel {
                        return Err(shape_err(
                            i,
                            token,
                            format!("window larger than input {shape:?}"),
                        ));
                    }
                    shape = vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1];
                    if matches!(token, ArchToken::MaxPool { .. }) {
                        LayerSpec::MaxPool { kernel, stride }
                    } else {
                        LayerSpec::AvgPool { kernel, stride }
                    }
                }
                ArchToken::Dropout => LayerSpec::Dropout { p: DROPOUT_P },
                ArchToken::Block {
                    kind,
                    width,
                    stride,
                    g,
                } => {
                    let kind = match kind {
                        BlockToken::Sew => BlockKind::Sew(g.unwrap_or(default_g)),
                        BlockToken::Basic => BlockKind::SpikingBasic,
                        BlockToken::Plain => BlockKind::Plain,
                    };
                    let (form, in_width) = match shape[..] {
                        [c, _, _] => (BlockForm::Conv, c),
                        [n] => (BlockForm::Dense, n),
                        _ => {
                            return Err(shape_err(i, token, format!("unsupported input {shape:?}")))
                        }
                    };
                    let out_width = match width {
                        Some(Width::Channels(c)) | Some(Width::Features(c)) => c,
                        None => in_width,
                    };
                    let s = stride.unwrap_or(1);
                    let spec = BlockSpec {
                        kind,
                        form,
                        in_width,
                        out_width,
                        stride: s,
                        downsample: stride.is_some(),
                    };
                    spec.validate()?;
                    shape = match form {
                        BlockForm::Conv => {
                            vec![out_width, (shape[1] - 1) / s + 1, (shape[2] - 1) / s + 1]
                        }
                        BlockForm::Dense => vec![out_width],
                    };
                    LayerSpec::Block(spec)
                }
            };
            layers.push(layer);
            shapes.push(shape.clone());
        }
        Ok(Self {
            arch: parsed.canonical(),
            layers,
            shapes,
            input: input.to_vec(),
            timesteps,
            neuron,
            decode: Decode::MeanLogits,
            has_head: true,
        })
    }

    /// Headless chain of `depth` shape-preserving dense blocks on `width` features.
    pub fn chain(
        kind: BlockKind,
        width: usize,
        depth: usize,
        neuron: NeuronSpec,
        timesteps: usize,
    ) -> Result<Self> {
        if timesteps == 0 || depth == 0 || width == 0 {
            return Err(Error::Parameter(
                "chain needs T, depth and width of at least 1".into(),
            ));
        }
        neuron.validate()?;
        let spec = BlockSpec::identity_shaped(kind, BlockForm::Dense, width);
        let token = ArchToken::Block {
            kind: match kind {
                BlockKind::Sew(_) => BlockToken::Sew,
                BlockKind::SpikingBasic => BlockToken::Basic,
                BlockKind::Plain => BlockToken::Plain,
            },
            width: Some(Width::Features(width)),
            stride: None,
            g: match kind {
                BlockKind::Sew(g) => Some(g),
                _ => None,
            },
        };
        Ok(Self {
            arch: format!("{{{token}}}*{depth}"),
            layers: vec![LayerSpec::Block(spec); depth],
            shapes: vec![vec![width]; depth],
            input: vec![width],
            timesteps,
            neuron,
            decode: Decode::MeanLogits,
            has_head: false,
        })
    }

    pub fn with_decode(self, decode: Decode) -> Self {
        Self { decode, ..self }
    }

    pub fn num_blocks(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Block(_)))
            .count()
    }

    pub fn classes(&self) -> Option<usize> {
        if self.has_head {
            self.shapes.last().map(|s| s[0])
        } else {
            None
        }
    }
}

/// What a forward pass tracks for backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Register parameters as gradient-requiring leaves.
    pub track_params: bool,
    /// Register the input sequence as a gradient-requiring leaf.
    pub track_input: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            track_params: true,
            track_input: false,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            track_params: false,
            track_input: false,
        }
    }
}

pub struct ForwardOutput {
    /// `[B, classes]` logits for networks with a head, otherwise the `[T·B, ...]` output sequence.
    pub output: Var,
    pub input: Var,
    pub captures: Vec<BlockCapture>,
    pub bn_updates: Vec<(usize, BatchStats)>,
    /// Graph leaves of the parameters, indexed like the parameter store.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer>,
    pub params: ParamStore,
    pub running: Vec<RunningStats>,
}

impl Network {
    /// Allocates and initializes parameters deterministically from `seed`.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut running = Vec::new();
        let mut f = LayerFactory {
            params: &mut params,
            running: &mut running,
            rng: &mut rng,
        };
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut block_neuron = spec.neuron;
        let mut block_index = 0;
        for (i, l) in spec.layers.iter().enumerate() {
            let layer = match l {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                } => f.conv(
                    &format!("l{i}.conv"),
                    *in_channels,
                    *out_channels,
                    *kernel,
                    *stride,
                ),
                LayerSpec::Linear { fan_in, out } => {
                    f.linear(&format!("l{i}.fc"), *fan_in, *out, true)
                }
                LayerSpec::BatchNorm { channels } => f.batch_norm(&format!("l{i}.bn"), *channels),
                LayerSpec::Neuron(n) => {
                    block_neuron = *n;
                    f.neuron(&format!("l{i}.sn"), *n)
                }
                LayerSpec::MaxPool { kernel, stride } => Layer::MaxPool {
                    kernel: *kernel,
                    stride: *stride,
                },
                LayerSpec::AvgPool { kernel, stride } => Layer::AvgPool {
                    kernel: *kernel,
                    stride: *stride,
                },
                LayerSpec::Dropout { p } => Layer::Dropout { p: *p },
                LayerSpec::Block(b) => {
                    let name = format!("block{block_index}");
                    block_index += 1;
                    Layer::Block(Box::new(ResidualBlock::build(
                        *b,
                        block_neuron,
                        &mut f,
                        &name,
                    )?))
                }
            };
            layers.push(layer);
        }
        Ok(Self {
            spec,
            layers,
            params,
            running,
        })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ResidualBlock> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Block(b) => Some(b.as_ref()),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Parameter count of each block, in order.
    pub fn block_param_counts(&self) -> Vec<usize> {
        self.blocks()
            .map(|b| {
                let mut ids = Vec::new();
                for l in b
                    .connection
                    .iter()
                    .chain(&b.shortcut)
                    .chain(b.output_neuron.iter())
                {
                    layer_param_ids(l, &mut ids);
                }
                ids.iter()
                    .map(|id| self.params.get(*id).value.numel())
                    .sum()
            })
            .collect()
    }

    /// Configures every non-downsample residual block as an identity map.
    pub fn zero_init(&mut self) -> Result<()> {
        let Self { layers, params, .. } = self;
        for l in layers.iter() {
            if let Layer::Block(b) = l {
                if b.spec.kind.is_residual() && !b.spec.downsample {
                    b.configure_identity(params)?;
                }
            }
        }
        Ok(())
    }

    /// Runs the network over `x` of shape `[T, B, ...input]`. `T` may differ from
    /// `spec.timesteps` (e.g. after random temporal delete).
    pub fn forward(
        &self,
        g: &mut Graph,
        x: &Tensor,
        opts: ForwardOptions,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let xs = x.shape();
        if xs.len() != self.spec.input.len() + 2 || xs[0] == 0 || xs[2..] != self.spec.input[..] {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("expected [T, B, {:?}] input, got {xs:?}", self.spec.input),
            });
        }
        let t = xs[0];
        let batch = xs[1];
        let mut flat_shape = vec![t * batch];
        flat_shape.extend_from_slice(&self.spec.input);
        let input = g.leaf(x.reshape(&flat_shape)?, opts.track_input);
        let params = self.params.bind(g, opts.track_params);
        let mut pass = Pass {
            g,
            params: &params,
            running: &self.running,
            mode: opts.mode,
            timesteps: t,
            rng,
            bn_updates: Vec::new(),
            captures: Vec::new(),
        };
        let mut out = run_layers(&mut pass, &self.layers, input)?;
        let Pass {
            bn_updates,
            captures,
            g,
            ..
        } = pass;
        if self.spec.has_head {
            if self.spec.decode == Decode::SpikeCount {
                let n = &self.spec.neuron;
                out = crate::neuron::step_sequence(g, n, crate::neuron::Leak::None, out, t)?;
            }
            out = g.mean_blocks(out, t)?;
        }
        Ok(ForwardOutput {
            output: out,
            input,
            captures,
            bn_updates,
            params,
        })
    }

    pub fn apply_bn_updates(&mut self, updates: &[(usize, BatchStats)]) {
        for (i, stats) in updates {
            self.running[*i].update(stats);
        }
    }
}

fn layer_param_ids(l: &Layer, out: &mut Vec<ParamId>) {
    match l {
        Layer::Conv { weight, .. } => out.push(*weight),
        Layer::Linear { weight, bias } => {
            out.push(*weight);
            out.extend(bias);
        }
        Layer::BatchNorm { gamma, beta, .. } => out.extend([*gamma, *beta]),
        Layer::Neuron { raw_tau, .. } => out.extend(raw_tau),
        Layer::Block(b) => {
            for l in b
                .connection
                .iter()
                .chain(&b.shortcut)
                .chain(b.output_neuron.iter())
            {
                layer_param_ids(l, out);
            }
        }
        Layer::MaxPool { .. } | Layer::AvgPool { .. } | Layer::Dropout { .. } => {}
    }
}
