//! Residual blocks: plain, Spiking ResNet basic block, and spike-element-wise (SEW).
//!
//! With `F` the connection function and `SN` a spiking neuron layer:
//!
//! | kind            | output                                   |
//! |-----------------|------------------------------------------|
//! | plain           | `O = SN(F(S))`, `F` ends in an SN        |
//! | spiking basic   | `O = SN(F(S) + S)`                       |
//! | SEW             | `O = g(A, S)` with `A = SN(F(S))`        |
//!
//! Downsample blocks replace the identity shortcut by `BN(Conv1x1_s(S))`, plus
//! an SN for SEW blocks.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{run_layers, BlockCapture, Layer, LayerFactory, Pass};
use crate::neuron::{step_sequence, Leak, NeuronKind, NeuronSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Element-wise function combining the residual spikes `A` with the shortcut `S`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElementWise {
    /// `A + S`
    Add,
    /// `A · S`
    And,
    /// `(1 − A) · S`
    IAnd,
}

impl ElementWise {
    pub const ALL: [ElementWise; 3] = [ElementWise::Add, ElementWise::And, ElementWise::IAnd];

    #[inline]
    pub fn eval(self, a: f64, s: f64) -> f64 {
        match self {
            ElementWise::Add => a + s,
            ElementWise::And => a * s,
            ElementWise::IAnd => (1.0 - a) * s,
        }
    }

    /// Applies `g` to two binary spike tensors.
    pub fn apply_values(self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        if a.shape() != s.shape() {
            return Err(Error::Shape {
                op: "elementwise_g",
                detail: format!("{:?} vs {:?}", a.shape(), s.shape()),
            });
        }
        if !a.is_binary() || !s.is_binary() {
            return Err(Error::Domain(format!("{self} expects binary spike inputs")));
        }
        let data = a
            .data()
            .iter()
            .zip(s.data())
            .map(|(&x, &y)| self.eval(x, y))
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    /// Arithmetic form on graph nodes; gradients reach both operands.
    pub fn apply(self, g: &mut Graph, a: Var, s: Var) -> Result<Var> {
        match self {
            ElementWise::Add => g.add(a, s),
            ElementWise::And => g.mul(a, s),
            ElementWise::IAnd => {
                let neg = g.scale(a, -1.0)?;
                let not_a = g.add_scalar(neg, 1.0)?;
                g.mul(not_a, s)
            }
        }
    }
}

impl fmt::Display for ElementWise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElementWise::Add => "ADD",
            ElementWise::And => "AND",
            ElementWise::IAnd => "IAND",
        })
    }
}

impl FromStr for ElementWise {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ADD" => Ok(ElementWise::Add),
            "AND" => Ok(ElementWise::And),
            "IAND" => Ok(ElementWise::IAnd),
            other => Err(format!(
                "unknown element-wise function `{other}` (expected ADD, AND or IAND)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    Plain,
    SpikingBasic,
    Sew(ElementWise),
}

impl BlockKind {
    pub fn is_residual(&self) -> bool {
        !matches!(self, BlockKind::Plain)
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::Plain => f.write_str("plain"),
            BlockKind::SpikingBasic => f.write_str("spiking-basic"),
            BlockKind::Sew(g) => write!(f, "sew-{}", g.to_string().to_lowercase()),
        }
    }
}

impl FromStr for BlockKind {
    type Err = String;

    /// Accepts `plain`, `basic`/`spiking-basic`, `sew` (ADD) or `sew-add`/`sew-and`/`sew-iand`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "plain" => Ok(BlockKind::Plain),
            "basic" | "spiking-basic" | "spiking" => Ok(BlockKind::SpikingBasic),
            "sew" => Ok(BlockKind::Sew(ElementWise::Add)),
            other => match other.strip_prefix("sew-") {
                Some(g) => g.parse().map(BlockKind::Sew),
                None => Err(format!("unknown block kind `{other}`")),
            },
        }
    }
}

/// Layer recipe of the connection function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockForm {
    /// Conv3x3-BN-SN-Conv3x3-BN on `[C, H, W]` maps.
    Conv,
    /// Linear-BN-SN-Linear-BN on feature vectors.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub form: BlockForm,
    /// Input channels (conv) or features (dense).
    pub in_width: usize,
    pub out_width: usize,
    pub stride: usize,
    pub downsample: bool,
}

impl BlockSpec {
    /// Shape-preserving block of `width` channels or features.
    pub fn identity_shaped(kind: BlockKind, form: BlockForm, width: usize) -> Self {
        Self {
            kind,
            form,
            in_width: width,
            out_width: width,
            stride: 1,
            downsample: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_width == 0 || self.out_width == 0 || self.stride == 0 {
            return Err(Error::Parameter(format!("degenerate block {self:?}")));
        }
        if !self.downsample && (self.in_width != self.out_width || self.stride != 1) {
            return Err(Error::Shape {
                op: "block",
                detail: format!(
                    "non-downsample block must preserve shape (in {}, out {}, stride {})",
                    self.in_width, self.out_width, self.stride
                ),
            });
        }
        if self.form == BlockForm::Dense && self.stride != 1 {
            return Err(Error::Parameter("dense blocks cannot be strided".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub spec: BlockSpec,
    /// `F^l`; for SEW and plain blocks this includes the trailing SN.
    pub connection: Vec<Layer>,
    /// Empty for identity shortcuts.
    pub shortcut: Vec<Layer>,
    /// Output SN of a spiking-basic block.
    pub output_neuron: Option<Layer>,
}

impl ResidualBlock {
    pub fn build(
        spec: BlockSpec,
        neuron: NeuronSpec,
        f: &mut LayerFactory<'_>,
        name: &str,
    ) -> Result<Self> {
        spec.validate()?;
        neuron.validate()?;
        let (cin, cout) = (spec.in_width, spec.out_width);
        let mut connection = match spec.form {
            BlockForm::Conv => vec![
                f.conv(&format!("{name}.conv1"), cin, cout, 3, spec.stride),
                f.batch_norm(&format!("{name}.bn1"), cout),
                f.neuron(&format!("{name}.sn1"), neuron),
                f.conv(&format!("{name}.conv2"), cout, cout, 3, 1),
                f.batch_norm(&format!("{name}.bn2"), cout),
            ],
            BlockForm::Dense => vec![
                f.linear(&format!("{name}.fc1"), cin, cout, false),
                f.batch_norm(&format!("{name}.bn1"), cout),
                f.neuron(&format!("{name}.sn1"), neuron),
                f.linear(&format!("{name}.fc2"), cout, cout, false),
                f.batch_norm(&format!("{name}.bn2"), cout),
            ],
        };
        let mut output_neuron = None;
        match spec.kind {
            BlockKind::SpikingBasic => {
                output_neuron = Some(f.neuron(&format!("{name}.sn_out"), neuron))
            }
            BlockKind::Sew(_) | BlockKind::Plain => {
                connection.push(f.neuron(&format!("{name}.sn2"), neuron))
            }
        }
        let mut shortcut = Vec::new();
        if spec.downsample && spec.kind.is_residual() {
            shortcut.push(match spec.form {
                BlockForm::Conv => f.conv(&format!("{name}.down.conv"), cin, cout, 1, spec.stride),
                BlockForm::Dense => f.linear(&format!("{name}.down.fc"), cin, cout, false),
            });
            shortcut.push(f.batch_norm(&format!("{name}.down.bn"), cout));
            if matches!(spec.kind, BlockKind::Sew(_)) {
                shortcut.push(f.neuron(&format!("{name}.down.sn"), neuron));
            }
        }
        Ok(Self {
            spec,
            connection,
            shortcut,
            output_neuron,
        })
    }

    fn last_bn(&self) -> Option<&Layer> {
        self.connection
            .iter()
            .rev()
            .find(|l| matches!(l, Layer::BatchNorm { .. }))
    }

    /// Spec of the SN producing `A` (SEW) or `O` (basic, plain).
    pub fn output_neuron_spec(&self) -> Option<NeuronSpec> {
        let layer = match self.spec.kind {
            BlockKind::SpikingBasic => self.output_neuron.as_ref(),
            _ => self.connection.last(),
        }?;
        match layer {
            Layer::Neuron { spec, .. } => Some(*spec),
            _ => None,
        }
    }

    /// Sets the last BN of `F` so that the block is an identity map.
    ///
    /// ADD/IAND: scale 0, shift 0 so `A ≡ 0`. AND: scale 0, shift `V_th` so an IF
    /// neuron fires every step and `A ≡ 1`. Spiking basic: scale 0, shift 0 so `F ≡ 0`.
    pub fn configure_identity(&self, params: &mut ParamStore) -> Result<()> {
        if self.spec.downsample {
            return Err(Error::Unsupported(
                "downsample blocks have no identity configuration".into(),
            ));
        }
        let neuron = self
            .output_neuron_spec()
            .ok_or_else(|| Error::Unsupported("block has no output neuron".into()))?;
        let shift = match self.spec.kind {
            BlockKind::Plain => {
                return Err(Error::Unsupported(
                    "plain blocks have no shortcut to carry an identity".into(),
                ))
            }
            BlockKind::SpikingBasic
            | BlockKind::Sew(ElementWise::Add)
            | BlockKind::Sew(ElementWise::IAnd) => 0.0,
            BlockKind::Sew(ElementWise::And) => {
                if neuron.kind != NeuronKind::IF {
                    return Err(Error::Unsupported(format!(
                        "SEW-AND identity needs an IF output neuron, got {}",
                        neuron.kind
                    )));
                }
                neuron.v_threshold
            }
        };
        let Some(Layer::BatchNorm { gamma, beta, .. }) = self.last_bn() else {
            return Err(Error::Unsupported(
                "connection function has no batch norm".into(),
            ));
        };
        params.get_mut(*gamma).value.data_mut().fill(0.0);
        params.get_mut(*beta).value.data_mut().fill(shift);
        Ok(())
    }

    pub fn forward(&self, pass: &mut Pass<'_>, s: Var) -> Result<Var> {
        pass.g.retain_grad(s);
        let shortcut = if self.shortcut.is_empty() {
            s
        } else {
            run_layers(pass, &self.shortcut, s)?
        };
        let f = run_layers(pass, &self.connection, s)?;
        if pass.g.value(f).shape() != pass.g.value(shortcut).shape() {
            return Err(Error::Shape {
                op: "block",
                detail: format!(
                    "residual {:?} vs shortcut {:?}",
                    pass.g.value(f).shape(),
                    pass.g.value(shortcut).shape()
                ),
            });
        }
        let (residual, output) = match self.spec.kind {
            BlockKind::Plain => (None, f),
            BlockKind::SpikingBasic => {
                let sum = pass.g.add(f, shortcut)?;
                let Some(Layer::Neuron { spec, raw_tau }) = &self.output_neuron else {
                    return Err(Error::Unsupported(
                        "spiking basic block without output neuron".into(),
                    ));
                };
                let raw = raw_tau.map(|id| pass.param(id));
                let leak = Leak::for_spec(pass.g, spec, raw)?;
                (
                    None,
                    step_sequence(pass.g, spec, leak, sum, pass.timesteps)?,
                )
            }
            BlockKind::Sew(g) => (Some(f), g.apply(pass.g, f, shortcut)?),
        };
        pass.captures.push(BlockCapture {
            kind: self.spec.kind,
            downsample: self.spec.downsample,
            input: s,
            residual,
            output,
        });
        Ok(output)
    }
}
