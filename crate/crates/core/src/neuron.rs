//! Discrete-time spiking neurons: charge, fire, reset.
//!
//! Every neuron follows the same three-phase update per time-step:
//!
//! ```text
//! H[t] = f(V[t-1], X[t])                 charge
//! S[t] = Θ(H[t] - V_th)                  fire, Θ(0) = 1
//! V[t] = H[t]·(1 - S[t]) + V_reset·S[t]  hard reset
//! ```
//!
//! `f` is `V + X` for IF and `V + (X - (V - V_reset)) / τ` for LIF/PLIF.
//! The step function's derivative is replaced by a surrogate during backward.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kv::{ConfigError, KvConfig};
use crate::tensor::Tensor;

/// Surrogate derivative used in place of the Heaviside derivative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Surrogate {
    /// `σ'(x) = α / (2·(1 + (π/2·α·x)²))`
    ArcTan { alpha: f64 },
    /// `σ'(x) = 1/a` for `|x| < a/2`, else 0.
    Rectangular { width: f64 },
    /// `σ'(x) = 1`.
    Constant1,
}

impl Default for Surrogate {
    fn default() -> Self {
        Surrogate::ArcTan { alpha: 2.0 }
    }
}

impl Surrogate {
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Surrogate::ArcTan { alpha } => {
                let z = PI / 2.0 * alpha * x;
                alpha / (2.0 * (1.0 + z * z))
            }
            Surrogate::Rectangular { width } => {
                if x.abs() < width / 2.0 {
                    1.0 / width
                } else {
                    0.0
                }
            }
            Surrogate::Constant1 => 1.0,
        }
    }

    /// The smooth function whose derivative is [`Surrogate::derivative`].
    pub fn primitive(&self, x: f64) -> f64 {
        match *self {
            Surrogate::ArcTan { alpha } => (PI / 2.0 * alpha * x).atan() / PI + 0.5,
            Surrogate::Rectangular { width } => (x / width + 0.5).clamp(0.0, 1.0),
            Surrogate::Constant1 => x + 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Surrogate::ArcTan { alpha } if !(alpha > 0.0 && alpha.is_finite()) => Err(
                Error::Parameter(format!("arctan slope must be positive, got {alpha}")),
            ),
            Surrogate::Rectangular { width } if !(width > 0.0 && width.is_finite()) => Err(
                Error::Parameter(format!("rectangular width must be positive, got {width}")),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NeuronKind {
    IF,
    LIF,
    PLIF,
}

impl fmt::Display for NeuronKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NeuronKind::IF => "IF",
            NeuronKind::LIF => "LIF",
            NeuronKind::PLIF => "PLIF",
        })
    }
}

impl FromStr for NeuronKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "IF" => Ok(NeuronKind::IF),
            "LIF" => Ok(NeuronKind::LIF),
            "PLIF" => Ok(NeuronKind::PLIF),
            other => Err(format!(
                "unknown neuron kind `{other}` (expected IF, LIF or PLIF)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronSpec {
    pub kind: NeuronKind,
    pub v_threshold: f64,
    pub v_reset: f64,
    /// Membrane time constant for LIF; initial value for PLIF. Ignored by IF.
    pub tau: f64,
    pub detach_reset: bool,
    pub surrogate: Surrogate,
}

impl Default for NeuronSpec {
    fn default() -> Self {
        Self {
            kind: NeuronKind::IF,
            v_threshold: 1.0,
            v_reset: 0.0,
            tau: 2.0,
            detach_reset: true,
            surrogate: Surrogate::default(),
        }
    }
}

impl NeuronSpec {
    pub fn with_kind(self, kind: NeuronKind) -> Self {
        Self { kind, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_threshold > self.v_reset) {
            return Err(Error::Parameter(format!(
                "v_threshold ({}) must exceed v_reset ({})",
                self.v_threshold, self.v_reset
            )));
        }
        match self.kind {
            NeuronKind::IF => {}
            NeuronKind::LIF if !(self.tau >= 1.0) => {
                return Err(Error::Parameter(format!(
                    "LIF tau must be >= 1, got {}",
                    self.tau
                )));
            }
            NeuronKind::PLIF if !(self.tau > 1.0) => {
                return Err(Error::Parameter(format!(
                    "PLIF initial tau must be > 1, got {}",
                    self.tau
                )));
            }
            _ => {}
        }
        self.surrogate.validate()
    }

    pub const KEYS: [&'static str; 8] = [
        "neuron",
        "v_threshold",
        "v_reset",
        "tau",
        "detach_reset",
        "surrogate",
        "alpha",
        "surrogate_width",
    ];

    /// Reads the keys in [`NeuronSpec::KEYS`]; absent keys take defaults.
    /// `surrogate` is `arctan` (with `alpha`), `rectangular` (with
    /// `surrogate_width`) or `constant1`.
    pub fn from_kv(cfg: &KvConfig) -> std::result::Result<Self, ConfigError> {
        let d = Self::default();
        let surrogate =
            match cfg.get_str("surrogate").unwrap_or("arctan") {
                "arctan" => Surrogate::ArcTan {
                    alpha: cfg.get_or("alpha", 2.0)?,
                },
                "rectangular" => Surrogate::Rectangular {
                    width: cfg.get_or("surrogate_width", 1.0)?,
                },
                "constant1" => Surrogate::Constant1,
                other => return Err(ConfigError::new(
                    "surrogate",
                    format!(
                        "unknown surrogate `{other}` (expected arctan, rectangular or constant1)"
                    ),
                )),
            };
        let spec = Self {
            kind: match cfg.get_str("neuron") {
                Some(s) => s
                    .parse()
                    .map_err(|e: String| ConfigError::new("neuron", e))?,
                None => d.kind,
            },
            v_threshold: cfg.get_or("v_threshold", d.v_threshold)?,
            v_reset: cfg.get_or("v_reset", d.v_reset)?,
            tau: cfg.get_or("tau", d.tau)?,
            detach_reset: cfg.get_or("detach_reset", d.detach_reset)?,
            surrogate,
        };
        if let Err(e) = spec.surrogate.validate() {
            let key = match spec.surrogate {
                Surrogate::Rectangular { .. } => "surrogate_width",
                _ => "alpha",
            };
            return Err(ConfigError::new(key, e.to_string()));
        }
        if !(spec.v_threshold > spec.v_reset) {
            return Err(ConfigError::new(
                "v_threshold",
                format!("must exceed v_reset ({})", spec.v_reset),
            ));
        }
        spec.validate()
            .map_err(|e| ConfigError::new("tau", e.to_string()))?;
        Ok(spec)
    }

    /// Initial raw PLIF parameter `w` for this spec's `tau`.
    pub fn plif_raw_init(&self) -> f64 {
        plif_raw_from_tau(self.tau)
    }
}

/// PLIF stores an unconstrained `w` with `τ = 1 + exp(w)`, so `τ > 1` for any real `w`
/// and the charge factor is `1/τ = 1 / (1 + exp(w))`.
pub fn plif_tau(raw: f64) -> f64 {
    1.0 + raw.exp()
}

pub fn plif_raw_from_tau(tau: f64) -> f64 {
    (tau - 1.0).ln()
}

/// Leak factor `1/τ` applied during charge.
#[derive(Clone, Copy, Debug)]
pub enum Leak {
    /// Integrate-and-fire: no leak.
    None,
    /// Fixed `1/τ`.
    Fixed(f64),
    /// Graph node holding `1/τ` (PLIF).
    Learned(Var),
}

impl Leak {
    pub fn from_tau(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Parameter(format!(
                "membrane time constant must be positive, got {tau}"
            )));
        }
        Ok(Leak::Fixed(1.0 / tau))
    }

    /// Leak for `spec`; `plif_raw` is the graph node of the PLIF parameter `w`.
    pub fn for_spec(g: &mut Graph, spec: &NeuronSpec, plif_raw: Option<Var>) -> Result<Self> {
        match spec.kind {
            NeuronKind::IF => Ok(Leak::None),
            NeuronKind::LIF => Leak::from_tau(spec.tau),
            NeuronKind::PLIF => {
                let raw = match plif_raw {
                    Some(v) => v,
                    None => g.constant(Tensor::scalar(spec.plif_raw_init())),
                };
                Ok(Leak::Learned(g.sigmoid_neg(raw)?))
            }
        }
    }
}

/// `H[t]` from `V[t-1]` and input `X[t]`.
pub fn charge(g: &mut Graph, leak: Leak, v_reset: f64, v_prev: Var, x: Var) -> Result<Var> {
    match leak {
        Leak::None => g.add(v_prev, x),
        Leak::Fixed(k) => {
            let d = g.sub(x, v_prev)?;
            let d = g.add_scalar(d, v_reset)?;
            let d = g.scale(d, k)?;
            g.add(v_prev, d)
        }
        Leak::Learned(k) => {
            let d = g.sub(x, v_prev)?;
            let d = g.add_scalar(d, v_reset)?;
            let d = g.mul_scalar_var(d, k)?;
            g.add(v_prev, d)
        }
    }
}

/// `S[t] = Θ(H[t] − V_th)`.
pub fn fire(g: &mut Graph, h: Var, v_threshold: f64, surrogate: Surrogate) -> Result<Var> {
    g.spike(h, v_threshold, surrogate)
}

/// `V[t] = H[t]·(1 − S[t]) + V_reset·S[t]`; `S` carries no gradient here when `detach` is set.
pub fn reset(g: &mut Graph, h: Var, s: Var, v_reset: f64, detach: bool) -> Result<Var> {
    if !g.value(s).is_binary() {
        return Err(Error::Domain("reset expects a binary spike tensor".into()));
    }
    g.reset(h, s, v_reset, detach)
}

/// Runs the neuron over `x_seq` of shape `[T·B, ...]` (time-major) and returns the
/// spike train of the same shape. The membrane starts at `V_reset`.
pub fn step_sequence(
    g: &mut Graph,
    spec: &NeuronSpec,
    leak: Leak,
    x_seq: Var,
    timesteps: usize,
) -> Result<Var> {
    let shape = g.value(x_seq).shape().to_vec();
    if shape.is_empty() || timesteps == 0 || !shape[0].is_multiple_of(timesteps) {
        return Err(Error::Shape {
            op: "step_sequence",
            detail: format!("leading axis of {shape:?} is not a multiple of T = {timesteps}"),
        });
    }
    let batch = shape[0] / timesteps;
    let mut step_shape = shape.clone();
    step_shape[0] = batch;
    let mut v = g.constant(Tensor::full(&step_shape, spec.v_reset));
    let mut spikes = Vec::with_capacity(timesteps);
    for t in 0..timesteps {
        let x = if timesteps == 1 {
            x_seq
        } else {
            g.slice_rows(x_seq, t * batch, batch)?
        };
        let h = charge(g, leak, spec.v_reset, v, x)?;
        let s = fire(g, h, spec.v_threshold, spec.surrogate)?;
        v = g.reset(h, s, spec.v_reset, spec.detach_reset)?;
        spikes.push(s);
    }
    if spikes.len() == 1 {
        Ok(spikes[0])
    } else {
        g.concat_rows(&spikes)
    }
}

/// Spike train for a plain value sequence `[T, N]` (no gradient tracking).
pub fn simulate(spec: &NeuronSpec, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let timesteps = inputs.len();
    if timesteps == 0 {
        return Ok(Vec::new());
    }
    let n = inputs[0].len();
    let flat: Vec<f64> = inputs.iter().flatten().copied().collect();
    if flat.len() != n * timesteps {
        return Err(Error::Shape {
            op: "simulate",
            detail: "ragged input sequence".into(),
        });
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![timesteps * n], flat)?);
    let leak = Leak::for_spec(&mut g, spec, None)?;
    let s = step_sequence(&mut g, spec, leak, x, timesteps)?;
    Ok(g.value(s)
        .data()
        .chunks(n.max(1))
        .map(|c| c.to_vec())
        .collect())
}
