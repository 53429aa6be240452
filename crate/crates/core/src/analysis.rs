//! Gradient and firing-rate diagnostics for residual spiking networks, with
//! closed-form oracles for gradient propagation through identity chains.
//!
//! Per-block quantities refer to the block input `S^l`, the SN output inside
//! the block `A^l` (for spiking-basic and plain blocks this is `O^l` itself),
//! and the block output `O^l`.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::block::{BlockKind, ElementWise};
use crate::error::{Error, Result};
use crate::kv::{ConfigError, KvConfig};
use crate::network::{ForwardOptions, Network, NetworkSpec};
use crate::neuron::{NeuronKind, NeuronSpec, Surrogate};
use crate::tensor::Tensor;

/// Trend thresholds on `‖∂L/∂S^first‖ / ‖∂L/∂S^last‖`.
pub const VANISHING_RATIO: f64 = 0.25;
pub const EXPLODING_RATIO: f64 = 4.0;

/// Mean of a binary tensor over all of its entries.
pub fn firing_rate(s: &Tensor) -> Result<f64> {
    if !s.is_binary() {
        return Err(Error::Domain(
            "firing rate needs a binary spike tensor".into(),
        ));
    }
    Ok(mean_value(s))
}

/// Mean over all entries (the "rate" of a non-binary SEW-ADD output).
pub fn mean_value(s: &Tensor) -> f64 {
    if s.numel() == 0 {
        0.0
    } else {
        s.sum() / s.numel() as f64
    }
}

/// Loss used to drive a diagnostic backward pass.
#[derive(Clone, Copy, Debug)]
pub enum TraceLoss<'a> {
    /// Sum of all network outputs: every output element receives upstream gradient 1.
    SumOutputs,
    /// Cross-entropy of the classifier head against labels.
    CrossEntropy(&'a [usize]),
}

/// Values and gradients at one block boundary.
#[derive(Clone, Debug)]
pub struct BlockProbe {
    pub kind: BlockKind,
    pub downsample: bool,
    /// `S^l`
    pub input: Tensor,
    /// `A^l`
    pub spikes: Tensor,
    /// `O^l`
    pub output: Tensor,
    /// `∂L/∂S^l`
    pub input_grad: Tensor,
}

/// Reshapes `[T, B, ...]` to `[1, T·B, ...]` so each time step becomes an
/// independent sample with fresh neuron state.
pub fn fold_time(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::Shape {
            op: "fold_time",
            detail: format!("expected [T, B, ...], got {s:?}"),
        });
    }
    let mut shape = vec![1, s[0] * s[1]];
    shape.extend_from_slice(&s[2..]);
    x.reshape(&shape)
}

/// Forward (training-mode batch statistics) and backward of `loss`, capturing every block.
pub fn probe_blocks(net: &Network, x: &Tensor, loss: TraceLoss<'_>) -> Result<Vec<BlockProbe>> {
    let mut g = Graph::new();
    let opts = ForwardOptions {
        track_params: false,
        track_input: true,
        ..ForwardOptions::train()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = net.forward(&mut g, x, opts, Some(&mut rng))?;
    let l = match loss {
        TraceLoss::SumOutputs => g.sum(out.output)?,
        TraceLoss::CrossEntropy(labels) => {
            if !net.spec.has_head {
                return Err(Error::Unsupported(
                    "cross-entropy trace needs a classifier head".into(),
                ));
            }
            g.cross_entropy(out.output, labels)?
        }
    };
    g.backward(l)?;
    Ok(out
        .captures
        .iter()
        .map(|c| {
            let input = g.value(c.input).clone();
            let input_grad = g
                .grad(c.input)
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            BlockProbe {
                kind: c.kind,
                downsample: c.downsample,
                spikes: g.value(c.residual.unwrap_or(c.output)).clone(),
                output: g.value(c.output).clone(),
                input,
                input_grad,
            }
        })
        .collect())
}

/// Probe of a headless chain with time folded into the batch and a
/// sum-of-outputs loss, which isolates the same-time block-product term of
/// `∂L/∂S^l`: every element of `∂L/∂S^l` is then `∂O^{last}_j[t]/∂S^l_j[t]`.
pub fn probe_isolated(net: &Network, x: &Tensor) -> Result<Vec<BlockProbe>> {
    if net.spec.has_head {
        return Err(Error::Unsupported(
            "isolated probes need a headless chain".into(),
        ));
    }
    probe_blocks(net, &fold_time(x)?, TraceLoss::SumOutputs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Vanishing,
    Stable,
    Exploding,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Vanishing => "vanishing",
            Regime::Stable => "stable",
            Regime::Exploding => "exploding",
        })
    }
}

/// `‖∂L/∂S^l‖` per block, shallow to deep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientTrace {
    pub norms: Vec<f64>,
    pub downsample: Vec<bool>,
}

impl GradientTrace {
    pub fn from_probes(probes: &[BlockProbe]) -> Self {
        Self {
            norms: probes.iter().map(|p| p.input_grad.norm()).collect(),
            downsample: probes.iter().map(|p| p.downsample).collect(),
        }
    }

    /// Shallowest over deepest norm.
    pub fn ratio(&self) -> f64 {
        match (self.norms.first(), self.norms.last()) {
            (Some(a), Some(b)) if *b > 0.0 => a / b,
            (Some(a), Some(_)) if *a > 0.0 => f64::INFINITY,
            _ => 1.0,
        }
    }

    /// Largest over smallest norm.
    pub fn spread(&self) -> f64 {
        let max = self.norms.iter().copied().fold(0.0, f64::max);
        let min = self.norms.iter().copied().fold(f64::INFINITY, f64::min);
        if max == 0.0 {
            1.0
        } else {
            max / min
        }
    }

    /// Shallow-ward trend: the ratio against [`VANISHING_RATIO`] and [`EXPLODING_RATIO`].
    pub fn regime(&self) -> Regime {
        let r = self.ratio();
        if !r.is_finite() || r > EXPLODING_RATIO {
            Regime::Exploding
        } else if r < VANISHING_RATIO {
            Regime::Vanishing
        } else {
            Regime::Stable
        }
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "block_index,grad_norm")?;
        for (i, n) in self.norms.iter().enumerate() {
            writeln!(w, "{i},{n}")?;
        }
        Ok(())
    }
}

/// Gradient trace of a full forward/backward pass.
pub fn trace_gradients(net: &Network, x: &Tensor, loss: TraceLoss<'_>) -> Result<GradientTrace> {
    Ok(GradientTrace::from_probes(&probe_blocks(net, x, loss)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BlockRates {
    pub block_index: usize,
    pub is_downsample: bool,
    /// Firing rate of `A^l`.
    pub a_rate: f64,
    /// Mean value of `O^l`.
    pub o_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FiringRateTrace {
    pub blocks: Vec<BlockRates>,
}

impl FiringRateTrace {
    pub fn from_probes(probes: &[BlockProbe]) -> Result<Self> {
        let blocks = probes
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Ok(BlockRates {
                    block_index: i,
                    is_downsample: p.downsample,
                    a_rate: firing_rate(&p.spikes)?,
                    o_rate: mean_value(&p.output),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "block_index,is_downsample,a_rate,o_rate")?;
        for b in &self.blocks {
            writeln!(
                w,
                "{},{},{},{}",
                b.block_index,
                u8::from(b.is_downsample),
                b.a_rate,
                b.o_rate
            )?;
        }
        Ok(())
    }
}

/// Per-block firing rates of a forward pass (training-mode batch statistics).
pub fn trace_firing_rates(net: &Network, x: &Tensor) -> Result<FiringRateTrace> {
    let probes = if net.spec.has_head {
        let b = x.shape().get(1).copied().unwrap_or(0);
        probe_blocks(net, x, TraceLoss::CrossEntropy(&vec![0; b]))?
    } else {
        probe_blocks(net, x, TraceLoss::SumOutputs)?
    };
    FiringRateTrace::from_probes(&probes)
}

/// `∏_i σ'(s_i − V_th)` along one element's spike path through `k = path.len()`
/// identity-configured spiking-basic blocks.
pub fn oracle_grad_product_spiking(surrogate: Surrogate, v_threshold: f64, path: &[f64]) -> f64 {
    path.iter()
        .map(|s| surrogate.derivative(s - v_threshold))
        .product()
}

/// The per-block factor of an identity SEW chain: `∂g(0|1, S)/∂S = 1` for every `g`.
pub fn oracle_grad_product_sew(g: ElementWise) -> f64 {
    match g {
        // ∂(A + S)/∂S with A ≡ 0
        ElementWise::Add => 1.0,
        // ∂(A·S)/∂S with A ≡ 1
        ElementWise::And => 1.0,
        // ∂((1 − A)·S)/∂S with A ≡ 0
        ElementWise::IAnd => 1.0,
    }
}

/// Limit of the norm formula as `k → ∞`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LimitRegime {
    /// Both factors equal 1: `√(NT)`.
    AllElements,
    /// Only the spiking elements survive: `√(NTΦ)`.
    SpikingElements,
    /// Only the silent elements survive: `√(NT(1 − Φ))`.
    SilentElements,
    /// Both factors below 1: the norm goes to 0.
    Vanishing,
    /// Some factor above 1: the norm grows without bound.
    Exploding,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NormPrediction {
    pub value: f64,
    pub limit: LimitRegime,
}

/// Predicted `‖∂L/∂S^l‖` for `k` identity spiking-basic blocks transmitting a
/// train with firing rate `phi` over `n` neurons and `t` steps, when every
/// element of `∂L/∂O^{l+k−1}` equals `upstream`.
pub fn oracle_grad_norm(
    phi: f64,
    k: usize,
    surrogate: Surrogate,
    v_threshold: f64,
    n: usize,
    t: usize,
    upstream: f64,
) -> NormPrediction {
    let one = surrogate.derivative(1.0 - v_threshold);
    let zero = surrogate.derivative(0.0 - v_threshold);
    let nt = (n * t) as f64;
    let k2 = 2 * k as i32;
    let value =
        upstream.abs() * (nt * phi * one.powi(k2) + nt * (1.0 - phi) * zero.powi(k2)).sqrt();
    const EPS: f64 = 1e-12;
    let is_one = |v: f64| (v - 1.0).abs() <= EPS;
    let limit = if one > 1.0 + EPS || zero > 1.0 + EPS {
        LimitRegime::Exploding
    } else if is_one(one) && is_one(zero) {
        LimitRegime::AllElements
    } else if is_one(one) {
        LimitRegime::SpikingElements
    } else if is_one(zero) {
        LimitRegime::SilentElements
    } else {
        LimitRegime::Vanishing
    };
    NormPrediction { value, limit }
}

/// Relative error of `got` against `want`; absolute error when `want` is 0.
pub fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

/// Random binary tensor with `P(1) = rate`.
pub fn random_spikes(shape: &[usize], rate: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Zero-initialized headless chain.
pub fn identity_chain(
    kind: BlockKind,
    width: usize,
    depth: usize,
    neuron: NeuronSpec,
    timesteps: usize,
    seed: u64,
) -> Result<Network> {
    let mut net = Network::build(
        NetworkSpec::chain(kind, width, depth, neuron, timesteps)?,
        seed,
    )?;
    net.zero_init()?;
    Ok(net)
}

/// Largest relative error between the isolated elementwise gradients at the
/// chain input and the spiking-basic product oracle, using each element's
/// recorded spike path.
pub fn spiking_product_error(probes: &[BlockProbe], surrogate: Surrogate, v_threshold: f64) -> f64 {
    let Some(first) = probes.first() else {
        return 0.0;
    };
    let mut worst: f64 = 0.0;
    let mut path = vec![0.0; probes.len()];
    for (j, &got) in first.input_grad.data().iter().enumerate() {
        for (p, probe) in path.iter_mut().zip(probes) {
            *p = probe.input.data()[j];
        }
        worst = worst.max(rel_err(
            got,
            oracle_grad_product_spiking(surrogate, v_threshold, &path),
        ));
    }
    worst
}

/// Largest relative error between each block's isolated `‖∂L/∂S^l‖` and the
/// norm oracle with `k = depth − l` and `Φ` measured on `S^l`.
pub fn grad_norm_error(
    probes: &[BlockProbe],
    surrogate: Surrogate,
    v_threshold: f64,
) -> Result<f64> {
    let depth = probes.len();
    let mut worst: f64 = 0.0;
    for (l, p) in probes.iter().enumerate() {
        let phi = firing_rate(&p.input)?;
        let want = oracle_grad_norm(
            phi,
            depth - l,
            surrogate,
            v_threshold,
            p.input.numel(),
            1,
            1.0,
        )
        .value;
        worst = worst.max(rel_err(p.input_grad.norm(), want));
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleCheckConfig {
    pub instances: usize,
    pub seed: u64,
    /// Run the chains with `V_th` raised above 1 while the oracles keep the
    /// nominal threshold, which breaks the identity condition.
    pub force_failure: bool,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 0,
            force_failure: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub seed: u64,
    pub force_failure: bool,
    pub suites: Vec<SuiteReport>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }
}

pub const PRODUCT_TOLERANCE: f64 = 1e-10;
pub const NORM_TOLERANCE: f64 = 0.05;

/// Compares all three oracles against AD on random small identity chains.
pub fn oracle_check(cfg: &OracleCheckConfig) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut spiking = SuiteReport {
        name: "spiking-product",
        instances: cfg.instances,
        tolerance: PRODUCT_TOLERANCE,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };
    let mut sew = SuiteReport {
        name: "sew-product",
        ..spiking.clone()
    };
    let mut norm = SuiteReport {
        name: "grad-norm",
        tolerance: NORM_TOLERANCE,
        ..spiking.clone()
    };
    for i in 0..cfg.instances {
        let depth = rng.gen_range(1..=8);
        let width = rng.gen_range(2..=8);
        let t = rng.gen_range(1..=4);
        let b = rng.gen_range(1..=3);
        let alpha = [2.0, 3.0][rng.gen_range(0..2)];
        let v_th: f64 = rng.gen_range(0.25..=1.0);
        let surrogate = Surrogate::ArcTan { alpha };
        let nominal = NeuronSpec {
            kind: NeuronKind::IF,
            v_threshold: v_th,
            surrogate,
            ..NeuronSpec::default()
        };
        let neuron = if cfg.force_failure {
            NeuronSpec {
                v_threshold: v_th + 0.5,
                ..nominal
            }
        } else {
            nominal
        };
        let x = random_spikes(&[t, b, width], rng.gen_range(0.1..=0.9), &mut rng);
        let seed = rng.gen();
        let label = format!("instance {i}: depth {depth}, width {width}, T {t}, B {b}, alpha {alpha}, V_th {v_th:.4}");

        let net = identity_chain(BlockKind::SpikingBasic, width, depth, neuron, t, seed)?;
        let probes = probe_isolated(&net, &x)?;
        let e = spiking_product_error(&probes, surrogate, v_th);
        record(&mut spiking, e, &label);
        let e = grad_norm_error(&probes, surrogate, v_th)?;
        record(&mut norm, e, &label);

        let g = [ElementWise::Add, ElementWise::And, ElementWise::IAnd][rng.gen_range(0..3)];
        let net = identity_chain(BlockKind::Sew(g), width, depth, neuron, t, seed)?;
        let probes = probe_isolated(&net, &x)?;
        let want = oracle_grad_product_sew(g).powi(depth as i32);
        let e = probes[0]
            .input_grad
            .data()
            .iter()
            .map(|&v| rel_err(v, want))
            .fold(0.0, f64::max);
        record(&mut sew, e, &format!("{label}, g {g}"));
    }
    Ok(OracleReport {
        seed: cfg.seed,
        force_failure: cfg.force_failure,
        suites: vec![spiking, sew, norm],
    })
}

fn record(suite: &mut SuiteReport, err: f64, label: &str) {
    suite.max_rel_err = suite.max_rel_err.max(err);
    if !(err <= suite.tolerance) {
        suite
            .failures
            .push(format!("{label}: relative error {err:.3e}"));
    }
}

/// A headless chain of identical dense blocks driven by random spike trains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChainConfig {
    pub kind: BlockKind,
    pub depth: usize,
    pub width: usize,
    pub timesteps: usize,
    pub batch_size: usize,
    /// Firing rate of the random input trains.
    pub input_rate: f64,
    pub zero_init: bool,
    pub seed: u64,
    pub neuron: NeuronSpec,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            kind: BlockKind::SpikingBasic,
            depth: 32,
            width: 32,
            timesteps: 4,
            batch_size: 16,
            input_rate: 0.5,
            zero_init: false,
            seed: 0,
            neuron: NeuronSpec::default(),
        }
    }
}

impl ChainConfig {
    /// Chain keys; the neuron keys of [`NeuronSpec::KEYS`] are read as well.
    pub const KEYS: [&'static str; 8] = [
        "block",
        "depth",
        "width",
        "T",
        "batch_size",
        "input_rate",
        "zero_init",
        "seed",
    ];

    pub fn from_kv(cfg: &KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let c = Self {
            kind: match cfg.get_str("block") {
                Some(s) => s
                    .parse()
                    .map_err(|e: String| ConfigError::new("block", e))?,
                None => d.kind,
            },
            depth: cfg.get_or("depth", d.depth)?,
            width: cfg.get_or("width", d.width)?,
            timesteps: cfg.get_or("T", d.timesteps)?,
            batch_size: cfg.get_or("batch_size", d.batch_size)?,
            input_rate: cfg.get_or("input_rate", d.input_rate)?,
            zero_init: cfg.get_or("zero_init", d.zero_init)?,
            seed: cfg.get_or("seed", d.seed)?,
            neuron: NeuronSpec::from_kv(cfg)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (k, v) in [
            ("depth", self.depth),
            ("width", self.width),
            ("T", self.timesteps),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(ConfigError::new(k, "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.input_rate) {
            return Err(ConfigError::new("input_rate", "must lie in [0, 1]"));
        }
        if self.zero_init && self.kind == BlockKind::Plain {
            return Err(ConfigError::new(
                "zero_init",
                "plain blocks have no identity configuration",
            ));
        }
        if self.zero_init
            && self.kind == BlockKind::Sew(ElementWise::And)
            && self.neuron.kind != NeuronKind::IF
        {
            return Err(ConfigError::new(
                "neuron",
                "zero-initialized SEW-AND needs IF neurons",
            ));
        }
        Ok(())
    }

    /// The network (seeded by `seed`) and a `[T, B, width]` input drawn from `seed + 1`.
    pub fn build(&self) -> Result<(Network, Tensor)> {
        let spec = NetworkSpec::chain(
            self.kind,
            self.width,
            self.depth,
            self.neuron,
            self.timesteps,
        )?;
        let mut net = Network::build(spec, self.seed)?;
        if self.zero_init {
            net.zero_init()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1));
        let x = random_spikes(
            &[self.timesteps, self.batch_size, self.width],
            self.input_rate,
            &mut rng,
        );
        Ok((net, x))
    }
}

/// Empirical `‖∂L/∂S^l‖` of one block next to its closed-form prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OracleComparison {
    pub block_index: usize,
    /// Blocks from `S^l` to the chain output.
    pub k: usize,
    /// Firing rate of `S^l`.
    pub phi: f64,
    pub empirical: f64,
    pub predicted: f64,
    pub rel_err: f64,
    /// Limit of the spiking-basic norm formula; absent for SEW chains.
    pub limit: Option<LimitRegime>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradTraceReport {
    pub block: String,
    pub depth: usize,
    pub zero_init: bool,
    pub isolated: bool,
    pub surrogate: Surrogate,
    pub v_threshold: f64,
    pub norms: Vec<f64>,
    pub ratio: f64,
    pub spread: f64,
    pub regime: Regime,
    /// Present when the chain satisfies the oracle's identity assumption.
    pub oracle: Option<Vec<OracleComparison>>,
    pub max_oracle_rel_err: Option<f64>,
    pub note: String,
}

/// Gradient trace of a chain under a sum-of-outputs loss, with oracle
/// comparison when every block is an identity map. With `isolate`, time is
/// folded into the batch so only the same-time block-product term remains.
pub fn run_gradtrace(cfg: &ChainConfig, isolate: bool) -> Result<(GradientTrace, GradTraceReport)> {
    let (net, x) = cfg.build()?;
    let probes = if isolate {
        probe_isolated(&net, &x)?
    } else {
        probe_blocks(&net, &x, TraceLoss::SumOutputs)?
    };
    let trace = GradientTrace::from_probes(&probes);
    let (oracle, note) = match (cfg.zero_init, cfg.kind) {
        (false, _) => (
            None,
            "no oracle: blocks are not identity-configured (zero_init = false)".to_string(),
        ),
        (true, BlockKind::Sew(g)) => {
            let rows = probes
                .iter()
                .enumerate()
                .map(|(l, p)| {
                    let k = probes.len() - l;
                    // Each output element receives upstream gradient 1.
                    let predicted =
                        oracle_grad_product_sew(g).powi(k as i32) * (p.input.numel() as f64).sqrt();
                    Ok(OracleComparison {
                        block_index: l,
                        k,
                        phi: firing_rate(&p.input)?,
                        empirical: p.input_grad.norm(),
                        predicted,
                        rel_err: rel_err(p.input_grad.norm(), predicted),
                        limit: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (
                Some(rows),
                "SEW identity chain: every block factor is 1".to_string(),
            )
        }
        (true, BlockKind::SpikingBasic) if isolate => {
            let s = cfg.neuron.surrogate;
            let v_th = cfg.neuron.v_threshold;
            let rows = probes
                .iter()
                .enumerate()
                .map(|(l, p)| {
                    let k = probes.len() - l;
                    let phi = firing_rate(&p.input)?;
                    let pred = oracle_grad_norm(phi, k, s, v_th, p.input.numel(), 1, 1.0);
                    Ok(OracleComparison {
                        block_index: l,
                        k,
                        phi,
                        empirical: p.input_grad.norm(),
                        predicted: pred.value,
                        rel_err: rel_err(p.input_grad.norm(), pred.value),
                        limit: Some(pred.limit),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (
                Some(rows),
                "spiking-basic identity chain: firing-rate-weighted norm formula".to_string(),
            )
        }
        (true, _) => (
            None,
            "no oracle: the spiking-basic norm formula needs the isolating loss (isolate = true)"
                .to_string(),
        ),
    };
    let max_oracle_rel_err = oracle
        .as_ref()
        .map(|rows| rows.iter().map(|r| r.rel_err).fold(0.0, f64::max));
    let report = GradTraceReport {
        block: cfg.kind.to_string(),
        depth: cfg.depth,
        zero_init: cfg.zero_init,
        isolated: isolate,
        surrogate: cfg.neuron.surrogate,
        v_threshold: cfg.neuron.v_threshold,
        norms: trace.norms.clone(),
        ratio: trace.ratio(),
        spread: trace.spread(),
        regime: trace.regime(),
        oracle,
        max_oracle_rel_err,
        note,
    };
    Ok((trace, report))
}
