use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use sewnet::analysis::{
    oracle_check as run_oracle_check, run_gradtrace, trace_firing_rates, ChainConfig,
    OracleCheckConfig,
};
use sewnet::block::ElementWise;
use sewnet::data::{generate_synthetic, load_frames, FrameDataset, LoadError, SyntheticSpec};
use sewnet::kv::{ConfigError, KvConfig};
use sewnet::network::{LayerSpec, Network, NetworkSpec};
use sewnet::neuron::NeuronSpec;
use sewnet::train::{train as run_train, TrainConfig, TrainRecord};
use sewnet::Error;

use crate::Common;

/// Gradtrace oracle comparisons must agree to this relative error.
const ORACLE_TOLERANCE: f64 = 1e-6;

#[derive(Debug)]
pub enum CliError {
    /// Divergence, non-finite values or an oracle tolerance breach.
    Numeric(String),
    Config(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Numeric(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Numeric(m) | CliError::Config(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_)
            | Error::Arch(_)
            | Error::Parameter(_)
            | Error::Unsupported(_)
            | Error::Shape { .. } => CliError::Config(msg),
            Error::Load(_) | Error::Io(_) => CliError::Io(msg),
            Error::NonFinite { .. }
            | Error::NonFiniteGradient { .. }
            | Error::Diverged { .. }
            | Error::Domain(_)
            | Error::StaleGraph
            | Error::NotScalar(_) => CliError::Numeric(msg),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        CliError::Io(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(what: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{what} `{}`: {e}", path.display()))
}

/// Reads `--config` (if any), applies the flag overrides and rejects unknown keys.
fn load_config(c: &Common, allowed: &[&[&str]]) -> Result<KvConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| io_err("cannot read config", path, e))?;
            KvConfig::parse(&text)?
        }
        None => KvConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.set("seed", seed);
    }
    if let Some(arch) = &c.arch {
        cfg.set("arch", arch);
    }
    let keys: Vec<&str> = allowed.iter().flat_map(|k| k.iter().copied()).collect();
    cfg.reject_unknown(&keys)?;
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err("cannot create output directory", dir, e))
}

fn create_file(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| io_err("cannot create", &path, e))?;
    Ok((path, BufWriter::new(file)))
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
    let (path, mut w) = create_file(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| CliError::Io(format!("cannot write `{}`: {e}", path.display())))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| io_err("cannot write", &path, e))?;
    Ok(path)
}

fn write_csv(
    dir: &Path,
    name: &str,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<PathBuf> {
    let (path, mut w) = create_file(dir, name)?;
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| io_err("cannot write", &path, e))?;
    Ok(path)
}

/// Loads the dataset named by `key`, reporting a missing key or file as a
/// configuration error naming the key.
fn dataset(cfg: &KvConfig, key: &str) -> Result<FrameDataset> {
    let path = cfg.require_str(key)?;
    if !Path::new(path).is_file() {
        return Err(ConfigError::new(key, format!("dataset file `{path}` does not exist")).into());
    }
    Ok(load_frames(path)?)
}

fn network_for(cfg: &KvConfig, data: &FrameDataset, seed: u64, zero_init: bool) -> Result<Network> {
    let arch = cfg.require_str("arch")?;
    let neuron = NeuronSpec::from_kv(cfg)?;
    let g: ElementWise = cfg.get_or("g", ElementWise::Add)?;
    let spec = NetworkSpec::from_arch(arch, &data.frame_shape(), data.timesteps(), neuron, g)?;
    if let Some(classes) = spec.classes() {
        if classes != data.classes() {
            return Err(ConfigError::new(
                "arch",
                format!(
                    "classifier has {classes} outputs but the dataset has {} classes",
                    data.classes()
                ),
            )
            .into());
        }
    }
    let mut net = Network::build(spec, seed)?;
    if zero_init {
        net.zero_init()?;
    }
    Ok(net)
}

fn block_summary(net: &Network) -> Vec<serde_json::Value> {
    net.blocks()
        .zip(net.block_param_counts())
        .enumerate()
        .map(|(i, (b, params))| {
            json!({
                "block_index": i,
                "kind": b.spec.kind.to_string(),
                "downsample": b.spec.downsample,
                "params": params,
            })
        })
        .collect()
}

pub fn train(c: &Common) -> Result<()> {
    let cfg = load_config(
        c,
        &[
            &TrainConfig::KEYS,
            &NeuronSpec::KEYS,
            &["arch", "train_data", "test_data", "g"],
        ],
    )?;
    let mut tc = TrainConfig::from_kv(&cfg)?;
    if c.deterministic {
        tc.deterministic = true;
    }
    let train_set = dataset(&cfg, "train_data")?;
    let test_set = dataset(&cfg, "test_data")?;
    if train_set.timesteps() != tc.timesteps {
        return Err(ConfigError::new(
            "T",
            format!(
                "config T = {} but `train_data` has T = {}",
                tc.timesteps,
                train_set.timesteps()
            ),
        )
        .into());
    }
    if test_set.frame_shape() != train_set.frame_shape()
        || test_set.timesteps() != train_set.timesteps()
    {
        return Err(
            ConfigError::new("test_data", "frame shape or T differs from `train_data`").into(),
        );
    }
    let mut net = network_for(&cfg, &train_set, tc.seed, tc.zero_init)?;

    create_out(&c.out)?;
    let (csv_path, mut csv) = create_file(&c.out, "metrics.csv")?;
    let mut csv_error = writeln!(csv, "{}", TrainRecord::CSV_HEADER)
        .and_then(|_| csv.flush())
        .err();
    let result = run_train(&mut net, &train_set, &test_set, &tc, |r| {
        println!(
            "epoch {:>4}  lr {:.5}  loss {:.4}  train {:.4}  test {:.4}",
            r.epoch, r.lr, r.train_loss, r.train_acc, r.test_acc
        );
        if csv_error.is_none() {
            csv_error = writeln!(csv, "{}", r.csv_row())
                .and_then(|_| csv.flush())
                .err();
        }
    });
    if let Some(e) = csv_error {
        return Err(io_err("cannot write", &csv_path, e));
    }
    let state = result?;
    let summary = json!({
        "arch": net.spec.arch,
        "seed": tc.seed,
        "epochs": state.epoch,
        "param_count": net.param_count(),
        "blocks": block_summary(&net),
        "final": {
            "train_loss": state.loss,
            "train_acc": state.train_acc,
            "test_acc": state.test_acc,
        },
    });
    let path = write_json(&c.out, "summary.json", &summary)?;
    println!("wrote {} and {}", csv_path.display(), path.display());
    Ok(())
}

pub fn gradtrace(c: &Common) -> Result<()> {
    let cfg = load_config(c, &[&ChainConfig::KEYS, &NeuronSpec::KEYS, &["isolate"]])?;
    let chain = ChainConfig::from_kv(&cfg)?;
    let isolate = cfg.get_or("isolate", true)?;
    let (trace, report) = run_gradtrace(&chain, isolate)?;
    create_out(&c.out)?;
    let csv = write_csv(&c.out, "gradtrace.csv", |w| trace.write_csv(w))?;
    let value = serde_json::to_value(&report).map_err(|e| CliError::Io(e.to_string()))?;
    let json_path = write_json(&c.out, "gradtrace.json", &value)?;
    println!(
        "{} chain, depth {}: ratio {:.4e}, spread {:.4e}, regime {}",
        report.block, report.depth, report.ratio, report.spread, report.regime
    );
    match report.max_oracle_rel_err {
        Some(e) => println!("oracle max relative error {e:.3e}"),
        None => println!("{}", report.note),
    }
    println!("wrote {} and {}", csv.display(), json_path.display());
    match report.max_oracle_rel_err {
        Some(e) if !(e <= ORACLE_TOLERANCE) => Err(CliError::Numeric(format!(
            "oracle relative error {e:.3e} exceeds {ORACLE_TOLERANCE:e}"
        ))),
        _ => Ok(()),
    }
}

pub fn firetrace(c: &Common) -> Result<()> {
    let cfg = load_config(
        c,
        &[
            &ChainConfig::KEYS,
            &NeuronSpec::KEYS,
            &["arch", "data", "g"],
        ],
    )?;
    let chain = ChainConfig::from_kv(&cfg)?;
    let (net, x) = if cfg.contains("arch") {
        let data = dataset(&cfg, "data")?;
        let n = chain.batch_size.min(data.len());
        if n == 0 {
            return Err(ConfigError::new("data", "dataset is empty").into());
        }
        let net = network_for(&cfg, &data, chain.seed, chain.zero_init)?;
        let (x, _) = data.batch(&(0..n).collect::<Vec<_>>());
        (net, x)
    } else {
        chain.build()?
    };
    let trace = trace_firing_rates(&net, &x)?;
    create_out(&c.out)?;
    let csv = write_csv(&c.out, "firetrace.csv", |w| trace.write_csv(w))?;
    let report = json!({
        "arch": net.spec.arch,
        "zero_init": chain.zero_init,
        "blocks": trace.blocks,
    });
    let json_path = write_json(&c.out, "firetrace.json", &report)?;
    for b in &trace.blocks {
        println!(
            "block {:>3}{}  A-rate {:.4}  O-rate {:.4}",
            b.block_index,
            if b.is_downsample { " (down)" } else { "" },
            b.a_rate,
            b.o_rate
        );
    }
    println!("wrote {} and {}", csv.display(), json_path.display());
    Ok(())
}

pub fn oracle_check(c: &Common) -> Result<()> {
    let cfg = load_config(c, &[&["instances", "seed"]])?;
    let d = OracleCheckConfig::default();
    let oc = OracleCheckConfig {
        instances: cfg.get_or("instances", d.instances)?,
        seed: cfg.get_or("seed", d.seed)?,
        force_failure: c.force_failure,
    };
    if oc.instances == 0 {
        return Err(ConfigError::new("instances", "must be at least 1").into());
    }
    let report = run_oracle_check(&oc)?;
    create_out(&c.out)?;
    let value = serde_json::to_value(&report).map_err(|e| CliError::Io(e.to_string()))?;
    let path = write_json(&c.out, "oracle_report.json", &value)?;
    for s in &report.suites {
        println!(
            "{:<16} {} instances  max rel err {:.3e}  tolerance {:e}  {}",
            s.name,
            s.instances,
            s.max_rel_err,
            s.tolerance,
            if s.passed() { "ok" } else { "BREACH" }
        );
    }
    println!("wrote {}", path.display());
    if report.passed() {
        return Ok(());
    }
    for s in report.suites.iter().filter(|s| !s.passed()) {
        for f in &s.failures {
            eprintln!("{}: {f}", s.name);
        }
    }
    let breached: Vec<&str> = report
        .suites
        .iter()
        .filter(|s| !s.passed())
        .map(|s| s.name)
        .collect();
    Err(CliError::Numeric(format!(
        "oracle tolerance exceeded in {}",
        breached.join(", ")
    )))
}

pub fn gen_data(c: &Common) -> Result<()> {
    let cfg = load_config(c, &[&SyntheticSpec::KEYS, &["test_samples"]])?;
    let spec = SyntheticSpec::from_kv(&cfg)?;
    let test_samples: usize = cfg.get_or("test_samples", 0)?;
    let all = generate_synthetic(&SyntheticSpec {
        samples: spec.samples + test_samples,
        ..spec
    })?;
    let (train_set, test_set) = all.split_at(spec.samples);
    create_out(&c.out)?;
    let path = c.out.join("train.sewf");
    train_set
        .save(&path)
        .map_err(|e| CliError::Io(format!("cannot write `{}`: {e}", path.display())))?;
    println!("wrote {} ({} samples)", path.display(), train_set.len());
    if test_samples > 0 {
        let path = c.out.join("test.sewf");
        test_set
            .save(&path)
            .map_err(|e| CliError::Io(format!("cannot write `{}`: {e}", path.display())))?;
        println!("wrote {} ({} samples)", path.display(), test_set.len());
    }
    Ok(())
}

fn describe(l: &LayerSpec) -> String {
    match l {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => format!("conv {in_channels}->{out_channels} k{kernel} s{stride}"),
        LayerSpec::Linear { fan_in, out } => format!("linear {fan_in}->{out}"),
        LayerSpec::BatchNorm { channels } => format!("batch-norm {channels}"),
        LayerSpec::Neuron(n) => format!("{} neuron", n.kind),
        LayerSpec::MaxPool { kernel, stride } => format!("max-pool k{kernel} s{stride}"),
        LayerSpec::AvgPool { kernel, stride } => format!("avg-pool k{kernel} s{stride}"),
        LayerSpec::Dropout { p } => format!("dropout p={p}"),
        LayerSpec::Block(b) => format!(
            "{} block {}->{}{}",
            b.kind,
            b.in_width,
            b.out_width,
            if b.downsample {
                format!(" downsample s{}", b.stride)
            } else {
                String::new()
            }
        ),
    }
}

fn parse_shape(cfg: &KvConfig) -> Result<Vec<usize>> {
    let Some(text) = cfg.get_str("input") else {
        return Ok(vec![2, 8, 8]);
    };
    let dims: std::result::Result<Vec<usize>, _> =
        text.split(',').map(|d| d.trim().parse::<usize>()).collect();
    match dims {
        Ok(d) if !d.is_empty() && d.iter().all(|&v| v > 0) => Ok(d),
        _ => Err(ConfigError::new(
            "input",
            format!("expected comma-separated positive dimensions, got `{text}`"),
        )
        .into()),
    }
}

pub fn arch_check(c: &Common) -> Result<()> {
    let cfg = load_config(
        c,
        &[&NeuronSpec::KEYS, &["arch", "input", "T", "g", "seed"]],
    )?;
    let arch = cfg.require_str("arch")?;
    let input = parse_shape(&cfg)?;
    let t: usize = cfg.get_or("T", 4)?;
    let neuron = NeuronSpec::from_kv(&cfg)?;
    let g: ElementWise = cfg.get_or("g", ElementWise::Add)?;
    let spec = NetworkSpec::from_arch(arch, &input, t, neuron, g)?;
    let net = Network::build(spec.clone(), cfg.get_or("seed", 0)?)?;
    let layers: Vec<serde_json::Value> = spec
        .layers
        .iter()
        .zip(&spec.shapes)
        .map(|(l, s)| json!({ "layer": describe(l), "output_shape": s }))
        .collect();
    let report = json!({
        "arch": spec.arch,
        "input": input,
        "classes": spec.classes(),
        "param_count": net.param_count(),
        "blocks": block_summary(&net),
        "layers": layers,
    });
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    // A closed stdout (e.g. piped into `head`) is not an error for a report.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    create_out(&c.out)?;
    write_json(&c.out, "arch.json", &report)?;
    Ok(())
}
