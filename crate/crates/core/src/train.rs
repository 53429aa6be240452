//! SGD-with-momentum training with cosine or step learning-rate schedules,
//! random temporal delete, and optional data-parallel batch sharding.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Graph};
use crate::data::FrameDataset;
use crate::error::{Error, Result};
use crate::kv::{ConfigError, KvConfig};
use crate::network::{ForwardOptions, Network};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scheduler {
    Cosine { t_max: usize },
    Step { t_step: usize, gamma: f64 },
}

/// Learning rate at `epoch` for base rate `lr`.
pub fn lr_at(scheduler: Scheduler, lr: f64, epoch: usize) -> f64 {
    match scheduler {
        Scheduler::Cosine { t_max } => {
            let phase = (epoch.min(t_max) as f64) / (t_max.max(1) as f64);
            lr * (1.0 + (PI * phase).cos()) / 2.0
        }
        Scheduler::Step { t_step, gamma } => lr * gamma.powi((epoch / t_step.max(1)) as i32),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub scheduler: Scheduler,
    /// Sequence length of the data and of evaluation.
    pub timesteps: usize,
    /// Frames kept per training sample by random temporal delete.
    pub t_train: usize,
    pub seed: u64,
    pub zero_init: bool,
    /// Reduce shard gradients in a fixed order.
    pub deterministic: bool,
    /// Batch shards processed concurrently; 1 disables sharding.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            epochs: 50,
            batch_size: 16,
            scheduler: Scheduler::Cosine { t_max: 50 },
            timesteps: 4,
            t_train: 4,
            seed: 0,
            zero_init: false,
            deterministic: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 14] = [
        "lr",
        "momentum",
        "epochs",
        "batch_size",
        "scheduler",
        "T_max",
        "T_step",
        "gamma",
        "T",
        "T_train",
        "seed",
        "zero_init",
        "deterministic",
        "threads",
    ];

    /// Reads the keys in [`TrainConfig::KEYS`]; absent keys take defaults.
    /// `scheduler` is `cosine` (with `T_max`, default `epochs`) or `step`
    /// (with `T_step` and `gamma`); `T_train` defaults to `T`.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let epochs = cfg.get_or("epochs", d.epochs)?;
        let scheduler = match cfg.get_str("scheduler").unwrap_or("cosine") {
            "cosine" => Scheduler::Cosine {
                t_max: cfg.get_or("T_max", epochs)?,
            },
            "step" => Scheduler::Step {
                t_step: cfg.require("T_step")?,
                gamma: cfg.require("gamma")?,
            },
            other => {
                return Err(ConfigError::new(
                    "scheduler",
                    format!("unknown scheduler `{other}` (expected cosine or step)"),
                ))
            }
        };
        let timesteps = cfg.get_or("T", d.timesteps)?;
        let c = Self {
            lr: cfg.get_or("lr", d.lr)?,
            momentum: cfg.get_or("momentum", d.momentum)?,
            epochs,
            batch_size: cfg.get_or("batch_size", d.batch_size)?,
            scheduler,
            timesteps,
            t_train: cfg.get_or("T_train", timesteps)?,
            seed: cfg.get_or("seed", d.seed)?,
            zero_init: cfg.get_or("zero_init", d.zero_init)?,
            deterministic: cfg.get_or("deterministic", d.deterministic)?,
            threads: cfg.get_or("threads", d.threads)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::new("lr", "must be a positive finite number"));
        }
        if !self.momentum.is_finite() || self.momentum < 0.0 {
            return Err(ConfigError::new(
                "momentum",
                "must be a non-negative finite number",
            ));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::new("batch_size", "must be at least 1"));
        }
        if self.timesteps == 0 {
            return Err(ConfigError::new("T", "must be at least 1"));
        }
        if self.t_train == 0 || self.t_train > self.timesteps {
            return Err(ConfigError::new(
                "T_train",
                format!("must satisfy 0 < T_train <= T = {}", self.timesteps),
            ));
        }
        if self.threads == 0 {
            return Err(ConfigError::new("threads", "must be at least 1"));
        }
        match self.scheduler {
            Scheduler::Cosine { t_max: 0 } => Err(ConfigError::new("T_max", "must be at least 1")),
            Scheduler::Step { t_step: 0, .. } => {
                Err(ConfigError::new("T_step", "must be at least 1"))
            }
            Scheduler::Step { gamma, .. } if !(gamma > 0.0 && gamma.is_finite()) => Err(
                ConfigError::new("gamma", "must be a positive finite number"),
            ),
            _ => Ok(()),
        }
    }
}

/// `v ← momentum·v + grad; p ← p − lr·v`. All gradients are checked before any
/// parameter changes, so a non-finite gradient leaves the model untouched.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    velocities: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocities.len() != params.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            detail: format!(
                "{} params, {} grads, {} velocities",
                params.len(),
                grads.len(),
                velocities.len()
            ),
        });
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocities.iter()) {
        if g.len() != p.value.numel() || v.len() != p.value.numel() {
            return Err(Error::Shape {
                op: "sgd_step",
                detail: format!("parameter `{}` has {} elements", p.name, p.value.numel()),
            });
        }
        if let Some((index, &value)) = g.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: p.name.clone(),
                index,
                value,
            });
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocities.iter_mut()) {
        for ((w, gi), vi) in p.value.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

/// Sorted indices of a uniformly chosen order-preserving subsequence of
/// length `t_train` out of `t` frames.
pub fn temporal_delete_indices<R: Rng + ?Sized>(
    t: usize,
    t_train: usize,
    rng: &mut R,
) -> Vec<usize> {
    assert!(t_train <= t, "T_train must not exceed T");
    if t_train == t {
        return (0..t).collect();
    }
    let mut idx = rand::seq::index::sample(rng, t, t_train).into_vec();
    idx.sort_unstable();
    idx
}

/// Keeps `t_train` of the frames of `seq`, in their original order.
pub fn random_temporal_delete<T: Clone, R: Rng + ?Sized>(
    seq: &[T],
    t_train: usize,
    rng: &mut R,
) -> Vec<T> {
    temporal_delete_indices(seq.len(), t_train, rng)
        .into_iter()
        .map(|i| seq[i].clone())
        .collect()
}

/// Drops frames independently per sample of a `[T, B, ...]` batch, giving `[T_train, B, ...]`.
pub fn delete_frames<R: Rng + ?Sized>(x: &Tensor, t_train: usize, rng: &mut R) -> Result<Tensor> {
    let shape = x.shape();
    let (t, b) = (shape[0], shape[1]);
    if t_train == t {
        return Ok(x.clone());
    }
    let frame: usize = shape[2..].iter().product();
    let mut data = vec![0.0; t_train * b * frame];
    for bi in 0..b {
        for (k, src_t) in temporal_delete_indices(t, t_train, rng)
            .into_iter()
            .enumerate()
        {
            data[(k * b + bi) * frame..][..frame]
                .copy_from_slice(&x.data()[(src_t * b + bi) * frame..][..frame]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[0] = t_train;
    Tensor::new(out_shape, data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

impl TrainRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,train_acc,test_acc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.test_acc
        )
    }
}

/// Writes `records` as CSV with a header.
pub fn write_metrics_csv(mut w: impl Write, records: &[TrainRecord]) -> std::io::Result<()> {
    writeln!(w, "{}", TrainRecord::CSV_HEADER)?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Optimizer state carried across epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub velocities: Vec<Vec<f64>>,
    pub history: Vec<TrainRecord>,
}

impl TrainState {
    pub fn new(net: &Network) -> Self {
        Self {
            epoch: 0,
            loss: f64::NAN,
            train_acc: 0.0,
            test_acc: 0.0,
            velocities: net
                .params
                .iter()
                .map(|p| vec![0.0; p.value.numel()])
                .collect(),
            history: Vec::new(),
        }
    }
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

struct ShardResult {
    loss: f64,
    correct: usize,
    grads: Vec<Vec<f64>>,
    bn_updates: Vec<(usize, BatchStats)>,
}

fn shard_pass(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<ShardResult> {
    let mut g = Graph::new();
    let out = net.forward(&mut g, x, ForwardOptions::train(), Some(rng))?;
    let correct = predictions(g.value(out.output))
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    let loss = g.cross_entropy(out.output, labels)?;
    let loss_value = g.value(loss).item().expect("scalar loss");
    g.backward(loss)?;
    Ok(ShardResult {
        loss: loss_value,
        correct,
        grads: net.params.collect_grads(&g, &out.params),
        bn_updates: out.bn_updates,
    })
}

fn combine_bn(parts: &[(f64, Vec<(usize, BatchStats)>)]) -> Vec<(usize, BatchStats)> {
    let Some((_, first)) = parts.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(k, (idx, stats))| {
            let mut mean = vec![0.0; stats.mean.len()];
            let mut var = vec![0.0; stats.var.len()];
            for (w, ups) in parts {
                for (m, v) in mean.iter_mut().zip(&ups[k].1.mean) {
                    *m += w * v;
                }
                for (m, v) in var.iter_mut().zip(&ups[k].1.var) {
                    *m += w * v;
                }
            }
            (*idx, BatchStats { mean, var })
        })
        .collect()
}

/// One optimization step on a batch; returns (mean loss, correct count).
fn train_batch(
    net: &mut Network,
    state: &mut TrainState,
    cfg: &TrainConfig,
    lr: f64,
    x: &Tensor,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let b = labels.len();
    let shards = cfg.threads.min(b).max(1);
    let (loss, correct, grads, bn) = if shards == 1 {
        let r = shard_pass(net, x, labels, rng)?;
        (r.loss, r.correct, r.grads, r.bn_updates)
    } else {
        let per = b.div_ceil(shards);
        let frame: usize = x.shape()[2..].iter().product();
        let t = x.shape()[0];
        let mut jobs = Vec::new();
        for (k, chunk) in labels.chunks(per).enumerate() {
            let start = k * per;
            let mut data = Vec::with_capacity(t * chunk.len() * frame);
            for ti in 0..t {
                data.extend_from_slice(
                    &x.data()[(ti * b + start) * frame..][..chunk.len() * frame],
                );
            }
            let mut shape = x.shape().to_vec();
            shape[1] = chunk.len();
            jobs.push((
                k,
                Tensor::new(shape, data)?,
                chunk.to_vec(),
                ChaCha8Rng::seed_from_u64(rng.gen()),
            ));
        }
        let net_ref: &Network = net;
        let (tx, rx) = mpsc::channel();
        std::thread::scope(|s| {
            for (k, xs, ls, mut r) in jobs {
                let tx = tx.clone();
                s.spawn(move || {
                    let res = shard_pass(net_ref, &xs, &ls, &mut r);
                    let _ = tx.send((k, ls.len(), res));
                });
            }
        });
        drop(tx);
        let mut results: Vec<(usize, usize, Result<ShardResult>)> = rx.into_iter().collect();
        if cfg.deterministic {
            results.sort_by_key(|r| r.0);
        }
        let mut loss = 0.0;
        let mut correct = 0;
        let mut grads: Vec<Vec<f64>> = net
            .params
            .iter()
            .map(|p| vec![0.0; p.value.numel()])
            .collect();
        let mut bn_parts = Vec::new();
        for (_, n, res) in results {
            let r = res?;
            let w = n as f64 / b as f64;
            loss += w * r.loss;
            correct += r.correct;
            for (acc, gr) in grads.iter_mut().zip(&r.grads) {
                for (a, v) in acc.iter_mut().zip(gr) {
                    *a += w * v;
                }
            }
            bn_parts.push((w, r.bn_updates));
        }
        (loss, correct, grads, combine_bn(&bn_parts))
    };
    sgd_step(
        &mut net.params,
        &grads,
        &mut state.velocities,
        lr,
        cfg.momentum,
    )?;
    net.apply_bn_updates(&bn);
    Ok((loss, correct))
}

/// Accuracy of `net` in evaluation mode over the full sequence length.
pub fn evaluate(net: &Network, ds: &FrameDataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let order: Vec<usize> = (0..ds.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch(chunk);
        let mut g = Graph::new();
        let out = net.forward(&mut g, &x, ForwardOptions::eval(), None)?;
        correct += predictions(g.value(out.output))
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn divergence(err: Error, epoch: usize) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Runs one epoch and appends its record to `state.history`.
pub fn train_epoch(
    net: &mut Network,
    train_set: &FrameDataset,
    test_set: &FrameDataset,
    cfg: &TrainConfig,
    state: &mut TrainState,
    rng: &mut ChaCha8Rng,
) -> Result<TrainRecord> {
    let epoch = state.epoch;
    let lr = lr_at(cfg.scheduler, cfg.lr, epoch);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(rng);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let (x, labels) = train_set.batch(chunk);
        let x = delete_frames(&x, cfg.t_train, rng)?;
        let (loss, c) =
            train_batch(net, state, cfg, lr, &x, &labels, rng).map_err(|e| divergence(e, epoch))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        loss_sum += loss * labels.len() as f64;
        correct += c;
    }
    let n = train_set.len().max(1) as f64;
    let record = TrainRecord {
        epoch,
        lr,
        train_loss: loss_sum / n,
        train_acc: correct as f64 / n,
        test_acc: evaluate(net, test_set, cfg.batch_size).map_err(|e| divergence(e, epoch))?,
    };
    state.epoch += 1;
    state.loss = record.train_loss;
    state.train_acc = record.train_acc;
    state.test_acc = record.test_acc;
    state.history.push(record);
    Ok(record)
}

/// Trains for `cfg.epochs` epochs, calling `on_epoch` after each. On
/// divergence the records seen so far have already been passed to `on_epoch`.
pub fn train(
    net: &mut Network,
    train_set: &FrameDataset,
    test_set: &FrameDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainRecord),
) -> Result<TrainState> {
    cfg.validate()?;
    if train_set.timesteps() != cfg.timesteps {
        return Err(Error::Shape {
            op: "train",
            detail: format!(
                "dataset has T = {}, config T = {}",
                train_set.timesteps(),
                cfg.timesteps
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_7EA1);
    let mut state = TrainState::new(net);
    for _ in 0..cfg.epochs {
        let record = train_epoch(net, train_set, test_set, cfg, &mut state, &mut rng)?;
        on_epoch(&record);
    }
    Ok(state)
}
