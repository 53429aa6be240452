//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Oracles are recomputed here from first principles rather than taken from
//! `sewnet::analysis`, so a bug in the library's oracle code cannot hide a bug
//! in the gradients it is compared against.

mod common;

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use common::*;
use sewnet::analysis::{
    probe_blocks, probe_isolated, random_spikes, BlockProbe, Regime, TraceLoss,
};
use sewnet::autodiff::Graph;
use sewnet::block::{BlockKind, ElementWise};
use sewnet::data::{generate_synthetic, FrameDataset, GeneratorKind, SyntheticSpec};
use sewnet::network::{ForwardOptions, Network, NetworkSpec};
use sewnet::neuron::{NeuronKind, NeuronSpec, Surrogate};
use sewnet::train::{
    delete_frames, evaluate, predictions, temporal_delete_indices, train, Scheduler, TrainConfig,
};
use sewnet::{Error, Result, Tensor};

type Outcome = Result<(bool, String)>;
type Criterion = (&'static str, fn() -> Outcome);

/// `σ'(x)` written out independently of `Surrogate::derivative`.
fn sigma_prime(s: Surrogate, x: f64) -> f64 {
    match s {
        Surrogate::ArcTan { alpha } => alpha / 2.0 / (1.0 + (PI / 2.0 * alpha * x).powi(2)),
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

fn rel(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

fn neuron(surrogate: Surrogate, v_threshold: f64) -> NeuronSpec {
    NeuronSpec {
        surrogate,
        v_threshold,
        ..NeuronSpec::default()
    }
}

fn arctan(alpha: f64) -> Surrogate {
    Surrogate::ArcTan { alpha }
}

fn chain(
    kind: BlockKind,
    width: usize,
    depth: usize,
    n: NeuronSpec,
    t: usize,
    seed: u64,
    zero: bool,
) -> Result<Network> {
    let mut net = Network::build(NetworkSpec::chain(kind, width, depth, n, t)?, seed)?;
    if zero {
        net.zero_init()?;
    }
    Ok(net)
}

/// Block-wise `‖∂L/∂S^l‖` of an unfolded sum-of-outputs backward.
fn unfolded_norms(net: &Network, x: &Tensor) -> Result<Vec<f64>> {
    Ok(probe_blocks(net, x, TraceLoss::SumOutputs)?
        .iter()
        .map(|p| p.input_grad.norm())
        .collect())
}

fn norms(probes: &[BlockProbe]) -> Vec<f64> {
    probes.iter().map(|p| p.input_grad.norm()).collect()
}

/// Shallow-over-deep ratio and its trend flag, with thresholds restated here.
fn trend(norms: &[f64]) -> (f64, Regime) {
    let r = norms[0] / norms[norms.len() - 1];
    let regime = if !r.is_finite() || r > 4.0 {
        Regime::Exploding
    } else if r < 0.25 {
        Regime::Vanishing
    } else {
        Regime::Stable
    };
    (r, regime)
}

fn spread(norms: &[f64]) -> f64 {
    let max = norms.iter().cloned().fold(f64::MIN, f64::max);
    let min = norms.iter().cloned().fold(f64::MAX, f64::min);
    max / min
}

// ---------------------------------------------------------------------------

fn c1_autodiff() -> Outcome {
    let mut r = rng(101);
    let mut worst = CheckResult::default();
    let mut failed = Vec::new();
    for (name, case) in op_cases() {
        for i in 0..100 {
            let res = case(&mut r)?;
            if !res.passed() {
                failed.push(format!("{name}#{i}"));
            }
            worst = worst.merge(res);
        }
    }
    for (sname, s) in SURROGATES {
        for i in 0..100 {
            for (kind, res) in [
                ("spike", spike_case(s, &mut r)?),
                ("neuron", neuron_case(s, &mut r)?),
            ] {
                if !res.passed() {
                    failed.push(format!("{kind}/{sname}#{i}"));
                }
                worst = worst.merge(res);
            }
        }
        for i in 0..10 {
            let res = network_case(s, &mut r)?;
            if !res.passed() {
                failed.push(format!("network/{sname}#{i}"));
            }
            worst = worst.merge(res);
        }
    }
    let detail = format!(
        "{} op cases x100, spike+neuron x100 and network x10 per surrogate; \
         worst |ad−fd| / (1e-4·max(|ad|,|fd|) + 1e-8) = {:.3}; failures {:?}",
        op_cases().len(),
        worst.worst_ratio,
        failed
    );
    Ok((failed.is_empty(), detail))
}

fn c2_spiking_product() -> Outcome {
    let s = arctan(2.0);
    let (t, b, w) = (4, 8, 8);
    let mut r = rng(102);
    let mut worst: f64 = 0.0;
    let mut worst_last_step: f64 = 0.0;
    let mut forward_mismatch = 0;
    for k in [4, 8, 16, 32] {
        let net = chain(
            BlockKind::SpikingBasic,
            w,
            k,
            neuron(s, 1.0),
            t,
            k as u64,
            true,
        )?;
        let x = random_spikes(&[t, b, w], 0.5, &mut r);
        let folded = probe_isolated(&net, &x)?;
        for (j, &got) in folded[0].input_grad.data().iter().enumerate() {
            let want: f64 = folded
                .iter()
                .map(|p| sigma_prime(s, p.input.data()[j] - 1.0))
                .product();
            worst = worst.max(rel(got, want));
        }
        // Unfolded: the last time step has no later step to carry membrane
        // state into, so its gradient is the same block product.
        let unfolded = probe_blocks(&net, &x, TraceLoss::SumOutputs)?;
        let last = (t - 1) * b * w;
        for (j, &got) in unfolded[0].input_grad.data()[last..].iter().enumerate() {
            let want: f64 = unfolded
                .iter()
                .map(|p| sigma_prime(s, p.input.data()[last + j] - 1.0))
                .product();
            worst_last_step = worst_last_step.max(rel(got, want));
        }
        let fo = &folded[k - 1].output;
        let uo = unfolded[k - 1].output.reshape(fo.shape())?;
        if fo != &uo {
            forward_mismatch += 1;
        }
    }
    // Three-block chain on an all-silent input: every element's path is three zeros.
    let net = chain(BlockKind::SpikingBasic, 4, 3, neuron(s, 1.0), 2, 3, true)?;
    let probes = probe_isolated(&net, &Tensor::zeros(&[2, 2, 4]))?;
    let spot = probes[0].input_grad.data()[0];
    let factor = 1.0 / (1.0 + PI * PI);
    let decay_ok = (factor - 0.092).abs() < 5e-4
        && rel(spot, 7.79e-4) < 1e-3
        && rel(spot, factor.powi(3)) < 1e-10;
    let pass = worst <= 1e-10 && worst_last_step <= 1e-10 && forward_mismatch == 0 && decay_ok;
    Ok((
        pass,
        format!(
            "k∈{{4,8,16,32}} folded max rel {worst:.1e}, unfolded last-step max rel {worst_last_step:.1e}, \
             all-zero factor {factor:.4}, k=3 spot {spot:.4e}"
        ),
    ))
}

fn c3_sew_product() -> Outcome {
    let mut r = rng(103);
    let mut worst: f64 = 0.0;
    for g in [ElementWise::Add, ElementWise::IAnd, ElementWise::And] {
        for k in [1, 8, 32, 64] {
            let net = chain(
                BlockKind::Sew(g),
                6,
                k,
                NeuronSpec::default(),
                3,
                k as u64,
                true,
            )?;
            let x = random_spikes(&[3, 4, 6], 0.5, &mut r);
            for probes in [
                probe_isolated(&net, &x)?,
                probe_blocks(&net, &x, TraceLoss::SumOutputs)?,
            ] {
                for p in &probes {
                    for &v in p.input_grad.data() {
                        worst = worst.max((v - 1.0).abs());
                    }
                }
            }
        }
    }
    Ok((
        worst <= 1e-10,
        format!("ADD/IAND/AND, k∈{{1,8,32,64}}, folded and unfolded, every block: max |∂L/∂S − 1| = {worst:.1e}"),
    ))
}

fn c4_norm_formula() -> Outcome {
    let settings = [
        (arctan(2.0), 1.0),
        (arctan(2.0), 0.5),
        (arctan(3.0), 1.0),
        (arctan(3.0), 0.75),
        (Surrogate::Rectangular { width: 1.0 }, 0.4),
        (Surrogate::Constant1, 1.0),
    ];
    let mut r = rng(104);
    let mut worst: f64 = 0.0;
    for (s, v_th) in settings {
        for seed in 0..3 {
            let rate = r.gen_range(0.1..0.9);
            let depth = 16;
            let net = chain(
                BlockKind::SpikingBasic,
                16,
                depth,
                neuron(s, v_th),
                4,
                seed,
                true,
            )?;
            let x = random_spikes(&[4, 8, 16], rate, &mut r);
            let probes = probe_isolated(&net, &x)?;
            for (l, p) in probes.iter().enumerate() {
                let k = (depth - l) as i32;
                // Folded: N·T is the element count of one probe, each upstream gradient is 1.
                let nt = p.input.numel() as f64;
                let phi = p.input.sum() / nt;
                let want = (nt * phi * sigma_prime(s, 1.0 - v_th).powi(2 * k)
                    + nt * (1.0 - phi) * sigma_prime(s, -v_th).powi(2 * k))
                .sqrt();
                worst = worst.max(rel(p.input_grad.norm(), want));
            }
        }
    }
    Ok((
        worst <= 0.05,
        format!("6 (surrogate, V_th) settings x 3 seeds, k=1..16: max rel err {worst:.1e} (tolerance 5%)"),
    ))
}

fn c5_regimes() -> Outcome {
    let (t, b, w, depth) = (4, 16, 32, 32);
    let settings = [("a", 2.0, 1.0), ("b", 2.0, 0.5), ("c", 3.0, 1.0)];
    let mut ratios = [[0.0; 3]; 3];
    let mut flags = [[Regime::Stable; 3]; 3];
    let mut sew_spread: f64 = 0.0;
    let mut sew_spread_unfolded: f64 = 0.0;
    let mut info = Vec::new();
    for (si, (_, alpha, v_th)) in settings.iter().enumerate() {
        let n = neuron(arctan(*alpha), *v_th);
        let mut unfolded_ratios = Vec::new();
        for seed in 0..3u64 {
            let x = random_spikes(&[t, b, w], 0.5, &mut rng(500 + seed));
            let net = chain(BlockKind::SpikingBasic, w, depth, n, t, seed, false)?;
            let (ratio, flag) = trend(&norms(&probe_isolated(&net, &x)?));
            ratios[si][seed as usize] = ratio;
            flags[si][seed as usize] = flag;
            unfolded_ratios.push(trend(&unfolded_norms(&net, &x)?).0);
            for g in [ElementWise::Add, ElementWise::IAnd] {
                let net = chain(BlockKind::Sew(g), w, depth, n, t, seed, true)?;
                sew_spread = sew_spread.max(spread(&norms(&probe_isolated(&net, &x)?)));
                sew_spread_unfolded = sew_spread_unfolded.max(spread(&unfolded_norms(&net, &x)?));
            }
        }
        info.push(format!("{:.1e}", unfolded_ratios.iter().sum::<f64>() / 3.0));
    }
    let all = |si: usize, want: Regime| flags[si].iter().all(|f| *f == want);
    let stronger = (0..3).all(|i| ratios[1][i] < ratios[0][i]);
    let pass = all(0, Regime::Vanishing)
        && all(1, Regime::Vanishing)
        && stronger
        && all(2, Regime::Exploding)
        && sew_spread < 4.0
        && sew_spread_unfolded < 4.0;
    let fmt = |r: &[f64; 3]| {
        r.iter()
            .map(|v| format!("{v:.1e}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    Ok((
        pass,
        format!(
            "k=32 isolating-loss shallow/deep ratios: (a) {} {:?}, (b) {} {:?}, (c) {} {:?}; \
             zero-init SEW-ADD/IAND max spread {sew_spread:.3} (unfolded {sew_spread_unfolded:.3}); \
             [info] unfolded basic-chain mean ratios a/b/c = {}",
            fmt(&ratios[0]),
            flags[0][0],
            fmt(&ratios[1]),
            flags[1][0],
            fmt(&ratios[2]),
            flags[2][0],
            info.join("/")
        ),
    ))
}

/// `true` if every block's output equals its input bit for bit, in both modes.
fn blocks_are_identity(net: &Network, x: &Tensor, labels: Option<&[usize]>) -> Result<bool> {
    let loss = match labels {
        Some(l) => TraceLoss::CrossEntropy(l),
        None => TraceLoss::SumOutputs,
    };
    let probes = probe_blocks(net, x, loss)?;
    let train_ok = probes.iter().filter(|p| !p.downsample).all(|p| {
        p.input.is_binary()
            && p.input.sum() > 0.0
            && p.input.sum() < p.input.numel() as f64
            && p.output == p.input
    });
    let mut g = Graph::new();
    let out = net.forward(&mut g, x, ForwardOptions::eval(), None)?;
    let eval_ok = if net.spec.has_head {
        true
    } else {
        g.value(out.output).data() == x.data()
    };
    Ok(train_ok && eval_ok)
}

fn c6_identity() -> Outcome {
    let mut r = rng(106);
    let mut checked = Vec::new();
    let mut ok = true;
    // 8 steps x 125 samples x 8 features = 1000 spike trains of length 8.
    for g in [ElementWise::Add, ElementWise::IAnd, ElementWise::And] {
        let net = chain(BlockKind::Sew(g), 8, 6, NeuronSpec::default(), 8, 1, true)?;
        for rate in [0.05, 0.5, 0.95] {
            let x = random_spikes(&[8, 125, 8], rate, &mut r);
            ok &= blocks_are_identity(&net, &x, None)?;
        }
        checked.push(format!("dense-{g}"));
        // Conv blocks behind a stem: their inputs are the stem's spike trains.
        let arch = format!("c3k3s1-BN-IF-{{SEW Block (c3, {g})}}*3-SEW Block (c4, {g}, s2)-FC2");
        let spec = NetworkSpec::from_arch(&arch, &[2, 6, 6], 4, NeuronSpec::default(), g)?;
        let mut net = Network::build(spec, 2)?;
        net.zero_init()?;
        let x = rand_tensor(&mut r, &[4, 84, 2, 6, 6], -1.0, 3.0);
        let labels: Vec<usize> = (0..84).map(|i| i % 2).collect();
        ok &= blocks_are_identity(&net, &x, Some(&labels))?;
        checked.push(format!("conv-{g}"));
    }
    // LIF-output spiking-basic block: an isolated spike only charges the
    // membrane to 1/τ, so it is lost.
    let lif = NeuronSpec::default().with_kind(NeuronKind::LIF);
    let net = chain(BlockKind::SpikingBasic, 4, 1, lif, 4, 0, true)?;
    let mut isolated = Tensor::zeros(&[4, 1, 4]);
    isolated.data_mut()[0] = 1.0;
    isolated.data_mut()[2 * 4 + 1] = 1.0;
    let lif_fails = !blocks_are_identity(&net, &isolated, None)?;
    let lif_and_rejected = matches!(
        chain(BlockKind::Sew(ElementWise::And), 4, 1, lif, 4, 0, true),
        Err(Error::Unsupported(_))
    );
    Ok((
        ok && lif_fails && lif_and_rejected,
        format!(
            "bit-exact on 1000 trains x 3 rates for {checked:?} (train and eval mode); \
             LIF basic block breaks identity: {lif_fails}; AND-with-LIF rejected: {lif_and_rejected}"
        ),
    ))
}

fn c7_bounds() -> Outcome {
    let mut r = rng(107);
    let mut add_ok = true;
    let mut down_ok = true;
    let mut and_ok = true;
    let mut add_max_excess = f64::MIN;
    let depth = 8;
    for seed in 0..20u64 {
        let x = random_spikes(&[3, 8, 8], r.gen_range(0.1..0.9), &mut r);
        let net = chain(
            BlockKind::Sew(ElementWise::Add),
            8,
            depth,
            NeuronSpec::default(),
            3,
            seed,
            false,
        )?;
        for (l, p) in probe_blocks(&net, &x, TraceLoss::SumOutputs)?
            .iter()
            .enumerate()
        {
            // Block l + 1 of a chain fed with spikes.
            let bound = (l + 2) as f64;
            add_max_excess = add_max_excess.max(p.output.max() - bound);
            add_ok &= p.output.max() <= bound
                && p.output
                    .data()
                    .iter()
                    .all(|v| v.fract() == 0.0 && *v >= 0.0);
        }
        for g in [ElementWise::And, ElementWise::IAnd] {
            let net = chain(
                BlockKind::Sew(g),
                8,
                depth,
                NeuronSpec::default(),
                3,
                seed,
                false,
            )?;
            for p in probe_blocks(&net, &x, TraceLoss::SumOutputs)? {
                and_ok &= p.output.is_binary()
                    && p.output
                        .data()
                        .iter()
                        .zip(p.input.data())
                        .all(|(o, s)| o <= s);
            }
        }
        for arch in [
            "FC6-BN-IF-SEW Block (f4, s1)-FC2",
            "c2k3s1-BN-IF-SEW Block (c4, s2)-FC2",
        ] {
            let input: &[usize] = if arch.starts_with("FC") {
                &[5]
            } else {
                &[1, 6, 6]
            };
            let spec =
                NetworkSpec::from_arch(arch, input, 3, NeuronSpec::default(), ElementWise::Add)?;
            let net = Network::build(spec, seed)?;
            let mut shape = vec![3, 6];
            shape.extend_from_slice(input);
            let x = rand_tensor(&mut r, &shape, -1.0, 3.0);
            let labels = [0, 1, 0, 1, 0, 1];
            let probes = probe_blocks(&net, &x, TraceLoss::CrossEntropy(&labels))?;
            down_ok &= probes.iter().any(|p| p.downsample);
            for p in probes.iter().filter(|p| p.downsample) {
                down_ok &= p.output.max() <= 2.0
                    && p.output.data().iter().all(|v| [0.0, 1.0, 2.0].contains(v));
            }
        }
    }
    Ok((
        add_ok && down_ok && and_ok,
        format!(
            "20 random inits: SEW-ADD block l output ≤ l+1 {add_ok} (max excess {add_max_excess}); \
             downsample SEW-ADD ≤ 2 {down_ok}; AND/IAND binary with O ≤ S {and_ok}"
        ),
    ))
}

fn moving_bar() -> Result<(FrameDataset, FrameDataset)> {
    let ds = generate_synthetic(&SyntheticSpec {
        kind: GeneratorKind::MovingBar,
        samples: 256,
        classes: 4,
        timesteps: 4,
        height: 8,
        width: 8,
        noise: 0.05,
        seed: 7,
    })?;
    Ok(ds.split_at(192))
}

fn run(
    arch: &str,
    g: ElementWise,
    seed: u64,
    lr: f64,
    epochs: usize,
    sets: &(FrameDataset, FrameDataset),
) -> Result<(f64, f64)> {
    let spec = NetworkSpec::from_arch(arch, &[2, 8, 8], 4, NeuronSpec::default(), g)?;
    let mut net = Network::build(spec, seed)?;
    let cfg = TrainConfig {
        lr,
        epochs,
        batch_size: 16,
        scheduler: Scheduler::Cosine { t_max: epochs },
        seed,
        ..TrainConfig::default()
    };
    let state = train(&mut net, &sets.0, &sets.1, &cfg, |_| {})?;
    Ok((state.loss, state.test_acc))
}

fn c8_degradation() -> Outcome {
    let sets = moving_bar()?;
    let loss = |block: &str, depth: usize, seed: u64| -> Result<f64> {
        let arch = format!("FC32-BN-IF-{{{block} (f32)}}*{depth}-FC4");
        Ok(run(&arch, ElementWise::Add, seed, 0.03, 50, &sets)?.0)
    };
    let mut sew_ok = true;
    let mut basic_worse = 0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let (s8, s24) = (loss("SEW Block", 8, seed)?, loss("SEW Block", 24, seed)?);
        let (b8, b24) = (
            loss("Basic Block", 8, seed)?,
            loss("Basic Block", 24, seed)?,
        );
        sew_ok &= s24 <= s8 + 0.05;
        basic_worse += usize::from(b24 > b8);
        lines.push(format!(
            "seed {seed}: SEW {s8:.3}→{s24:.3}, basic {b8:.3}→{b24:.3}"
        ));
    }
    Ok((
        sew_ok && basic_worse >= 2,
        format!(
            "final train loss depth 8→24: {}; basic deeper worse in {basic_worse}/3",
            lines.join("; ")
        ),
    ))
}

fn c9_temporal_delete() -> Outcome {
    let mut r = rng(109);
    let draws = 10_000;
    let subsets: Vec<Vec<usize>> = vec![
        vec![0, 1],
        vec![0, 2],
        vec![0, 3],
        vec![1, 2],
        vec![1, 3],
        vec![2, 3],
    ];
    let mut counts = [0usize; 6];
    let mut ordered = true;
    for _ in 0..draws {
        let idx = temporal_delete_indices(4, 2, &mut r);
        ordered &= idx.windows(2).all(|w| w[0] < w[1]);
        match subsets.iter().position(|s| *s == idx) {
            Some(i) => counts[i] += 1,
            None => ordered = false,
        }
    }
    let expected = draws as f64 / 6.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let p = ChiSquared::new(5.0).expect("dof").sf(chi2);

    let x = rand_tensor(&mut r, &[4, 3, 2, 5], 0.0, 1.0);
    let identity = delete_frames(&x, 4, &mut r)? == x
        && temporal_delete_indices(4, 4, &mut r) == vec![0, 1, 2, 3];

    // Train with two of four frames, then check evaluation sees all four.
    let ds = generate_synthetic(&SyntheticSpec {
        kind: GeneratorKind::TemporalPattern,
        samples: 48,
        classes: 3,
        timesteps: 4,
        height: 3,
        width: 3,
        noise: 0.0,
        seed: 9,
    })?;
    let (tr, te) = ds.split_at(32);
    let spec = NetworkSpec::from_arch(
        "FC8-BN-IF-SEW Block (f8)-FC3",
        &[1, 3, 3],
        4,
        NeuronSpec::default(),
        ElementWise::Add,
    )?;
    let mut net = Network::build(spec, 0)?;
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        t_train: 2,
        scheduler: Scheduler::Cosine { t_max: 2 },
        ..TrainConfig::default()
    };
    train(&mut net, &tr, &te, &cfg, |_| {})?;
    let all: Vec<usize> = (0..te.len()).collect();
    let (full, labels) = te.batch(&all);
    let mut g = Graph::new();
    let out = net.forward(&mut g, &full, ForwardOptions::eval(), None)?;
    let manual = predictions(g.value(out.output))
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count() as f64
        / te.len() as f64;
    let full_t = evaluate(&net, &te, 5)? == manual && full.shape()[0] == 4;
    Ok((
        p > 0.01 && ordered && identity && full_t,
        format!(
            "10k draws T=4,T_train=2 counts {counts:?}, χ²={chi2:.2}, p={p:.3}; order kept {ordered}; \
             T_train=T identity {identity}; evaluation over full T {full_t}"
        ),
    ))
}

fn c10_ablation() -> Outcome {
    let sets = moving_bar()?;
    let arch = "FC32-BN-IF-{SEW Block (f32)}*8-FC4";
    let mut means = Vec::new();
    for g in [ElementWise::Add, ElementWise::IAnd, ElementWise::And] {
        let mut accs = Vec::new();
        for seed in 0..3 {
            accs.push(run(arch, g, seed, 0.03, 30, &sets)?.1);
        }
        means.push((g, accs.iter().sum::<f64>() / 3.0, accs));
    }
    let pass = means[0].1 >= means[1].1 && means[1].1 > means[2].1;
    let detail = means
        .iter()
        .map(|(g, m, a)| format!("{g} {m:.3} {a:.3?}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((pass, format!("mean test accuracy over 3 seeds: {detail}")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("surrogate autodiff vs finite differences", c1_autodiff),
        ("spiking-basic gradient product oracle", c2_spiking_product),
        ("SEW gradient product oracle", c3_sew_product),
        ("gradient-norm formula", c4_norm_formula),
        ("gradient regimes at depth 32", c5_regimes),
        ("identity-mapping exactness", c6_identity),
        ("output boundedness", c7_bounds),
        ("degradation analog", c8_degradation),
        ("random temporal delete", c9_temporal_delete),
        ("element-wise ablation ordering", c10_ablation),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!pass);
        println!(
            "{} criterion {}: {name} ({:.1?}) — {detail}",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
