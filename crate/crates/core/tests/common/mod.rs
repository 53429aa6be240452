//! Shared helpers for the integration tests: a central-difference gradient
//! checker and the op catalogue it is run over.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sewnet::autodiff::Graph;
use sewnet::autodiff::Var;
use sewnet::block::ElementWise;
use sewnet::network::{ForwardOptions, Network, NetworkSpec};
use sewnet::neuron::{step_sequence, Leak, NeuronKind, NeuronSpec, Surrogate};
use sewnet::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Absolute floor below which finite-difference noise dominates.
pub const ABS_FLOOR: f64 = 1e-8;

pub const SURROGATES: [(&str, Surrogate); 4] = [
    ("arctan(2)", Surrogate::ArcTan { alpha: 2.0 }),
    ("arctan(3)", Surrogate::ArcTan { alpha: 3.0 }),
    ("rectangular(1)", Surrogate::Rectangular { width: 1.0 }),
    ("constant1", Surrogate::Constant1),
];

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values in `[lo, hi)` kept at least `gap` away from every point in `kinks`.
pub fn rand_away_from(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
    kinks: &[f64],
    gap: f64,
) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Ratio of the worst elementwise discrepancy to its allowance
/// `REL_TOL·max(|ad|, |fd|) + ABS_FLOOR`; the check passes when it is ≤ 1.
/// Also returns the worst plain relative error among elements above the floor.
#[derive(Clone, Copy, Debug, Default)]
pub struct CheckResult {
    pub worst_ratio: f64,
    pub worst_rel: f64,
}

impl CheckResult {
    pub fn merge(self, o: CheckResult) -> CheckResult {
        CheckResult {
            worst_ratio: self.worst_ratio.max(o.worst_ratio),
            worst_rel: self.worst_rel.max(o.worst_rel),
        }
    }

    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

fn compare(ad: f64, fd: f64, acc: &mut CheckResult) {
    let diff = (ad - fd).abs();
    let scale = ad.abs().max(fd.abs());
    acc.worst_ratio = acc.worst_ratio.max(diff / (REL_TOL * scale + ABS_FLOOR));
    if scale > ABS_FLOOR {
        acc.worst_rel = acc.worst_rel.max(diff / scale);
    }
}

fn new_graph(smooth: bool) -> Graph {
    if smooth {
        Graph::with_smoothed_spikes()
    } else {
        Graph::new()
    }
}

/// Checks `d/dx_i Σ(f(x) ⊙ R)` for a fixed random `R` against central differences.
pub fn gradcheck<F>(
    inputs: &[Tensor],
    smooth: bool,
    rng: &mut ChaCha8Rng,
    f: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval =
        |xs: &[Tensor], weights: Option<&Tensor>| -> Result<(f64, Tensor, Graph, Vec<Var>, Var)> {
            let mut g = new_graph(smooth);
            let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), true)).collect();
            let out = f(&mut g, &vars)?;
            let out_value = g.value(out).clone();
            let loss = match weights {
                Some(w) => {
                    let w = g.constant(w.clone());
                    let p = g.mul(out, w)?;
                    g.sum(p)?
                }
                None => g.sum(out)?,
            };
            Ok((g.value(loss).item().unwrap(), out_value, g, vars, loss))
        };
    let (_, out_value, _, _, _) = eval(inputs, None)?;
    let weights = rand_tensor(rng, out_value.shape(), -1.0, 1.0);
    let (_, _, mut g, vars, loss) = eval(inputs, Some(&weights))?;
    g.backward(loss)?;
    let mut result = CheckResult::default();
    for (i, x) in inputs.iter().enumerate() {
        let ad = g.grad(vars[i]).unwrap_or_else(|| Tensor::zeros(x.shape()));
        for e in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= FD_STEP;
            let fd = (eval(&plus, Some(&weights))?.0 - eval(&minus, Some(&weights))?.0)
                / (2.0 * FD_STEP);
            compare(ad.data()[e], fd, &mut result);
        }
    }
    Ok(result)
}

/// Gradient of a small network's cross-entropy with respect to every parameter,
/// checked against central differences with smoothed spikes.
pub fn gradcheck_network(net: &mut Network, x: &Tensor, labels: &[usize]) -> Result<CheckResult> {
    let loss_of = |net: &Network| -> Result<f64> {
        let mut g = Graph::with_smoothed_spikes();
        let out = net.forward(&mut g, x, ForwardOptions::train(), None)?;
        let l = g.cross_entropy(out.output, labels)?;
        Ok(g.value(l).item().unwrap())
    };
    let mut g = Graph::with_smoothed_spikes();
    let out = net.forward(&mut g, x, ForwardOptions::train(), None)?;
    let l = g.cross_entropy(out.output, labels)?;
    g.backward(l)?;
    let grads = net.params.collect_grads(&g, &out.params);
    let mut result = CheckResult::default();
    for (p, grad) in grads.iter().enumerate() {
        for (e, &ad) in grad.iter().enumerate() {
            let orig = net.params.iter().nth(p).unwrap().value.data()[e];
            net.params.iter_mut().nth(p).unwrap().value.data_mut()[e] = orig + FD_STEP;
            let lp = loss_of(net)?;
            net.params.iter_mut().nth(p).unwrap().value.data_mut()[e] = orig - FD_STEP;
            let lm = loss_of(net)?;
            net.params.iter_mut().nth(p).unwrap().value.data_mut()[e] = orig;
            compare(ad, (lp - lm) / (2.0 * FD_STEP), &mut result);
        }
    }
    Ok(result)
}

pub type OpCase = (&'static str, fn(&mut ChaCha8Rng) -> Result<CheckResult>);

fn dims(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

/// One random instance per call for each surrogate-independent op.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("add", |r| {
            let s = dims(r, 2, 1, 4);
            let xs = [rand_tensor(r, &s, -2.0, 2.0), rand_tensor(r, &s, -2.0, 2.0)];
            gradcheck(&xs, false, r, |g, v| g.add(v[0], v[1]))
        }),
        ("sub", |r| {
            let s = dims(r, 2, 1, 4);
            let xs = [rand_tensor(r, &s, -2.0, 2.0), rand_tensor(r, &s, -2.0, 2.0)];
            gradcheck(&xs, false, r, |g, v| g.sub(v[0], v[1]))
        }),
        ("mul", |r| {
            let s = dims(r, 2, 1, 4);
            let xs = [rand_tensor(r, &s, -2.0, 2.0), rand_tensor(r, &s, -2.0, 2.0)];
            gradcheck(&xs, false, r, |g, v| g.mul(v[0], v[1]))
        }),
        ("scale", |r| {
            let s = dims(r, 2, 1, 4);
            let c: f64 = r.gen_range(-3.0..3.0);
            gradcheck(&[rand_tensor(r, &s, -2.0, 2.0)], false, r, move |g, v| {
                g.scale(v[0], c)
            })
        }),
        ("add_scalar", |r| {
            let s = dims(r, 2, 1, 4);
            let c: f64 = r.gen_range(-3.0..3.0);
            gradcheck(&[rand_tensor(r, &s, -2.0, 2.0)], false, r, move |g, v| {
                g.add_scalar(v[0], c)
            })
        }),
        ("mul_scalar_var", |r| {
            let s = dims(r, 2, 1, 4);
            let xs = [
                rand_tensor(r, &s, -2.0, 2.0),
                rand_tensor(r, &[1], -2.0, 2.0),
            ];
            gradcheck(&xs, false, r, |g, v| g.mul_scalar_var(v[0], v[1]))
        }),
        ("sigmoid_neg", |r| {
            let s = dims(r, 2, 1, 4);
            gradcheck(&[rand_tensor(r, &s, -4.0, 4.0)], false, r, |g, v| {
                g.sigmoid_neg(v[0])
            })
        }),
        ("matmul", |r| {
            let d = dims(r, 3, 1, 4);
            let xs = [
                rand_tensor(r, &[d[0], d[1]], -2.0, 2.0),
                rand_tensor(r, &[d[1], d[2]], -2.0, 2.0),
            ];
            gradcheck(&xs, false, r, |g, v| g.matmul(v[0], v[1]))
        }),
        ("linear", |r| {
            let d = dims(r, 4, 1, 3);
            let fan_in = d[1] * d[2];
            let xs = [
                rand_tensor(r, &[d[0], d[1], d[2]], -2.0, 2.0),
                rand_tensor(r, &[d[3], fan_in], -1.0, 1.0),
                rand_tensor(r, &[d[3]], -1.0, 1.0),
            ];
            let bias = r.gen_bool(0.5);
            gradcheck(&xs, false, r, move |g, v| {
                g.linear(v[0], v[1], bias.then_some(v[2]))
            })
        }),
        ("conv2d", |r| {
            let (b, c, o) = (r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=2));
            let k = [1, 3][r.gen_range(0..2)];
            let stride = r.gen_range(1..=2);
            let padding = if k == 3 { r.gen_range(0..=1) } else { 0 };
            let (h, w) = (r.gen_range(3..=5), r.gen_range(3..=5));
            let xs = [
                rand_tensor(r, &[b, c, h, w], -2.0, 2.0),
                rand_tensor(r, &[o, c, k, k], -1.0, 1.0),
            ];
            gradcheck(&xs, false, r, move |g, v| {
                g.conv2d(v[0], v[1], stride, padding)
            })
        }),
        ("batch_norm(train)", |r| {
            let (n, c) = (r.gen_range(2..=4), r.gen_range(1..=3));
            let spatial = r.gen_bool(0.5);
            let shape = if spatial {
                vec![n, c, 2, 2]
            } else {
                vec![n, c]
            };
            let xs = [
                rand_tensor(r, &shape, -2.0, 2.0),
                rand_tensor(r, &[c], 0.5, 1.5),
                rand_tensor(r, &[c], -0.5, 0.5),
            ];
            gradcheck(&xs, false, r, |g, v| {
                Ok(g.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0)
            })
        }),
        ("batch_norm(eval)", |r| {
            let (n, c) = (r.gen_range(1..=3), r.gen_range(1..=3));
            let xs = [
                rand_tensor(r, &[n, c, 2], -2.0, 2.0),
                rand_tensor(r, &[c], 0.5, 1.5),
                rand_tensor(r, &[c], -0.5, 0.5),
            ];
            let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
            gradcheck(&xs, false, r, move |g, v| {
                Ok(g.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5)?.0)
            })
        }),
        ("max_pool", |r| {
            let (b, c) = (r.gen_range(1..=2), r.gen_range(1..=2));
            let s = r.gen_range(4..=6);
            let xs = [rand_tensor(r, &[b, c, s, s], -2.0, 2.0)];
            gradcheck(&xs, false, r, |g, v| g.max_pool(v[0], 2, 2))
        }),
        ("avg_pool", |r| {
            let (b, c) = (r.gen_range(1..=2), r.gen_range(1..=2));
            let s = r.gen_range(4..=6);
            let xs = [rand_tensor(r, &[b, c, s, s], -2.0, 2.0)];
            gradcheck(&xs, false, r, |g, v| g.avg_pool(v[0], 2, 2))
        }),
        // With a detached reset the spike input is a constant by design, so
        // only the membrane gradient is compared.
        ("reset(detached)", |r| {
            let s = dims(r, 2, 1, 4);
            let spikes = rand_tensor(r, &s, 0.0, 1.0);
            gradcheck(&[rand_tensor(r, &s, -2.0, 2.0)], false, r, move |g, v| {
                let sv = g.constant(spikes.clone());
                g.reset(v[0], sv, 0.0, true)
            })
        }),
        ("reset(attached)", |r| {
            let s = dims(r, 2, 1, 4);
            let xs = [rand_tensor(r, &s, -2.0, 2.0), rand_tensor(r, &s, 0.0, 1.0)];
            let v_reset: f64 = r.gen_range(-0.5..0.5);
            gradcheck(&xs, false, r, move |g, v| {
                g.reset(v[0], v[1], v_reset, false)
            })
        }),
        ("reshape", |r| {
            let s = dims(r, 2, 1, 4);
            gradcheck(&[rand_tensor(r, &s, -2.0, 2.0)], false, r, move |g, v| {
                g.reshape(v[0], &[s[0] * s[1]])
            })
        }),
        ("slice_rows", |r| {
            let s = dims(r, 2, 2, 5);
            let start = r.gen_range(0..s[0]);
            let len = r.gen_range(1..=s[0] - start);
            gradcheck(&[rand_tensor(r, &s, -2.0, 2.0)], false, r, move |g, v| {
                g.slice_rows(v[0], start, len)
            })
        }),
        ("concat_rows", |r| {
            let (rows, c) = (r.gen_range(1..=3), r.gen_range(1..=3));
            let xs = [
                rand_tensor(r, &[rows, c], -2.0, 2.0),
                rand_tensor(r, &[2, c], -2.0, 2.0),
            ];
            gradcheck(&xs, false, r, |g, v| g.concat_rows(&[v[0], v[1], v[0]]))
        }),
        ("mean_blocks", |r| {
            let n = r.gen_range(1..=4);
            let b = r.gen_range(1..=3);
            let xs = [rand_tensor(r, &[n * b, 2], -2.0, 2.0)];
            gradcheck(&xs, false, r, move |g, v| g.mean_blocks(v[0], n))
        }),
        ("sum", |r| {
            let s = dims(r, 3, 1, 3);
            gradcheck(&[rand_tensor(r, &s, -2.0, 2.0)], false, r, |g, v| {
                g.sum(v[0])
            })
        }),
        ("cross_entropy", |r| {
            let (b, c) = (r.gen_range(1..=4), r.gen_range(2..=5));
            let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..c)).collect();
            gradcheck(
                &[rand_tensor(r, &[b, c], -3.0, 3.0)],
                false,
                r,
                move |g, v| g.cross_entropy(v[0], &labels),
            )
        }),
        ("element-wise g", |r| {
            let s = dims(r, 2, 1, 4);
            let xs = [rand_tensor(r, &s, 0.0, 1.0), rand_tensor(r, &s, 0.0, 1.0)];
            let g_fn = [ElementWise::Add, ElementWise::And, ElementWise::IAnd][r.gen_range(0..3)];
            gradcheck(&xs, false, r, move |g, v| g_fn.apply(g, v[0], v[1]))
        }),
    ]
}

/// Kinks of the smoothed spike nonlinearity, relative to the threshold.
fn kinks(s: Surrogate) -> Vec<f64> {
    match s {
        Surrogate::Rectangular { width } => vec![-width / 2.0, width / 2.0],
        _ => Vec::new(),
    }
}

/// Spike op under surrogate `s`, forward smoothed to its primitive.
pub fn spike_case(s: Surrogate, r: &mut ChaCha8Rng) -> Result<CheckResult> {
    let shape = dims(r, 2, 1, 4);
    let theta: f64 = r.gen_range(0.25..1.5);
    let k: Vec<f64> = kinks(s).iter().map(|k| k + theta).collect();
    let x = rand_away_from(r, &shape, theta - 2.0, theta + 2.0, &k, 1e-3);
    gradcheck(&[x], true, r, move |g, v| g.spike(v[0], theta, s))
}

/// A full multi-step neuron (IF, LIF or PLIF) under surrogate `s`. The reset is
/// attached: a detached reset intentionally drops `∂V/∂S`, so it is not the
/// derivative of the smoothed forward.
pub fn neuron_case(s: Surrogate, r: &mut ChaCha8Rng) -> Result<CheckResult> {
    let t = r.gen_range(1..=4);
    let n = r.gen_range(1..=3);
    let kind = [NeuronKind::IF, NeuronKind::LIF, NeuronKind::PLIF][r.gen_range(0..3)];
    let spec = NeuronSpec {
        kind,
        v_threshold: r.gen_range(0.5..1.5),
        v_reset: r.gen_range(-0.2..0.2),
        tau: r.gen_range(1.5..4.0),
        detach_reset: false,
        surrogate: s,
    };
    let xs = [
        rand_tensor(r, &[t * n, 2], -1.5, 2.5),
        rand_tensor(r, &[1], -1.0, 1.0),
    ];
    gradcheck(&xs, true, r, move |g, v| {
        let leak = Leak::for_spec(g, &spec, Some(v[1]))?;
        step_sequence(g, &spec, leak, v[0], t)
    })
}

/// End-to-end parameter gradients of a small conv network with SEW, basic and plain blocks.
pub fn network_case(s: Surrogate, r: &mut ChaCha8Rng) -> Result<CheckResult> {
    let archs = [
        "c2k3s1-BN-PLIF-SEW Block (c2)-Basic Block (c3, s2)-APk2s2-FC3",
        "c2k3s1-BN-LIF-SEW Block (c2, IAND)-Plain Block (c2)-MPk2s2-FC3",
        "FC4-BN-IF-SEW Block (f4, AND)-SEW Block (f3, s1)-FC2",
    ];
    let arch = archs[r.gen_range(0..archs.len())];
    let neuron = NeuronSpec {
        surrogate: s,
        detach_reset: false,
        ..NeuronSpec::default()
    };
    let t = r.gen_range(1..=2);
    let spec = NetworkSpec::from_arch(arch, &[1, 4, 4], t, neuron, ElementWise::Add)?;
    let classes = spec.classes().unwrap();
    let mut net = Network::build(spec, r.gen())?;
    let b = 3;
    let x = rand_tensor(r, &[t, b, 1, 4, 4], 0.0, 1.0);
    let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..classes)).collect();
    gradcheck_network(&mut net, &x, &labels)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
