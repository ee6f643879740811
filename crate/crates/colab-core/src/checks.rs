//! Numerical verification instruments: central-difference gradient oracles
//! and the op-by-op gradient check suite.
//!
//! These run against the public tape API only, so they exercise exactly what
//! training exercises.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::ndtensor::{GradMap, Graph, NetworkParams, NodeId, Tensor};
use crate::rng::SeedStream;

/// Step used by every central-difference oracle in the repo.
pub const FD_STEP: f64 = 1e-5;

/// Relative error between two tensors as an l2-norm ratio. Pairs that are
/// both numerically zero compare as equal.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_err shape mismatch");
    let na = a.l2_norm();
    let nb = b.l2_norm();
    if na.max(nb) < 1e-10 {
        return 0.0;
    }
    let nd = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    nd / na.max(nb)
}

/// Central finite differences of a scalar-valued function over every
/// element of every parameter: (f(p + h e) - f(p - h e)) / 2h.
pub fn numeric_grad<F>(mut f: F, at: &NetworkParams, h: f64) -> Result<GradMap>
where
    F: FnMut(&NetworkParams) -> Result<f64>,
{
    let mut out = GradMap::new();
    for (name, tensor) in at.iter() {
        let mut g = Tensor::zeros(tensor.shape().to_vec());
        for j in 0..tensor.numel() {
            let mut plus = at.clone_params();
            plus.get_mut(name).unwrap().data_mut()[j] += h;
            let fp = f(&plus)?;
            let mut minus = at.clone_params();
            minus.get_mut(name).unwrap().data_mut()[j] -= h;
            let fm = f(&minus)?;
            g.data_mut()[j] = (fp - fm) / (2.0 * h);
        }
        out.insert(name.clone(), g);
    }
    Ok(out)
}

/// Result of checking one op kind.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub op: String,
    pub trials: usize,
    pub max_rel_err: f64,
}

type BuildFn<'a> = &'a dyn Fn(&mut Graph, &BTreeMap<String, NodeId>) -> Result<NodeId>;

/// Checks one scalar-valued graph builder: analytic tape gradients against
/// central differences over every element of every named parameter.
/// Returns the worst relative error.
pub fn check_builder(params: &[(String, Tensor)], build: BuildFn) -> Result<f64> {
    let mut g = Graph::new();
    let mut ids = BTreeMap::new();
    for (name, t) in params {
        ids.insert(name.clone(), g.param(name, t.clone(), true)?);
    }
    let loss = build(&mut g, &ids)?;
    let analytic = g.backward(loss)?;

    let eval = |pv: &[(String, Tensor)]| -> Result<f64> {
        let mut g = Graph::new();
        let mut ids = BTreeMap::new();
        for (name, t) in pv {
            ids.insert(name.clone(), g.param(name, t.clone(), false)?);
        }
        let l = build(&mut g, &ids)?;
        Ok(g.value(l).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let numel = params[i].1.numel();
        let mut numeric = Tensor::zeros(params[i].1.shape().to_vec());
        for j in 0..numel {
            let mut plus = params.to_vec();
            plus[i].1.data_mut()[j] += FD_STEP;
            let fp = eval(&plus)?;
            let mut minus = params.to_vec();
            minus[i].1.data_mut()[j] -= FD_STEP;
            let fm = eval(&minus)?;
            numeric.data_mut()[j] = (fp - fm) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic[&params[i].0], &numeric));
    }
    Ok(worst)
}

fn rand_tensor(s: &mut SeedStream, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| s.normal()).collect()).unwrap()
}

/// Random values kept away from a kink or singularity at zero.
fn rand_tensor_away_from_zero(s: &mut SeedStream, shape: Vec<usize>, margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = s.normal();
            v + v.signum() * margin
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn rand_shape(s: &mut SeedStream) -> Vec<usize> {
    match s.index(3) {
        0 => vec![1 + s.index(6)],
        1 => vec![1 + s.index(4), 1 + s.index(4)],
        _ => vec![1 + s.index(2), 1 + s.index(3), 1 + s.index(4), 1 + s.index(4)],
    }
}

fn rand_shape4(s: &mut SeedStream) -> Vec<usize> {
    vec![1 + s.index(2), 1 + s.index(4), 1 + s.index(5), 1 + s.index(5)]
}

/// Weighted-sum head so a multi-output op feeds a scalar loss with
/// nontrivial gradients on every output element.
fn weighted_sum(g: &mut Graph, y: NodeId, weights: Tensor) -> Result<NodeId> {
    let c = g.leaf(weights);
    let m = g.mul(y, c)?;
    Ok(g.sum(m))
}

/// Gradient check for every op kind the tape exposes, `trials` random
/// shape/value draws each. Inputs for kinked or singular ops are sampled
/// away from the bad set, since a central difference straddling a kink
/// measures nothing.
pub fn gradcheck_ops(trials: usize, seed: u64) -> Result<Vec<GradReport>> {
    let mut reports = Vec::new();
    let ops: &[&str] = &[
        "add",
        "sub",
        "mul",
        "div",
        "add_scalar",
        "mul_scalar",
        "relu",
        "sigmoid",
        "exp",
        "log",
        "clamp",
        "matmul",
        "conv2d",
        "bias_add",
        "upsample_nearest2",
        "softmax_channels",
        "sum",
        "mean",
        "sum_spatial",
        "concat_channels",
        "slice_channels",
        "reshape",
    ];

    for op in ops {
        let mut s = SeedStream::new(crate::rng::derive_seed(seed, op));
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let err = run_op_trial(op, &mut s)?;
            worst = worst.max(err);
        }
        reports.push(GradReport {
            op: op.to_string(),
            trials,
            max_rel_err: worst,
        });
    }
    Ok(reports)
}

fn run_op_trial(op: &str, s: &mut SeedStream) -> Result<f64> {
    match op {
        "add" | "sub" | "mul" | "div" => {
            let shape = rand_shape(s);
            let a = rand_tensor(s, shape.clone());
            let b = if op == "div" {
                rand_tensor_away_from_zero(s, shape.clone(), 0.5)
            } else {
                rand_tensor(s, shape.clone())
            };
            let w = rand_tensor(s, shape.clone());
            let opname = op.to_string();
            check_builder(&[("a".into(), a), ("b".into(), b)], &move |g, ids| {
                let y = match opname.as_str() {
                    "add" => g.add(ids["a"], ids["b"])?,
                    "sub" => g.sub(ids["a"], ids["b"])?,
                    "mul" => g.mul(ids["a"], ids["b"])?,
                    _ => g.div(ids["a"], ids["b"])?,
                };
                weighted_sum(g, y, w.clone())
            })
        }
        "add_scalar" | "mul_scalar" => {
            let shape = rand_shape(s);
            let a = rand_tensor(s, shape.clone());
            let c = s.uniform_in(-2.0, 2.0);
            let w = rand_tensor(s, shape.clone());
            let opname = op.to_string();
            check_builder(&[("a".into(), a)], &move |g, ids| {
                let y = match opname.as_str() {
                    "add_scalar" => g.add_scalar(ids["a"], c),
                    _ => g.mul_scalar(ids["a"], c),
                };
                weighted_sum(g, y, w.clone())
            })
        }
        "relu" => {
            let shape = rand_shape(s);
            let a = rand_tensor_away_from_zero(s, shape.clone(), 1e-2);
            let w = rand_tensor(s, shape.clone());
            check_builder(&[("a".into(), a)], &move |g, ids| {
                let y = g.relu(ids["a"]);
                weighted_sum(g, y, w.clone())
            })
        }
        "sigmoid" | "exp" => {
            let shape = rand_shape(s);
            let a = rand_tensor(s, shape.clone());
            let w = rand_tensor(s, shape.clone());
            let opname = op.to_string();
            check_builder(&[("a".into(), a)], &move |g, ids| {
                let y = match opname.as_str() {
                    "sigmoid" => g.sigmoid(ids["a"]),
                    _ => g.exp(ids["a"]),
                };
                weighted_sum(g, y, w.clone())
            })
        }
        "log" => {
            let shape = rand_shape(s);
            let n: usize = shape.iter().product();
            let a = Tensor::new(shape.clone(), (0..n).map(|_| s.uniform_in(0.2, 3.0)).collect())?;
            let w = rand_tensor(s, shape.clone());
            check_builder(&[("a".into(), a)], &move |g, ids| {
                let y = g.log(ids["a"]);
                weighted_sum(g, y, w.clone())
            })
        }
        "clamp" => {
            // Values at least 1e-2 away from both clamp edges.
            let shape = rand_shape(s);
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let v = s.uniform_in(-1.0, 1.0);
                    if v.abs() > 0.49 {
                        v * 1.1
                    } else {
                        v * 0.95
                    }
                })
                .collect();
            let a = Tensor::new(shape.clone(), data)?;
            let w = rand_tensor(s, shape.clone());
            check_builder(&[("a".into(), a)], &move |g, ids| {
                let y = g.clamp(ids["a"], -0.5, 0.5);
                weighted_sum(g, y, w.clone())
            })
        }
        "matmul" => {
            let (m, k, n) = (1 + s.index(4), 1 + s.index(4), 1 + s.index(4));
            let a = rand_tensor(s, vec![m, k]);
            let b = rand_tensor(s, vec![k, n]);
            let w = rand_tensor(s, vec![m, n]);
            check_builder(&[("a".into(), a), ("b".into(), b)], &move |g, ids| {
                let y = g.matmul(ids["a"], ids["b"])?;
                weighted_sum(g, y, w.clone())
            })
        }
        "conv2d" => {
            let k = [1usize, 3, 5][s.index(3)];
            let stride = 1 + s.index(2);
            let pad = s.index(3);
            let (n, ci, co) = (1 + s.index(2), 1 + s.index(3), 1 + s.index(3));
            let h = k + s.index(5);
            let wdim = k + s.index(5);
            let x = rand_tensor(s, vec![n, ci, h, wdim]);
            let wk = rand_tensor(s, vec![co, ci, k, k]);
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (wdim + 2 * pad - k) / stride + 1;
            let w = rand_tensor(s, vec![n, co, ho, wo]);
            check_builder(&[("x".into(), x), ("w".into(), wk)], &move |g, ids| {
                let y = g.conv2d(ids["x"], ids["w"], stride, pad)?;
                weighted_sum(g, y, w.clone())
            })
        }
        "bias_add" => {
            let shape = rand_shape4(s);
            let c = shape[1];
            let x = rand_tensor(s, shape.clone());
            let b = rand_tensor(s, vec![c]);
            let w = rand_tensor(s, shape.clone());
            check_builder(&[("x".into(), x), ("b".into(), b)], &move |g, ids| {
                let y = g.bias_add(ids["x"], ids["b"])?;
                weighted_sum(g, y, w.clone())
            })
        }
        "upsample_nearest2" => {
            let shape = rand_shape4(s);
            let x = rand_tensor(s, shape.clone());
            let w = rand_tensor(s, vec![shape[0], shape[1], shape[2] * 2, shape[3] * 2]);
            check_builder(&[("x".into(), x)], &move |g, ids| {
                let y = g.upsample_nearest2(ids["x"])?;
                weighted_sum(g, y, w.clone())
            })
        }
        "softmax_channels" => {
            let mut shape = rand_shape4(s);
            shape[1] += 1;
            let n: usize = shape.iter().product();
            let x = Tensor::new(shape.clone(), (0..n).map(|_| s.uniform_in(-4.0, 4.0)).collect())?;
            let w = rand_tensor(s, shape.clone());
            check_builder(&[("x".into(), x)], &move |g, ids| {
                let y = g.softmax_channels(ids["x"])?;
                weighted_sum(g, y, w.clone())
            })
        }
        "sum" | "mean" => {
            let shape = rand_shape(s);
            let x = rand_tensor(s, shape);
            let c = s.uniform_in(0.5, 2.0);
            let opname = op.to_string();
            check_builder(&[("x".into(), x)], &move |g, ids| {
                let y = match opname.as_str() {
                    "sum" => g.sum(ids["x"]),
                    _ => g.mean(ids["x"]),
                };
                Ok(g.mul_scalar(y, c))
            })
        }
        "sum_spatial" => {
            let shape = rand_shape4(s);
            let x = rand_tensor(s, shape.clone());
            let w = rand_tensor(s, vec![shape[0], shape[1]]);
            check_builder(&[("x".into(), x)], &move |g, ids| {
                let y = g.sum_spatial(ids["x"])?;
                weighted_sum(g, y, w.clone())
            })
        }
        "concat_channels" => {
            let base = rand_shape4(s);
            let (n, h, wd) = (base[0], base[2], base[3]);
            let (c1, c2) = (1 + s.index(3), 1 + s.index(3));
            let a = rand_tensor(s, vec![n, c1, h, wd]);
            let b = rand_tensor(s, vec![n, c2, h, wd]);
            let w = rand_tensor(s, vec![n, c1 + c2, h, wd]);
            check_builder(&[("a".into(), a), ("b".into(), b)], &move |g, ids| {
                let y = g.concat_channels(&[ids["a"], ids["b"]])?;
                weighted_sum(g, y, w.clone())
            })
        }
        "slice_channels" => {
            let mut shape = rand_shape4(s);
            shape[1] += 2;
            let c = shape[1];
            let start = s.index(c - 1);
            let end = start + 1 + s.index(c - start);
            let x = rand_tensor(s, shape.clone());
            let w = rand_tensor(s, vec![shape[0], end - start, shape[2], shape[3]]);
            check_builder(&[("x".into(), x)], &move |g, ids| {
                let y = g.slice_channels(ids["x"], start, end)?;
                weighted_sum(g, y, w.clone())
            })
        }
        "reshape" => {
            let shape = rand_shape4(s);
            let numel: usize = shape.iter().product();
            let x = rand_tensor(s, shape.clone());
            let w = rand_tensor(s, vec![numel]);
            check_builder(&[("x".into(), x)], &move |g, ids| {
                let y = g.reshape(ids["x"], vec![numel])?;
                weighted_sum(g, y, w.clone())
            })
        }
        other => panic!("no gradcheck trial for op {other}"),
    }
}

/// Gradient check over three full encoder-decoder networks: every parameter
/// against central differences, with a random weighted-sum head on the
/// logits. Draws whose forward pass grazes a relu kink are re-sampled (a
/// central difference straddling a kink measures nothing); determinism keeps
/// the final accepted draw stable for a given seed.
pub fn gradcheck_networks(seed: u64) -> Result<Vec<GradReport>> {
    use crate::nets::{build_net, NetConfig};

    let configs = [
        NetConfig { in_channels: 1, base_width: 2, depth: 1, out_channels: 2, seed: 0 },
        NetConfig { in_channels: 2, base_width: 2, depth: 1, out_channels: 3, seed: 0 },
        NetConfig { in_channels: 1, base_width: 2, depth: 2, out_channels: 3, seed: 0 },
    ];
    let mut reports = Vec::new();
    for (i, base) in configs.iter().enumerate() {
        let mut attempt = seed;
        let (worst, attempts) = loop {
            let mut cfg = base.clone();
            cfg.seed = attempt;
            let net = build_net(&cfg, "net")?;
            let mut s = SeedStream::new(attempt).child("netcheck");
            let x = rand_tensor(&mut s, vec![1, cfg.in_channels, 8, 8]);

            let mut probe = Graph::new();
            let input = probe.leaf(x.clone());
            let out = net.forward_graph(&mut probe, input, false)?;
            if probe.relu_input_margin() < 1e-3 {
                attempt += 1;
                continue;
            }
            let weights = rand_tensor(&mut s, probe.value(out).shape().to_vec());

            let params: Vec<(String, Tensor)> = net
                .params
                .iter()
                .map(|(n, t)| (format!("net.{n}"), t.clone()))
                .collect();
            let worst = check_builder(&params, &|g, ids| {
                let input = g.leaf(x.clone());
                let out = net.forward_with(g, input, ids)?;
                weighted_sum(g, out, weights.clone())
            })?;
            break (worst, attempt - seed + 1);
        };
        reports.push(GradReport {
            op: format!("network_{i}"),
            trials: attempts as usize,
            max_rel_err: worst,
        });
    }
    Ok(reports)
}
