//! Central-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar-valued `op` at `input` against
/// central differences with step `eps`.
///
/// Returns the largest `|a - n| / max(1e-8, |a| + |n|)` over elements. `name`
/// labels diagnostics for non-finite evaluations.
pub fn grad_check<F>(name: &str, op: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let eval = |x: Tensor, track: bool| -> Result<(Tape, NodeId, NodeId)> {
        let mut tape = Tape::new();
        let leaf = if track {
            tape.variable(x)
        } else {
            tape.constant(x)
        };
        let out = op(&mut tape, leaf)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::shape(
                "grad_check",
                format!("{} must produce a scalar, got {:?}", name, v.shape()),
            ));
        }
        if !v.item().is_finite() {
            return Err(Error::NonFinite {
                op: name.to_string(),
                detail: format!("output {} at perturbed input", v.item()),
            });
        }
        Ok((tape, leaf, out))
    };

    let (mut tape, leaf, out) = eval(input.clone(), true)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; input.numel()]);
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            op: name.to_string(),
            detail: format!("gradient element {} is {}", i, analytic[i]),
        });
    }

    let mut worst: f64 = 0.0;
    let mut probe = input.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (t, _, o) = eval(probe.clone(), false)?;
        let plus = t.value(o).item();
        probe.data_mut()[i] = orig - eps;
        let (t, _, o) = eval(probe.clone(), false)?;
        let minus = t.value(o).item();
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Outcome of checking one registered op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    /// Worst relative error over all instances; `None` for ops whose
    /// gradient is blocked by design.
    pub max_rel_error: Option<f64>,
    pub status: String,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.status == STATUS_PASS || self.status == STATUS_BLOCKED
    }
}

pub const STATUS_PASS: &str = "pass";
pub const STATUS_FAIL: &str = "fail";
pub const STATUS_BLOCKED: &str = "blocked (exact zero)";

/// Every differentiable op the suite covers, with the argument being
/// perturbed after the dot.
pub const REGISTERED_OPS: [&str; 17] = [
    "conv2d.input",
    "conv2d.weight",
    "conv2d.bias",
    "fully_connected.input",
    "fully_connected.weight",
    "fully_connected.bias",
    "relu",
    "max_pool2d",
    "global_avg_pool",
    "softmax_cross_entropy",
    "roi_pool",
    "channel_concat",
    "gather",
    "reshape",
    "weighted_sum",
    "linear_combination",
    "batch_pool",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub instances: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            instances: 20,
            eps: 1e-5,
            tolerance: 1e-4,
        }
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values at least 0.01 apart, so max-style ops keep their argmax
/// under perturbation.
fn spread(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero, so relu stays off its kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = normal(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

/// Reduces `y` to a scalar with fixed random weights.
fn project(tape: &mut Tape, y: NodeId, weights: &Tensor) -> Result<NodeId> {
    tape.weighted_sum(y, weights.data())
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn check_instance(name: &str, eps: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    match name {
        "conv2d.input" | "conv2d.weight" | "conv2d.bias" => {
            let (n, c, h, w) = (
                dims(rng, 1, 2),
                dims(rng, 1, 3),
                dims(rng, 3, 5),
                dims(rng, 3, 5),
            );
            let (co, k) = (dims(rng, 1, 3), if rng.random_bool(0.5) { 3 } else { 1 });
            let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
            let stride = rng.random_range(1..=2);
            let x = normal(&[n, c, h, w], rng);
            let wt = normal(&[co, c, k, k], rng);
            let b = normal(&[co], rng);
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            let proj = normal(&[n * co * oh * ow], rng);
            let which = name.rsplit('.').next().unwrap().to_string();
            let (probe, x, wt, b) = match which.as_str() {
                "input" => (x.clone(), None, Some(wt), Some(b)),
                "weight" => (wt.clone(), Some(x), None, Some(b)),
                _ => (b.clone(), Some(x), Some(wt), None),
            };
            grad_check(
                name,
                |t, leaf| {
                    let xi = x.clone().map_or(leaf, |v| t.constant(v));
                    let wi = wt.clone().map_or(leaf, |v| t.constant(v));
                    let bi = b.clone().map_or(leaf, |v| t.constant(v));
                    let y = t.conv2d(xi, wi, bi, stride, pad)?;
                    project(t, y, &proj)
                },
                &probe,
                eps,
            )
        }
        "fully_connected.input" | "fully_connected.weight" | "fully_connected.bias" => {
            let (n, d, k) = (dims(rng, 1, 3), dims(rng, 1, 6), dims(rng, 1, 4));
            let x = normal(&[n, d], rng);
            let wt = normal(&[k, d], rng);
            let b = normal(&[k], rng);
            let proj = normal(&[n * k], rng);
            let (probe, x, wt, b) = match name {
                "fully_connected.input" => (x.clone(), None, Some(wt), Some(b)),
                "fully_connected.weight" => (wt.clone(), Some(x), None, Some(b)),
                _ => (b.clone(), Some(x), Some(wt), None),
            };
            grad_check(
                name,
                |t, leaf| {
                    let xi = x.clone().map_or(leaf, |v| t.constant(v));
                    let wi = wt.clone().map_or(leaf, |v| t.constant(v));
                    let bi = b.clone().map_or(leaf, |v| t.constant(v));
                    let y = t.fully_connected(xi, wi, bi)?;
                    project(t, y, &proj)
                },
                &probe,
                eps,
            )
        }
        "relu" => {
            let x = off_kink(&[dims(rng, 1, 3), dims(rng, 2, 4), dims(rng, 2, 4)], rng);
            let proj = normal(&[x.numel()], rng);
            grad_check(
                name,
                |t, l| {
                    let y = t.relu(l);
                    project(t, y, &proj)
                },
                &x,
                eps,
            )
        }
        "max_pool2d" => {
            let x = spread(
                &[
                    dims(rng, 1, 2),
                    dims(rng, 1, 3),
                    dims(rng, 2, 6),
                    dims(rng, 2, 6),
                ],
                rng,
            );
            let (k, s) = (2, rng.random_range(1..=2));
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let proj = normal(
                &[x.shape()[0] * x.shape()[1] * ((h - k) / s + 1) * ((w - k) / s + 1)],
                rng,
            );
            grad_check(
                name,
                |t, l| {
                    let y = t.max_pool2d(l, k, s)?;
                    project(t, y, &proj)
                },
                &x,
                eps,
            )
        }
        "global_avg_pool" => {
            let x = normal(
                &[
                    dims(rng, 1, 3),
                    dims(rng, 1, 4),
                    dims(rng, 1, 4),
                    dims(rng, 1, 4),
                ],
                rng,
            );
            let proj = normal(&[x.shape()[0] * x.shape()[1]], rng);
            grad_check(
                name,
                |t, l| {
                    let y = t.global_avg_pool(l)?;
                    project(t, y, &proj)
                },
                &x,
                eps,
            )
        }
        "softmax_cross_entropy" => {
            let (n, k) = (dims(rng, 1, 4), dims(rng, 2, 5));
            let x = normal(&[n, k], rng);
            let mut labels: Vec<Option<usize>> =
                (0..n).map(|_| Some(rng.random_range(0..k))).collect();
            if n > 1 {
                labels[rng.random_range(0..n)] = None;
            }
            grad_check(name, |t, l| t.softmax_cross_entropy(l, &labels), &x, eps)
        }
        "roi_pool" => {
            let (c, h, w) = (dims(rng, 1, 3), dims(rng, 4, 8), dims(rng, 4, 8));
            let x = spread(&[c, h, w], rng);
            let rois: Vec<BBox> = (0..dims(rng, 1, 3))
                .map(|_| {
                    let x0 = rng.random_range(0.0..w as f64 - 1.0);
                    let y0 = rng.random_range(0.0..h as f64 - 1.0);
                    let x1 = rng.random_range(x0 + 1.0..=w as f64);
                    let y1 = rng.random_range(y0 + 1.0..=h as f64);
                    BBox::new(x0, y0, x1, y1).unwrap()
                })
                .collect();
            let (oh, ow) = (dims(rng, 1, 3), dims(rng, 1, 3));
            let proj = normal(&[rois.len() * c * oh * ow], rng);
            grad_check(
                name,
                |t, l| {
                    let y = t.roi_pool(l, &rois, 1.0, oh, ow)?;
                    project(t, y, &proj)
                },
                &x,
                eps,
            )
        }
        "channel_concat" => {
            let (n, h, w) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
            let x = normal(&[n, dims(rng, 1, 3), h, w], rng);
            let other = normal(&[n, dims(rng, 1, 3), h, w], rng);
            let proj = normal(&[x.numel() + other.numel()], rng);
            grad_check(
                name,
                |t, l| {
                    let o = t.constant(other.clone());
                    let y = t.channel_concat(&[o, l, l])?;
                    let proj2 = Tensor::from_vec(
                        proj.data()
                            .iter()
                            .chain(&proj.data()[other.numel()..])
                            .copied()
                            .collect(),
                    );
                    project(t, y, &proj2)
                },
                &x,
                eps,
            )
        }
        "gather" => {
            let n = dims(rng, 2, 4);
            let x = normal(&[n, dims(rng, 1, 3), 2, 2], rng);
            let idx: Vec<usize> = (0..dims(rng, 1, 5))
                .map(|_| rng.random_range(0..n))
                .collect();
            let per = x.numel() / n;
            let proj = normal(&[idx.len() * per], rng);
            grad_check(
                name,
                |t, l| {
                    let y = t.gather(l, &idx)?;
                    project(t, y, &proj)
                },
                &x,
                eps,
            )
        }
        "reshape" => {
            let x = normal(&[dims(rng, 1, 3), dims(rng, 1, 4)], rng);
            let proj = normal(&[x.numel()], rng);
            let shape = [x.numel()];
            grad_check(
                name,
                |t, l| {
                    let y = t.reshape(l, &shape)?;
                    project(t, y, &proj)
                },
                &x,
                eps,
            )
        }
        "weighted_sum" => {
            let x = normal(&[dims(rng, 1, 8)], rng);
            let wts = normal(&[x.numel()], rng);
            grad_check(name, |t, l| project(t, l, &wts), &x, eps)
        }
        "linear_combination" => {
            let x = normal(&[1], rng);
            let other = normal(&[1], rng);
            let coeffs = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ];
            grad_check(
                name,
                |t, l| {
                    let o = t.constant(other.clone());
                    t.linear_combination(&[l, o, l], &coeffs)
                },
                &x,
                eps,
            )
        }
        other => Err(Error::invalid(
            "grad_check",
            format!("no checker registered for {}", other),
        )),
    }
}

/// Checks that batch pooling forwards the elementwise maximum and sends
/// exactly zero gradient back. Returns whether both hold.
fn check_batch_pool(rng: &mut ChaCha8Rng) -> Result<bool> {
    let (n, c, h, w) = (
        dims(rng, 1, 4),
        dims(rng, 1, 3),
        dims(rng, 1, 4),
        dims(rng, 1, 4),
    );
    let x = normal(&[n, c, h, w], rng);
    let mut tape = Tape::new();
    let leaf = tape.variable(x.clone());
    let pooled = tape.batch_pool(leaf)?;
    let proj = normal(&[c * h * w], rng);
    let loss = project(&mut tape, pooled, &proj)?;
    tape.backward(loss)?;
    let len = c * h * w;
    let forward_ok = (0..len).all(|i| {
        let m = (0..n)
            .map(|k| x.data()[k * len + i])
            .fold(f64::NEG_INFINITY, f64::max);
        tape.value(pooled).data()[i] == m
    });
    let blocked = tape
        .grad(leaf)
        .is_none_or(|g| g.iter().all(|&v| v == 0.0 && v.is_sign_positive()));
    Ok(forward_ok && blocked)
}

/// Runs every registered op over `cfg.instances` random cases.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<OpReport>> {
    let mut reports = Vec::with_capacity(REGISTERED_OPS.len());
    for (k, &name) in REGISTERED_OPS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        if name == "batch_pool" {
            let mut ok = true;
            for _ in 0..cfg.instances {
                ok &= check_batch_pool(&mut rng)?;
            }
            reports.push(OpReport {
                op: name.to_string(),
                instances: cfg.instances,
                max_rel_error: None,
                status: if ok { STATUS_BLOCKED } else { STATUS_FAIL }.to_string(),
            });
            continue;
        }
        let mut worst: f64 = 0.0;
        for _ in 0..cfg.instances {
            worst = worst.max(check_instance(name, cfg.eps, &mut rng)?);
        }
        reports.push(OpReport {
            op: name.to_string(),
            instances: cfg.instances,
            max_rel_error: Some(worst),
            status: if worst < cfg.tolerance {
                STATUS_PASS
            } else {
                STATUS_FAIL
            }
            .to_string(),
        });
    }
    Ok(reports)
}
