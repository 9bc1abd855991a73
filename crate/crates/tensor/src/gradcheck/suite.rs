//! Randomized finite-difference checks of every differentiable operation.

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::ops::{ConvOptions, Padding};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const OP_SUITE_TOLERANCE: f64 = 1e-4;

/// Values in `±[0.1, 1]`: away from the relu kink at zero.
fn signed(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.1, 1.0);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Pairwise well-separated values so max-pool winners are stable under `±h`.
fn separated(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut order);
    Tensor::from_fn(shape, |i| order[i] as f64 * 0.05 - 1.0 + rng.uniform_range(-0.01, 0.01))
}

fn dim(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    rng.int_range(lo as i64, hi as i64) as usize
}

/// `sum(out * weights)` for fixed random weights, so every output element
/// contributes a distinct adjoint.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = RngStream::new(seed);
    let w = Tensor::from_fn(tape.shape(out), |_| rng.uniform_range(-1.0, 1.0));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn case(name: &str, rng: &mut RngStream, seed: u64) -> Case {
    let s = seed;
    match name {
        "add" | "sub" | "mul" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 5)];
            let name = name.to_string();
            (
                vec![signed(&shape, rng), signed(&shape, rng)],
                Box::new(move |t, v| {
                    let y = match name.as_str() {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    project(t, y, s)
                }),
            )
        }
        "scale" | "add_scalar" | "sigmoid" | "tanh" | "relu" | "mean" => {
            let shape = [dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 3)];
            let name = name.to_string();
            (
                vec![signed(&shape, rng)],
                Box::new(move |t, v| {
                    let y = match name.as_str() {
                        "scale" => t.scale(v[0], -1.7),
                        "add_scalar" => t.add_scalar(v[0], 0.3),
                        "sigmoid" => t.sigmoid(v[0]),
                        "tanh" => t.tanh(v[0]),
                        "relu" => t.relu(v[0]),
                        _ => {
                            let sq = t.mul(v[0], v[0])?;
                            return Ok(t.mean(sq));
                        }
                    };
                    project(t, y, s)
                }),
            )
        }
        "add_channel" | "mul_channel" => {
            let (n, c, h) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3));
            let name = name.to_string();
            (
                vec![signed(&[n, c, h, 2], rng), signed(&[c], rng)],
                Box::new(move |t, v| {
                    let y = if name == "add_channel" {
                        t.add_channel(v[0], v[1])?
                    } else {
                        t.mul_channel(v[0], v[1])?
                    };
                    project(t, y, s)
                }),
            )
        }
        "mul_spatial" => {
            let (n, c, h, w) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 2, 4));
            (
                vec![signed(&[n, c, h, w], rng), signed(&[n, 1, h, w], rng)],
                Box::new(move |t, v| {
                    let y = t.mul_spatial(v[0], v[1])?;
                    project(t, y, s)
                }),
            )
        }
        "dense" => {
            let (n, d, m) = if seed == 0 {
                (2, 3, 4)
            } else {
                (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 5))
            };
            (
                vec![signed(&[n, d], rng), signed(&[d, m], rng), signed(&[m], rng)],
                Box::new(move |t, v| {
                    let y = t.dense(v[0], v[1], v[2])?;
                    project(t, y, s)
                }),
            )
        }
        "conv2d" => {
            let (n, c, hw, k, dil, stride, padding) = if seed == 0 {
                (1, 2, 5, 1, 2, 1, Padding::Same)
            } else {
                (
                    dim(rng, 1, 2),
                    dim(rng, 1, 3),
                    dim(rng, 5, 7),
                    dim(rng, 1, 3),
                    dim(rng, 1, 2),
                    dim(rng, 1, 2),
                    if rng.bernoulli(0.5) { Padding::Same } else { Padding::Valid },
                )
            };
            let opts = ConvOptions {
                stride,
                dilation: dil,
                padding,
            };
            (
                vec![signed(&[n, c, hw, hw], rng), signed(&[k, c, 3, 3], rng), signed(&[k], rng)],
                Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), opts)?;
                    project(t, y, s)
                }),
            )
        }
        "max_pool" => {
            let shape = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 2, 6), dim(rng, 2, 6)];
            (
                vec![separated(&shape, rng)],
                Box::new(move |t, v| {
                    let y = t.max_pool2d(v[0], 2)?;
                    project(t, y, s)
                }),
            )
        }
        "softmax" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 5)];
            (
                vec![signed(&shape, rng)],
                Box::new(move |t, v| {
                    let y = t.softmax(v[0]);
                    project(t, y, s)
                }),
            )
        }
        "softmax_cross_entropy" => {
            let (n, c) = (dim(rng, 1, 4), dim(rng, 2, 5));
            let targets: Vec<usize> = (0..n).map(|_| rng.below(c as u64) as usize).collect();
            (
                vec![signed(&[n, c], rng)],
                Box::new(move |t, v| {
                    let p = t.softmax(v[0]);
                    t.cross_entropy(p, &targets, 0.7, 1e-12)
                }),
            )
        }
        "dropout" => {
            let shape = [dim(rng, 1, 3), dim(rng, 2, 6)];
            (
                vec![signed(&shape, rng)],
                Box::new(move |t, v| {
                    // a fresh stream with a fixed key gives the same mask on every evaluation
                    let mut r = RngStream::new(s ^ 0xD0);
                    let y = t.dropout(v[0], 0.5, true, &mut r)?;
                    project(t, y, s)
                }),
            )
        }
        "reshape" | "narrow" | "concat" => {
            let shape = [dim(rng, 1, 3), dim(rng, 2, 5), dim(rng, 1, 3)];
            let name = name.to_string();
            (
                vec![signed(&shape, rng), signed(&shape, rng)],
                Box::new(move |t, v| {
                    let y = match name.as_str() {
                        "reshape" => {
                            let len = t.value(v[0]).len();
                            t.reshape(v[0], &[len])?
                        }
                        "narrow" => t.narrow(v[0], 1, 1, 1)?,
                        _ => t.concat(&[v[0], v[1]], 1)?,
                    };
                    project(t, y, s)
                }),
            )
        }
        other => unreachable!("unknown op {other}"),
    }
}

pub const SUITE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "sigmoid",
    "tanh",
    "relu",
    "mean",
    "add_channel",
    "mul_channel",
    "mul_spatial",
    "dense",
    "conv2d",
    "max_pool",
    "softmax",
    "softmax_cross_entropy",
    "dropout",
    "reshape",
    "narrow",
    "concat",
];

/// One aggregated report per operation over `seeds` random draws of shapes
/// and values. Seed 0 of `dense` and `conv2d` uses the fixed shapes
/// `[2,3]x[3,4]` and `1x2x5x5` with dilation 2.
pub fn op_suite(seeds: u64) -> Result<Vec<GradCheckReport>> {
    let opts = GradCheckOptions {
        tolerance: OP_SUITE_TOLERANCE,
        ..GradCheckOptions::default()
    };
    let mut reports = Vec::new();
    for (k, &name) in SUITE_OPS.iter().enumerate() {
        let mut agg = GradCheckReport {
            name: name.to_string(),
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
            tolerance: opts.tolerance,
        };
        for seed in 0..seeds {
            let mut rng = RngStream::new(seed).split(k as u64);
            let (inputs, f) = case(name, &mut rng, seed);
            let r = grad_check(name, &inputs, f, opts)?;
            agg.checked += r.checked;
            if r.max_rel_error > agg.max_rel_error || r.max_rel_error.is_nan() {
                agg.max_rel_error = r.max_rel_error;
                agg.worst = r.worst;
            }
        }
        reports.push(agg);
    }
    Ok(reports)
}
