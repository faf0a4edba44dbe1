//! Shared test oracles: straightforward 64-bit re-implementations of every
//! differentiable op and of a whole model, central finite differences, and
//! random gradient-check cases.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlab_core::autodiff::{Tape, Var};
use tlab_core::model::{LayerSpec, Model};
use tlab_core::ops::Reduction;
use tlab_core::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-2;
pub const ABS_TOL: f64 = 1e-4;

/// Passes when either the absolute or the relative error is within tolerance.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= ABS_TOL || err <= REL_TOL * analytic.abs().max(numeric.abs())
}

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Direct cross-correlation with zero padding. Returns (output, out_h, out_w).
#[allow(clippy::too_many_arguments)]
pub fn conv64(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: &[f64],
    [f, _, kh, kw]: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for s in 0..n {
        for o in 0..f {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((s * c + ch) * h + iy as usize) * w + ix as usize;
                                let ki = ((o * c + ch) * kh + dy) * kw + dx;
                                acc += x[xi] * k[ki];
                            }
                        }
                    }
                    out[((s * f + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

pub fn maxpool64(x: &[f64], [n, c, h, w]: [usize; 4]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| x[(p * h + 2 * y + dy) * w + 2 * xx + dx];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

pub fn relu64(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Adds `b[c]` along axis 1 of a tensor with `channels` at axis 1 and
/// `inner` trailing elements per channel.
pub fn bias64(x: &[f64], b: &[f64], channels: usize, inner: usize) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, v)| v + b[(i / inner) % channels])
        .collect()
}

/// Summed (or mean) negative log-likelihood of softmax over rows of length k.
pub fn ce64(logits: &[f64], labels: &[usize], k: usize, mean: bool) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    if mean {
        total / labels.len() as f64
    } else {
        total
    }
}

/// Softmax over rows of length k.
pub fn softmax64(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        out.extend(row.iter().map(|v| (v - m).exp() / z));
    }
    out
}

/// 64-bit forward pass of a layer stack; `params` in model order.
pub fn forward64(specs: &[LayerSpec], params: &[Vec<f64>], input: &[f64], shape: &[usize]) -> Vec<f64> {
    forward64_traced(specs, params, input, shape, &mut Vec::new())
}

/// [`forward64`] that also records the piecewise-linear regime: the sign of
/// every relu input and the winning position of every pooling window. Two
/// points with the same pattern lie on one smooth piece of the network.
pub fn forward64_traced(
    specs: &[LayerSpec],
    params: &[Vec<f64>],
    input: &[f64],
    shape: &[usize],
    pattern: &mut Vec<u8>,
) -> Vec<f64> {
    pattern.clear();
    let n = shape[0];
    let mut x = input.to_vec();
    let mut s: Vec<usize> = shape[1..].to_vec();
    let mut next = params.iter();
    for spec in specs {
        match *spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let (w, b) = (next.next().unwrap(), next.next().unwrap());
                let (y, oh, ow) = conv64(
                    &x,
                    [n, s[0], s[1], s[2]],
                    w,
                    [out_channels, in_channels, kernel, kernel],
                    stride,
                    pad,
                );
                x = bias64(&y, b, out_channels, oh * ow);
                s = vec![out_channels, oh, ow];
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let (w, b) = (next.next().unwrap(), next.next().unwrap());
                x = bias64(&matmul64(&x, w, n, in_features, out_features), b, out_features, 1);
                s = vec![out_features];
            }
            LayerSpec::Relu => {
                pattern.extend(x.iter().map(|&v| u8::from(v > 0.0)));
                x = relu64(&x);
            }
            LayerSpec::MaxPool => {
                let (h, w) = (s[1], s[2]);
                for p in 0..n * s[0] {
                    for y in 0..h / 2 {
                        for xx in 0..w / 2 {
                            let at = |dy: usize, dx: usize| x[(p * h + 2 * y + dy) * w + 2 * xx + dx];
                            let cands = [at(0, 0), at(0, 1), at(1, 0), at(1, 1)];
                            let mut best = 0u8;
                            for (j, &c) in cands.iter().enumerate() {
                                if c > cands[best as usize] {
                                    best = j as u8;
                                }
                            }
                            pattern.push(best);
                        }
                    }
                }
                x = maxpool64(&x, [n, s[0], s[1], s[2]]);
                s = vec![s[0], s[1] / 2, s[2] / 2];
            }
            LayerSpec::Flatten => s = vec![s.iter().product()],
        }
    }
    x
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p);
    p[i] = x[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Central difference whose step avoids non-smooth points. `f` returns the
/// value and a regime tag (see [`forward64_traced`]). Starting at `FD_STEP`,
/// the step is divided by 10 until both probe points share the regime of
/// `x`. Returns the derivative and the step used, or `None` if no step down
/// to 1e-7 stays on one piece.
pub fn kink_free_diff<P: PartialEq>(f: &mut impl FnMut(&[f64]) -> (f64, P), x: &[f64], i: usize) -> Option<(f64, f64)> {
    let (_, here) = f(x);
    let mut h = FD_STEP;
    let mut p = x.to_vec();
    while h >= 1e-7 {
        p[i] = x[i] + h;
        let (up, r_up) = f(&p);
        p[i] = x[i] - h;
        let (down, r_down) = f(&p);
        if r_up == here && r_down == here {
            return Some(((up - down) / (2.0 * h), h));
        }
        h /= 10.0;
    }
    None
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so relu kinks lie far outside the FD step.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let m = rng.random_range(0.05..1.0f32);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
    .unwrap()
}

/// Distinct values spaced 0.01 apart in random order, so no 2×2 window has
/// a near-tie that the FD step could flip.
pub fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.01).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    BiasAdd2,
    BiasAdd4,
    Relu,
    MaxPool,
    Reshape,
    Conv,
    CrossEntropyMean,
    CrossEntropySum,
}

pub const ALL_OPS: [OpKind; 12] = [
    OpKind::MatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::BiasAdd2,
    OpKind::BiasAdd4,
    OpKind::Relu,
    OpKind::MaxPool,
    OpKind::Reshape,
    OpKind::Conv,
    OpKind::CrossEntropyMean,
    OpKind::CrossEntropySum,
];

#[derive(Debug)]
pub struct CaseOutcome {
    pub label: String,
    pub coords: usize,
    pub failures: Vec<String>,
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
type Eval = Box<dyn Fn(&[Vec<f64>]) -> f64>;

/// A random gradient-check case for `kind`. Every op output is contracted
/// with a fixed random weight tensor so each output element contributes a
/// distinct amount to the scalar loss.
pub fn op_case(kind: OpKind, seed: u64) -> (String, Vec<Tensor>, Build, Eval) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (d0, d1, d2) = (dim(1, 8), dim(1, 8), dim(1, 8));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);

    // weighted sum of an op output, in both precisions
    fn contract(tape: &mut Tape, y: Var, r: &Tensor) -> Var {
        let rc = tape.constant(r.clone());
        let p = tape.mul(y, rc).unwrap();
        tape.sum(p).unwrap()
    }
    fn contract64(y: &[f64], r: &[f64]) -> f64 {
        y.iter().zip(r).map(|(a, b)| a * b).sum()
    }

    match kind {
        OpKind::MatMul => {
            let (a, b) = (
                uniform(&mut rng, &[d0, d1], -1.0, 1.0),
                uniform(&mut rng, &[d1, d2], -1.0, 1.0),
            );
            let r = uniform(&mut rng, &[d0, d2], -1.0, 1.0);
            let r64 = to64(&r);
            (
                format!("matmul {d0}x{d1} * {d1}x{d2}"),
                vec![a, b],
                Box::new(move |t, v| {
                    let y = t.matmul(v[0], v[1]).unwrap();
                    contract(t, y, &r)
                }),
                Box::new(move |x| contract64(&matmul64(&x[0], &x[1], d0, d1, d2), &r64)),
            )
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let shape = [d0, d1, d2];
            let (a, b) = (
                uniform(&mut rng, &shape, -1.0, 1.0),
                uniform(&mut rng, &shape, -1.0, 1.0),
            );
            let r = uniform(&mut rng, &shape, -1.0, 1.0);
            let r64 = to64(&r);
            let f: fn(f64, f64) -> f64 = match kind {
                OpKind::Add => |x, y| x + y,
                OpKind::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            (
                format!("{kind:?} {shape:?}"),
                vec![a, b],
                Box::new(move |t, v| {
                    let y = match kind {
                        OpKind::Add => t.add(v[0], v[1]),
                        OpKind::Sub => t.sub(v[0], v[1]),
                        _ => t.mul(v[0], v[1]),
                    }
                    .unwrap();
                    contract(t, y, &r)
                }),
                Box::new(move |x| {
                    let y: Vec<f64> = x[0].iter().zip(&x[1]).map(|(a, b)| f(*a, *b)).collect();
                    contract64(&y, &r64)
                }),
            )
        }
        OpKind::BiasAdd2 | OpKind::BiasAdd4 => {
            let shape: Vec<usize> = if kind == OpKind::BiasAdd2 {
                vec![d0, d1]
            } else {
                vec![d0, d1, d2, 2]
            };
            let inner: usize = shape[2..].iter().product();
            let x = uniform(&mut rng, &shape, -1.0, 1.0);
            let b = uniform(&mut rng, &[d1], -1.0, 1.0);
            let r = uniform(&mut rng, &shape, -1.0, 1.0);
            let r64 = to64(&r);
            (
                format!("bias_add {shape:?}"),
                vec![x, b],
                Box::new(move |t, v| {
                    let y = t.bias_add(v[0], v[1]).unwrap();
                    contract(t, y, &r)
                }),
                Box::new(move |x| contract64(&bias64(&x[0], &x[1], d1, inner), &r64)),
            )
        }
        OpKind::Relu => {
            let shape = [d0, d1, d2];
            let x = away_from_zero(&mut rng, &shape);
            let r = uniform(&mut rng, &shape, -1.0, 1.0);
            let r64 = to64(&r);
            (
                format!("relu {shape:?}"),
                vec![x],
                Box::new(move |t, v| {
                    let y = t.relu(v[0]).unwrap();
                    contract(t, y, &r)
                }),
                Box::new(move |x| contract64(&relu64(&x[0]), &r64)),
            )
        }
        OpKind::MaxPool => {
            let (h, w) = (d1.max(2), d2.max(2));
            let shape = [1 + d0 % 2, 1 + d0 % 3, h, w];
            let x = spaced(&mut rng, &shape);
            let r = uniform(&mut rng, &[shape[0], shape[1], h / 2, w / 2], -1.0, 1.0);
            let r64 = to64(&r);
            (
                format!("max_pool2d {shape:?}"),
                vec![x],
                Box::new(move |t, v| {
                    let y = t.max_pool2d(v[0]).unwrap();
                    contract(t, y, &r)
                }),
                Box::new(move |x| contract64(&maxpool64(&x[0], shape), &r64)),
            )
        }
        OpKind::Reshape => {
            let x = uniform(&mut rng, &[d0, d1, d2], -1.0, 1.0);
            let r = uniform(&mut rng, &[d0, d1 * d2], -1.0, 1.0);
            let r64 = to64(&r);
            (
                format!("flatten [{d0}, {d1}, {d2}]"),
                vec![x],
                Box::new(move |t, v| {
                    let y = t.flatten(v[0]).unwrap();
                    contract(t, y, &r)
                }),
                Box::new(move |x| contract64(&x[0], &r64)),
            )
        }
        OpKind::Conv => {
            let n = 1 + d0 % 2;
            let c = 1 + d1 % 3;
            let f = 1 + d2 % 4;
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31));
            let (h, w) = (rng2.random_range(3..=8), rng2.random_range(3..=8));
            let k = rng2.random_range(1..=3);
            let stride = rng2.random_range(1..=2);
            let pad = rng2.random_range(0..=2);
            let xs = [n, c, h, w];
            let ks = [f, c, k, k];
            let x = uniform(&mut rng, &xs, -1.0, 1.0);
            let kern = uniform(&mut rng, &ks, -1.0, 1.0);
            let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
            let r = uniform(&mut rng, &[n, f, oh, ow], -1.0, 1.0);
            let r64 = to64(&r);
            (
                format!("conv2d x{xs:?} k{ks:?} stride {stride} pad {pad}"),
                vec![x, kern],
                Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], stride, pad).unwrap();
                    contract(t, y, &r)
                }),
                Box::new(move |x| contract64(&conv64(&x[0], xs, &x[1], ks, stride, pad).0, &r64)),
            )
        }
        OpKind::CrossEntropyMean | OpKind::CrossEntropySum => {
            let (n, k) = (d0, d1.max(2));
            let logits = uniform(&mut rng, &[n, k], -3.0, 3.0);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let mean = kind == OpKind::CrossEntropyMean;
            let red = if mean { Reduction::Mean } else { Reduction::Sum };
            let l2 = labels.clone();
            (
                format!("cross_entropy {n}x{k} {red:?}"),
                vec![logits],
                Box::new(move |t, v| t.cross_entropy(v[0], &labels, red).unwrap()),
                Box::new(move |x| ce64(&x[0], &l2, k, mean)),
            )
        }
    }
}

/// Compares tape gradients of every input coordinate with 64-bit central
/// differences.
pub fn check_op(kind: OpKind, seed: u64) -> CaseOutcome {
    let (label, inputs, build, eval) = op_case(kind, seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let base: Vec<Vec<f64>> = inputs.iter().map(to64).collect();
    let mut failures = Vec::new();
    let mut coords = 0;
    for (which, v) in vars.iter().enumerate() {
        let g = grads.get(*v).expect("leaf gradient");
        assert_eq!(g.shape(), inputs[which].shape(), "{label}: gradient shape");
        for i in 0..base[which].len() {
            let mut f = |x: &[f64]| {
                let mut all = base.clone();
                all[which] = x.to_vec();
                eval(&all)
            };
            let numeric = central_diff(&mut f, &base[which], i, FD_STEP);
            let analytic = f64::from(g.data()[i]);
            coords += 1;
            if !grad_close(analytic, numeric) {
                failures.push(format!("{label}: input {which}[{i}] tape {analytic} vs fd {numeric}"));
            }
        }
    }
    CaseOutcome {
        label,
        coords,
        failures,
    }
}

/// Parameters of `model` as 64-bit vectors.
pub fn params64(model: &Model) -> Vec<Vec<f64>> {
    model.params().iter().map(|p| to64(&p.value)).collect()
}
