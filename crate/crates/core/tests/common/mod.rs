//! Independent references shared by the integration and acceptance targets.
//! Everything here works on plain slices with explicit loops.

#![allow(dead_code)]

pub mod grad_suite;

use std::f64::consts::PI;

use lka_core::analysis::ErfMap;
use lka_core::nn::{LinearParams, Parameterized};
use lka_core::{Result, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Overwrites every parameter of `p` with uniform noise in `[-scale, scale)`.
pub fn randomize<P: Parameterized>(p: &mut P, scale: f64, rng: &mut impl Rng) {
    p.visit_mut("", &mut |_, t| {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-scale..scale));
    });
}

/// erf by its Maclaurin series for |z| < 3 and by the Laplace continued
/// fraction for the complement beyond.
pub fn erf_series(z: f64) -> f64 {
    if z < 0.0 {
        return -erf_series(-z);
    }
    if z < 3.0 {
        let mut term = z;
        let mut sum = z;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -z * z / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() <= 1e-18 * sum.abs() {
                break;
            }
        }
        2.0 / PI.sqrt() * sum
    } else {
        let mut frac = 0.0;
        for k in (1..=200).rev() {
            frac = (k as f64 / 2.0) / (z + frac);
        }
        1.0 - (-z * z).exp() / PI.sqrt() / (z + frac)
    }
}

pub fn gelu_ref(x: f64) -> f64 {
    x * 0.5 * (1.0 + erf_series(x / 2f64.sqrt()))
}

/// `rows × in` times `in × out` plus bias.
pub fn linear_ref(x: &[f64], w: &[f64], b: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
    let rows = x.len() / in_dim;
    let mut y = vec![0.0; rows * out_dim];
    for r in 0..rows {
        for o in 0..out_dim {
            let mut acc = b[o];
            for i in 0..in_dim {
                acc += x[r * in_dim + i] * w[i * out_dim + o];
            }
            y[r * out_dim + o] = acc;
        }
    }
    y
}

pub fn linear_params_ref(x: &[f64], p: &LinearParams) -> Vec<f64> {
    linear_ref(x, p.weight.data(), p.bias.data(), p.in_dim(), p.out_dim())
}

/// Depthwise cross-correlation, zero padding `(k−1)·dil/2`, stride 1.
#[allow(clippy::too_many_arguments)]
pub fn dwconv_ref(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    k: usize,
    dil: usize,
) -> Vec<f64> {
    let pad = ((k - 1) * dil / 2) as isize;
    let mut y = vec![0.0; x.len()];
    for n in 0..b {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bias[ch];
                    for u in 0..k {
                        for v in 0..k {
                            let si = i as isize + (u * dil) as isize - pad;
                            let sj = j as isize + (v * dil) as isize - pad;
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            let xi = ((n * c + ch) * h + si as usize) * w + sj as usize;
                            acc += weight[(ch * k + u) * k + v] * x[xi];
                        }
                    }
                    y[((n * c + ch) * h + i) * w + j] = acc;
                }
            }
        }
    }
    y
}

pub fn layernorm_ref(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let d = gamma.len();
    let mut y = vec![0.0; x.len()];
    for (row, out) in x.chunks(d).zip(y.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for i in 0..d {
            out[i] = (row[i] - mean) / (var + eps).sqrt() * gamma[i] + beta[i];
        }
    }
    y
}

/// Standard softmax attention on one `[T, d]` sequence per batch entry.
pub fn msa_ref(
    x: &[f64],
    t: usize,
    d: usize,
    heads: usize,
    q: &LinearParams,
    k: &LinearParams,
    v: &LinearParams,
    out: &LinearParams,
) -> Vec<f64> {
    let hd = d / heads;
    let mut y = Vec::with_capacity(x.len());
    for seq in x.chunks(t * d) {
        let qs = linear_params_ref(seq, q);
        let ks = linear_params_ref(seq, k);
        let vs = linear_params_ref(seq, v);
        let mut ctx = vec![0.0; t * d];
        for h in 0..heads {
            for i in 0..t {
                let mut scores = vec![0.0; t];
                for (j, s) in scores.iter_mut().enumerate() {
                    for e in 0..hd {
                        *s += qs[i * d + h * hd + e] * ks[j * d + h * hd + e];
                    }
                    *s /= (hd as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..t {
                    let a = (scores[j] - m).exp() / z;
                    for e in 0..hd {
                        ctx[i * d + h * hd + e] += a * vs[j * d + h * hd + e];
                    }
                }
            }
        }
        y.extend(linear_params_ref(&ctx, out));
    }
    y
}

pub fn mlp_ref(x: &[f64], fc1: &LinearParams, fc2: &LinearParams) -> Vec<f64> {
    let h: Vec<f64> = linear_params_ref(x, fc1)
        .into_iter()
        .map(gelu_ref)
        .collect();
    linear_params_ref(&h, fc2)
}

/// Adapter with residual on `[B, T, d]` tokens; the first `cls` tokens of each
/// sequence skip the convolution stack in bottleneck space.
#[allow(clippy::too_many_arguments)]
pub fn adapter_ref(
    x: &[f64],
    (b, t, _d): (usize, usize, usize),
    down: &LinearParams,
    convs: &[(&[f64], &[f64], usize, usize)],
    up: &LinearParams,
    (gh, gw): (usize, usize),
    cls: usize,
) -> Vec<f64> {
    let dh = down.out_dim();
    let h = linear_params_ref(x, down);
    let mut mid = h.clone();
    for n in 0..b {
        // tokens → [1, d̂, gh, gw]
        let mut planes = vec![0.0; dh * gh * gw];
        for p in 0..gh * gw {
            for c in 0..dh {
                planes[c * gh * gw + p] = h[(n * t + cls + p) * dh + c];
            }
        }
        for &(w, bias, k, dil) in convs {
            planes = dwconv_ref(&planes, (1, dh, gh, gw), w, bias, k, dil);
        }
        for p in 0..gh * gw {
            for c in 0..dh {
                mid[(n * t + cls + p) * dh + c] = planes[c * gh * gw + p];
            }
        }
    }
    let act: Vec<f64> = mid.into_iter().map(gelu_ref).collect();
    let branch = linear_params_ref(&act, up);
    x.iter().zip(&branch).map(|(a, b)| a + b).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `(a/S)²` for the smallest odd centred square side whose clipped window,
/// summed pixel by pixel, holds at least `t` of the total.
pub fn area_ratio_scan(e: &ErfMap, t: f64) -> f64 {
    let s = e.size;
    let c = (s as isize + 1) / 2 - 1;
    let total: f64 = e.matrix.iter().sum();
    let mut a = 1;
    loop {
        let half = (a as isize - 1) / 2;
        let mut mass = 0.0;
        for r in 0..s as isize {
            for col in 0..s as isize {
                if (r - c).abs() <= half && (col - c).abs() <= half {
                    mass += e.matrix[r as usize * s + col as usize];
                }
            }
        }
        if mass >= t * total || a >= s {
            let side = a.min(s) as f64;
            return (side / s as f64).powi(2);
        }
        a += 2;
    }
}

/// Weighted-sum loss `Σ out ⊙ r` with a fixed random `r`, so every output
/// element contributes a distinct cotangent.
pub fn probe_loss(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = random_tensor(&shape, 1.0, &mut rng(seed));
    let rv = tape.constant(&r);
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

/// Central-difference check of every parameter gradient of `p` (at most
/// `per_tensor` sampled elements per tensor). Returns the worst relative error
/// `|a − n| / max(1, |a|)`.
pub fn param_fd<P, F>(p: &P, loss: F, h: f64, per_tensor: usize, seed: u64) -> f64
where
    P: Parameterized + Clone,
    F: Fn(&mut Tape, &P) -> Result<Var>,
{
    let mut tracked = p.clone();
    tracked.visit_mut("", &mut |_, t| t.set_requires_grad(true));
    let mut tape = Tape::new();
    let out = match loss(&mut tape, &tracked) {
        Ok(o) => o,
        Err(_) => return f64::INFINITY,
    };
    let grads = match tape.backward(out) {
        Ok(g) => g,
        Err(_) => return f64::INFINITY,
    };
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    tracked.visit("", &mut |name, t| {
        let g = grads
            .get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        analytic.push((name, g));
    });
    let eval = |q: &P| -> f64 {
        let mut tape = Tape::inference();
        match loss(&mut tape, q) {
            Ok(o) => tape.value(o)[0],
            Err(_) => f64::NAN,
        }
    };
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for (name, g) in &analytic {
        for _ in 0..per_tensor.min(g.len()) {
            let i = r.gen_range(0..g.len());
            let shifted = |delta: f64| {
                let mut q = p.clone();
                let mut x0 = 0.0;
                let mut step = 0.0;
                q.visit_mut("", &mut |n, t| {
                    if &n == name {
                        x0 = t.data()[i];
                        step = h * x0.abs().max(1.0);
                        t.data_mut()[i] = x0 + delta * step;
                    }
                });
                (eval(&q), step)
            };
            let (plus, step) = shifted(1.0);
            let (minus, _) = shifted(-1.0);
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return f64::INFINITY;
            }
            worst = worst.max((g[i] - numeric).abs() / g[i].abs().max(1.0));
        }
    }
    worst
}
