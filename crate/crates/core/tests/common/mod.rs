//! Naive reference implementations shared by the integration tests. Each one
//! is written straight from the definition with explicit loops and no shared
//! code with the library kernels.
#![allow(dead_code)]

use dualunet::autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod sweeps;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Evaluates a graph-building closure on constant inputs and returns the
/// output tensor.
pub fn eval(inputs: &[Tensor], f: impl FnOnce(&mut Graph, &[Var]) -> Var) -> Tensor {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).clone()
}

/// Direct six-loop cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_naive(
    x: &[f64],
    [b, cin, h, w]: [usize; 4],
    k: &[f64],
    [cout, _, kh, kw]: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((n * cin + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((n * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [b, cout, oh, ow])
}

pub fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Transposes every `r×c` matrix of a batch.
pub fn transpose_batch(x: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        for i in 0..r {
            for j in 0..c {
                out[n * r * c + j * r + i] = x[n * r * c + i * c + j];
            }
        }
    }
    out
}

/// 2×2 stride-2 max pooling by scanning each window.
pub fn maxpool2_naive(x: &[f64], [b, c, h, w]: [usize; 4]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * oh * ow];
    for p in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(x[(p * h + 2 * oy + dy) * w + 2 * ox + dx]);
                    }
                }
                out[(p * oh + oy) * ow + ox] = best;
            }
        }
    }
    out
}

/// Half-pixel bilinear sampling position in the input for output index `o`.
fn source_coord(o: usize, factor: usize, n_in: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear upsampling (half-pixel centers, edge clamp) from the closed form.
pub fn upsample_naive(x: &[f64], [b, c, h, w]: [usize; 4], factor: usize) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; b * c * oh * ow];
    for p in 0..b * c {
        for oy in 0..oh {
            let (y0, y1, fy) = source_coord(oy, factor, h);
            for ox in 0..ow {
                let (x0, x1, fx) = source_coord(ox, factor, w);
                let at = |y: usize, xx: usize| x[(p * h + y) * w + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(p * oh + oy) * ow + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Residual spatial self-attention with explicit `(HW)²` loops:
/// `out[c, i] = f[c, i] + Σ_j softmax_j(q_i · k_j / √C) v[c, j]`.
pub fn attention_naive(f: &[f64], [b, c, h, w]: [usize; 4], wq: &[f64], wk: &[f64], wv: &[f64]) -> Vec<f64> {
    let n = h * w;
    let mut out = f.to_vec();
    let project = |wt: &[f64], bi: usize| -> Vec<f64> {
        let mut p = vec![0.0; c * n];
        for co in 0..c {
            for pos in 0..n {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += wt[co * c + ci] * f[(bi * c + ci) * n + pos];
                }
                p[co * n + pos] = acc;
            }
        }
        p
    };
    for bi in 0..b {
        let q = project(wq, bi);
        let k = project(wk, bi);
        let v = project(wv, bi);
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..c).map(|ch| q[ch * n + i] * k[ch * n + j]).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            for ch in 0..c {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += exps[j] / z * v[ch * n + j];
                }
                out[(bi * c + ch) * n + i] += acc;
            }
        }
    }
    out
}
