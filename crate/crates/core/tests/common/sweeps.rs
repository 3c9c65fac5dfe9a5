//! Randomized sweeps of library kernels against the naive references. Each
//! returns the worst absolute deviation seen; shapes are asserted exactly.

use super::*;
use dualunet::nn::spatial_self_attention;
use rand::Rng;

pub fn conv2d(seed: u64, instances: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let b = r.random_range(1..=3);
        let cin = r.random_range(1..=4);
        let cout = r.random_range(1..=4);
        let k = [1, 2, 3][r.random_range(0..3)];
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=k / 2 + 1);
        let h = r.random_range(k.max(1)..=8);
        let w = r.random_range(k.max(1)..=8);
        let x = random_tensor(&mut r, &[b, cin, h, w]);
        let kern = random_tensor(&mut r, &[cout, cin, k, k]);
        let bias = random_tensor(&mut r, &[cout]);
        let with_bias = r.random_bool(0.5);
        let (want, shape) = conv2d_naive(
            x.data(),
            [b, cin, h, w],
            kern.data(),
            [cout, cin, k, k],
            with_bias.then(|| bias.data()),
            stride,
            pad,
        );
        let got = eval(&[x, kern, bias], |g, v| {
            g.conv2d(v[0], v[1], with_bias.then_some(v[2]), stride, pad).unwrap()
        });
        assert_eq!(got.shape(), shape);
        worst = worst.max(max_abs_diff(got.data(), &want));
    }
    worst
}

pub fn matmul(seed: u64, instances: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (m, k, n) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8));
        let a = random_tensor(&mut r, &[m, k]);
        let b = random_tensor(&mut r, &[k, n]);
        let want = matmul_naive(a.data(), b.data(), m, k, n);
        let got = eval(&[a, b], |g, v| g.matmul(v[0], v[1]).unwrap());
        assert_eq!(got.shape(), [m, n]);
        worst = worst.max(max_abs_diff(got.data(), &want));
    }
    worst
}

pub fn batch_matmul(seed: u64, instances: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (ta, tb) = (i % 2 == 1, (i / 2) % 2 == 1);
        let (bs, m, k, n) = (
            r.random_range(1..=3),
            r.random_range(1..=8),
            r.random_range(1..=8),
            r.random_range(1..=8),
        );
        let a_shape = if ta { [bs, k, m] } else { [bs, m, k] };
        let b_shape = if tb { [bs, n, k] } else { [bs, k, n] };
        let a = random_tensor(&mut r, &a_shape);
        let b = random_tensor(&mut r, &b_shape);
        let a_plain = if ta { transpose_batch(a.data(), bs, k, m) } else { a.data().to_vec() };
        let b_plain = if tb { transpose_batch(b.data(), bs, n, k) } else { b.data().to_vec() };
        let want: Vec<f64> = (0..bs)
            .flat_map(|p| {
                matmul_naive(&a_plain[p * m * k..(p + 1) * m * k], &b_plain[p * k * n..(p + 1) * k * n], m, k, n)
            })
            .collect();
        let got = eval(&[a, b], |g, v| g.batch_matmul(v[0], v[1], ta, tb).unwrap());
        assert_eq!(got.shape(), [bs, m, n]);
        worst = worst.max(max_abs_diff(got.data(), &want));
    }
    worst
}

pub fn maxpool2(seed: u64, instances: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let shape = [
            r.random_range(1..=3),
            r.random_range(1..=4),
            2 * r.random_range(1..=4),
            2 * r.random_range(1..=4),
        ];
        let x = random_tensor(&mut r, &shape);
        let want = maxpool2_naive(x.data(), shape);
        let got = eval(&[x], |g, v| g.maxpool2(v[0]).unwrap());
        assert_eq!(got.shape(), [shape[0], shape[1], shape[2] / 2, shape[3] / 2]);
        worst = worst.max(max_abs_diff(got.data(), &want));
    }
    worst
}

pub fn upsample(seed: u64, instances: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let shape = [
            r.random_range(1..=2),
            r.random_range(1..=3),
            r.random_range(1..=8),
            r.random_range(1..=8),
        ];
        let factor = [2, 4, 8][r.random_range(0..3)];
        let x = random_tensor(&mut r, &shape);
        let want = upsample_naive(x.data(), shape, factor);
        let got = eval(&[x], |g, v| g.upsample_bilinear(v[0], factor).unwrap());
        assert_eq!(got.shape(), [shape[0], shape[1], shape[2] * factor, shape[3] * factor]);
        worst = worst.max(max_abs_diff(got.data(), &want));
    }
    worst
}

pub fn attention(seed: u64, instances: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let shape = [
            r.random_range(1..=2),
            r.random_range(1..=4),
            r.random_range(1..=8),
            r.random_range(1..=8),
        ];
        let c = shape[1];
        let f = random_tensor(&mut r, &shape);
        let wq = random_tensor(&mut r, &[c, c, 1, 1]);
        let wk = random_tensor(&mut r, &[c, c, 1, 1]);
        let wv = random_tensor(&mut r, &[c, c, 1, 1]);
        let want = attention_naive(f.data(), shape, wq.data(), wk.data(), wv.data());
        let got = eval(&[f, wq, wk, wv], |g, v| {
            spatial_self_attention(g, v[0], v[1], v[2], v[3], 64).unwrap()
        });
        assert_eq!(got.shape(), shape);
        worst = worst.max(max_abs_diff(got.data(), &want));
    }
    worst
}
