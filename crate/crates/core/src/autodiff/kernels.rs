//! Slice-level compute kernels behind the graph operations.
//!
//! Everything here works on flat row-major buffers. Shape validation happens in
//! the graph layer; the asserts below only guard memory safety of the GEMM call.

use std::cell::Cell;

/// Strided view of a row-major matrix: element `(i, j)` lives at
/// `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        View { data, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows×cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View { data, rs: 1, cs: cols }
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

fn max_offset(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows - 1) * rs + (cols - 1) * cs
}

/// `out = lhs · rhs + beta · out` where `lhs` is `m×k` and `rhs` is `k×n`; `out`
/// is written through strides `(rso, cso)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    lhs: View<'_>,
    rhs: View<'_>,
    beta: f64,
    out: &mut [f64],
    rso: usize,
    cso: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                out[i * rso + j * cso] *= beta;
            }
        }
        return;
    }
    assert!(max_offset(m, k, lhs.rs, lhs.cs) < lhs.data.len());
    assert!(max_offset(k, n, rhs.rs, rhs.cs) < rhs.data.len());
    assert!(max_offset(m, n, rso, cso) < out.len());
    // SAFETY: the asserts above bound every offset matrixmultiply touches, and
    // `out` is a unique borrow disjoint from both inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            lhs.data.as_ptr(),
            lhs.rs as isize,
            lhs.cs as isize,
            rhs.data.as_ptr(),
            rhs.rs as isize,
            rhs.cs as isize,
            beta,
            out.as_mut_ptr(),
            rso as isize,
            cso as isize,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn in_plane(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_plane(&self) -> usize {
        self.cout * self.oh * self.ow
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1 stride-1 unpadded convolution reads its input directly as the
    /// column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kx - pad` lies
/// inside `0..w`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx { (g.pad - kx).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kx {
        ((g.w - 1 + g.pad - kx) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let ncol = g.col_cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * ncol..(row + 1) * ncol];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncol = g.col_cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * ncol..(row + 1) * ncol];
                let (lo, hi) = valid_cols(g, kx);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                        *d += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    batch: usize,
    kernel: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * g.out_plane()];
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * ncol]
    };
    for b in 0..batch {
        let xb = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
        let ob = &mut out[b * g.out_plane()..(b + 1) * g.out_plane()];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(ncol).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let cols = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        gemm(
            g.cout,
            rows,
            ncol,
            View::rows(kernel, rows),
            View::rows(cols, ncol),
            1.0,
            ob,
            ncol,
            1,
        );
    }
    out
}

thread_local! {
    static TAMPER_CONV_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Fault-injection hook for negative-control tests of the gradient checker:
/// while enabled on the current thread, the convolution kernel gradient is
/// deliberately perturbed by 0.1%.
#[doc(hidden)]
pub fn tamper_conv_backward(on: bool) {
    TAMPER_CONV_BACKWARD.with(|t| t.set(on));
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dkernel: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    batch: usize,
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let mut dx = need.0.then(|| vec![0.0; batch * g.in_plane()]);
    let mut dk = need.1.then(|| vec![0.0; g.cout * rows]);
    let mut db = need.2.then(|| vec![0.0; g.cout]);
    let mut col = vec![0.0; if g.is_pointwise() { 0 } else { rows * ncol }];
    let mut dcol = vec![0.0; if dx.is_some() { rows * ncol } else { 0 }];
    for b in 0..batch {
        let db_out = &dout[b * g.out_plane()..(b + 1) * g.out_plane()];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in db_out.chunks(ncol).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dk) = dk.as_mut() {
            let xb = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
            let cols = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut col);
                &col
            };
            // dK += dOut · colᵀ
            gemm(
                g.cout,
                ncol,
                rows,
                View::rows(db_out, ncol),
                View::transposed(cols, ncol),
                1.0,
                dk,
                rows,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.in_plane()..(b + 1) * g.in_plane()];
            // dcol = Kᵀ · dOut
            if g.is_pointwise() {
                gemm(
                    rows,
                    g.cout,
                    ncol,
                    View::transposed(kernel, rows),
                    View::rows(db_out, ncol),
                    0.0,
                    dxb,
                    ncol,
                    1,
                );
            } else {
                gemm(
                    rows,
                    g.cout,
                    ncol,
                    View::transposed(kernel, rows),
                    View::rows(db_out, ncol),
                    0.0,
                    &mut dcol,
                    ncol,
                    1,
                );
                col2im(&dcol, g, dxb);
            }
        }
    }
    if TAMPER_CONV_BACKWARD.with(Cell::get) {
        if let Some(dk) = dk.as_mut() {
            dk.iter_mut().for_each(|v| *v *= 1.001);
        }
    }
    ConvGrads {
        dx,
        dkernel: dk,
        dbias: db,
    }
}

/// 2×2 stride-2 max pooling over `planes` planes of `h×w`. Returns the pooled
/// values and, per output, the flat input index of the first (row-major)
/// maximum of its window.
pub(crate) fn maxpool2_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let window = [top, top + 1, top + w, top + w + 1];
                let mut best = window[0];
                for &idx in &window[1..] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Source taps for one axis of an align-corners=false bilinear resize by an
/// integer factor: `(i0, i1, weight0, weight1)` per output coordinate.
pub(crate) fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn upsample_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * ow + ox] =
                    wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(
    dy: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += wy0 * wx0 * g;
                dst[y0 * w + x1] += wy0 * wx1 * g;
                dst[y1 * w + x0] += wy1 * wx0 * g;
                dst[y1 * w + x1] += wy1 * wx1 * g;
            }
        }
    }
    dx
}

/// Numerically stable softmax over consecutive rows of length `n`.
pub(crate) fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        let inv = 1.0 / sum;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

pub(crate) fn softmax_rows_backward(y: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}
