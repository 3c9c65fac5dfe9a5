//! Define-by-run computation graph.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation validates its
//! inputs, computes its value eagerly, and records what its backward rule
//! needs. Because a node can only reference nodes that already exist, arena
//! order is a topological order and [`Graph::backward`] is a single reverse
//! sweep.

use crate::autodiff::kernels::{self, ConvGeom, View};
use crate::autodiff::tensor::{check_shape, dims2, dims3, dims4, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Abs,
    Relu,
    Sigmoid,
    Scale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        dims: (usize, usize, usize, usize),
    },
    SoftmaxRows(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    ConcatChannels(Var, Var),
    Reduce {
        input: Var,
        kind: Reduction,
        out_index: Vec<usize>,
    },
    Reshape(Var),
    ScaleSpatial {
        input: Var,
        weight: Var,
    },
    ChannelNorm(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Arena of recorded operations; see the module docs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as an input. It participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf, present after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Resets every leaf gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor::new(shape, data)?.with_requires_grad(rg);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.same_shape(a, b, what)?;
        Ok(self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data(a).iter().map(|&x| f(x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::Mul(a, b), &[a, b])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let data = self.unary(a, f64::abs);
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::Abs(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.unary(a, |x| x.max(0.0));
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.unary(a, |x| 1.0 / (1.0 + (-x).exp()));
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::Sigmoid(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.unary(a, |x| c * x);
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::Scale(a, c), &[a])
    }

    /// Dispatches one of the elementwise operations; `b` is required for the
    /// binary ones and ignored otherwise.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let rhs = || b.ok_or_else(|| Error::shape(format!("{op:?} needs a second operand")));
        match op {
            Elementwise::Add => self.add(a, rhs()?),
            Elementwise::Sub => self.sub(a, rhs()?),
            Elementwise::Mul => self.mul(a, rhs()?),
            Elementwise::Abs => self.abs(a),
            Elementwise::Relu => self.relu(a),
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::Scale(c) => self.scale(a, c),
        }
    }

    /// `M×K · K×N` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = dims2(self.shape(a))?;
        let [k2, n] = dims2(self.shape(b))?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner dimensions differ ({m}×{k} · {k2}×{n})"
            )));
        }
        self.matmul_impl(a, b, false, false, (1, m, k, n), vec![m, n])
    }

    /// Batched product `op(a[i]) · op(b[i])` over the leading dimension, where
    /// `op` optionally transposes the trailing two axes.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let [ba, a0, a1] = dims3(self.shape(a))?;
        let [bb, b0, b1] = dims3(self.shape(b))?;
        let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
        let (k2, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if ba != bb || k != k2 {
            return Err(Error::shape(format!(
                "batch_matmul: incompatible operands {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        self.matmul_impl(a, b, trans_a, trans_b, (ba, m, k, n), vec![ba, m, n])
    }

    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        dims: (usize, usize, usize, usize),
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let (batch, m, k, n) = dims;
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..batch {
                let lhs = operand_view(&da[i * m * k..(i + 1) * m * k], m, k, trans_a);
                let rhs = operand_view(&db[i * k * n..(i + 1) * k * n], k, n, trans_b);
                kernels::gemm(m, k, n, lhs, rhs, 0.0, &mut out[i * m * n..(i + 1) * m * n], n, 1);
            }
        }
        let op = Op::MatMul {
            a,
            b,
            trans_a,
            trans_b,
            dims,
        };
        self.push(&out_shape, out, op, &[a, b])
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("softmax_rows needs a tensor of rank >= 2"));
        }
        let n = *shape.last().unwrap();
        let data = kernels::softmax_rows(self.data(a), n);
        self.push(&shape, data, Op::SoftmaxRows(a), &[a])
    }

    /// Cross-correlation of `input` (`B×Cin×H×W`) with `kernel`
    /// (`Cout×Cin×k×k`) and zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [b, cin, h, w] = dims4(self.shape(input))?;
        let [cout, kcin, kh, kw] = dims4(self.shape(kernel))?;
        if kcin != cin {
            return Err(Error::shape(format!(
                "conv2d: kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if kh != kw {
            return Err(Error::shape(format!("conv2d: kernel must be square, got {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}×{kw} exceeds padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::shape(format!(
                    "conv2d: bias shape {:?} does not match {cout} output channels",
                    self.shape(bv)
                )));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.data(input),
            b,
            self.data(kernel),
            bias.map(|bv| self.data(bv)),
            &geom,
        );
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        let op = Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        };
        self.push(&[b, cout, geom.oh, geom.ow], out, op, &inputs)
    }

    /// 2×2 max pooling with stride 2.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self.shape(input))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "maxpool2 needs even spatial dims, got {h}×{w}"
            )));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.data(input), b * c, h, w);
        self.push(&[b, c, h / 2, w / 2], out, Op::MaxPool2 { input, argmax }, &[input])
    }

    /// Bilinear 2× upsampling (align-corners=false).
    pub fn upsample_bilinear2(&mut self, input: Var) -> Result<Var> {
        self.upsample_bilinear(input, 2)
    }

    /// Bilinear upsampling by an integer `factor` (align-corners=false).
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        let [b, c, h, w] = dims4(self.shape(input))?;
        if factor == 0 {
            return Err(Error::shape("upsample factor must be >= 1"));
        }
        let out = kernels::upsample_forward(self.data(input), b * c, h, w, factor);
        self.push(
            &[b, c, h * factor, w * factor],
            out,
            Op::Upsample { input, factor },
            &[input],
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, c1, h, w] = dims4(self.shape(a))?;
        let [bb, c2, h2, w2] = dims4(self.shape(b))?;
        if ba != bb || h != h2 || w != w2 {
            return Err(Error::shape(format!(
                "concat_channels: {:?} and {:?} disagree outside the channel axis",
                self.shape(a),
                self.shape(b)
            )));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(ba * (c1 + c2) * plane);
        for i in 0..ba {
            out.extend_from_slice(&self.data(a)[i * c1 * plane..(i + 1) * c1 * plane]);
            out.extend_from_slice(&self.data(b)[i * c2 * plane..(i + 1) * c2 * plane]);
        }
        self.push(&[ba, c1 + c2, h, w], out, Op::ConcatChannels(a, b), &[a, b])
    }

    /// Sums or averages over `axes` (all axes when `None`). Reduced axes are
    /// dropped; a full reduction yields shape `[1]`.
    pub fn reduce(&mut self, kind: Reduction, a: Var, axes: Option<&[usize]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut reduced = vec![axes.is_none(); rank];
        for &ax in axes.unwrap_or(&[]) {
            if ax >= rank {
                return Err(Error::InvalidAxis { axis: ax, rank });
            }
            reduced[ax] = true;
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        // Map every input position to its output position.
        let mut out_strides = vec![0usize; rank];
        let mut acc = 1;
        for ax in (0..rank).rev() {
            if !reduced[ax] {
                out_strides[ax] = acc;
                acc *= shape[ax];
            }
        }
        let n = self.value(a).numel();
        let mut out_index = vec![0usize; n];
        let mut coord = vec![0usize; rank];
        for slot in out_index.iter_mut() {
            *slot = coord.iter().zip(&out_strides).map(|(c, s)| c * s).sum();
            for ax in (0..rank).rev() {
                coord[ax] += 1;
                if coord[ax] < shape[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }
        let out_n: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_n];
        for (&o, &v) in out_index.iter().zip(self.data(a)) {
            out[o] += v;
        }
        if kind == Reduction::Mean {
            let count = (n / out_n) as f64;
            out.iter_mut().for_each(|v| *v /= count);
        }
        self.push(
            &out_shape,
            out,
            Op::Reduce {
                input: a,
                kind,
                out_index,
            },
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, a, None)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = check_shape(shape)?;
        if n != self.value(a).numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let data = self.data(a).to_vec();
        self.push(shape, data, Op::Reshape(a), &[a])
    }

    /// Multiplies a `B×C×H×W` tensor by a single-channel `1×H×W` map shared
    /// across batch items and channels.
    pub fn scale_spatial(&mut self, input: Var, weight: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self.shape(input))?;
        if self.shape(weight) != [1, h, w] {
            return Err(Error::shape(format!(
                "scale_spatial: weight {:?} must be [1, {h}, {w}]",
                self.shape(weight)
            )));
        }
        let plane = h * w;
        let wd = self.data(weight);
        let out: Vec<f64> = self
            .data(input)
            .chunks(plane)
            .flat_map(|p| p.iter().zip(wd).map(|(x, y)| x * y))
            .collect();
        debug_assert_eq!(out.len(), b * c * plane);
        self.push(&[b, c, h, w], out, Op::ScaleSpatial { input, weight }, &[input, weight])
    }

    /// Per-pixel Euclidean norm over channels: `B×C×H×W → B×H×W`. The
    /// gradient at a zero-norm pixel is taken as zero.
    pub fn channel_norm(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self.shape(input))?;
        let plane = h * w;
        let x = self.data(input);
        let mut out = vec![0.0; b * plane];
        for i in 0..b {
            let dst = &mut out[i * plane..(i + 1) * plane];
            for ch in 0..c {
                let src = &x[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(d, v)| *d += v * v);
            }
            dst.iter_mut().for_each(|d| *d = d.sqrt());
        }
        self.push(&[b, h, w], out, Op::ChannelNorm(input), &[input])
    }

    /// Reverse sweep from a one-element `loss`. Gradients of leaves that
    /// require grad are accumulated into their grad buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.requires_grad() {
            return Err(Error::Detached);
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
            } else {
                self.backward_node(i, &g, &mut adj);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.requires_grad(v) {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    send(*a, g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect());
                }
                if self.requires_grad(*b) {
                    send(*b, g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Abs(a) => send(
                *a,
                g.iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect(),
            ),
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sigmoid(a) => send(
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            ),
            Op::Scale(a, c) => send(*a, g.iter().map(|v| c * v).collect()),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                dims: (batch, m, k, n),
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (da, db) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    // dA' = dC · B'ᵀ written back through A's layout.
                    let mut ga = vec![0.0; da.len()];
                    for bi in 0..batch {
                        let rhs = operand_view(&db[bi * k * n..(bi + 1) * k * n], k, n, *trans_b);
                        let (rs, cs) = if *trans_a { (1, m) } else { (k, 1) };
                        kernels::gemm(
                            m,
                            n,
                            k,
                            View::rows(&g[bi * m * n..(bi + 1) * m * n], n),
                            rhs.t(),
                            0.0,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            rs,
                            cs,
                        );
                    }
                    send(*a, ga);
                }
                if self.requires_grad(*b) {
                    // dB' = A'ᵀ · dC written back through B's layout.
                    let mut gb = vec![0.0; db.len()];
                    for bi in 0..batch {
                        let lhs = operand_view(&da[bi * m * k..(bi + 1) * m * k], m, k, *trans_a);
                        let (rs, cs) = if *trans_b { (1, k) } else { (n, 1) };
                        kernels::gemm(
                            k,
                            m,
                            n,
                            lhs.t(),
                            View::rows(&g[bi * m * n..(bi + 1) * m * n], n),
                            0.0,
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            rs,
                            cs,
                        );
                    }
                    send(*b, gb);
                }
            }
            Op::SoftmaxRows(a) => {
                let n = *out.shape().last().unwrap();
                send(*a, kernels::softmax_rows_backward(out.data(), g, n));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let need = (
                    self.requires_grad(*input),
                    self.requires_grad(*kernel),
                    bias.is_some_and(|b| self.requires_grad(b)),
                );
                let batch = self.shape(*input)[0];
                let grads = kernels::conv2d_backward(
                    self.data(*input),
                    batch,
                    self.data(*kernel),
                    g,
                    geom,
                    need,
                );
                if let Some(dx) = grads.dx {
                    send(*input, dx);
                }
                if let Some(dk) = grads.dkernel {
                    send(*kernel, dk);
                }
                if let (Some(b), Some(db)) = (bias, grads.dbias) {
                    send(*b, db);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
                send(*input, dx);
            }
            Op::Upsample { input, factor } => {
                let [b, c, h, w] = dims4(self.shape(*input)).expect("validated in forward");
                send(*input, kernels::upsample_backward(g, b * c, h, w, *factor));
            }
            Op::ConcatChannels(a, b) => {
                let [batch, c1, h, w] = dims4(self.shape(*a)).expect("validated in forward");
                let c2 = self.shape(*b)[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(batch * c1 * plane);
                let mut gb = Vec::with_capacity(batch * c2 * plane);
                for chunk in g.chunks((c1 + c2) * plane) {
                    ga.extend_from_slice(&chunk[..c1 * plane]);
                    gb.extend_from_slice(&chunk[c1 * plane..]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Reduce {
                input,
                kind,
                out_index,
            } => {
                let scale = match kind {
                    Reduction::Sum => 1.0,
                    Reduction::Mean => (g.len() as f64) / (out_index.len() as f64),
                };
                send(*input, out_index.iter().map(|&o| g[o] * scale).collect());
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::ScaleSpatial { input, weight } => {
                let wd = self.data(*weight);
                let plane = wd.len();
                if self.requires_grad(*input) {
                    let gx = g
                        .chunks(plane)
                        .flat_map(|p| p.iter().zip(wd).map(|(a, b)| a * b))
                        .collect();
                    send(*input, gx);
                }
                if self.requires_grad(*weight) {
                    let mut gw = vec![0.0; plane];
                    for (gp, xp) in g.chunks(plane).zip(self.data(*input).chunks(plane)) {
                        for ((acc, gv), xv) in gw.iter_mut().zip(gp).zip(xp) {
                            *acc += gv * xv;
                        }
                    }
                    send(*weight, gw);
                }
            }
            Op::ChannelNorm(input) => {
                let [b, c, h, w] = dims4(self.shape(*input)).expect("validated in forward");
                let plane = h * w;
                let x = self.data(*input);
                let y = out.data();
                let mut dx = vec![0.0; x.len()];
                for i in 0..b {
                    let yp = &y[i * plane..(i + 1) * plane];
                    let gp = &g[i * plane..(i + 1) * plane];
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        for p in 0..plane {
                            if yp[p] > 0.0 {
                                dx[off + p] = gp[p] * x[off + p] / yp[p];
                            }
                        }
                    }
                }
                send(*input, dx);
            }
        }
    }
}

fn operand_view(data: &[f64], rows: usize, cols: usize, transposed: bool) -> View<'_> {
    // `rows×cols` is the logical operand; a transposed operand is stored as
    // `cols×rows`.
    if transposed {
        View::transposed(data, rows)
    } else {
        View::rows(data, cols)
    }
}
