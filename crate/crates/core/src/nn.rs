//! Named parameters and the layers built from them.

use std::collections::BTreeMap;

use crate::autodiff::{dims4, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered map from hierarchical parameter names (`enc.s0.conv1.kernel`) to
/// trainable tensors. Iteration is sorted by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

/// Graph handles for every entry of a [`ParamStore`], produced by
/// [`ParamStore::bind`]. Every layer that reads a name within one graph gets the
/// same [`Var`], so gradient contributions from both siamese branches
/// accumulate on a single node.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Handles for parameters placed into a graph by other means.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        ParamVars {
            vars: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// 64-bit FNV-1a; used to give every parameter an initialization stream that
/// depends only on the model seed and its name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries
            .insert(name.to_string(), tensor.with_requires_grad(true));
        Ok(())
    }

    /// Registers a parameter drawn uniformly from `[-bound, bound)`.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], bound: f64, seed: u64) -> Result<()> {
        let t = Tensor::uniform(shape, seed ^ name_hash(name), -bound, bound)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(k, t)| {
                let mut t = t.clone();
                t.zero_grad();
                (k.clone(), g.param(t))
            })
            .collect();
        ParamVars { vars }
    }

    /// Adds the gradients accumulated in `g` onto the stored tensors.
    pub fn absorb_grads(&mut self, g: &Graph, vars: &ParamVars) {
        for (name, v) in vars.iter() {
            if let (Some(t), Some(grad)) = (self.entries.get_mut(name), g.grad(v)) {
                t.accumulate_grad(grad);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }
}

/// Fan-in uniform bound `sqrt(1 / (cin * k * k))`.
pub fn fan_in_bound(cin: usize, k: usize) -> f64 {
    (1.0 / (cin * k * k) as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: String,
    pub bias: Option<String>,
    pub pad: usize,
}

impl Conv2d {
    /// Registers `{name}.kernel` (fan-in uniform) and `{name}.bias` (zeros).
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        let kernel = format!("{name}.kernel");
        let bias = format!("{name}.bias");
        store.insert_uniform(&kernel, &[cout, cin, k, k], fan_in_bound(cin, k), seed)?;
        store.insert(&bias, Tensor::zeros(&[cout])?)?;
        Ok(Conv2d {
            kernel,
            bias: Some(bias),
            pad: k / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var) -> Result<Var> {
        let k = p.get(&self.kernel)?;
        let b = self.bias.as_deref().map(|n| p.get(n)).transpose()?;
        g.conv2d(x, k, b, 1, self.pad)
    }
}

/// Two 3×3 same-padding convolutions, each followed by ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ConvBlock {
    pub fn register(store: &mut ParamStore, name: &str, cin: usize, cout: usize, seed: u64) -> Result<Self> {
        Ok(ConvBlock {
            conv1: Conv2d::register(store, &format!("{name}.conv1"), cin, cout, 3, seed)?,
            conv2: Conv2d::register(store, &format!("{name}.conv2"), cout, cout, 3, seed)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, p, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, p, h)?;
        g.relu(h)
    }
}

/// Scaled dot-product self-attention over the spatial positions of a feature
/// map, with 1×1 query/key/value projections and a residual connection:
///
/// `out = f + V · softmax(Qᵀ K / √C)ᵀ`, all flattened to `C×(H·W)` per item.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub channels: usize,
}

impl SpatialAttention {
    /// Query and key projections start fan-in uniform; the value projection
    /// starts at zero so the layer is initially the identity.
    pub fn register(store: &mut ParamStore, name: &str, channels: usize, seed: u64) -> Result<Self> {
        let shape = [channels, channels, 1, 1];
        let bound = fan_in_bound(channels, 1);
        let att = SpatialAttention {
            wq: format!("{name}.wq"),
            wk: format!("{name}.wk"),
            wv: format!("{name}.wv"),
            channels,
        };
        store.insert_uniform(&att.wq, &shape, bound, seed)?;
        store.insert_uniform(&att.wk, &shape, bound, seed)?;
        store.insert(&att.wv, Tensor::zeros(&shape)?)?;
        Ok(att)
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, f: Var, cap: usize) -> Result<Var> {
        spatial_self_attention(g, f, p.get(&self.wq)?, p.get(&self.wk)?, p.get(&self.wv)?, cap)
    }
}

/// See [`SpatialAttention`]. `wq`, `wk`, `wv` are `C×C×1×1` kernels; the
/// attention matrix is `(H·W)²` per batch item, so `H·W` must not exceed `cap`.
pub fn spatial_self_attention(
    g: &mut Graph,
    f: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    cap: usize,
) -> Result<Var> {
    let [b, c, h, w] = dims4(g.shape(f))?;
    let n = h * w;
    if n > cap {
        return Err(Error::Config(format!(
            "spatial attention over {h}×{w} = {n} positions exceeds the cap of {cap}; \
             apply attention only at coarser scales or raise attention_cap"
        )));
    }
    for wt in [wq, wk, wv] {
        if g.shape(wt) != [c, c, 1, 1] {
            return Err(Error::shape(format!(
                "attention projection must be [{c}, {c}, 1, 1], got {:?}",
                g.shape(wt)
            )));
        }
    }
    let q = g.conv2d(f, wq, None, 1, 0)?;
    let k = g.conv2d(f, wk, None, 1, 0)?;
    let v = g.conv2d(f, wv, None, 1, 0)?;
    let q = g.reshape(q, &[b, c, n])?;
    let k = g.reshape(k, &[b, c, n])?;
    let v = g.reshape(v, &[b, c, n])?;
    let scores = g.batch_matmul(q, k, true, false)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
    let attn = g.softmax_rows(scores)?;
    let out = g.batch_matmul(v, attn, false, true)?;
    let out = g.reshape(out, &[b, c, h, w])?;
    g.add(f, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_many, DEFAULT_STEP};

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[1]).unwrap()).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1]).unwrap()).is_err());
        assert!(s.get("a").unwrap().requires_grad());
    }

    #[test]
    fn init_depends_on_name_not_order() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        a.insert_uniform("x", &[4], 1.0, 7).unwrap();
        a.insert_uniform("y", &[4], 1.0, 7).unwrap();
        b.insert_uniform("y", &[4], 1.0, 7).unwrap();
        b.insert_uniform("x", &[4], 1.0, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.get("x").unwrap().data(), a.get("y").unwrap().data());
    }

    #[test]
    fn conv_block_zero_input_gives_zero() {
        let mut store = ParamStore::new();
        let block = ConvBlock::register(&mut store, "blk", 2, 3, 1).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 2, 5, 4]).unwrap());
        let y = block.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 5, 4]);
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_block_channel_mismatch() {
        let mut store = ParamStore::new();
        let block = ConvBlock::register(&mut store, "blk", 2, 3, 1).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]).unwrap());
        assert!(matches!(block.forward(&mut g, &p, x), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn conv_block_kernel_gradients() {
        let mut store = ParamStore::new();
        ConvBlock::register(&mut store, "blk", 2, 3, 4).unwrap();
        // Nonzero biases keep most ReLUs away from their kink.
        store
            .get_mut("blk.conv1.bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.3, 0.2, 0.25]);
        store
            .get_mut("blk.conv2.bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.3, 0.2, 0.25]);
        let names = ["blk.conv1.kernel", "blk.conv2.kernel"];
        let mut inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        inputs.push(Tensor::uniform(&[2, 2, 5, 5], 9, 0.0, 1.0).unwrap());
        let report = grad_check_many(
            |g, v| {
                let b1 = g.constant(store.get("blk.conv1.bias").unwrap().clone());
                let b2 = g.constant(store.get("blk.conv2.bias").unwrap().clone());
                let h = g.conv2d(v[2], v[0], Some(b1), 1, 1)?;
                let h = g.relu(h)?;
                let h = g.conv2d(h, v[1], Some(b2), 1, 1)?;
                let h = g.relu(h)?;
                g.sum(h)
            },
            &inputs,
            None,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn attention_store(c: usize, seed: u64) -> (ParamStore, SpatialAttention) {
        let mut store = ParamStore::new();
        let att = SpatialAttention::register(&mut store, "att", c, seed).unwrap();
        (store, att)
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let (store, att) = attention_store(3, 2);
        let f = Tensor::uniform(&[2, 3, 2, 3], 1, -1.0, 1.0).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let fv = g.constant(f.clone());
        let out = att.forward(&mut g, &p, fv, 4096).unwrap();
        assert_eq!(g.data(out), f.data());
    }

    #[test]
    fn constant_field_with_identity_projections_doubles() {
        let c = 2;
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        let eye = Tensor::new(&[c, c, 1, 1], eye).unwrap();
        let mut f = vec![0.0; c * 9];
        f[..9].fill(0.7);
        f[9..].fill(-1.3);
        let f = Tensor::new(&[1, c, 3, 3], f).unwrap();
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let w = g.constant(eye);
        let out = spatial_self_attention(&mut g, fv, w, w, w, 4096).unwrap();
        for (o, x) in g.data(out).iter().zip(f.data()) {
            assert!((o - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn cap_is_enforced() {
        let (store, att) = attention_store(1, 0);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(Tensor::zeros(&[1, 1, 4, 4]).unwrap());
        assert!(matches!(att.forward(&mut g, &p, f, 15), Err(Error::Config(_))));
        assert!(att.forward(&mut g, &p, f, 16).is_ok());
    }

    #[test]
    fn bind_shares_one_var_per_name() {
        let mut store = ParamStore::new();
        let conv = Conv2d::register(&mut store, "c", 1, 1, 1, 0).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::ones(&[1, 1, 2, 2]).unwrap());
        let y1 = conv.forward(&mut g, &p, x).unwrap();
        let y2 = conv.forward(&mut g, &p, x).unwrap();
        let s = g.add(y1, y2).unwrap();
        let s = g.sum(s).unwrap();
        g.backward(s).unwrap();
        // Both uses contribute: d/dk of 2·Σ k·x = 2·4.
        assert_eq!(g.grad(p.get("c.kernel").unwrap()).unwrap(), &[8.0]);
        store.absorb_grads(&g, &p);
        assert_eq!(store.get("c.bias").unwrap().grad().unwrap(), &[8.0]);
    }
}
