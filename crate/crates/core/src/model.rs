//! The siamese change-detection network.
//!
//! Both images go through one shared encoder. At every scale the two feature
//! maps are compared by the differential attention stage (MDAM): the absolute
//! difference is fused back into each branch by a 1×1 convolution and the
//! result is refined by spatial self-attention. Each branch is then decoded
//! by a shared U-Net decoder, and the weighted difference fusion stage (WDFM)
//! turns the per-scale decoder outputs into one distance map.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{dims3, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBlock, ParamStore, ParamVars, SpatialAttention};

/// Which parts of the architecture are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Shared-weight siamese U-Net, distance from the finest decoder scale.
    Base,
    /// `Base` plus differential attention in the encoder.
    Mdam,
    /// `Mdam` plus learned per-scale weights and all-scale distance fusion.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Base, Variant::Mdam, Variant::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Mdam => "mdam",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "mdam" => Ok(Variant::Mdam),
            "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected base, mdam or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of encoder/decoder scales.
    pub scales: usize,
    /// Channels at scale 0; doubled at every coarser scale.
    pub base_channels: usize,
    pub input_channels: usize,
    /// Side length of the (square) input images.
    pub input_size: usize,
    /// Hinge margin of the contrastive loss.
    pub margin: f64,
    /// Distance above which a pixel is predicted as changed.
    pub threshold: f64,
    pub variant: Variant,
    /// Largest `H·W` at which spatial attention is applied.
    pub attention_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: 4,
            base_channels: 16,
            input_channels: 3,
            input_size: 64,
            margin: 2.0,
            threshold: 1.0,
            variant: Variant::Full,
            attention_cap: 4096,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.scales < 2 {
            return fail(format!("scales must be >= 2, got {}", self.scales));
        }
        if self.base_channels == 0 {
            return fail("base_channels must be >= 1".into());
        }
        if self.input_channels != 3 {
            return fail(format!(
                "input_channels must be 3 (RGB), got {}",
                self.input_channels
            ));
        }
        let unit = 1usize << (self.scales - 1);
        if self.input_size == 0 || self.input_size % unit != 0 {
            return fail(format!(
                "input_size {} must be a positive multiple of 2^(scales-1) = {unit}",
                self.input_size
            ));
        }
        if !(self.margin > 0.0) {
            return fail(format!("margin must be > 0, got {}", self.margin));
        }
        if !(self.threshold > 0.0 && self.threshold < self.margin) {
            return fail(format!(
                "threshold must lie in (0, margin = {}), got {}",
                self.margin, self.threshold
            ));
        }
        if self.attention_cap == 0 {
            return fail("attention_cap must be >= 1".into());
        }
        Ok(())
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    pub fn size_at(&self, scale: usize) -> usize {
        self.input_size >> scale
    }
}

/// Per-pixel non-negative distance between the two decoded streams,
/// `B×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap(Tensor);

impl DistanceMap {
    pub fn new(t: Tensor) -> Result<Self> {
        dims3(t.shape())?;
        if let Some(v) = t.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Input(format!(
                "distance map entries must be finite and >= 0, found {v}"
            )));
        }
        Ok(DistanceMap(t.with_requires_grad(false)))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        dims3(self.0.shape()).expect("checked on construction")
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }
}

/// Binary `B×H×W` map; 1 marks a changed pixel. Used for both predictions
/// and labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMap {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl ChangeMap {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n == 0 || data.len() != n {
            return Err(Error::shape(format!(
                "change map {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Input(format!("change map values must be 0 or 1, found {v}")));
        }
        Ok(ChangeMap { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        ChangeMap {
            shape,
            data: vec![0; shape.iter().product()],
        }
    }

    /// Interprets a `B×H×W` tensor of exact 0/1 values.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = dims3(t.shape())?;
        let data = t
            .data()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0),
                1.0 => Ok(1),
                other => Err(Error::Input(format!(
                    "label values must be 0 or 1, found {other}"
                ))),
            })
            .collect::<Result<_>>()?;
        Ok(ChangeMap { shape, data })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("shape checked on construction")
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_changed(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Concatenates maps along the batch axis.
    pub fn stack(maps: &[ChangeMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero change maps"))?;
        let [_, h, w] = first.shape;
        let mut data = Vec::new();
        let mut b = 0;
        for m in maps {
            if m.shape[1..] != [h, w] {
                return Err(Error::shape("stacked change maps differ in size"));
            }
            b += m.shape[0];
            data.extend_from_slice(&m.data);
        }
        ChangeMap::new([b, h, w], data)
    }

    /// The `index`-th batch item as a `1×H×W` map.
    pub fn item(&self, index: usize) -> ChangeMap {
        let [_, h, w] = self.shape;
        ChangeMap {
            shape: [1, h, w],
            data: self.data[index * h * w..(index + 1) * h * w].to_vec(),
        }
    }
}

/// Thresholds a distance map: changed where `d > threshold`.
pub fn predict(d: &DistanceMap, threshold: f64) -> ChangeMap {
    ChangeMap {
        shape: d.shape(),
        data: d.data().iter().map(|&v| u8::from(v > threshold)).collect(),
    }
}

/// Which stages a forward pass runs. [`ForwardPlan::for_variant`] gives the
/// plan each ablation variant uses; other plans exist to exercise the
/// architecture with stages switched off.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardPlan {
    pub mdam: bool,
    pub scale_weights: bool,
    /// Decoder scales whose distances are averaged into the output.
    pub fusion_scales: Vec<usize>,
}

impl ForwardPlan {
    pub fn for_variant(variant: Variant, scales: usize) -> Self {
        match variant {
            Variant::Base => ForwardPlan {
                mdam: false,
                scale_weights: false,
                fusion_scales: vec![0],
            },
            Variant::Mdam => ForwardPlan {
                mdam: true,
                scale_weights: false,
                fusion_scales: vec![0],
            },
            Variant::Full => ForwardPlan {
                mdam: true,
                scale_weights: true,
                fusion_scales: (0..scales).collect(),
            },
        }
    }
}

#[derive(Debug, Clone)]
struct Mdam {
    fuse: Conv2d,
    attention: Option<SpatialAttention>,
}

/// Architecture description plus the parameters it owns.
#[derive(Debug, Clone)]
pub struct DualUNet {
    config: ModelConfig,
    params: ParamStore,
    encoder: Vec<ConvBlock>,
    /// `decoder[s]` produces the scale-`s` output for `s < scales - 1`.
    decoder: Vec<ConvBlock>,
    mdam: Vec<Mdam>,
    scale_weights: Vec<String>,
}

impl DualUNet {
    /// Builds the network for `config.variant` and initializes its
    /// parameters from `seed`. Parameter values depend only on `seed` and the
    /// parameter name, so variants built with one seed share every common
    /// parameter.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let s_count = config.scales;
        let mut encoder = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let cin = if s == 0 {
                config.input_channels
            } else {
                config.channels(s - 1)
            };
            encoder.push(ConvBlock::register(
                &mut params,
                &format!("enc.s{s}"),
                cin,
                config.channels(s),
                seed,
            )?);
        }
        let mut decoder = Vec::with_capacity(s_count - 1);
        for s in 0..s_count - 1 {
            let cin = config.channels(s + 1) + config.channels(s);
            decoder.push(ConvBlock::register(
                &mut params,
                &format!("dec.s{s}"),
                cin,
                config.channels(s),
                seed,
            )?);
        }
        let mut mdam = Vec::new();
        if config.variant != Variant::Base {
            for s in 0..s_count {
                let c = config.channels(s);
                let fuse = Conv2d::register(&mut params, &format!("mdam.s{s}.fuse"), 2 * c, c, 1, seed)?;
                let hw = config.size_at(s) * config.size_at(s);
                let attention = (hw <= config.attention_cap)
                    .then(|| SpatialAttention::register(&mut params, &format!("mdam.s{s}.attn"), c, seed))
                    .transpose()?;
                mdam.push(Mdam { fuse, attention });
            }
        }
        let mut scale_weights = Vec::new();
        if config.variant == Variant::Full {
            for s in 0..s_count {
                let name = format!("wdfm.w{s}");
                let side = config.size_at(s);
                params.insert(&name, Tensor::ones(&[1, side, side])?)?;
                scale_weights.push(name);
            }
        }
        Ok(DualUNet {
            config,
            params,
            encoder,
            decoder,
            mdam,
            scale_weights,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces the parameters, e.g. with ones loaded from a checkpoint. The
    /// new store must hold exactly the same names and shapes.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        for (name, t) in store.iter() {
            let own = self
                .params
                .get(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            if own.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    own.shape()
                )));
            }
        }
        if let Some((missing, _)) = self.params.iter().find(|(n, _)| !store.contains(n)) {
            return Err(Error::Checkpoint(format!("parameter `{missing}` is missing")));
        }
        self.params = store;
        Ok(())
    }

    /// Names of the per-scale single-channel weight maps (full variant only).
    pub fn scale_weight_names(&self) -> &[String] {
        &self.scale_weights
    }

    /// Scales at which MDAM applies self-attention.
    pub fn attention_scales(&self) -> Vec<usize> {
        self.mdam
            .iter()
            .enumerate()
            .filter(|(_, m)| m.attention.is_some())
            .map(|(s, _)| s)
            .collect()
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let c = &self.config;
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != c.input_channels || shape[2] != c.input_size || shape[3] != c.input_size {
            return Err(Error::Input(format!(
                "expected input B×{}×{}×{}, got {shape:?}",
                c.input_channels, c.input_size, c.input_size
            )));
        }
        Ok(())
    }

    /// Multi-scale features of one image batch; entry `s` is
    /// `B×C_s×(H/2^s)×(W/2^s)`.
    pub fn encode(&self, g: &mut Graph, p: &ParamVars, x: Var) -> Result<Vec<Var>> {
        let unit = 1usize << (self.config.scales - 1);
        let shape = g.shape(x);
        if shape.len() != 4 || shape[2] % unit != 0 || shape[3] % unit != 0 {
            return Err(Error::shape(format!(
                "encoder input {shape:?} must be rank 4 with spatial dims divisible by {unit}"
            )));
        }
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for (s, block) in self.encoder.iter().enumerate() {
            if s > 0 {
                h = g.maxpool2(h)?;
            }
            h = block.forward(g, p, h)?;
            feats.push(h);
        }
        Ok(feats)
    }

    /// Differential attention at `scale` for one pair of branch features.
    pub fn mdam(&self, g: &mut Graph, p: &ParamVars, scale: usize, f1: Var, f2: Var) -> Result<(Var, Var)> {
        let stage = self
            .mdam
            .get(scale)
            .ok_or_else(|| Error::Config(format!("model has no MDAM stage at scale {scale}")))?;
        if g.shape(f1) != g.shape(f2) {
            return Err(Error::shape(format!(
                "mdam: branch features {:?} and {:?} differ",
                g.shape(f1),
                g.shape(f2)
            )));
        }
        let diff = g.sub(f1, f2)?;
        let diff = g.abs(diff)?;
        let mut out = [f1, f2];
        for f in &mut out {
            let cat = g.concat_channels(*f, diff)?;
            let mut fused = stage.fuse.forward(g, p, cat)?;
            if let Some(att) = &stage.attention {
                fused = att.forward(g, p, fused, self.config.attention_cap)?;
            }
            *f = fused;
        }
        Ok((out[0], out[1]))
    }

    /// Decodes one branch. `feats[s]` is the skip feature at scale `s`; the
    /// returned vector is indexed the same way, with the coarsest entry
    /// being the coarsest feature itself.
    pub fn decode(&self, g: &mut Graph, p: &ParamVars, feats: &[Var]) -> Result<Vec<Var>> {
        let s_count = self.config.scales;
        if feats.len() != s_count {
            return Err(Error::shape(format!(
                "decoder expects {s_count} scales, got {}",
                feats.len()
            )));
        }
        let mut dec = feats.to_vec();
        for s in (0..s_count - 1).rev() {
            let up = g.upsample_bilinear2(dec[s + 1])?;
            let cat = g.concat_channels(up, feats[s])?;
            dec[s] = self.decoder[s].forward(g, p, cat)?;
        }
        Ok(dec)
    }

    /// Weighted difference fusion: per selected scale the (optionally
    /// weighted) decoder outputs are compared by channel-wise Euclidean
    /// distance, upsampled to full resolution and averaged.
    pub fn wdfm(
        &self,
        g: &mut Graph,
        dec1: &[Var],
        dec2: &[Var],
        weights: Option<&[Var]>,
        scales: &[usize],
    ) -> Result<Var> {
        if scales.is_empty() {
            return Err(Error::Config("wdfm needs at least one scale".into()));
        }
        let mut total: Option<Var> = None;
        for &s in scales {
            let (&a, &b) = dec1
                .get(s)
                .zip(dec2.get(s))
                .ok_or_else(|| Error::shape(format!("no decoder output at scale {s}")))?;
            let (u, v) = match weights {
                Some(w) => {
                    let ws = *w
                        .get(s)
                        .ok_or_else(|| Error::shape(format!("no weight map at scale {s}")))?;
                    (g.scale_spatial(a, ws)?, g.scale_spatial(b, ws)?)
                }
                None => (a, b),
            };
            let diff = g.sub(u, v)?;
            let mut dist = g.channel_norm(diff)?;
            if s > 0 {
                let [bsz, h, w] = dims3(g.shape(dist))?;
                let factor = 1usize << s;
                let d4 = g.reshape(dist, &[bsz, 1, h, w])?;
                let up = g.upsample_bilinear(d4, factor)?;
                dist = g.reshape(up, &[bsz, h * factor, w * factor])?;
            }
            total = Some(match total {
                None => dist,
                Some(t) => g.add(t, dist)?,
            });
        }
        let total = total.expect("at least one scale");
        if scales.len() == 1 {
            Ok(total)
        } else {
            g.scale(total, 1.0 / scales.len() as f64)
        }
    }

    /// Distance map for the configured variant.
    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x1: Var, x2: Var) -> Result<Var> {
        let plan = ForwardPlan::for_variant(self.config.variant, self.config.scales);
        self.forward_with(g, p, x1, x2, &plan)
    }

    pub fn forward_with(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        x1: Var,
        x2: Var,
        plan: &ForwardPlan,
    ) -> Result<Var> {
        self.check_input(g, x1)?;
        self.check_input(g, x2)?;
        if g.shape(x1) != g.shape(x2) {
            return Err(Error::Input(format!(
                "image pair shapes differ: {:?} vs {:?}",
                g.shape(x1),
                g.shape(x2)
            )));
        }
        for x in [x1, x2] {
            if let Some(v) = g.data(x).iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
            }
        }
        if plan.mdam && self.mdam.is_empty() {
            return Err(Error::Config("this model was built without MDAM parameters".into()));
        }
        let mut f1 = self.encode(g, p, x1)?;
        let mut f2 = self.encode(g, p, x2)?;
        if plan.mdam {
            for s in 0..self.config.scales {
                let (a, b) = self.mdam(g, p, s, f1[s], f2[s])?;
                f1[s] = a;
                f2[s] = b;
            }
        }
        let dec1 = self.decode(g, p, &f1)?;
        let dec2 = self.decode(g, p, &f2)?;
        let weights = if plan.scale_weights {
            if self.scale_weights.is_empty() {
                return Err(Error::Config("this model has no scale weights".into()));
            }
            Some(
                self.scale_weights
                    .iter()
                    .map(|n| p.get(n))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        self.wdfm(g, &dec1, &dec2, weights.as_deref(), &plan.fusion_scales)
    }

    /// Inference helper: runs the forward pass on plain tensors.
    pub fn distance_map(&self, x1: &Tensor, x2: &Tensor) -> Result<DistanceMap> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let a = g.constant(x1.clone());
        let b = g.constant(x2.clone());
        let d = self.forward(&mut g, &p, a, b)?;
        DistanceMap::new(g.value(d).clone())
    }

    pub fn predict(&self, x1: &Tensor, x2: &Tensor) -> Result<ChangeMap> {
        Ok(predict(&self.distance_map(x1, x2)?, self.config.threshold))
    }
}
