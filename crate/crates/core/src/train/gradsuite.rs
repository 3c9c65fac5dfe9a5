//! Built-in gradient verification: every differentiable operation, the
//! contrastive loss, and a small full model, each against central differences.

use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_many, relative_error, GradCheck, Graph, Reduction, Tensor, Var, DEFAULT_STEP};
use crate::error::Result;
use crate::loss::bcl_loss;
use crate::model::{DualUNet, ModelConfig, Variant};
use crate::nn::{spatial_self_attention, ConvBlock, ParamStore, ParamVars};

/// Tolerance on the max relative error for operations that are linear in
/// each input coordinate; central differences are exact there up to rounding.
pub const LINEAR_TOLERANCE: f64 = 1e-8;
pub const NONLINEAR_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    pub report: GradCheck,
    pub tolerance: f64,
}

impl CheckEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, seed, -1.0, 1.0).expect("valid shape")
}

/// Values in `[0.5, 1.5]`. Linear checks use these so that no gradient entry
/// cancels to near zero, where relative error is dominated by rounding.
fn positive(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, seed, 0.5, 1.5).expect("valid shape")
}

/// Values with magnitude in `[0.2, 1]` and random sign.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mag = Tensor::uniform(shape, seed, 0.2, 1.0).expect("valid shape");
    let sign = uniform(shape, seed.wrapping_add(1));
    let data = mag.data().iter().zip(sign.data()).map(|(m, s)| m.copysign(*s)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Distinct values spaced 0.01 apart in random order, so no two entries tie.
fn distinct(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| 0.01 * i as f64 - 0.005 * n as f64).collect();
    data.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Tensor::new(shape, data).expect("valid shape")
}

/// `sum(r ⊙ out)` with fixed random `r`, making every output coordinate matter.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let r = g.constant(positive(g.shape(out), seed ^ 0x5eed));
    let t = g.mul(out, r)?;
    g.sum(t)
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    linear: bool,
    f: OpFn,
}

fn case(
    name: &'static str,
    linear: bool,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        linear,
        f: Box::new(move |g, v| {
            let out = f(g, v)?;
            project(g, out, 17)
        }),
    }
}

fn op_cases() -> Vec<OpCase> {
    let mut cases = vec![
        case("add", true, vec![positive(&[3, 4], 1), positive(&[3, 4], 2)], |g, v| g.add(v[0], v[1])),
        case("sub", true, vec![positive(&[3, 4], 3), positive(&[3, 4], 4)], |g, v| g.sub(v[0], v[1])),
        case("mul", true, vec![positive(&[3, 4], 5), positive(&[3, 4], 6)], |g, v| g.mul(v[0], v[1])),
        case("scale", true, vec![positive(&[5], 7)], |g, v| g.scale(v[0], -1.7)),
        case("abs", false, vec![away_from_zero(&[12], 8)], |g, v| g.abs(v[0])),
        case("relu", false, vec![away_from_zero(&[12], 9)], |g, v| g.relu(v[0])),
        case("sigmoid", false, vec![uniform(&[12], 10)], |g, v| g.sigmoid(v[0])),
        case("matmul", true, vec![positive(&[3, 5], 11), positive(&[5, 2], 12)], |g, v| g.matmul(v[0], v[1])),
        case("softmax_rows", false, vec![uniform(&[2, 3, 5], 13)], |g, v| g.softmax_rows(v[0])),
        case(
            "conv2d 3x3 pad 1",
            true,
            vec![positive(&[2, 3, 5, 5], 14), positive(&[4, 3, 3, 3], 15), positive(&[4], 16)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        case(
            "conv2d 3x3 stride 2",
            true,
            vec![positive(&[1, 2, 7, 7], 18), positive(&[3, 2, 3, 3], 19)],
            |g, v| g.conv2d(v[0], v[1], None, 2, 0),
        ),
        case(
            "conv2d 1x1",
            true,
            vec![positive(&[2, 4, 3, 3], 20), positive(&[2, 4, 1, 1], 21), positive(&[2], 22)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0),
        ),
        case("maxpool2", true, vec![distinct(&[2, 2, 4, 6], 23)], |g, v| g.maxpool2(v[0])),
        case("upsample x2", true, vec![positive(&[1, 2, 3, 4], 24)], |g, v| g.upsample_bilinear2(v[0])),
        case("upsample x4", true, vec![positive(&[2, 1, 2, 3], 25)], |g, v| g.upsample_bilinear(v[0], 4)),
        case(
            "concat_channels",
            true,
            vec![positive(&[2, 1, 3, 3], 26), positive(&[2, 3, 3, 3], 27)],
            |g, v| g.concat_channels(v[0], v[1]),
        ),
        case("sum over axes", true, vec![positive(&[2, 3, 4], 28)], |g, v| {
            g.reduce(Reduction::Sum, v[0], Some(&[0, 2]))
        }),
        case("mean over axes", true, vec![positive(&[2, 3, 4], 29)], |g, v| {
            g.reduce(Reduction::Mean, v[0], Some(&[1]))
        }),
        case("reshape", true, vec![positive(&[2, 6], 30)], |g, v| g.reshape(v[0], &[3, 4])),
        case(
            "scale_spatial",
            true,
            vec![positive(&[2, 3, 4, 4], 31), positive(&[1, 4, 4], 32)],
            |g, v| g.scale_spatial(v[0], v[1]),
        ),
        case("channel_norm", false, vec![away_from_zero(&[2, 3, 4, 4], 33)], |g, v| g.channel_norm(v[0])),
        case(
            "spatial attention",
            false,
            vec![
                uniform(&[2, 3, 3, 4], 34),
                uniform(&[3, 3, 1, 1], 35),
                uniform(&[3, 3, 1, 1], 36),
                uniform(&[3, 3, 1, 1], 37),
            ],
            |g, v| spatial_self_attention(g, v[0], v[1], v[2], v[3], 64),
        ),
    ];
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let name = match (ta, tb) {
            (false, false) => "batch_matmul",
            (true, false) => "batch_matmul aT",
            (false, true) => "batch_matmul bT",
            (true, true) => "batch_matmul aT bT",
        };
        let a = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b = if tb { [2, 5, 4] } else { [2, 4, 5] };
        cases.push(case(name, true, vec![positive(&a, 40), positive(&b, 41)], move |g, v| {
            g.batch_matmul(v[0], v[1], ta, tb)
        }));
    }

    let mut store = ParamStore::new();
    let block = ConvBlock::register(&mut store, "blk", 2, 3, 42).expect("fresh store");
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut inputs = vec![uniform(&[2, 2, 5, 5], 43)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    cases.push(case("conv block", false, inputs, move |g, v| {
        let p = ParamVars::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
        block.forward(g, &p, v[0])
    }));

    let labels = Tensor::new(&[2, 2, 3], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0])
        .expect("valid shape");
    let d = Tensor::uniform(&[2, 2, 3], 44, 0.0, 4.0).expect("valid shape");
    cases.push(OpCase {
        name: "contrastive loss",
        inputs: vec![d],
        linear: false,
        f: Box::new(move |g, v| bcl_loss(g, v[0], &labels, 2.0)),
    });
    cases
}

/// Checks every operation at all input coordinates.
pub fn op_checks() -> Result<Vec<CheckEntry>> {
    op_cases()
        .into_iter()
        .map(|c| {
            let tolerance = if c.linear {
                LINEAR_TOLERANCE
            } else {
                NONLINEAR_TOLERANCE
            };
            let report = grad_check_many(&c.f, &c.inputs, None, DEFAULT_STEP)?;
            Ok(CheckEntry {
                name: c.name.to_string(),
                report,
                tolerance,
            })
        })
        .collect()
}

/// Model used by [`model_check`]: full variant on 16×16 inputs with attention
/// at the two coarser scales.
pub fn model_check_config() -> ModelConfig {
    ModelConfig {
        scales: 3,
        base_channels: 4,
        input_size: 16,
        attention_cap: 64,
        variant: Variant::Full,
        ..ModelConfig::default()
    }
}

/// Gradient of the contrastive loss of a batch of two 16×16 pairs with
/// respect to `coords` randomly chosen parameter scalars. Parameters are
/// perturbed away from their initial values so that zero-initialized
/// projections and unit scale weights do not hide any path.
///
/// ReLU, max-pooling and the hinge make the loss piecewise smooth. A sampled
/// coordinate whose central differences at `h` and `h/2` disagree by more than
/// the tolerance has a kink inside the probe interval; its finite difference
/// estimates nothing, so it is replaced by another sample and counted in
/// `ModelCheck::kinked`. At most `coords` replacements are made.
pub fn model_check(seed: u64, coords: usize) -> Result<ModelCheck> {
    let cfg = model_check_config();
    let mut model = DualUNet::new(cfg.clone(), seed)?;
    for (i, (_, t)) in model.params_mut().iter_mut().enumerate() {
        let noise = uniform(t.shape(), seed ^ (1000 + i as u64));
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += 0.3 * n);
    }
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let inputs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let s = cfg.input_size;
    let x1 = Tensor::uniform(&[2, 3, s, s], seed ^ 1, 0.0, 1.0)?;
    let x2 = Tensor::uniform(&[2, 3, s, s], seed ^ 2, 0.0, 1.0)?;
    let coin = Tensor::uniform(&[2, s, s], seed ^ 3, 0.0, 1.0)?;
    let labels = Tensor::new(&[2, s, s], coin.data().iter().map(|&u| f64::from(u8::from(u < 0.5))).collect())?;

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.numel();
            Some(start)
        })
        .collect();
    let total = model.params().num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
    let candidates: Vec<(usize, usize)> = index::sample(&mut rng, total, (2 * coords).min(total))
        .into_iter()
        .map(|flat| {
            let ti = offsets.partition_point(|&o| o <= flat) - 1;
            (ti, flat - offsets[ti])
        })
        .collect();

    let margin = cfg.margin;
    let f = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let p = ParamVars::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        let a = g.constant(x1.clone());
        let b = g.constant(x2.clone());
        let d = model.forward(g, &p, a, b)?;
        bcl_loss(g, d, &labels, margin)
    };

    let tolerance = NONLINEAR_TOLERANCE;
    let mut checked = Vec::with_capacity(coords);
    let mut kinked = Vec::new();
    let mut worst: Option<GradCheck> = None;
    for &c in &candidates {
        if checked.len() == coords {
            break;
        }
        let full = grad_check_many(f, &inputs, Some(&[c]), DEFAULT_STEP)?;
        let half = grad_check_many(f, &inputs, Some(&[c]), DEFAULT_STEP / 2.0)?;
        if relative_error(full.numeric, half.numeric) > tolerance {
            kinked.push(c);
            continue;
        }
        checked.push(c);
        if worst.is_none_or(|w| full.max_rel_error > w.max_rel_error) {
            worst = Some(full);
        }
    }
    let mut report = worst.unwrap_or(GradCheck {
        max_rel_error: f64::INFINITY,
        worst: (0, 0),
        analytic: f64::NAN,
        numeric: f64::NAN,
        coords_checked: 0,
    });
    report.coords_checked = checked.len();
    if checked.len() < coords.min(total) {
        report.max_rel_error = f64::INFINITY;
    }
    Ok(ModelCheck {
        entry: CheckEntry {
            name: format!("model ({} of {total} params)", checked.len()),
            report,
            tolerance,
        },
        kinked,
        param_names: names,
    })
}

/// Outcome of [`model_check`].
#[derive(Debug, Clone)]
pub struct ModelCheck {
    pub entry: CheckEntry,
    /// `(parameter index, flat index)` of samples skipped as non-smooth.
    pub kinked: Vec<(usize, usize)>,
    /// Parameter names in index order.
    pub param_names: Vec<String>,
}

pub fn format_report(entries: &[CheckEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(
            s,
            "{:<28} max_rel_err {:>10.3e}  tol {:.0e}  {}",
            e.name,
            e.report.max_rel_error,
            e.tolerance,
            if e.passed() { "PASS" } else { "FAIL" }
        );
    }
    s
}
