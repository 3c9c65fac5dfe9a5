//! Release acceptance: one PASS/FAIL line per criterion. Everything runs
//! inside one test so that the timed sections do not share the CPU with
//! sibling tests.
//!
//! The report goes straight to the stderr handle, which the test harness does
//! not capture, so it shows up in plain `cargo test` output. Exact and
//! property criteria fail the test. The desk-scale training outcomes are
//! measured against the same thresholds and reported, but they describe one
//! pinned run and are not a build gate.
//!
//! The desk-scale section trains all three variants of the pinned
//! `configs/desk.conf` on freshly generated default data and takes a while.

mod common;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::*;
use dualunet::autodiff::{tamper_conv_backward, Graph, Tensor};
use dualunet::data::{
    default_baseline_candidates, evaluate_baseline, tune_baseline_threshold, Dataset, GenParams, Split, SplitSizes,
};
use dualunet::loss::bcl_loss_value;
use dualunet::model::{DualUNet, ForwardPlan, ModelConfig, Variant};
use dualunet::train::gradsuite::{model_check, op_checks};
use dualunet::train::{evaluate_checkpoint, train, TrainConfig, TrainReport};
use rand::Rng;

struct Line {
    name: &'static str,
    pass: bool,
    gate: bool,
    detail: String,
}

fn say(text: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{text}");
}

impl Line {
    fn text(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn line(name: &'static str, pass: bool, detail: String) -> Line {
    let l = Line {
        name,
        pass,
        gate: true,
        detail,
    };
    say(&l.text());
    l
}

fn reported(name: &'static str, pass: bool, detail: String) -> Line {
    Line {
        gate: false,
        ..line(name, pass, detail)
    }
}

fn gradient_correctness() -> Line {
    let start = Instant::now();
    let ops = op_checks().unwrap();
    let failed: Vec<&str> = ops.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    let worst_linear = ops
        .iter()
        .filter(|e| e.tolerance < 1e-6)
        .map(|e| e.report.max_rel_error)
        .fold(0.0, f64::max);
    let worst_nonlinear = ops
        .iter()
        .filter(|e| e.tolerance >= 1e-6)
        .map(|e| e.report.max_rel_error)
        .fold(0.0, f64::max);
    let model = model_check(7, 64).unwrap();
    tamper_conv_backward(true);
    let tampered = op_checks().unwrap();
    tamper_conv_backward(false);
    let caught = tampered.iter().any(|e| !e.passed());
    let elapsed = start.elapsed();
    line(
        "gradient correctness",
        failed.is_empty() && model.entry.passed() && caught && elapsed < Duration::from_secs(60),
        format!(
            "{} ops, linear max rel err {worst_linear:.1e} (< 1e-8), nonlinear {worst_nonlinear:.1e} (< 1e-4), \
             model {:.1e} over {} params ({} kinked skipped), tampered conv caught: {caught}, failed {failed:?}, {:.1}s",
            ops.len(),
            model.entry.report.max_rel_error,
            model.entry.report.coords_checked,
            model.kinked.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn oracle_equivalence() -> Line {
    let start = Instant::now();
    let n = 120;
    let results = [
        ("conv2d", sweeps::conv2d(101, n), 1e-12),
        ("matmul", sweeps::matmul(102, n), 1e-12),
        ("batch_matmul", sweeps::batch_matmul(103, n), 1e-12),
        ("maxpool2", sweeps::maxpool2(104, n), 1e-12),
        ("upsample", sweeps::upsample(105, n), 1e-12),
        ("attention", sweeps::attention(106, n), 1e-10),
    ];
    let elapsed = start.elapsed();
    let pass = results.iter().all(|&(_, e, tol)| e <= tol) && elapsed < Duration::from_secs(60);
    let detail: Vec<String> = results.iter().map(|(k, e, _)| format!("{k} {e:.1e}")).collect();
    line(
        "oracle equivalence",
        pass,
        format!("{n} instances each: {}, {:.1}s", detail.join(", "), elapsed.as_secs_f64()),
    )
}

fn loss_exactness() -> Line {
    let labels = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let d = Tensor::new(&[1, 2, 2], vec![0.5, 0.3, 0.0, 1.0]).unwrap();
    let hand = bcl_loss_value(&d, &labels, 2.0).unwrap();
    let err = (hand - 29.0 / 30.0).abs();

    let zeros = Tensor::zeros(&[2, 3, 3]).unwrap();
    let unchanged = bcl_loss_value(&zeros, &zeros, 2.0).unwrap();
    let ones = Tensor::ones(&[2, 3, 3]).unwrap();
    let far = Tensor::uniform(&[2, 3, 3], 1, 2.0, 5.0).unwrap();
    let saturated = bcl_loss_value(&far, &ones, 2.0).unwrap();
    line(
        "contrastive loss exactness",
        err <= 1e-12 && unchanged.to_bits() == 0 && saturated.to_bits() == 0,
        format!("hand case {hand:.15} (|err| {err:.1e}), all-unchanged d=0 -> {unchanged}, all-changed d>=m -> {saturated}"),
    )
}

fn batch_balance() -> Line {
    let mut r = rng(31);
    let mut worst = 0.0f64;
    let cases = 200;
    for _ in 0..cases {
        let (b, h, w) = (r.random_range(1..=3), r.random_range(1..=6), r.random_range(1..=6));
        let n = b * h * w;
        let p = r.random_range(0.0..1.0);
        let labels: Vec<f64> = (0..n).map(|_| f64::from(u8::from(r.random_bool(p)))).collect();
        let d: Vec<f64> = (0..n).map(|_| r.random_range(0.0..4.0)).collect();
        let margin = r.random_range(0.5..3.0);
        let once = bcl_loss_value(
            &Tensor::new(&[b, h, w], d.clone()).unwrap(),
            &Tensor::new(&[b, h, w], labels.clone()).unwrap(),
            margin,
        )
        .unwrap();
        let twice = bcl_loss_value(
            &Tensor::new(&[2 * b, h, w], [d.clone(), d].concat()).unwrap(),
            &Tensor::new(&[2 * b, h, w], [labels.clone(), labels].concat()).unwrap(),
            margin,
        )
        .unwrap();
        worst = worst.max((once - twice).abs());
    }
    line(
        "batch balance",
        worst <= 1e-12,
        format!("{cases} random batches duplicated, max |change| {worst:.1e}"),
    )
}

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        scales: 3,
        base_channels: 4,
        input_size: 16,
        attention_cap: 64,
        variant,
        ..ModelConfig::default()
    }
}

fn perturbed(variant: Variant, seed: u64) -> DualUNet {
    let mut m = DualUNet::new(small(variant), seed).unwrap();
    for (i, (_, t)) in m.params_mut().iter_mut().enumerate() {
        let noise = Tensor::uniform(t.shape(), seed ^ (500 + i as u64), -0.3, 0.3).unwrap();
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += n);
    }
    m
}

fn distance(model: &DualUNet, x1: &Tensor, x2: &Tensor, plan: Option<&ForwardPlan>) -> Tensor {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let a = g.constant(x1.clone());
    let b = g.constant(x2.clone());
    let d = match plan {
        Some(plan) => model.forward_with(&mut g, &p, a, b, plan),
        None => model.forward(&mut g, &p, a, b),
    }
    .unwrap();
    g.value(d).clone()
}

fn architectural_invariants() -> Line {
    let image = |seed| Tensor::uniform(&[2, 3, 16, 16], seed, 0.0, 1.0).unwrap();
    let mut identity_zero = true;
    let mut swap = 0.0f64;
    let mut nonnegative = true;
    for seed in 0..8u64 {
        for variant in Variant::ALL {
            let model = perturbed(variant, seed);
            let (x1, x2) = (image(seed * 3 + 1), image(seed * 3 + 2));
            identity_zero &= distance(&model, &x1, &x1, None).data().iter().all(|v| v.to_bits() == 0);
            let d12 = distance(&model, &x1, &x2, None);
            let d21 = distance(&model, &x2, &x1, None);
            swap = swap.max(max_abs_diff(d12.data(), d21.data()));
            nonnegative &= d12.data().iter().all(|&v| v >= 0.0);
        }
    }

    // Value projections start at zero and scale weights at one; making each
    // fusion conv pass its branch through leaves the finest-scale full model
    // equal to the base network.
    let seed = 13;
    let (x1, x2) = (image(40), image(41));
    let want = distance(&DualUNet::new(small(Variant::Base), seed).unwrap(), &x1, &x2, None);
    let mut full = DualUNet::new(small(Variant::Full), seed).unwrap();
    for s in 0..3 {
        let c = full.config().channels(s);
        let k = full.params_mut().get_mut(&format!("mdam.s{s}.fuse.kernel")).unwrap();
        for co in 0..c {
            for ci in 0..2 * c {
                k.data_mut()[co * 2 * c + ci] = if ci == co { 1.0 } else { 0.0 };
            }
        }
        full.params_mut().get_mut(&format!("mdam.s{s}.fuse.bias")).unwrap().data_mut().fill(0.0);
    }
    let restricted = ForwardPlan {
        mdam: true,
        scale_weights: true,
        fusion_scales: vec![0],
    };
    let nesting = max_abs_diff(distance(&full, &x1, &x2, Some(&restricted)).data(), want.data());

    let model = DualUNet::new(ModelConfig::default(), 0).unwrap();
    let cfg = model.config().clone();
    let weights_ok = model.scale_weight_names().len() == cfg.scales
        && model.scale_weight_names().iter().enumerate().all(|(s, n)| {
            let side = cfg.size_at(s);
            model.params().get(n).unwrap().shape() == [1, side, side]
        });
    line(
        "architectural invariants",
        identity_zero && swap <= 1e-12 && nonnegative && nesting <= 1e-10 && weights_ok,
        format!(
            "forward(x,x) bitwise 0: {identity_zero}, swap max diff {swap:.1e}, D*>=0: {nonnegative}, \
             nesting diff {nesting:.1e}, scale weights 1 channel: {weights_ok}"
        ),
    )
}

fn tiny_run_files(dir: &Path, data: &Path) -> Vec<Vec<u8>> {
    let cfg = TrainConfig {
        model: small(Variant::Full),
        epochs: 2,
        batch_size: 4,
        seed: 3,
        data_root: data.to_path_buf(),
        out_dir: dir.to_path_buf(),
        ..TrainConfig::default()
    };
    train(&cfg, &mut |_| {}).unwrap();
    ["metrics.csv", "train_loss.csv", "best.ckpt", "final.ckpt"]
        .iter()
        .map(|f| fs::read(dir.join(f)).unwrap())
        .collect()
}

fn determinism(root: &Path) -> Line {
    let data = root.join("tiny-data");
    let params = GenParams {
        size: 16,
        n_objects: 3,
        ..GenParams::default()
    };
    for ds in Dataset::generate_splits(SplitSizes { train: 8, val: 4, test: 4 }, 9, &params).unwrap() {
        ds.save(&data).unwrap();
    }
    let a = tiny_run_files(&root.join("det-a"), &data);
    let b = tiny_run_files(&root.join("det-b"), &data);
    let same = a == b;
    line(
        "determinism",
        same,
        format!(
            "two runs of one config: metrics.csv, train_loss.csv, best.ckpt, final.ckpt byte-identical: {same} ({} bytes)",
            a.iter().map(Vec::len).sum::<usize>()
        ),
    )
}

fn desk_config() -> TrainConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf");
    TrainConfig::parse(&fs::read_to_string(path).unwrap()).unwrap()
}

struct DeskRun {
    report: TrainReport,
    elapsed: Duration,
    test_iou: f64,
    test_f1: f64,
}

fn desk_variant(cfg: &TrainConfig, variant: Variant, data: &Path, out: PathBuf) -> DeskRun {
    let mut cfg = cfg.clone();
    cfg.model.variant = variant;
    cfg.data_root = data.to_path_buf();
    cfg.out_dir = out;
    let start = Instant::now();
    let report = train(&cfg, &mut |_| {}).unwrap();
    let elapsed = start.elapsed();
    let test = evaluate_checkpoint(&report.best_checkpoint, data, Split::Test, None, None, None).unwrap();
    say(&format!(
        "  [{variant}] test P {:.4} R {:.4} F1 {:.4} IoU {:.4}, best epoch {}, {:.1} min",
        test.metrics.precision,
        test.metrics.recall,
        test.metrics.f1,
        test.metrics.iou,
        report.best().epoch,
        elapsed.as_secs_f64() / 60.0
    ));
    DeskRun {
        report,
        elapsed,
        test_iou: test.metrics.iou,
        test_f1: test.metrics.f1,
    }
}

fn desk_scale(root: &Path) -> Vec<Line> {
    let cfg = desk_config();
    let data = root.join("desk-data");
    let params = GenParams {
        size: cfg.model.input_size,
        ..GenParams::default()
    };
    for ds in Dataset::generate_splits(SplitSizes::default(), 0, &params).unwrap() {
        ds.save(&data).unwrap();
    }
    // The baseline sees the same quantized files the network trains on.
    let val = Dataset::load(&data, Split::Val).unwrap();
    let test = Dataset::load(&data, Split::Test).unwrap();
    let (theta, _) = tune_baseline_threshold(&val, &default_baseline_candidates()).unwrap();
    let baseline = evaluate_baseline(&test, theta).unwrap();
    say(&format!(
        "  [baseline] theta {theta} test P {:.4} R {:.4} F1 {:.4} IoU {:.4}",
        baseline.precision, baseline.recall, baseline.f1, baseline.iou
    ));

    let full = desk_variant(&cfg, Variant::Full, &data, root.join("full"));
    let first = full.report.epochs.first().unwrap().train_loss;
    let last = full.report.epochs.last().unwrap().train_loss;
    let mut lines = vec![
        reported(
            "desk-scale training",
            full.test_f1 >= 0.90
                && full.test_iou >= baseline.iou + 0.10
                && full.elapsed < Duration::from_secs(30 * 60),
            format!(
                "{} epochs: test F1 {:.4} (>= 0.90), IoU {:.4} vs baseline {:.4} at theta {theta} (margin >= 0.10), \
                 best epoch {}, {:.1} min (< 30)",
                cfg.epochs,
                full.test_f1,
                full.test_iou,
                baseline.iou,
                full.report.best().epoch,
                full.elapsed.as_secs_f64() / 60.0
            ),
        ),
        reported(
            "loss trajectory",
            last < 0.5 * first,
            format!("epoch-1 train loss {first:.4}, final {last:.4} (< half)"),
        ),
    ];

    let mdam = desk_variant(&cfg, Variant::Mdam, &data, root.join("mdam"));
    let base = desk_variant(&cfg, Variant::Base, &data, root.join("base"));
    lines.push(reported(
        "ablation direction",
        full.test_iou >= mdam.test_iou && mdam.test_iou >= base.test_iou - 0.02,
        format!(
            "test IoU full {:.4} >= mdam {:.4} >= base {:.4} - 0.02",
            full.test_iou, mdam.test_iou, base.test_iou
        ),
    ));
    lines
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = vec![
        gradient_correctness(),
        oracle_equivalence(),
        loss_exactness(),
        batch_balance(),
        architectural_invariants(),
        determinism(dir.path()),
    ];
    lines.extend(desk_scale(dir.path()));

    say("\nacceptance summary");
    for l in &lines {
        say(&l.text());
    }
    let failed: Vec<&str> = lines.iter().filter(|l| l.gate && !l.pass).map(|l| l.name).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
