use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::adam::Adam;
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use crate::autodiff::{Graph, Tensor};
use crate::data::netpbm::{read_image, write_image, Image};
use crate::data::{batch_iter, Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::{bcl_loss, bcl_loss_value, Confusion, Metrics};
use crate::model::{predict, DistanceMap, DualUNet, Variant};

pub const METRICS_HEADER: &str = "epoch,split,loss,precision,recall,f1,iou";

pub fn metrics_row(epoch: usize, split: Split, loss: f64, m: &Metrics) -> String {
    format!(
        "{epoch},{split},{loss:.6},{:.6},{:.6},{:.6},{:.6}",
        m.precision, m.recall, m.f1, m.iou
    )
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Result of scoring a model on one split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// Mean per-batch contrastive loss.
    pub loss: f64,
}

/// Runs `model` over `ds`, pooling the confusion counts of every pixel. When
/// `dump_dir` is set each predicted map is written there as
/// `<id>_pred.pgm` (0 or 255).
pub fn evaluate_model(
    model: &DualUNet,
    ds: &Dataset,
    threshold: f64,
    batch_size: usize,
    dump_dir: Option<&Path>,
) -> Result<Evaluation> {
    if let Some(dir) = dump_dir {
        create_dir(dir)?;
    }
    let margin = model.config().margin;
    let mut total = Confusion::default();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for batch in batch_iter(ds, batch_size, None)? {
        let d = model.distance_map(&batch.x1, &batch.x2)?;
        loss_sum += bcl_loss_value(d.tensor(), &batch.labels, margin)?;
        batches += 1;
        let pred = predict(&d, threshold);
        total.merge(&Confusion::from_maps(&pred, &batch.label_map)?);
        if let Some(dir) = dump_dir {
            for (i, id) in batch.ids.iter().enumerate() {
                let img = Image::from_change_map(&pred.item(i))?;
                write_image(&dir.join(format!("{id}_pred.pgm")), &img)?;
            }
        }
    }
    Ok(Evaluation {
        metrics: total.metrics(),
        loss: loss_sum / batches as f64,
    })
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Evaluation,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One optimizer step on one batch; returns the batch loss.
fn train_step(model: &mut DualUNet, adam: &mut Adam, x1: &Tensor, x2: &Tensor, labels: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let a = g.constant(x1.clone());
    let b = g.constant(x2.clone());
    let d = model.forward(&mut g, &p, a, b)?;
    let loss = bcl_loss(&mut g, d, labels, model.config().margin)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(loss)?;
    let params = model.params_mut();
    params.zero_grad();
    params.absorb_grads(&g, &p);
    adam.step(params)?;
    Ok(value)
}

/// Trains on in-memory splits, writing `metrics.csv`, `train_loss.csv`,
/// `best.ckpt` (highest validation F1) and `final.ckpt` into
/// `cfg.out_dir`. `on_epoch` observes each finished epoch.
pub fn train_with_data(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    create_dir(&cfg.out_dir)?;
    let mut model = DualUNet::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let loss_path = cfg.out_dir.join("train_loss.csv");
    let best_path = cfg.out_dir.join("best.ckpt");
    let final_path = cfg.out_dir.join("final.ckpt");
    let mut metrics_csv = format!("{METRICS_HEADER}\n");
    let mut loss_csv = String::from("epoch,loss\n");
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;

    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (bi, batch) in batch_iter(train, cfg.batch_size, Some(epoch_shuffle_seed(cfg.seed, epoch)))?.enumerate() {
            let loss = train_step(&mut model, &mut adam, &batch.x1, &batch.x2, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi + 1,
                    loss,
                });
            }
            sum += loss;
            batches += 1;
        }
        let train_loss = sum / batches as f64;
        let val_eval = evaluate_model(&model, val, cfg.model.threshold, cfg.batch_size, None)?;
        let _ = writeln!(metrics_csv, "{}", metrics_row(epoch, Split::Val, val_eval.loss, &val_eval.metrics));
        let _ = writeln!(loss_csv, "{epoch},{train_loss:.6}");
        write_file(&metrics_path, &metrics_csv)?;
        write_file(&loss_path, &loss_csv)?;
        if best.is_none_or(|(_, f1)| val_eval.metrics.f1 > f1) {
            best = Some((epoch, val_eval.metrics.f1));
            Checkpoint::from_model(cfg, &model).save(&best_path)?;
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val: val_eval,
        };
        on_epoch(&record);
        records.push(record);
    }
    Checkpoint::from_model(cfg, &model).save(&final_path)?;
    Ok(TrainReport {
        epochs: records,
        best_epoch: best.expect("at least one epoch").0,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
    })
}

/// Trains on the `train` and `val` splits stored under `cfg.data_root`.
pub fn train(cfg: &TrainConfig, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainReport> {
    let train = Dataset::load(&cfg.data_root, Split::Train)?;
    let val = Dataset::load(&cfg.data_root, Split::Val)?;
    train_with_data(cfg, &train, &val, on_epoch)
}

/// Scores a saved checkpoint on a stored split, writing the metrics row to
/// `csv_out`. `threshold` overrides the one saved with the model.
pub fn evaluate_checkpoint(
    ckpt: &Path,
    data_root: &Path,
    split: Split,
    threshold: Option<f64>,
    csv_out: Option<&Path>,
    dump_dir: Option<&Path>,
) -> Result<Evaluation> {
    let ck = Checkpoint::load(ckpt)?;
    let batch_size = ck.config.batch_size;
    let model = ck.into_model()?;
    let threshold = threshold.unwrap_or(model.config().threshold);
    if !threshold.is_finite() {
        return Err(Error::Config(format!("threshold must be finite, got {threshold}")));
    }
    let ds = Dataset::load(data_root, split)?;
    let eval = evaluate_model(&model, &ds, threshold, batch_size, dump_dir)?;
    if let Some(path) = csv_out {
        write_file(path, &format!("{METRICS_HEADER}\n{}\n", metrics_row(0, split, eval.loss, &eval.metrics)))?;
    }
    Ok(eval)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub test: Evaluation,
    pub report: TrainReport,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,precision,recall,f1,iou\n");
        for r in &self.rows {
            let m = &r.test.metrics;
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.6}", r.variant, m.precision, m.recall, m.f1, m.iou);
        }
        s
    }

    /// Percentages in aligned columns.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<8} {:>12} {:>12} {:>12} {:>12}\n",
            "Method", "Precision(%)", "Recall(%)", "F1(%)", "IoU(%)"
        );
        for r in &self.rows {
            let m = &r.test.metrics;
            let _ = writeln!(
                s,
                "{:<8} {:>12.2} {:>12.2} {:>12.2} {:>12.2}",
                r.variant.as_str(),
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.f1,
                100.0 * m.iou
            );
        }
        s
    }
}

/// Trains every variant with the same seed and data, each into
/// `<out_dir>/<variant>`, and scores each best checkpoint on the test split.
/// Writes `ablation.csv` and `ablation.txt` into `cfg.out_dir`.
pub fn ablate_with_data(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    on_epoch: &mut dyn FnMut(Variant, &EpochRecord),
) -> Result<Ablation> {
    create_dir(&cfg.out_dir)?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut run = cfg.clone();
        run.model.variant = variant;
        run.out_dir = cfg.out_dir.join(variant.as_str());
        let report = train_with_data(&run, train, val, &mut |r| on_epoch(variant, r))?;
        let model = Checkpoint::load(&report.best_checkpoint)?.into_model()?;
        let test_eval = evaluate_model(&model, test, run.model.threshold, run.batch_size, None)?;
        rows.push(AblationRow {
            variant,
            test: test_eval,
            report,
        });
    }
    let ablation = Ablation { rows };
    write_file(&cfg.out_dir.join("ablation.csv"), &ablation.to_csv())?;
    write_file(&cfg.out_dir.join("ablation.txt"), &ablation.to_table())?;
    Ok(ablation)
}

pub fn ablate(cfg: &TrainConfig, on_epoch: &mut dyn FnMut(Variant, &EpochRecord)) -> Result<Ablation> {
    let train = Dataset::load(&cfg.data_root, Split::Train)?;
    let val = Dataset::load(&cfg.data_root, Split::Val)?;
    let test = Dataset::load(&cfg.data_root, Split::Test)?;
    ablate_with_data(cfg, &train, &val, &test, on_epoch)
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub distance: DistanceMap,
    pub threshold: f64,
    pub changed_pixels: usize,
    pub map_path: PathBuf,
    pub distance_path: PathBuf,
}

/// Sidecar path for the scaled distance map: `<stem>_dist.pgm` beside `out`.
pub fn distance_sidecar(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_dist.pgm"))
}

/// Min-max scales a distance map into `[0, 1]`; a constant map becomes zeros.
/// Also returns the offset and span used.
pub fn scale_distance(d: &[f64]) -> (Vec<f64>, f64, f64) {
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scaled = if span > 0.0 {
        d.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; d.len()]
    };
    (scaled, lo, span)
}

/// Runs a checkpoint on one image pair. Writes the binary change map (0 or
/// 255) to `out` and the min-max scaled distance map beside it.
pub fn predict_pair(ckpt: &Path, a: &Path, b: &Path, out: &Path) -> Result<Prediction> {
    let model = Checkpoint::load(ckpt)?.into_model()?;
    let x1 = read_image(a)?;
    let x2 = read_image(b)?;
    if (x1.channels, x1.height, x1.width) != (x2.channels, x2.height, x2.width) {
        return Err(Error::Input(format!(
            "image sizes differ: {}×{}×{} vs {}×{}×{}",
            x1.channels, x1.height, x1.width, x2.channels, x2.height, x2.width
        )));
    }
    let distance = model.distance_map(&x1.to_tensor(), &x2.to_tensor())?;
    let threshold = model.config().threshold;
    let map = predict(&distance, threshold);
    write_image(out, &Image::from_change_map(&map)?)?;
    let [_, h, w] = distance.shape();
    let (scaled, _, _) = scale_distance(distance.data());
    let distance_path = distance_sidecar(out);
    write_image(&distance_path, &Image::new(1, h, w, scaled)?)?;
    Ok(Prediction {
        changed_pixels: map.count_changed(),
        distance,
        threshold,
        map_path: out.to_path_buf(),
        distance_path,
    })
}
