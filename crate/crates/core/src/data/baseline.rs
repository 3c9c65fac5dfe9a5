use crate::data::netpbm::Image;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{Confusion, Metrics};
use crate::model::ChangeMap;

/// Classical image differencing: the per-pixel mean over channels of
/// `|x1 − x2|`, thresholded (strictly) at `threshold`.
pub fn classical_diff_baseline(x1: &Image, x2: &Image, threshold: f64) -> Result<ChangeMap> {
    if (x1.channels, x1.height, x1.width) != (x2.channels, x2.height, x2.width) {
        return Err(Error::shape(format!(
            "image shapes differ: {}×{}×{} vs {}×{}×{}",
            x1.channels, x1.height, x1.width, x2.channels, x2.height, x2.width
        )));
    }
    let n = x1.height * x1.width;
    let data = (0..n)
        .map(|p| {
            let mean = (0..x1.channels)
                .map(|c| (x1.data[c * n + p] - x2.data[c * n + p]).abs())
                .sum::<f64>()
                / x1.channels as f64;
            u8::from(mean > threshold)
        })
        .collect();
    ChangeMap::new([1, x1.height, x1.width], data)
}

/// Pooled metrics of the baseline over a dataset.
pub fn evaluate_baseline(ds: &Dataset, threshold: f64) -> Result<Metrics> {
    let mut total = Confusion::default();
    for s in &ds.samples {
        let pred = classical_diff_baseline(&s.x1, &s.x2, threshold)?;
        total.merge(&Confusion::from_maps(&pred, &s.label)?);
    }
    Ok(total.metrics())
}

/// Picks the candidate threshold with the best pooled IoU on `ds` (ties go
/// to the earlier candidate).
pub fn tune_baseline_threshold(ds: &Dataset, candidates: &[f64]) -> Result<(f64, Metrics)> {
    let mut best: Option<(f64, Metrics)> = None;
    for &t in candidates {
        let m = evaluate_baseline(ds, t)?;
        if best.as_ref().is_none_or(|(_, b)| m.iou > b.iou) {
            best = Some((t, m));
        }
    }
    best.ok_or_else(|| Error::Config("no candidate thresholds given".into()))
}

/// Thresholds 0.01, 0.02, …, 0.60.
pub fn default_baseline_candidates() -> Vec<f64> {
    (1..=60).map(|i| i as f64 / 100.0).collect()
}
