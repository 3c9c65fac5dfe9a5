//! Batch-balanced contrastive loss and change-class metrics.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ChangeMap;

/// Number of unchanged and changed label positions in a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelCounts {
    pub unchanged: usize,
    pub changed: usize,
}

pub fn pixel_counts(labels: &Tensor) -> Result<PixelCounts> {
    let mut counts = PixelCounts {
        unchanged: 0,
        changed: 0,
    };
    for &v in labels.data() {
        match v {
            0.0 => counts.unchanged += 1,
            1.0 => counts.changed += 1,
            other => {
                return Err(Error::Input(format!(
                    "labels must be 0 or 1, found {other}"
                )))
            }
        }
    }
    Ok(counts)
}

/// Batch-balanced contrastive loss
///
/// `L = 1/(2 p_u) Σ (1 − M) D + 1/(2 p_c) Σ M · max(0, m − D)`
///
/// where `p_u` and `p_c` count unchanged and changed label positions. A term
/// whose count is zero is dropped (its sum is necessarily zero too).
pub fn bcl_loss(g: &mut Graph, d: Var, labels: &Tensor, margin: f64) -> Result<Var> {
    if g.shape(d) != labels.shape() {
        return Err(Error::shape(format!(
            "distance map {:?} and labels {:?} differ",
            g.shape(d),
            labels.shape()
        )));
    }
    if !(margin > 0.0) {
        return Err(Error::Config(format!("margin must be > 0, got {margin}")));
    }
    let counts = pixel_counts(labels)?;
    let shape = labels.shape().to_vec();
    let mut terms = Vec::with_capacity(2);
    if counts.unchanged > 0 {
        let inv = labels.data().iter().map(|m| 1.0 - m).collect();
        let inv = g.constant(Tensor::new(&shape, inv)?);
        let t = g.mul(d, inv)?;
        let t = g.sum(t)?;
        terms.push(g.scale(t, 0.5 / counts.unchanged as f64)?);
    }
    if counts.changed > 0 {
        let m = g.constant(Tensor::full(&shape, margin)?);
        let gap = g.sub(m, d)?;
        let hinge = g.relu(gap)?;
        let mask = g.constant(labels.clone());
        let t = g.mul(hinge, mask)?;
        let t = g.sum(t)?;
        terms.push(g.scale(t, 0.5 / counts.changed as f64)?);
    }
    match terms[..] {
        [t] => Ok(t),
        [a, b] => g.add(a, b),
        _ => unreachable!("labels are non-empty"),
    }
}

/// Plain evaluation of [`bcl_loss`].
pub fn bcl_loss_value(d: &Tensor, labels: &Tensor, margin: f64) -> Result<f64> {
    let mut g = Graph::new();
    let dv = g.constant(d.clone());
    let l = bcl_loss(&mut g, dv, labels, margin)?;
    Ok(g.value(l).item())
}

/// Confusion counts with the changed class as positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_maps(pred: &ChangeMap, label: &ChangeMap) -> Result<Self> {
        if pred.shape() != label.shape() {
            return Err(Error::shape(format!(
                "prediction {:?} and label {:?} differ",
                pred.shape(),
                label.shape()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &l) in pred.data().iter().zip(label.data()) {
            match (p, l) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn metrics(&self) -> Metrics {
        Metrics::from_confusion(*self)
    }
}

/// Precision, recall, F1 and IoU of the changed class. Any 0/0 ratio is
/// reported as 0 and sets `degenerate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub counts: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub degenerate: bool,
}

impl Metrics {
    pub fn from_confusion(c: Confusion) -> Self {
        let mut degenerate = false;
        let mut ratio = |num: f64, den: f64| {
            if den == 0.0 {
                degenerate = true;
                0.0
            } else {
                num / den
            }
        };
        let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        let iou = ratio(tp, tp + fp + fn_);
        Metrics {
            counts: c,
            precision,
            recall,
            f1,
            iou,
            degenerate,
        }
    }
}

/// Confusion-derived metrics for one prediction/label pair.
pub fn confusion(pred: &ChangeMap, label: &ChangeMap) -> Result<Metrics> {
    Ok(Confusion::from_maps(pred, label)?.metrics())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn counts() {
        let c = pixel_counts(&t(&[1, 2, 2], &[1., 0., 0., 0.])).unwrap();
        assert_eq!(c, PixelCounts { unchanged: 3, changed: 1 });
        let c = pixel_counts(&t(&[1, 2, 2], &[0.; 4])).unwrap();
        assert_eq!(c, PixelCounts { unchanged: 4, changed: 0 });
        let c = pixel_counts(&t(&[1, 2, 2], &[1.; 4])).unwrap();
        assert_eq!(c, PixelCounts { unchanged: 0, changed: 4 });
        assert!(matches!(pixel_counts(&t(&[2], &[0.5, 1.])), Err(Error::Input(_))));
    }

    #[test]
    fn hand_case() {
        // ½·(0.3 + 0 + 1.0)/3 + ½·max(0, 2 − 0.5)/1 = 13/60 + 45/60
        let d = t(&[1, 2, 2], &[0.5, 0.3, 0.0, 1.0]);
        let m = t(&[1, 2, 2], &[1., 0., 0., 0.]);
        let l = bcl_loss_value(&d, &m, 2.0).unwrap();
        assert!((l - 29.0 / 30.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn zero_cases() {
        let zeros = t(&[1, 2, 2], &[0.; 4]);
        assert_eq!(bcl_loss_value(&zeros, &zeros, 2.0).unwrap(), 0.0);
        let far = t(&[1, 2, 2], &[2.0, 3.0, 2.5, 7.0]);
        let ones = t(&[1, 2, 2], &[1.; 4]);
        assert_eq!(bcl_loss_value(&far, &ones, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let d = t(&[1, 2, 2], &[0.; 4]);
        let m = t(&[1, 4, 1], &[0.; 4]);
        assert!(matches!(bcl_loss_value(&d, &m, 2.0), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn hand_confusion() {
        let pred = ChangeMap::new([1, 2, 2], vec![1, 1, 0, 0]).unwrap();
        let label = ChangeMap::new([1, 2, 2], vec![1, 0, 0, 0]).unwrap();
        let m = confusion(&pred, &label).unwrap();
        assert_eq!(m.counts, Confusion { tp: 1, fp: 1, fn_: 0, tn: 2 });
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.iou, 0.5);
        assert!(!m.degenerate);
    }

    #[test]
    fn perfect_and_degenerate() {
        let label = ChangeMap::new([1, 1, 3], vec![0, 1, 1]).unwrap();
        let m = confusion(&label, &label).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (1.0, 1.0, 1.0, 1.0));
        let empty = ChangeMap::zeros([1, 2, 2]);
        let m = confusion(&empty, &empty).unwrap();
        assert_eq!(m.counts.tn, 4);
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (0.0, 0.0, 0.0, 0.0));
        assert!(m.degenerate);
    }
}
