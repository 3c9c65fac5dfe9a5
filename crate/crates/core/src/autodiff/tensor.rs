use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Zeros,
    Ones,
    Constant(f64),
    /// Independent draws from `[lo, hi)` using a ChaCha8 stream seeded with `seed`.
    Uniform { seed: u64, lo: f64, hi: f64 },
}

/// Dense row-major `f64` tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor shape must have at least one dimension"));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!(
            "dimension {pos} of {shape:?} is zero; all dimensions must be >= 1"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn create(shape: &[usize], fill: Fill) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = match fill {
            Fill::Zeros => vec![0.0; n],
            Fill::Ones => vec![1.0; n],
            Fill::Constant(c) => vec![c; n],
            Fill::Uniform { seed, lo, hi } => {
                if !(lo < hi) {
                    return Err(Error::Input(format!(
                        "uniform fill needs lo < hi, got [{lo}, {hi})"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| rng.random_range(lo..hi)).collect()
            }
        };
        Tensor::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::create(shape, Fill::Zeros)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Tensor::create(shape, Fill::Ones)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Tensor::create(shape, Fill::Constant(value))
    }

    pub fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Result<Self> {
        Tensor::create(shape, Fill::Uniform { seed, lo, hi })
    }

    /// One-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// First element; meant for one-element tensors such as losses.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .map_or(true, |g| g.iter().all(|v| v.is_finite()))
    }

    /// Splits a `B×C×H×W` tensor along channels into `[0, c1)` and `[c1, C)`.
    pub fn split_channels(&self, c1: usize) -> Result<(Tensor, Tensor)> {
        let [b, c, h, w] = dims4(&self.shape)?;
        if c1 == 0 || c1 >= c {
            return Err(Error::shape(format!(
                "split point {c1} must lie strictly inside 0..{c}"
            )));
        }
        let plane = h * w;
        let mut lo = Vec::with_capacity(b * c1 * plane);
        let mut hi = Vec::with_capacity(b * (c - c1) * plane);
        for chunk in self.data.chunks(c * plane) {
            lo.extend_from_slice(&chunk[..c1 * plane]);
            hi.extend_from_slice(&chunk[c1 * plane..]);
        }
        Ok((
            Tensor::new(&[b, c1, h, w], lo)?,
            Tensor::new(&[b, c - c1, h, w], hi)?,
        ))
    }
}

pub(crate) fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| Error::shape(format!("expected a rank-4 tensor, got shape {shape:?}")))
}

pub(crate) fn dims3(shape: &[usize]) -> Result<[usize; 3]> {
    shape
        .try_into()
        .map_err(|_| Error::shape(format!("expected a rank-3 tensor, got shape {shape:?}")))
}

pub(crate) fn dims2(shape: &[usize]) -> Result<[usize; 2]> {
    shape
        .try_into()
        .map_err(|_| Error::shape(format!("expected a rank-2 tensor, got shape {shape:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_ones() {
        let z = Tensor::zeros(&[2, 2]).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        assert!(!z.requires_grad());
        let o = Tensor::ones(&[3]).unwrap();
        assert_eq!(o.data(), &[1.0; 3]);
    }

    #[test]
    fn uniform_is_reproducible() {
        let a = Tensor::uniform(&[4], 42, -1.0, 1.0).unwrap();
        let b = Tensor::uniform(&[4], 42, -1.0, 1.0).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
        let c = Tensor::uniform(&[4], 43, -1.0, 1.0).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(Tensor::zeros(&[2, 0]), Err(Error::InvalidShape(_))));
        assert!(matches!(Tensor::zeros(&[]), Err(Error::InvalidShape(_))));
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::uniform(&[2], 1, 1.0, 1.0).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(&[2]).unwrap().with_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn split_channels_blocks() {
        let t = Tensor::new(&[1, 3, 1, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let (a, b) = t.split_channels(1).unwrap();
        assert_eq!(a.data(), &[0., 1.]);
        assert_eq!(b.shape(), &[1, 2, 1, 2]);
        assert_eq!(b.data(), &[2., 3., 4., 5.]);
        assert!(t.split_channels(3).is_err());
    }
}
