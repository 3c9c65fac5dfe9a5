use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::data::netpbm::{read_image, write_image, Image};
use crate::data::synth::{generate_pair, GenParams, Sample};
use crate::error::{Error, Result};
use crate::model::ChangeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<Sample>,
}

/// Sample counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 200,
            val: 50,
            test: 50,
        }
    }
}

impl Dataset {
    /// Sample `i` is generated from seed `first_seed + i`.
    pub fn generate(split: Split, count: usize, first_seed: u64, params: &GenParams) -> Result<Self> {
        let samples = (0..count as u64)
            .map(|i| generate_pair(first_seed + i, params))
            .collect::<Result<_>>()?;
        Ok(Dataset { split, samples })
    }

    /// Generates all three splits with consecutive seeds starting at `seed`
    /// (train first, then val, then test).
    pub fn generate_splits(sizes: SplitSizes, seed: u64, params: &GenParams) -> Result<[Dataset; 3]> {
        let train = Dataset::generate(Split::Train, sizes.train, seed, params)?;
        let val = Dataset::generate(Split::Val, sizes.val, seed + sizes.train as u64, params)?;
        let test = Dataset::generate(
            Split::Test,
            sizes.test,
            seed + (sizes.train + sizes.val) as u64,
            params,
        )?;
        Ok([train, val, test])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split_dir(root: &Path, split: Split) -> PathBuf {
        root.join(split.as_str())
    }

    /// Writes `<root>/<split>/<id>_a.ppm`, `<id>_b.ppm`, `<id>_label.pgm` and
    /// a `manifest.txt` listing the ids.
    pub fn save(&self, root: &Path) -> Result<()> {
        let dir = Dataset::split_dir(root, self.split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut manifest = String::new();
        for s in &self.samples {
            write_image(&dir.join(format!("{}_a.ppm", s.id)), &s.x1)?;
            write_image(&dir.join(format!("{}_b.ppm", s.id)), &s.x2)?;
            write_image(
                &dir.join(format!("{}_label.pgm", s.id)),
                &Image::from_change_map(&s.label)?,
            )?;
            manifest.push_str(&s.id);
            manifest.push('\n');
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let dir = Dataset::split_dir(root, split);
        let path = dir.join("manifest.txt");
        let manifest = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut samples = Vec::new();
        for id in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let x1 = read_image(&dir.join(format!("{id}_a.ppm")))?;
            let x2 = read_image(&dir.join(format!("{id}_b.ppm")))?;
            let label = read_image(&dir.join(format!("{id}_label.pgm")))?.to_change_map()?;
            if x1.channels != 3 || x2.channels != 3 {
                return Err(Error::Input(format!("sample {id}: images must be RGB")));
            }
            if (x1.height, x1.width) != (x2.height, x2.width)
                || [1, x1.height, x1.width] != label.shape()
            {
                return Err(Error::Input(format!("sample {id}: image and label sizes differ")));
            }
            samples.push(Sample {
                id: id.to_string(),
                x1,
                x2,
                label,
            });
        }
        Ok(Dataset { split, samples })
    }
}

/// A stacked group of samples ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `B×3×H×W`
    pub x1: Tensor,
    pub x2: Tensor,
    /// `B×H×W` of exact 0/1 values.
    pub labels: Tensor,
    pub label_map: ChangeMap,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Input("a batch needs at least one sample".into()))?;
        let (h, w) = (first.x1.height, first.x1.width);
        let b = samples.len();
        let mut x1 = Vec::with_capacity(b * 3 * h * w);
        let mut x2 = Vec::with_capacity(b * 3 * h * w);
        for s in samples {
            if (s.x1.height, s.x1.width) != (h, w) {
                return Err(Error::Input("samples in a batch must share one size".into()));
            }
            x1.extend_from_slice(&s.x1.data);
            x2.extend_from_slice(&s.x2.data);
        }
        let label_map = ChangeMap::stack(&samples.iter().map(|s| s.label.clone()).collect::<Vec<_>>())?;
        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            x1: Tensor::new(&[b, 3, h, w], x1)?,
            x2: Tensor::new(&[b, 3, h, w], x2)?,
            labels: label_map.to_tensor(),
            label_map,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Yields batches in a fixed order; the last batch may be smaller.
pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let picked: Vec<&Sample> = self.order[self.pos..end]
            .iter()
            .map(|&i| &self.ds.samples[i])
            .collect();
        self.pos = end;
        Some(Batch::from_samples(&picked).expect("dataset samples are validated on load"))
    }
}

/// Batches of `batch_size` in dataset order, or in a permutation fixed by
/// `shuffle_seed`.
pub fn batch_iter(ds: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if ds.is_empty() {
        return Err(Error::Input(format!("{} split is empty", ds.split)));
    }
    let (h, w) = (ds.samples[0].x1.height, ds.samples[0].x1.width);
    if ds
        .samples
        .iter()
        .any(|s| (s.x1.height, s.x1.width) != (h, w) || (s.x2.height, s.x2.width) != (h, w))
    {
        return Err(Error::Input("all samples must share one image size".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}
