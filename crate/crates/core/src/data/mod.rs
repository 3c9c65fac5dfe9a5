//! Synthetic bitemporal data, Netpbm I/O, batching and the differencing
//! baseline.

mod baseline;
mod dataset;
pub mod netpbm;
mod synth;

pub use baseline::{
    classical_diff_baseline, default_baseline_candidates, evaluate_baseline, tune_baseline_threshold,
};
pub use dataset::{batch_iter, Batch, BatchIter, Dataset, Split, SplitSizes};
pub use netpbm::{read_image, write_image, Image};
pub use synth::{generate_pair, GenParams, Sample};
