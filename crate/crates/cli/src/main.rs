use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dualunet::autodiff::tamper_conv_backward;
use dualunet::data::{Dataset, GenParams, Split, SplitSizes};
use dualunet::train::{self, gradsuite, metrics_row, EpochRecord, TrainConfig, METRICS_HEADER};

#[derive(Parser)]
#[command(name = "dualunet", version, about = "Siamese change detection on image pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic change-detection dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        val: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probability that an object changes between the two images.
        #[arg(long)]
        p_change: Option<f64>,
        /// Standard deviation of the additive Gaussian noise.
        #[arg(long)]
        noise: Option<f64>,
        /// Brightness offset added to or subtracted from the second image.
        #[arg(long)]
        illum: Option<f64>,
    },
    /// Train one model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Override the decision threshold stored in the checkpoint.
        #[arg(long)]
        threshold: Option<f64>,
        /// Metrics CSV path (default: eval_<split>.csv next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write every predicted change map into this directory.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Train the base, mdam and full variants and compare them on the test split.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Predict the change map of one image pair.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Check the end-to-end loss of a small model instead of single ops.
        #[arg(long)]
        model: bool,
        #[arg(long, default_value_t = 64)]
        coords: usize,
        #[arg(long, hide = true)]
        tamper_conv_backward: bool,
    },
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    TrainConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_epoch(prefix: &str, r: &EpochRecord) {
    let m = &r.val.metrics;
    eprintln!(
        "{prefix}epoch {:>3}  train_loss {:.4}  val_loss {:.4}  P {:.4}  R {:.4}  F1 {:.4}  IoU {:.4}",
        r.epoch, r.train_loss, r.val.loss, m.precision, m.recall, m.f1, m.iou
    );
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            out,
            train,
            val,
            test,
            size,
            seed,
            p_change,
            noise,
            illum,
        } => {
            let defaults = GenParams::default();
            let params = GenParams {
                size,
                p_change: p_change.unwrap_or(defaults.p_change),
                noise_sigma: noise.unwrap_or(defaults.noise_sigma),
                illum_shift: illum.unwrap_or(defaults.illum_shift),
                ..defaults
            };
            let splits = Dataset::generate_splits(SplitSizes { train, val, test }, seed, &params)?;
            for ds in &splits {
                ds.save(&out)?;
                println!("{}: {} pairs", ds.split, ds.len());
            }
        }
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let report = train::train(&cfg, &mut |r| print_epoch("", r))?;
            let best = report.best();
            println!(
                "best epoch {} (val F1 {:.4}); checkpoints {} and {}",
                best.epoch,
                best.val.metrics.f1,
                report.best_checkpoint.display(),
                report.final_checkpoint.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            split,
            threshold,
            out,
            dump,
        } => {
            let out = out.unwrap_or_else(|| ckpt.with_file_name(format!("eval_{split}.csv")));
            let eval = train::evaluate_checkpoint(&ckpt, &data, split, threshold, Some(&out), dump.as_deref())?;
            println!("{METRICS_HEADER}");
            println!("{}", metrics_row(0, split, eval.loss, &eval.metrics));
            if eval.metrics.degenerate {
                eprintln!("note: some metrics had a zero denominator and were reported as 0");
            }
        }
        Command::Ablate { config } => {
            let cfg = load_config(&config)?;
            let table = train::ablate(&cfg, &mut |v, r| print_epoch(&format!("[{v}] "), r))?;
            print!("{}", table.to_table());
        }
        Command::Predict { ckpt, a, b, out } => {
            let p = train::predict_pair(&ckpt, &a, &b, &out)?;
            println!(
                "{} changed pixels; wrote {} and {}",
                p.changed_pixels,
                p.map_path.display(),
                p.distance_path.display()
            );
        }
        Command::Gradcheck {
            model,
            coords,
            tamper_conv_backward: tamper,
        } => {
            tamper_conv_backward(tamper);
            let entries = if model {
                let check = gradsuite::model_check(7, coords)?;
                if !check.kinked.is_empty() {
                    eprintln!("skipped {} samples with a kink inside the probe interval", check.kinked.len());
                }
                vec![check.entry]
            } else {
                gradsuite::op_checks()?
            };
            print!("{}", gradsuite::format_report(&entries));
            if entries.iter().any(|e| !e.passed()) {
                eprintln!("gradient check failed");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
