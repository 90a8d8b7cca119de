use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use candle_core::Device;
use clap::{Parser, Subcommand};

use ccib::bound;
use ccib::harness::checkpoint::Checkpoint;
use ccib::harness::config::ExperimentConfig;
use ccib::harness::data::load_image_file;
use ccib::harness::eval::{self, EVAL_HEADER};
use ccib::harness::{fetch, plot, sweep, train};
use ccib::objectives::Objective;
use ccib::ood::DetectionConfig;

#[derive(Parser)]
#[command(name = "ccib", version, about = "Task-oriented JSCC with likelihood-based OoD detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download and verify a dataset.
    Fetch {
        dataset: String,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
    },
    /// Train a model from a config file.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on the config's ID test set and OoD sets.
    Eval { config: PathBuf, checkpoint: PathBuf },
    /// Accuracy/AUROC curves over latent size or test PSNR.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: sweep::SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Comma-separated objectives; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        objectives: Vec<Objective>,
    },
    /// Classify one image and decide ID vs OoD.
    Detect {
        checkpoint: PathBuf,
        input: PathBuf,
        /// Use this config's channel and detector settings instead of the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the test PSNR (dB).
        #[arg(long)]
        psnr: Option<f64>,
    },
    /// Check the variational bound on random toy sources.
    VerifyBound {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = bound::DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "bound.csv")]
        out: PathBuf,
    },
    /// Render sweep or ROC CSVs to SVG.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Fetch { dataset, data_dir } => {
            let r = fetch::fetch(&dataset, &data_dir)?;
            println!("fetched {} into {} ({} files)", r.dataset, r.dir.display(), r.files.len());
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let a = train::train_run(&cfg)?;
            let m = a.final_metrics();
            println!(
                "epoch={} loss={:.6} train_accuracy={:.4} lambda={}",
                m.epoch,
                m.loss,
                m.train_accuracy,
                a.lambda_threshold.map_or("none".into(), |l| l.to_string())
            );
            println!("checkpoint {}", a.checkpoint.display());
            println!("metrics {}", a.metrics.display());
        }
        Command::Eval { config, checkpoint } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let m = eval::eval_run(&cfg, &checkpoint)?;
            println!("{}", EVAL_HEADER.join(","));
            for row in m.rows() {
                println!("{}", row.join(","));
            }
            println!("written to {}", m.output_dir.display());
        }
        Command::Sweep { config, axis, values, objectives } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let r = sweep::sweep(&cfg, axis, &values, &objectives)?;
            println!("{} points ({} trained) written to {}", r.points.len(), r.trained, r.csv.display());
        }
        Command::Detect { checkpoint, input, config, psnr } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (mut channel, detect) = match config {
                Some(p) => {
                    let cfg = ExperimentConfig::from_path(&p)?;
                    (cfg.channel, cfg.detect)
                }
                None => (ckpt.meta.channel.clone(), DetectionConfig::default()),
            };
            if let Some(db) = psnr {
                channel = channel.with_psnr(db)?;
            }
            let model = ckpt.restore(&Device::Cpu)?;
            let pixels = load_image_file(&input, ckpt.meta.input)?;
            let d = eval::detect_one(&ckpt, &model, &pixels, &channel, &detect)?;
            println!("{}", d.line());
        }
        Command::VerifyBound { trials, samples, seed, out } => {
            if trials == 0 {
                bail!("--trials must be positive");
            }
            let mut w = csv::Writer::from_writer(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
            w.write_record(bound::CSV_HEADER)?;
            let (mut violations, mut loose) = (0, 0);
            for i in 0..trials {
                let t = bound::random_trial(i, seed, samples)?;
                violations += usize::from(!t.report.passed());
                w.write_record(bound::csv_row(&t))?;
                let m = bound::matched_trial(i, seed, samples)?;
                violations += usize::from(!m.report.passed());
                loose += usize::from(!m.report.tight());
                w.write_record(bound::csv_row(&m))?;
            }
            w.flush()?;
            println!("trials={trials} violations={violations} matched_not_tight={loose} csv={}", out.display());
            if violations > 0 {
                bail!("{violations} bound violations");
            }
        }
        Command::Plot { csv, out_dir } => {
            for p in &csv {
                let (_, svg) = plot::plot_csv(p, out_dir.as_deref())?;
                println!("{}", svg.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<ccib::Error>().map_or("other", |e| e.kind());
            let line = serde_json::json!({ "error": { "kind": kind, "message": format!("{e:#}") } });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
