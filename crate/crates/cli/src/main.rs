//! Command-line front door: dataset generation, training, evaluation,
//! prediction overlays, the ablation matrix, and gradient checking.
//!
//! Every command is deterministic given its flags and seed. Run artifacts
//! land under the config's `out_dir`: `checkpoints/`, `log.txt`,
//! `metrics.txt`, `overlays/`, and `ablation.txt`.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use hstmrf::ablate;
use hstmrf::checkpoint;
use hstmrf::config::{AblationState, RunConfig};
use hstmrf::data::{load_dataset, load_image, stack, write_overlay, Sample, Split};
use hstmrf::gradcheck::{run_suite, CheckScope};
use hstmrf::metrics::{Metrics, MetricsAccum};
use hstmrf::params::ParamStore;
use hstmrf::pnm::write_pgm;
use hstmrf::synthetic::generate;
use hstmrf::train::{predict_logits, Trainer};

#[derive(Parser)]
#[command(
    name = "hstmrf",
    version,
    about = "Dual-branch window-attention segmentation: data, training, evaluation, ablation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic ellipse dataset plus manifest.tsv.
    GenData {
        /// Training samples to write.
        #[arg(long)]
        n: usize,
        /// Validation samples to write.
        #[arg(long, default_value_t = 0)]
        val: usize,
        /// Test samples to write.
        #[arg(long, default_value_t = 0)]
        test: usize,
        /// Square image edge in pixels; must be divisible by 16.
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: u64,
        /// Directory for images, masks, and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured model; writes checkpoints/, log.txt, metrics.txt.
    Train {
        /// TOML run config.
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint (config must match exactly).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one manifest split; writes metrics.txt and overlays/.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to score: train, val, or test.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Segment one image with a trained checkpoint; writes mask.pgm and overlay.ppm.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (binary PGM or PPM).
        #[arg(long)]
        image: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score model variants from one base config; writes ablation.txt.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// `all` or a comma-separated list of state names.
        #[arg(long, default_value = "all")]
        states: String,
    },
    /// Finite-difference gradient verification in 64-bit mode.
    Gradcheck {
        /// Granularity: op, block, model, or all.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { n, val, test, size, seed, out } => cmd_gen_data(n, val, test, size, seed, &out),
        Cmd::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Cmd::Eval { config, checkpoint, split } => cmd_eval(&config, &checkpoint, &split),
        Cmd::Predict { checkpoint, image, out } => cmd_predict(&checkpoint, &image, &out),
        Cmd::Ablate { config, states } => cmd_ablate(&config, &states),
        Cmd::Gradcheck { scope, seed } => cmd_gradcheck(&scope, seed),
    }
}

fn metrics_record(split: &str, m: &Metrics) -> serde_json::Value {
    serde_json::json!({
        "record": "metrics", "split": split, "dice": m.dice, "iou": m.iou,
        "recall": m.recall, "precision": m.precision, "images": m.images,
    })
}

fn metrics_table(rows: &[(&str, Metrics)]) -> String {
    let mut out =
        format!("{:<6} {:>7} {:>7} {:>7} {:>7} {:>7}\n", "split", "mDice", "mIoU", "Rec", "Pre", "images");
    for (split, m) in rows {
        out.push_str(&format!(
            "{:<6} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7}\n",
            split, m.dice, m.iou, m.recall, m.precision, m.images
        ));
    }
    out
}

fn cmd_gen_data(n: usize, val: usize, test: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    if size < 16 || size % 16 != 0 {
        bail!("size must be divisible by 16 (and at least 16), got {size}");
    }
    let manifest = generate(out, size, (n, val, test), seed)?;
    println!(
        "{}",
        serde_json::json!({
            "record": "gen_data", "train": n, "val": val, "test": test,
            "size": size, "seed": seed, "manifest": manifest.display().to_string(),
        })
    );
    Ok(())
}

/// Load the manifest named by the config; the CLI cannot run without one.
fn load_run_data(run: &RunConfig) -> Result<hstmrf::data::Dataset> {
    let manifest = run
        .data
        .manifest
        .as_ref()
        .context("config has no data.manifest; point it at a `<image>\\t<mask>\\t<split>` file")?;
    Ok(load_dataset(manifest, run.data.image_size)?)
}

fn cmd_train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let run = RunConfig::load(config)?;
    let data = load_run_data(&run)?;
    if data.train.is_empty() {
        bail!("manifest {} has no train-split rows", run.data.manifest.as_ref().unwrap().display());
    }

    let ckpt_dir = run.out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    let log_path = run.out_dir.join("log.txt");

    let (mut trainer, mut log) = match resume {
        Some(path) => {
            let loaded = checkpoint::load(path)?;
            if loaded.run.to_toml() != run.to_toml() {
                bail!(
                    "checkpoint {} embeds a different run config than {}; refusing to resume",
                    path.display(),
                    config.display()
                );
            }
            let log = File::options()
                .create(true)
                .append(true)
                .open(&log_path)
                .with_context(|| format!("opening {}", log_path.display()))?;
            (Trainer::from_checkpoint(loaded), log)
        }
        None => {
            let log = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
            (Trainer::new(run.clone()), log)
        }
    };

    let outcome = trainer.train(&data.train, &mut log, Some(&ckpt_dir))?;

    let mut reports: Vec<(&str, Metrics)> = vec![("train", outcome.train_metrics)];
    for split in [Split::Val, Split::Test] {
        let samples = data.split(split);
        if !samples.is_empty() {
            let m = hstmrf::train::evaluate(&trainer.store, &run.model, samples, run.train.batch_size);
            reports.push((split.name(), m));
        }
    }

    let mut metrics_text = String::new();
    for (split, m) in &reports {
        metrics_text.push_str(&format!("{}\n", metrics_record(split, m)));
    }
    metrics_text.push_str(&metrics_table(&reports));
    let metrics_path = run.out_dir.join("metrics.txt");
    fs::write(&metrics_path, &metrics_text).with_context(|| format!("writing {}", metrics_path.display()))?;

    print!("{metrics_text}");
    println!(
        "{}",
        serde_json::json!({
            "record": "train_done", "steps": outcome.steps, "final_loss": outcome.final_loss,
            "log": log_path.display().to_string(), "checkpoints": ckpt_dir.display().to_string(),
        })
    );
    Ok(())
}

/// Score `samples`, writing one overlay per sample (ground truth in green,
/// prediction in red) into `overlays_dir`.
fn eval_with_overlays(
    store: &ParamStore<f32>,
    run: &RunConfig,
    samples: &[Sample],
    overlays_dir: &Path,
    split_name: &str,
) -> Result<Metrics> {
    fs::create_dir_all(overlays_dir).with_context(|| format!("creating {}", overlays_dir.display()))?;
    let mut acc = MetricsAccum::new();
    for (i, sample) in samples.iter().enumerate() {
        let (images, masks) = stack(&[sample]);
        let logits = predict_logits(store, &run.model, &images);
        acc.update(&logits, &masks);
        let pred: Vec<f32> =
            logits.data().iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect();
        let path = overlays_dir.join(format!("{split_name}-{i:03}.ppm"));
        write_overlay(&path, &sample.image, sample.mask.data(), &pred)?;
    }
    Ok(acc.finish())
}

fn cmd_eval(config: &Path, ckpt: &Path, split: &str) -> Result<()> {
    let run = RunConfig::load(config)?;
    let split = Split::parse(split)
        .with_context(|| format!("unknown split `{split}`; expected train, val, or test"))?;
    let loaded = checkpoint::load(ckpt)?;
    checkpoint::check_compatible(ckpt, &run, &loaded)?;

    let data = load_run_data(&run)?;
    let samples = data.split(split);
    if samples.is_empty() {
        bail!("split `{}` has no rows in the manifest", split.name());
    }

    let m = eval_with_overlays(&loaded.store, &run, samples, &run.out_dir.join("overlays"), split.name())?;
    let record = metrics_record(split.name(), &m);
    let table = metrics_table(&[(split.name(), m)]);
    let metrics_path = run.out_dir.join("metrics.txt");
    fs::write(&metrics_path, format!("{record}\n{table}"))
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    println!("{record}");
    print!("{table}");
    Ok(())
}

fn cmd_predict(ckpt: &Path, image_path: &Path, out: &Path) -> Result<()> {
    let loaded = checkpoint::load(ckpt)?;
    let size = loaded.run.data.image_size;
    let image = load_image(image_path, size)?;
    let batch = hstmrf::tensor::Tensor::new(&[1, 3, size, size], image.data().to_vec());
    let logits = predict_logits(&loaded.store, &loaded.run.model, &batch);
    let pred: Vec<f32> = logits.data().iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect();

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mask_path = out.join("mask.pgm");
    let bytes: Vec<u8> = pred.iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    write_pgm(&mask_path, size, size, &bytes)?;
    let overlay_path = out.join("overlay.ppm");
    write_overlay(&overlay_path, &image, &vec![0.0; size * size], &pred)?;

    let positive = pred.iter().filter(|&&v| v >= 0.5).count() as f64 / pred.len() as f64;
    println!(
        "{}",
        serde_json::json!({
            "record": "predict", "image": image_path.display().to_string(),
            "positive_fraction": positive,
            "mask": mask_path.display().to_string(), "overlay": overlay_path.display().to_string(),
        })
    );
    Ok(())
}

fn parse_states(arg: &str) -> Result<Vec<AblationState>> {
    if arg == "all" {
        return Ok(AblationState::ALL.to_vec());
    }
    arg.split(',').map(|s| Ok(AblationState::parse(s.trim())?)).collect()
}

fn cmd_ablate(config: &Path, states: &str) -> Result<()> {
    let run = RunConfig::load(config)?;
    let states = parse_states(states)?;
    let data = load_run_data(&run)?;
    if data.train.is_empty() {
        bail!("manifest {} has no train-split rows", run.data.manifest.as_ref().unwrap().display());
    }

    let log_dir = run.out_dir.join("ablate");
    fs::create_dir_all(&log_dir).with_context(|| format!("creating {}", log_dir.display()))?;
    let rows = ablate::run_states(&run, &states, &data, |state| {
        let path = log_dir.join(format!("{}.log.txt", state.name()));
        File::create(&path).map_err(|e| hstmrf::error::Error::io(&path, e))
    })?;

    let split = ablate::eval_split(&data);
    for row in &rows {
        let mut record = metrics_record(split.name(), &row.metrics);
        record["record"] = "ablation".into();
        record["state"] = row.state.name().into();
        println!("{record}");
    }
    let report = ablate::format_report(&rows, split);
    let report_path = run.out_dir.join("ablation.txt");
    fs::write(&report_path, &report).with_context(|| format!("writing {}", report_path.display()))?;
    print!("{report}");
    Ok(())
}

fn cmd_gradcheck(scope: &str, seed: u64) -> Result<()> {
    let scope = CheckScope::parse(scope)
        .with_context(|| format!("unknown scope `{scope}`; expected op, block, model, or all"))?;
    let reports = run_suite(scope, seed);
    for r in &reports {
        println!("{}", r.line());
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", reports.len());
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}
