//! `transdeeplab`: train, evaluate, verify and inspect the segmentation model.

mod failure;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use transdeeplab_core::checkpoint::Checkpoint;
use transdeeplab_core::config::{Precision, RunConfig};
use transdeeplab_core::io::write_atomic;
use transdeeplab_core::model::{Model, ModelConfig};
use transdeeplab_core::tensor::Tensor;
use transdeeplab_core::train::data::{dataset_classes, read_dataset, synth_dataset, write_dataset, Sample};
use transdeeplab_core::train::metrics::{argmax_labels, MetricsOptions};
use transdeeplab_core::train::{evaluate, StepLog, Trainer, LOSS_LOG_HEADER};
use transdeeplab_core::verify::{self, Suite, VerifyOptions};
use transdeeplab_core::Element;

use failure::{Failure, WithCode};

/// Samples synthesized when a training run names no dataset.
const DEFAULT_SYNTH_SAMPLES: usize = 8;
const LOSS_LOG: &str = "loss.csv";
const FINAL_CHECKPOINT: &str = "checkpoint.tdlc";
const RESOLVED_CONFIG: &str = "config.cfg";

#[derive(Parser)]
#[command(
    name = "transdeeplab",
    version,
    about = "Pure-attention Swin/DeepLab segmentation on the CPU"
)]
#[command(
    after_help = "Exit codes: 0 ok, 1 verification or runtime failure, 2 config error, 3 dataset error, \
                        4 class-count mismatch, 5 corrupt checkpoint"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Run the self-verification suites in 64-bit mode.
    Verify(VerifyArgs),
    /// Print the parameter count and per-module breakdown.
    CountParams(CountArgs),
    /// Write a synthetic ellipse dataset directory.
    Synth(SynthArgs),
    /// Write the argmax label map of one image.
    Predict(PredictArgs),
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines). Defaults to the tiny preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Arithmetic precision; overrides the config.
    #[arg(long, value_parser = clap::value_parser!(Precision))]
    precision: Option<Precision>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Dataset directory; without one a synthetic set is generated from the seed.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint's parameters, optimizer state and step.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Suppress per-step progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Metrics table path; defaults to `<out>/metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Report this percentile of boundary distances instead of the maximum.
    #[arg(long)]
    hd_percentile: Option<f64>,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run only these suites (gradcheck, swin, fusion, metrics).
    #[arg(long = "suite")]
    suites: Vec<Suite>,
    /// Print every check, not just failures.
    #[arg(long, short)]
    verbose: bool,
    /// Corrupt one backward rule to exercise the failure path.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct CountArgs {
    /// Run configuration; defaults to the reference model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the built-in tiny configuration.
    #[arg(long, conflicts_with = "config")]
    tiny: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = DEFAULT_SYNTH_SAMPLES)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `[C, H, W]` or `[B, C, H, W]` TDL1 tensor.
    #[arg(long)]
    image: PathBuf,
    /// Output TDL1 label map, `[H, W]` or `[B, H, W]`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(Precision))]
    precision: Option<Precision>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
        Command::CountParams(a) => cmd_count_params(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match result {
        Ok(()) => ExitCode::from(failure::OK),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        None => RunConfig::tiny(),
        Some(path) => {
            let text =
                std::fs::read_to_string(path).code(failure::CONFIG, format!("reading config {}", path.display()))?;
            RunConfig::parse(&text).code(failure::CONFIG, format!("config {}", path.display()))?
        }
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(p) = common.precision {
        cfg.precision = p;
    }
    cfg.model.validate().code(failure::CONFIG, "model configuration")?;
    Ok(cfg)
}

fn load_dataset(root: &Path, num_classes: usize) -> Result<Vec<Sample>, Failure> {
    if let Some(k) = dataset_classes(root)? {
        if k != num_classes {
            return Err(Failure::msg(
                failure::MISMATCH,
                format!(
                    "dataset {} has {k} classes, model expects {num_classes}",
                    root.display()
                ),
            ));
        }
    }
    let samples = read_dataset(root, usize::MAX)?;
    if let Some(l) = samples
        .iter()
        .flat_map(|s| &s.mask)
        .copied()
        .max()
        .filter(|&l| l >= num_classes)
    {
        return Err(Failure::msg(
            failure::MISMATCH,
            format!(
                "dataset {} contains label {l}, model has {num_classes} classes",
                root.display()
            ),
        ));
    }
    Ok(samples)
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(d) = a.dataset {
        cfg.dataset = Some(d);
    }
    if let Some(c) = a.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    if cfg.train.batch_size == 0 {
        return Err(Failure::msg(failure::CONFIG, "batch_size must be positive"));
    }
    let data = match &cfg.dataset {
        Some(root) => load_dataset(root, cfg.model.num_classes)?,
        None => {
            let n = cfg.model.img_size;
            synth_dataset(DEFAULT_SYNTH_SAMPLES, n, n, cfg.model.num_classes, cfg.seed())?
        }
    };
    match cfg.precision {
        Precision::F32 => train::<f32>(&cfg, &data, a.resume.as_deref(), a.quiet),
        Precision::F64 => train::<f64>(&cfg, &data, a.resume.as_deref(), a.quiet),
    }
}

fn train<T: Element>(cfg: &RunConfig, data: &[Sample], resume: Option<&Path>, quiet: bool) -> Result<(), Failure> {
    let mut trainer = match resume {
        None => Trainer::new(Model::<T>::build(&cfg.model)?, cfg.train.clone())?,
        Some(path) => {
            let ck =
                Checkpoint::load(path).code(failure::CHECKPOINT, format!("loading checkpoint {}", path.display()))?;
            if ck.config != cfg.model {
                return Err(Failure::msg(
                    failure::CONFIG,
                    format!(
                        "checkpoint {} was trained with a different model configuration",
                        path.display()
                    ),
                ));
            }
            let model = ck.to_model::<T>(path)?;
            let opt = ck
                .to_optimizer(&model, cfg.train.momentum, cfg.train.weight_decay, path)?
                .ok_or_else(|| {
                    Failure::msg(
                        failure::CHECKPOINT,
                        format!("{} has no optimizer state", path.display()),
                    )
                })?;
            Trainer::resume(model, cfg.train.clone(), opt, ck.rng_state)?
        }
    };

    std::fs::create_dir_all(&cfg.out).code(failure::FAILURE, format!("creating {}", cfg.out.display()))?;
    write_atomic(&cfg.out.join(RESOLVED_CONFIG), cfg.to_text().as_bytes())?;

    let log_path = cfg.out.join(LOSS_LOG);
    let mut log = String::from(LOSS_LOG_HEADER);
    log.push('\n');
    let save = |t: &Trainer<T>, name: &str| -> Result<(), Failure> {
        let ck = Checkpoint::from_model(&t.model, Some(&t.opt), t.epoch(data.len()) as u32, t.rng_word_pos());
        ck.save(&cfg.out.join(name))?;
        Ok(())
    };

    let first = trainer.step;
    while trainer.step < cfg.train.steps {
        let row: StepLog = match trainer.train_step(data) {
            Ok(r) => r,
            Err(e) => {
                write_atomic(&log_path, log.as_bytes())?;
                return Err(e.into());
            }
        };
        log.push_str(&row.csv_row());
        log.push('\n');
        if !quiet && (row.step == first + 1 || row.step.is_multiple_of(10) || row.step == cfg.train.steps) {
            eprintln!(
                "step {:>5}/{} lr {:.4e} loss {:.5} (dice {:.5}, ce {:.5})",
                row.step, cfg.train.steps, row.lr, row.total, row.dice_loss, row.ce_loss
            );
        }
        if cfg.checkpoint_every > 0 && row.step.is_multiple_of(cfg.checkpoint_every) && row.step < cfg.train.steps {
            write_atomic(&log_path, log.as_bytes())?;
            save(&trainer, &format!("checkpoint_step{:06}.tdlc", row.step))?;
        }
    }
    write_atomic(&log_path, log.as_bytes())?;
    save(&trainer, FINAL_CHECKPOINT)?;
    println!(
        "trained {} steps on {} samples; loss log {}, checkpoint {}",
        trainer.step - first,
        data.len(),
        log_path.display(),
        cfg.out.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).code(failure::CHECKPOINT, format!("loading checkpoint {}", path.display()))
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.common)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    if a.common.config.is_some() && cfg.model.num_classes != ck.config.num_classes {
        return Err(Failure::msg(
            failure::MISMATCH,
            format!(
                "config has {} classes, checkpoint {} has {}",
                cfg.model.num_classes,
                a.checkpoint.display(),
                ck.config.num_classes
            ),
        ));
    }
    if let Some(d) = a.dataset {
        cfg.dataset = Some(d);
    }
    if let Some(m) = a.metrics {
        cfg.metrics = Some(m);
    }
    if let Some(p) = a.hd_percentile {
        if !(0.0..=100.0).contains(&p) {
            return Err(Failure::msg(
                failure::CONFIG,
                format!("hd percentile {p} is outside 0..=100"),
            ));
        }
        cfg.hd_percentile = Some(p);
    }
    let root = cfg.dataset.clone().ok_or_else(|| {
        Failure::msg(
            failure::CONFIG,
            "no dataset given (--dataset or `dataset` in the config)",
        )
    })?;
    let data = load_dataset(&root, ck.config.num_classes)?;
    let opts = MetricsOptions {
        hausdorff_percentile: cfg.hd_percentile,
    };
    let report = match cfg.precision {
        Precision::F32 => evaluate(&ck.to_model::<f32>(&a.checkpoint)?, &data, opts, a.batch_size)?,
        Precision::F64 => evaluate(&ck.to_model::<f64>(&a.checkpoint)?, &data, opts, a.batch_size)?,
    };
    let table = report.to_csv();
    let path = cfg.metrics.clone().unwrap_or_else(|| cfg.out.join("metrics.csv"));
    write_atomic(&path, table.as_bytes())?;
    print!("{table}");
    eprintln!(
        "{} samples, mean foreground dice {:.4}; table written to {}",
        report.samples,
        report.mean_foreground_dice(),
        path.display()
    );
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<(), Failure> {
    let suites = if a.suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        a.suites
    };
    let opts = VerifyOptions {
        inject_fault: a.inject_fault,
    };
    let mut failed = Vec::new();
    for s in suites {
        let rep = verify::run_suite(s, opts);
        println!("{rep}");
        for c in &rep.checks {
            if a.verbose || !c.passed {
                println!("  {} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
        }
        if !rep.passed() {
            failed.push(s.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::msg(
            failure::FAILURE,
            format!("verification failed in suite(s): {}", failed.join(", ")),
        ))
    }
}

fn cmd_count_params(a: CountArgs) -> Result<(), Failure> {
    let model = match (&a.config, a.tiny) {
        (_, true) => ModelConfig::tiny(),
        (None, false) => ModelConfig::default(),
        (Some(path), false) => {
            let text =
                std::fs::read_to_string(path).code(failure::CONFIG, format!("reading config {}", path.display()))?;
            RunConfig::parse(&text)
                .code(failure::CONFIG, format!("config {}", path.display()))?
                .model
        }
    };
    model.validate().code(failure::CONFIG, "model configuration")?;
    let m = Model::<f32>::build(&model)?;
    println!("total {}", m.count_params());
    for (name, n) in m.breakdown() {
        println!("{name} {n}");
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let samples = synth_dataset(a.n, a.height, a.width, a.classes, a.seed)?;
    write_dataset(&a.out, &samples, a.classes)?;
    println!(
        "wrote {} samples ({}x{}, {} classes) to {}",
        a.n,
        a.height,
        a.width,
        a.classes,
        a.out.display()
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), Failure> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let img = Tensor::<f32>::load(&a.image).code(failure::FAILURE, format!("loading image {}", a.image.display()))?;
    let batched = match img.shape().len() {
        3 => false,
        4 => true,
        _ => {
            return Err(Failure::msg(
                failure::FAILURE,
                format!("image must be [C, H, W] or [B, C, H, W], got {:?}", img.shape()),
            ))
        }
    };
    let x = if batched {
        img
    } else {
        let mut s = vec![1];
        s.extend_from_slice(img.shape());
        img.reshape(s)?
    };
    let logits: Tensor<f64> = match a.precision.unwrap_or_default() {
        Precision::F32 => ck.to_model::<f32>(&a.checkpoint)?.predict(&x)?.cast(),
        Precision::F64 => ck.to_model::<f64>(&a.checkpoint)?.predict(&x.cast())?,
    };
    let s = logits.shape().to_vec();
    let labels: Vec<f32> = argmax_labels(logits.data(), s[0], s[1], s[2] * s[3])
        .into_iter()
        .flatten()
        .map(|l| l as f32)
        .collect();
    let shape = if batched {
        vec![s[0], s[2], s[3]]
    } else {
        vec![s[2], s[3]]
    };
    Tensor::new(shape, labels)?.save(&a.out)?;
    println!("wrote {}x{} label map to {}", s[2], s[3], a.out.display());
    Ok(())
}
