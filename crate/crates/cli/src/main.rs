//! `factorbci` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use factorbci::data::{load_dataset, save_dataset, synthesize_sparse_dataset, DataError, EegDataset, SynthConfig};
use factorbci::eval::{export_features, lambda_sweep, render_report, run_ablation, CvReport, FeatureSource};
use factorbci::net::{load_checkpoint, NetConfig};
use factorbci::train::{train_cv, EpochLog, Mode, TrainConfig};
use factorbci::verify::{run_gradcheck_suite, GRADCHECK_TOL};
use factorbci::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "factorbci", version, about = "Factorized EEG feature learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// One cross-validation run.
    Train(TrainArgs),
    /// Cross-validate each ablation arm.
    Ablate(AblateArgs),
    /// Cross-validate each λ.
    Sweep(SweepArgs),
    /// Check every differentiable op against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump learned features of a checkpoint to CSV.
    Export(ExportArgs),
    /// Render a report JSON as a text table.
    Report { path: PathBuf },
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    trials_per_class: usize,
    #[arg(long, default_value_t = 50)]
    resting: usize,
    #[arg(long, default_value_t = 24)]
    channels: usize,
    #[arg(long, default_value_t = 997)]
    samples: usize,
    #[arg(long, default_value_t = 250.0)]
    sample_rate: f64,
    /// Amplitude of the class-common component.
    #[arg(long, default_value_t = 1.0)]
    common: f64,
    /// Amplitude of the class-specific component.
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 40)]
    feature_maps: usize,
    #[arg(long, default_value_t = 48)]
    temporal_kernel: usize,
    /// Defaults to min(24, channels).
    #[arg(long)]
    spatial_kernel: Option<usize>,
    #[arg(long, default_value_t = 68)]
    pool_kernel: usize,
    #[arg(long, default_value_t = 14)]
    pool_stride: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Dataset directory written by `synth` or any compatible tool.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 400)]
    epochs: usize,
    #[arg(long, default_value_t = 200)]
    checkpoint_after: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Crop length in samples; defaults to the trial length.
    #[arg(long)]
    window: Option<usize>,
    /// Crop stride in samples; defaults to 100 ms.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value_t = 1)]
    d_steps: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Average crop logits instead of probabilities.
    #[arg(long)]
    average_logits: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "both")]
    mode: String,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "both,no_fc,no_fs")]
    modes: Vec<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
    lambdas: Vec<f64>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "z_c,z_s,classifier_hidden")]
    sources: Vec<String>,
    /// Classifier input used for `classifier_hidden`.
    #[arg(long, default_value = "both")]
    mode: String,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

fn train_config(run: &RunArgs, ds: &EegDataset, mode: Mode) -> TrainConfig {
    let base = TrainConfig::new(ds.trial_samples, ds.sample_rate_hz);
    TrainConfig {
        epochs: run.epochs,
        checkpoint_after_epoch: run.checkpoint_after,
        lr: run.lr,
        weight_decay: run.weight_decay,
        lambda: run.lambda,
        batch_size: run.batch_size,
        crop_window_samples: run.window.unwrap_or(base.crop_window_samples),
        crop_stride_samples: run.stride.unwrap_or(base.crop_stride_samples),
        seed: run.seed,
        d_steps_per_batch: run.d_steps,
        folds: run.folds,
        mode,
        average_logits: run.average_logits,
        ..base
    }
}

fn net_config(m: &ModelArgs, ds: &EegDataset, window: usize) -> NetConfig {
    NetConfig {
        n_feature_maps: m.feature_maps,
        temporal_kernel: m.temporal_kernel,
        spatial_kernel: m.spatial_kernel.unwrap_or(ds.n_channels.min(24)),
        pool_kernel: m.pool_kernel,
        pool_stride: m.pool_stride,
        dropout_p: m.dropout,
        ..NetConfig::new(ds.n_channels, window, ds.n_classes())
    }
}

fn prepare(run: &RunArgs, mode: Mode) -> Result<(EegDataset, NetConfig, TrainConfig)> {
    let ds = load_dataset(&run.data)?;
    let cfg = train_config(run, &ds, mode);
    let net = net_config(&run.model, &ds, cfg.crop_window_samples);
    Ok((ds, net, cfg))
}

fn progress(quiet: bool) -> impl FnMut(usize, &EpochLog) {
    move |fold, e| {
        if !quiet {
            eprintln!(
                "fold {fold} epoch {:>4}  l_cls {:.4}  l_adv_d {:.4}  l_adv_fc {:.4}  l_diff {:.4}  val {:.4}",
                e.epoch, e.l_cls, e.l_adv_d, e.l_adv_fc, e.l_diff, e.val_loss
            );
        }
    }
}

fn summary(report: &CvReport) -> String {
    format!(
        "{} lambda {}: accuracy {:.4} ± {:.4}, ortho {:.4}",
        report.mode, report.lambda, report.mean, report.std, report.ortho_mean
    )
}

fn write_stdout(text: &str) -> Result<()> {
    std::io::stdout()
        .write_all(text.as_bytes())
        .map_err(|source| Error::Io { path: PathBuf::from("<stdout>"), source })
}

/// Runs one subcommand; `Ok` carries the exit code.
fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                n_classes: a.classes,
                trials_per_class: a.trials_per_class,
                n_resting: a.resting,
                n_channels: a.channels,
                trial_samples: a.samples,
                sample_rate_hz: a.sample_rate,
                common_amplitude: a.common,
                specific_amplitude: a.alpha,
                noise_std: a.noise,
                seed: a.seed,
            };
            // Bad parameters are a usage problem, not a data problem.
            cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
            let ds = synthesize_sparse_dataset(&cfg)?;
            save_dataset(&ds, &a.out)?;
            write_stdout(&format!(
                "wrote {} task and {} resting trials to {}\n",
                ds.trials.len(),
                ds.resting.len(),
                a.out.display()
            ))?;
            Ok(0)
        }
        Command::Train(a) => {
            let mode: Mode = a.mode.parse()?;
            let (ds, net, cfg) = prepare(&a.run, mode)?;
            let (report, _) = train_cv(&ds, &net, &cfg, Some(&a.run.out), &mut progress(a.run.quiet))?;
            write_stdout(&(summary(&report) + "\n"))?;
            Ok(0)
        }
        Command::Ablate(a) => {
            let modes = a.modes.iter().map(|m| m.parse()).collect::<Result<Vec<Mode>>>()?;
            let (ds, net, cfg) = prepare(&a.run, Mode::Both)?;
            for mode in modes {
                let report = run_ablation(&ds, &net, &cfg, mode, Some(&a.run.out), &mut progress(a.run.quiet))?;
                write_stdout(&(summary(&report) + "\n"))?;
            }
            Ok(0)
        }
        Command::Sweep(a) => {
            let (ds, net, cfg) = prepare(&a.run, Mode::Both)?;
            let reports = lambda_sweep(&ds, &net, &cfg, &a.lambdas, Some(&a.run.out), &mut progress(a.run.quiet))?;
            for r in &reports {
                write_stdout(&(summary(r) + "\n"))?;
            }
            Ok(0)
        }
        Command::Gradcheck { seed } => {
            let checks = run_gradcheck_suite(seed)?;
            let mut text = String::new();
            for c in &checks {
                let verdict = if c.passed { "ok" } else { "FAIL" };
                text += &format!("{:<20} max rel error {:.3e}  {verdict}\n", c.op, c.max_rel_error);
            }
            write_stdout(&text)?;
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.op).collect();
            if failed.is_empty() {
                return Ok(0);
            }
            eprintln!("error: gradient check above {GRADCHECK_TOL:e} for {}", failed.join(", "));
            Ok(3)
        }
        Command::Export(a) => {
            let sources = a.sources.iter().map(|s| s.parse()).collect::<Result<Vec<FeatureSource>>>()?;
            let mode: Mode = a.mode.parse()?;
            let ds = load_dataset(&a.data)?;
            let model = load_checkpoint(&a.checkpoint)?;
            let base = TrainConfig::new(ds.trial_samples, ds.sample_rate_hz);
            let cfg = TrainConfig {
                crop_window_samples: a.window.unwrap_or(model.config.n_timesamples),
                crop_stride_samples: a.stride.unwrap_or(base.crop_stride_samples),
                mode,
                ..base
            };
            let rows = export_features(&model, &ds, &cfg, &sources, &a.out)?;
            write_stdout(&format!("wrote {rows} rows to {}\n", a.out.display()))?;
            Ok(0)
        }
        Command::Report { path } => {
            let text = std::fs::read_to_string(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
            let report = CvReport::from_json(&text).map_err(|e| malformed(&path, e))?;
            write_stdout(&render_report(&report))?;
            Ok(0)
        }
    }
}

fn malformed(path: &Path, e: Error) -> Error {
    let reason = match e {
        Error::Config(m) => m,
        other => other.to_string(),
    };
    DataError::Invalid(format!("{}: {reason}", path.display())).into()
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else if e.is_data() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
