//! `carid` command line: one binary with a subcommand per pipeline stage.
//!
//! Exit codes: 0 on success, 1 when the work itself fails, 2 for usage and
//! configuration errors. Every command resolves its config and writes it to
//! the run directory before doing anything else.

pub mod pipeline;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use carid_core::config::{compose, load_run_config, resolve, ConfigError, ConfigNode, DefaultsEntry, Override, RunConfig};
use carid_core::dataset::Split;
use carid_core::hpo::TrialState;
use carid_core::trainer::{Checkpoint, Loader, RunDir, CONFIG_FILE};
use clap::{Parser, Subcommand};
use serde_json::json;

use pipeline::PipelineError;

#[derive(Debug, Parser)]
#[command(
    name = "carid",
    version,
    about = "Car make/model identification: data preparation, fine-tuning, tuning, evaluation and serving"
)]
pub struct Cli {
    /// Directory holding defaults.yaml and the config groups.
    #[arg(long, global = true, value_name = "DIR", default_value = "configs")]
    pub config_root: PathBuf,
    /// Start from a fully resolved config file (such as a run's config.yaml)
    /// instead of composing from --config-root.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run directory [default: <trainer.runs_dir>/<name>].
    #[arg(long, global = true, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// Seed for splits, initialization, shuffling, augmentation and search.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Dotted config override, repeatable (--set model.optimizer.lr=0.001).
    /// A group name selects a file (--set model=resnet50).
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
    /// Print one JSON document on stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load annotations, drop unusable images and near-duplicates, assign
    /// splits and write the manifest.
    PrepareData {
        /// Manifest output path [default: <run-dir>/manifest.json].
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Fine-tune a backbone; writes config.yaml, metrics.jsonl and best.ckpt.
    Train {
        /// Model config group, also used as the run name.
        #[arg(long, value_name = "NAME")]
        model: Option<String>,
        /// Number of epochs [default: trainer.epochs].
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
    },
    /// Search hyperparameters with TPE; writes study.json and one run per trial.
    Tune {
        /// Model config group, also used as the run name.
        #[arg(long, value_name = "NAME")]
        model: Option<String>,
        /// Number of trials [default: hpo.n_trials, 30].
        #[arg(long, value_name = "N")]
        n_trials: Option<usize>,
        /// Epochs per trial [default: hpo.epochs, 10].
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        /// Checkpoint file [default: serve.checkpoint, then <run-dir>/best.ckpt].
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Split to evaluate: train, val or test.
        #[arg(long, value_name = "SPLIT", default_value = "test")]
        split: Split,
    },
    /// Serve predictions over HTTP until interrupted.
    Serve {
        /// Checkpoint file [default: serve.checkpoint, then <run-dir>/best.ckpt].
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Bind address [default: serve.host].
        #[arg(long, value_name = "HOST")]
        host: Option<String>,
        /// Port [default: serve.port].
        #[arg(long, value_name = "PORT")]
        port: Option<u16>,
    },
    /// Write a checkpoint as model.safetensors plus model.json.
    Export {
        /// Checkpoint file [default: serve.checkpoint, then <run-dir>/best.ckpt].
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Write augmented samples as PNG files for visual inspection.
    DumpAugmented {
        /// Number of samples.
        #[arg(long, value_name = "N", default_value_t = 16)]
        n: usize,
        /// Output directory [default: <run-dir>/augmented].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Split to sample from: train, val or test.
        #[arg(long, value_name = "SPLIT", default_value = "train")]
        split: Split,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PrepareData { .. } => "prepare-data",
            Command::Train { .. } => "train",
            Command::Tune { .. } => "tune",
            Command::Eval { .. } => "eval",
            Command::Serve { .. } => "serve",
            Command::Export { .. } => "export",
            Command::DumpAugmented { .. } => "dump-augmented",
        }
    }

    /// Config file name in the run directory. Training and tuning own the
    /// run, so theirs is `config.yaml`; the others must not clobber it.
    fn config_file(&self) -> String {
        match self {
            Command::Train { .. } | Command::Tune { .. } => CONFIG_FILE.into(),
            other => format!("{}.{CONFIG_FILE}", other.name()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl From<carid_core::trainer::TrainerError> for CliError {
    fn from(e: carid_core::trainer::TrainerError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl CliError {
    /// Configuration problems are part of the invocation, so they share the
    /// usage code.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Pipeline(PipelineError::Config(_) | PipelineError::Invalid(_)) => 2,
            CliError::Pipeline(_) => 1,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Overrides implied by flags; they apply after `--set`, so flags win.
fn flag_overrides(cli: &Cli) -> Result<Vec<String>, CliError> {
    let mut out = cli.sets.clone();
    if let Some(seed) = cli.seed {
        out.push(format!("seed={seed}"));
    }
    let model = match &cli.command {
        Command::Train { model, epochs } => {
            if let Some(n) = epochs {
                out.push(format!("trainer.epochs={n}"));
            }
            model
        }
        Command::Tune {
            model,
            n_trials,
            epochs,
        } => {
            out.push("hpo.enabled=true".into());
            if let Some(n) = n_trials {
                out.push(format!("hpo.n_trials={n}"));
            }
            if let Some(n) = epochs {
                out.push(format!("hpo.epochs={n}"));
            }
            model
        }
        Command::Serve {
            checkpoint, host, port, ..
        } => {
            if let Some(c) = checkpoint {
                out.push(format!("serve.checkpoint={}", c.display()));
            }
            if let Some(h) = host {
                out.push(format!("serve.host={h}"));
            }
            if let Some(p) = port {
                out.push(format!("serve.port={p}"));
            }
            &None
        }
        _ => &None,
    };
    if let Some(m) = model {
        if cli.config.is_some() {
            return Err(CliError::Usage(
                "--model selects a config group and cannot be combined with --config; use --set model.net.backbone=...".into(),
            ));
        }
        out.push(format!("model={m}"));
        if !cli.sets.iter().any(|s| s.trim_start().starts_with("name=")) {
            out.push(format!("name={m}"));
        }
    }
    Ok(out)
}

/// Composes (or reads) the config and applies overrides.
pub fn resolve_config(cli: &Cli) -> Result<(ConfigNode, RunConfig), CliError> {
    let overrides = flag_overrides(cli)?;
    match &cli.config {
        None => Ok(load_run_config(&cli.config_root, &overrides)?),
        Some(file) => {
            let node = ConfigNode::load(file)?;
            let dir = file.parent().unwrap_or(Path::new("."));
            let node = compose(dir, &node, &[DefaultsEntry::SelfRef], &Override::parse_all(&overrides)?)?;
            let cfg = resolve(&node)?;
            Ok((node, cfg))
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let (_, cfg) = resolve_config(cli)?;
    pipeline::check(&cfg)?;
    let run_dir = match &cli.run_dir {
        Some(dir) => RunDir::at(dir.clone())?,
        None => RunDir::create(&cfg.trainer.runs_dir, &cfg.name)?,
    };
    let config_file = run_dir.path().join(cli.command.config_file());
    std::fs::write(&config_file, cfg.to_yaml()).map_err(|source| PipelineError::Io {
        path: config_file.clone(),
        source,
    })?;

    match &cli.command {
        Command::PrepareData { out } => prepare_data(cli, &cfg, &run_dir, out.as_deref()),
        Command::Train { .. } => train(cli, &cfg, &run_dir),
        Command::Tune { .. } => tune(cli, &cfg, &run_dir),
        Command::Eval { checkpoint, split } => eval(cli, &cfg, &run_dir, checkpoint.as_deref(), *split),
        Command::Serve { .. } => serve(&cfg, &run_dir),
        Command::Export { checkpoint, out } => export(cli, &cfg, &run_dir, checkpoint.as_deref(), out),
        Command::DumpAugmented { n, out, split } => {
            let out = out.clone().unwrap_or_else(|| run_dir.path().join("augmented"));
            let manifest = pipeline::load_dataset(&cfg)?;
            let samples = pipeline::dump_augmented(&cfg, &manifest, *split, *n, &out)?;
            emit(cli, &json!({"out": out, "samples": samples}), || {
                format!("wrote {} augmented samples to {}", samples.len(), out.display())
            });
            Ok(())
        }
    }
}

fn emit(cli: &Cli, value: &serde_json::Value, text: impl FnOnce() -> String) {
    let mut stdout = std::io::stdout().lock();
    let _ = if cli.json {
        writeln!(stdout, "{value}")
    } else {
        writeln!(stdout, "{}", text())
    };
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(&item).expect("record serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn prepare_data(cli: &Cli, cfg: &RunConfig, run: &RunDir, out: Option<&Path>) -> Result<(), CliError> {
    let prepared = pipeline::prepare_data(cfg)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| run.path().join("manifest.json"));
    prepared.manifest.save_json(&out).map_err(PipelineError::from)?;
    let issues = run.path().join("load_issues.jsonl");
    write_jsonl(&issues, &prepared.load_report.issues)?;
    let dropped = run.path().join("dedup_dropped.jsonl");
    write_jsonl(
        &dropped,
        prepared.dropped.iter().map(|d| {
            json!({"path": d.record.image_path, "duplicate_of": d.duplicate_of, "distance": d.distance})
        }),
    )?;
    let m = &prepared.manifest;
    let counts: Vec<usize> = Split::ALL.iter().map(|s| m.count(*s)).collect();
    let summary = json!({
        "manifest": out,
        "num_classes": m.num_classes,
        "records": m.records.len(),
        "train": counts[0], "val": counts[1], "test": counts[2],
        "load_issues": prepared.load_report.issues.len(),
        "duplicates_dropped": prepared.dropped.len(),
        "hash_failures": prepared.failures.len(),
    });
    emit(cli, &summary, || {
        format!(
            "{} records in {} classes (train {}, val {}, test {}); {} load issues, {} duplicates dropped\nmanifest: {}",
            m.records.len(),
            m.num_classes,
            counts[0],
            counts[1],
            counts[2],
            prepared.load_report.issues.len(),
            prepared.dropped.len(),
            out.display()
        )
    });
    Ok(())
}

fn train(cli: &Cli, cfg: &RunConfig, run: &RunDir) -> Result<(), CliError> {
    let manifest = pipeline::load_dataset(cfg)?;
    let s = pipeline::train_run(cfg, &manifest, run)?;
    let value = serde_json::to_value(&s).expect("summary serializes");
    emit(cli, &value, || {
        format!(
            "best epoch {} of {}: val_accuracy {:.4}, train_accuracy {:.4}\ncheckpoint: {} ({})",
            s.best_epoch,
            s.history.len(),
            s.best.val_accuracy,
            s.best.train_accuracy,
            s.checkpoint.display(),
            s.model_version
        )
    });
    Ok(())
}

fn tune(cli: &Cli, cfg: &RunConfig, run: &RunDir) -> Result<(), CliError> {
    let manifest = pipeline::load_dataset(cfg)?;
    let study = pipeline::tune_run(cfg, &manifest, run)?;
    let best = study.best_trial().map_err(PipelineError::from)?;
    let best_cfg = cfg.with_params(&best.params)?;
    let best_file = run.path().join("best_config.yaml");
    std::fs::write(&best_file, best_cfg.to_yaml()).map_err(|source| PipelineError::Io {
        path: best_file.clone(),
        source,
    })?;
    let failed = study.trials.iter().filter(|t| t.state == TrialState::Failed).count();
    let value = json!({
        "study_file": pipeline::study_path(cfg, run),
        "trials": study.trials.len(),
        "failed": failed,
        "best_trial": best.id,
        "best_objective": best.objective,
        "best_params": best.params,
        "best_config": best_file,
    });
    emit(cli, &value, || {
        let params: Vec<String> = best.params.iter().map(|(k, v)| format!("  {k} = {v}")).collect();
        format!(
            "{} trials ({} failed); best trial {} with val_accuracy {:.4}\n{}\nconfig: {}",
            study.trials.len(),
            failed,
            best.id,
            best.objective.unwrap_or(f64::NAN),
            params.join("\n"),
            best_file.display()
        )
    });
    Ok(())
}

fn eval(cli: &Cli, cfg: &RunConfig, run: &RunDir, checkpoint: Option<&Path>, split: Split) -> Result<(), CliError> {
    let path = pipeline::checkpoint_path(checkpoint, cfg, run.path());
    let manifest = pipeline::load_dataset(cfg)?;
    let loader = Loader {
        batch_size: cfg.data.batch_size,
        crop_to_bbox: cfg.data.crop_to_bbox,
        num_workers: cfg.data.num_workers,
    };
    let (report, meta) = pipeline::evaluate_checkpoint(&path, &manifest, split, &loader)?;
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["model_version"] = json!(meta.model_version);
    value["checkpoint"] = json!(path);
    emit(cli, &value, || {
        format!(
            "{split}: accuracy {:.4} ({}/{}), loss {:.4}, model {}",
            report.accuracy, report.correct, report.total, report.loss, meta.model_version
        )
    });
    Ok(())
}

fn export(cli: &Cli, cfg: &RunConfig, run: &RunDir, checkpoint: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let path = pipeline::checkpoint_path(checkpoint, cfg, run.path());
    let ckpt = Checkpoint::load(&path).map_err(|source| PipelineError::Checkpoint {
        path: path.clone(),
        source,
    })?;
    let (weights, meta) = ckpt.export(out)?;
    emit(
        cli,
        &json!({"weights": weights, "meta": meta, "model_version": ckpt.meta.model_version}),
        || format!("wrote {} and {}", weights.display(), meta.display()),
    );
    Ok(())
}

fn serve(cfg: &RunConfig, run: &RunDir) -> Result<(), CliError> {
    let path = pipeline::checkpoint_path(None, cfg, run.path());
    let model = carid_serve::load_artifact(&path).map_err(|source| PipelineError::Artifact {
        path: path.clone(),
        source,
    })?;
    let opts = carid_serve::ServerOptions::from_config(&cfg.serve);
    let io_err = |source| PipelineError::Io {
        path: path.clone(),
        source,
    };
    let state = Arc::new(carid_serve::AppState::new(model, opts).map_err(io_err)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(io_err)?;
    let addr = format!("{}:{}", cfg.serve.host, cfg.serve.port);
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|source| PipelineError::Io {
            path: PathBuf::from(&addr),
            source,
        })?;
        let bound = listener.local_addr().map_err(io_err)?;
        eprintln!("serving {} on http://{bound}", state.model().model_version());
        carid_serve::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(io_err)
    })?;
    Ok(())
}
