//! What each subcommand does, as plain functions over a resolved
//! [`RunConfig`]. The binary only parses arguments and prints.

use std::path::{Path, PathBuf};

use carid_core::augment::{apply_traced, AugmentationPolicy};
use carid_core::backbones::{self, build_model_for_classes, BackboneSpec, Model, ModelError, ModelOptions};
use carid_core::config::{ConfigError, RunConfig, Violation};
use carid_core::dataset::{prepare, DatasetError, DatasetManifest, DedupParams, PrepareOptions, Prepared, Split};
use carid_core::hpo::{define_space, run_study, HpoError, Study, StudyStore, Trial};
use carid_core::trainer::{
    evaluate, load_checkpoint, load_image, resolve_policy, sample_seed, train_with, CheckpointMeta, EpochMetrics,
    EvalReport, Loader, RunDir, TrainConfig, TrainerError,
};
use carid_serve::ServeError;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid configuration:\n{}", .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Hpo(#[from] HpoError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot load checkpoint {}: {source}", path.display())]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: TrainerError,
    },
    #[error("cannot serve {}: {source}", path.display())]
    Artifact {
        path: PathBuf,
        #[source]
        source: ServeError,
    },
    #[error("checkpoint classes do not match the dataset: {0}")]
    ClassTable(String),
    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Fails with every range violation at once.
pub fn check(cfg: &RunConfig) -> Result<()> {
    let v = cfg.validate();
    if v.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::Invalid(v))
    }
}

pub fn annotation_path(cfg: &RunConfig) -> PathBuf {
    cfg.data.root.join(&cfg.data.annotation_file)
}

pub fn prepare_options(cfg: &RunConfig) -> PrepareOptions {
    let d = &cfg.data.dedup;
    PrepareOptions {
        ratios: cfg.data.split,
        dedup: d.enabled.then_some(DedupParams {
            hash_size: d.hash_size,
            threshold: d.threshold,
        }),
        seed: cfg.seed,
    }
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    Ok(prepare(&cfg.data.root, &annotation_path(cfg), &prepare_options(cfg))?)
}

/// The prepared manifest named by `data.manifest`, or a fresh preparation.
pub fn load_dataset(cfg: &RunConfig) -> Result<DatasetManifest> {
    match &cfg.data.manifest {
        Some(path) => Ok(DatasetManifest::load_json(path)?),
        None => Ok(prepare_data(cfg)?.manifest),
    }
}

/// Model input size: `augmentation.output_size` when set, else native.
pub fn input_size(cfg: &RunConfig) -> Result<Option<usize>> {
    match cfg.augmentation.output_size {
        None => Ok(None),
        Some([h, w]) if h == w => Ok(Some(h as usize)),
        Some([h, w]) => Err(PipelineError::Unsupported(format!(
            "augmentation.output_size must be square, got [{h}, {w}]"
        ))),
    }
}

pub fn build_model(cfg: &RunConfig, class_names: &[String]) -> Result<Model> {
    let net = &cfg.model.net;
    let spec = BackboneSpec::new(&net.backbone, net.pretrained, net.unfreeze_last_block)?;
    let opts = ModelOptions {
        weights: net.weights.clone(),
        seed: cfg.seed,
        input_size: input_size(cfg)?,
    };
    Ok(build_model_for_classes(&spec, class_names, net.dropout_value, &opts)?)
}

/// Training policy for the configured backbone.
pub fn training_policy(cfg: &RunConfig) -> Result<AugmentationPolicy> {
    let info = backbones::lookup(&cfg.model.net.backbone)
        .ok_or_else(|| ModelError::UnknownBackbone(cfg.model.net.backbone.clone()))?;
    Ok(resolve_policy(&cfg.augmentation, info)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub best_epoch: usize,
    pub best: EpochMetrics,
    pub checkpoint: PathBuf,
    pub model_version: String,
    pub history: Vec<EpochMetrics>,
}

/// Trains per `cfg` into `run`: metrics lines as epochs finish, then the
/// best checkpoint. The caller has already written the config.
pub fn train_run(cfg: &RunConfig, manifest: &DatasetManifest, run: &RunDir) -> Result<TrainSummary> {
    check(cfg)?;
    let model = build_model(cfg, &manifest.class_names)?;
    let policy = training_policy(cfg)?;
    let tc = TrainConfig::from_run(cfg);
    run.reset_metrics()?;
    let out = train_with(&model, manifest, &policy, &tc, |m| run.append_metrics(m))?;
    let checkpoint = run.best_checkpoint();
    out.best.save(&checkpoint)?;
    Ok(TrainSummary {
        run_dir: run.path().to_path_buf(),
        best_epoch: out.best_epoch,
        best: out.history[out.best_epoch - 1].clone(),
        checkpoint,
        model_version: out.best.meta.model_version.clone(),
        history: out.history,
    })
}

pub fn study_path(cfg: &RunConfig, run: &RunDir) -> PathBuf {
    cfg.hpo.study_file.clone().unwrap_or_else(|| run.path().join("study.json"))
}

/// Directory of one tuning trial inside the study's run directory.
pub fn trial_dir(run: &RunDir, trial: &Trial) -> PathBuf {
    run.path().join("trials").join(format!("{:03}", trial.id))
}

/// TPE search over the fine-tuning space. Each trial trains for
/// `hpo.epochs` and scores its best validation accuracy; the study file is
/// rewritten after every trial, so an interrupted search resumes.
pub fn tune_run(cfg: &RunConfig, manifest: &DatasetManifest, run: &RunDir) -> Result<Study> {
    check(cfg)?;
    let store = StudyStore::new(study_path(cfg, run));
    let objective = |trial: &Trial| -> Result<f64> {
        let mut tcfg = cfg.with_params(&trial.params)?;
        tcfg.trainer.epochs = cfg.hpo.epochs;
        let dir = RunDir::at(trial_dir(run, trial))?;
        dir.write_config(&tcfg.to_yaml())?;
        let summary = train_run(&tcfg, manifest, &dir)?;
        Ok(summary.best.val_accuracy)
    };
    Ok(run_study(
        objective,
        &define_space(),
        cfg.hpo.n_trials,
        cfg.seed,
        &cfg.hpo.sampler,
        Some(&store),
    )?)
}

/// Evaluates a checkpoint with its own preprocessing. The dataset must use
/// the checkpoint's class table, in the same order.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    split: Split,
    loader: &Loader,
) -> Result<(EvalReport, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(checkpoint).map_err(|source| PipelineError::Checkpoint {
        path: checkpoint.to_path_buf(),
        source,
    })?;
    if meta.class_names != manifest.class_names {
        let first = meta
            .class_names
            .iter()
            .zip(&manifest.class_names)
            .position(|(a, b)| a != b)
            .unwrap_or(meta.class_names.len().min(manifest.class_names.len()));
        return Err(PipelineError::ClassTable(format!(
            "{} vs {} classes, first difference at index {first}",
            meta.class_names.len(),
            manifest.class_names.len()
        )));
    }
    let size = meta.input_size as u32;
    let policy = AugmentationPolicy::eval_only((size, size), meta.normalization);
    Ok((evaluate(&model, manifest, split, &policy, loader)?, meta))
}

#[derive(Debug, Clone, Serialize)]
pub struct DumpedSample {
    pub file: PathBuf,
    pub source: PathBuf,
    pub class_name: String,
    pub seed: u64,
    /// Transform names that fired, in chain order.
    pub fired: Vec<String>,
}

/// Writes `n` augmented training samples as PNGs (denormalized) plus an
/// `index.json` naming the source image, seed and fired transforms. Samples
/// cycle through the split and use the first epoch's seeds.
pub fn dump_augmented(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    split: Split,
    n: usize,
    out: &Path,
) -> Result<Vec<DumpedSample>> {
    let policy = training_policy(cfg)?;
    let records: Vec<_> = manifest.records_in(split).collect();
    if records.is_empty() {
        return Err(TrainerError::EmptySplit(split).into());
    }
    std::fs::create_dir_all(out).map_err(io(out))?;
    let mut dumped = Vec::with_capacity(n);
    for i in 0..n {
        let index = i % records.len();
        let rec = records[index];
        let seed = sample_seed(cfg.seed, 1 + i / records.len(), index);
        let img = load_image(rec, cfg.data.crop_to_bbox)?;
        let (tensor, fired) = apply_traced(&policy, &img, seed).map_err(TrainerError::from)?;
        let file = out.join(format!("{i:04}_class{}.png", rec.class_id));
        tensor
            .to_rgb8(&policy.normalization)
            .save(&file)
            .map_err(|e| io(&file)(std::io::Error::other(e)))?;
        dumped.push(DumpedSample {
            file,
            source: rec.image_path.clone(),
            class_name: rec.class_name.clone(),
            seed,
            fired: policy
                .transforms
                .iter()
                .zip(fired)
                .filter(|(_, f)| *f)
                .map(|(t, _)| t.kind().name().to_owned())
                .collect(),
        });
    }
    let index = out.join("index.json");
    let json = serde_json::to_vec_pretty(&dumped).expect("samples serialize");
    std::fs::write(&index, json).map_err(io(&index))?;
    Ok(dumped)
}

/// Resolves the checkpoint a command should use: the explicit path, then
/// `serve.checkpoint`, then the run directory's best checkpoint.
pub fn checkpoint_path(explicit: Option<&Path>, cfg: &RunConfig, run_dir: &Path) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.serve.checkpoint.clone())
        .unwrap_or_else(|| run_dir.join(carid_core::trainer::BEST_CHECKPOINT))
}
