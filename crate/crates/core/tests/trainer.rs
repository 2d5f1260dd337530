use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use carid_core::augment::{AugmentationPolicy, AugmentationSection};
use carid_core::backbones::{build_model_for_classes, BackboneSpec, Mode, Model, ModelOptions, Role};
use carid_core::config::OptimizerKind;
use carid_core::dataset::synthetic::{write_shapes_dataset, ShapeCounts, SHAPE_CLASSES};
use carid_core::dataset::{BBox, DatasetManifest, ImageRecord, Split};
use carid_core::trainer::{
    evaluate, load_checkpoint, resolve_policy, save_checkpoint, train, train_with, Checkpoint, Loader,
    Optimizer, RunDir, SchedulerSettings, TrainConfig, TrainerError, FORMAT_VERSION,
};

fn config(epochs: usize, batch: usize, lr: f64, dropout: f64) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Adam,
        lr,
        weight_decay: 0.0,
        momentum: 0.0,
        batch_size: batch,
        epochs,
        scheduler: SchedulerSettings {
            patience: 5,
            factor: 0.1,
            monitored: "val_accuracy".into(),
            threshold: 1e-4,
        },
        dropout_rate: dropout,
        seed: 11,
        crop_to_bbox: true,
        num_workers: 1,
        cache_features: true,
    }
}

fn model(name: &str, classes: &[String], unfreeze: bool, dropout: f64, size: usize) -> Model {
    let spec = BackboneSpec::new(name, false, unfreeze).unwrap();
    let opts = ModelOptions {
        input_size: Some(size),
        seed: 3,
        ..ModelOptions::default()
    };
    build_model_for_classes(&spec, classes, dropout, &opts).unwrap()
}

fn policy_for(m: &Model, section: AugmentationSection) -> AugmentationPolicy {
    let mut p = resolve_policy(&section, m.info()).unwrap();
    p.output_size = (m.input_size() as u32, m.input_size() as u32);
    p
}

fn shapes(dir: &Path, train: usize, val: usize, test: usize) -> DatasetManifest {
    write_shapes_dataset(dir, ShapeCounts { train, val, test }, 48, 5).unwrap()
}

fn snapshot(m: &Model) -> HashMap<String, Vec<u32>> {
    m.state_dict()
        .unwrap()
        .into_iter()
        .map(|(n, t)| {
            let bits = t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect();
            (n, bits)
        })
        .collect()
}

#[test]
fn epochs_one_gives_one_entry_and_best_is_max() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = shapes(dir.path(), 4, 2, 0);
    let m = model("mobilevit_s", &manifest.class_names, false, 0.3, 64);
    let p = policy_for(&m, AugmentationSection::empty());
    let out = train(&m, &manifest, &p, &config(1, 4, 1e-3, 0.3)).unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.best_epoch, 1);

    let out = train(&m, &manifest, &p, &config(6, 4, 1e-3, 0.3)).unwrap();
    assert_eq!(out.history.len(), 6);
    let max = out.history.iter().map(|h| h.val_accuracy).fold(f64::MIN, f64::max);
    let first_max = out.history.iter().find(|h| h.val_accuracy == max).unwrap().epoch;
    assert_eq!(out.best_epoch, first_max);
    assert_eq!(out.best.meta.metrics.as_ref().unwrap().val_accuracy, max);
    for h in &out.history {
        assert!(h.train_loss.is_finite() && h.train_loss >= 0.0);
        assert!(h.val_loss.is_finite() && h.val_loss >= 0.0);
        assert!((0.0..=1.0).contains(&h.train_accuracy) && (0.0..=1.0).contains(&h.val_accuracy));
    }
    // the model is left holding the best epoch's weights
    let again = Checkpoint::capture(&m, &manifest.class_names, p.normalization, None, None).unwrap();
    assert_eq!(again.meta.model_version, out.best.meta.model_version);
}

#[test]
fn seeded_runs_are_bitwise_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = shapes(dir.path(), 4, 2, 0);
    let run = |workers: usize| {
        let m = model("coat_lite_mini", &manifest.class_names, true, 0.5, 64);
        let p = policy_for(&m, AugmentationSection::recommended());
        let mut cfg = config(2, 4, 1e-3, 0.5);
        cfg.num_workers = workers;
        let out = train(&m, &manifest, &p, &cfg).unwrap();
        (out.history, snapshot(&m))
    };
    let (h1, w1) = run(1);
    let (h2, w2) = run(1);
    let (h3, w3) = run(3);
    let bits = |h: &[carid_core::trainer::EpochMetrics]| -> Vec<u64> {
        h.iter()
            .flat_map(|m| [m.train_loss, m.train_accuracy, m.val_loss, m.val_accuracy, m.lr])
            .map(f64::to_bits)
            .collect()
    };
    assert_eq!(bits(&h1), bits(&h2));
    assert_eq!(bits(&h1), bits(&h3));
    assert!(w1 == w2 && w1 == w3);
}

#[test]
fn frozen_tensors_stay_bit_identical_in_full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    // 3 train images per class, batch 3: three optimizer steps
    let manifest = shapes(dir.path(), 1, 1, 0);
    let manifest = {
        let mut records = manifest.records.clone();
        for r in manifest.records.iter().filter(|r| r.split == Some(Split::Train)) {
            records.push(r.clone());
            records.push(r.clone());
        }
        manifest.with_records(records)
    };
    let m = model("efficientnetv2_b2", &manifest.class_names, true, 0.4, 64);
    let p = policy_for(&m, AugmentationSection::recommended());
    let before = snapshot(&m);
    let mut cfg = config(1, 3, 1e-2, 0.4);
    cfg.cache_features = false;
    train(&m, &manifest, &p, &cfg).unwrap();
    let after = snapshot(&m);
    let last = m.info().last_block;
    let mut changed = 0;
    for e in m.params().entries() {
        let rel = e.name.strip_prefix("backbone.").unwrap_or(&e.name);
        let in_block = e.name.starts_with("backbone.") && last.iter().any(|p| rel.starts_with(p));
        let frozen = match e.role {
            Role::Param => !e.trainable,
            Role::Buffer => !in_block,
        };
        if frozen {
            assert!(before[&e.name] == after[&e.name], "{} moved", e.name);
        } else if before[&e.name] != after[&e.name] {
            changed += 1;
        }
    }
    assert!(changed > 10, "only {changed} trainable tensors changed");
}

#[test]
fn sgd_small_step_decreases_loss_on_same_batch() {
    let classes: Vec<String> = (0..5).map(|i| format!("Make Model{i} 2010")).collect();
    let m = model("mobilevit_s", &classes, false, 0.0, 64);
    let x = Tensor::randn(0f32, 1.0, (6, 3, 64, 64), &Device::Cpu).unwrap();
    let targets = Tensor::new(&[0u32, 1, 2, 3, 4, 0], &Device::Cpu).unwrap();
    let feats = m.features(&x, Mode::Eval).unwrap().detach();
    let loss_of = || {
        let logits = m.head().forward(&feats, Mode::Eval).unwrap();
        candle_nn::loss::cross_entropy(&logits, &targets).unwrap()
    };
    let vars = m.trainable_vars().into_iter().map(|(_, v)| v).collect();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, vars, 1e-4, 0.0, 0.0);
    let before = loss_of();
    opt.step(&before.backward().unwrap()).unwrap();
    let b = before.to_scalar::<f32>().unwrap();
    let a = loss_of().to_scalar::<f32>().unwrap();
    assert!(a < b, "loss {b} -> {a}");
}

#[test]
fn permuting_classes_permutes_trained_logits() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = shapes(dir.path(), 3, 1, 0);
    // class ids 0,1,2 -> 2,0,1
    let perm = [2usize, 0, 1];
    let mut names = vec![String::new(); 3];
    for (old, &new) in perm.iter().enumerate() {
        names[new] = manifest.class_names[old].clone();
    }
    let permuted = DatasetManifest {
        records: manifest
            .records
            .iter()
            .map(|r| ImageRecord {
                class_id: perm[r.class_id],
                class_name: names[perm[r.class_id]].clone(),
                ..r.clone()
            })
            .collect(),
        class_names: names,
        ..manifest.clone()
    };
    let run = |man: &DatasetManifest| {
        let m = model("mobilevit_s", &man.class_names, false, 0.4, 64);
        let p = policy_for(&m, AugmentationSection::empty());
        train(&m, man, &p, &config(3, 3, 5e-3, 0.4)).unwrap();
        let x = Tensor::ones((2, 3, 64, 64), candle_core::DType::F32, &Device::Cpu).unwrap();
        m.forward(&x, Mode::Eval).unwrap().to_vec2::<f32>().unwrap()
    };
    let a = run(&manifest);
    let b = run(&permuted);
    for (ra, rb) in a.iter().zip(&b) {
        for (old, &new) in perm.iter().enumerate() {
            let (va, vb) = (ra[old], rb[new]);
            assert!((va - vb).abs() <= 1e-4 * va.abs().max(1.0), "{va} vs {vb}");
        }
    }
}

fn uniform_manifest(dir: &Path, n_classes: usize) -> DatasetManifest {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    let mut records = Vec::new();
    for c in 0..n_classes {
        let path = dir.join(format!("images/{c}.png"));
        image::RgbImage::from_pixel(8, 8, image::Rgb([(c % 256) as u8, 90, 30])).save(&path).unwrap();
        records.push(ImageRecord {
            image_path: path,
            class_id: c,
            class_name: format!("Make{c} Model 2011"),
            bbox: BBox::new(0, 0, 8, 8),
            split: Some(Split::Test),
        });
    }
    DatasetManifest {
        records,
        num_classes: n_classes,
        class_names: (0..n_classes).map(|c| format!("Make{c} Model 2011")).collect(),
        source_tag: "uniform".into(),
    }
}

#[test]
fn uniform_logits_give_log_num_classes_loss() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = uniform_manifest(dir.path(), 197);
    let m = model("mobilevit_s", &manifest.class_names, false, 0.366, 64);
    let zeros: HashMap<String, Tensor> = m
        .state_dict()
        .unwrap()
        .into_iter()
        .map(|(n, t)| {
            let t = if n.starts_with("head.") { t.zeros_like().unwrap() } else { t };
            (n, t)
        })
        .collect();
    m.load_state(&zeros).unwrap();
    let p = policy_for(&m, AugmentationSection::empty());
    let r = evaluate(&m, &manifest, Split::Test, &p, &Loader::default()).unwrap();
    assert!((r.loss - 197f64.ln()).abs() < 1e-9, "{}", r.loss);
    assert!((r.loss - 5.283).abs() < 1e-3);
    // ties go to class 0, which holds one of the 197 samples
    assert!(r.predictions.iter().all(|&p| p == 0));
    assert_eq!(r.accuracy, 1.0 / 197.0);
    assert_eq!(r.per_class_accuracy.len(), 197);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = shapes(&dir.path().join("data"), 2, 1, 17);
    assert!(manifest.count(Split::Test) >= 50);
    let m = model("coat_lite_mini", &manifest.class_names, true, 0.4, 64);
    let p = policy_for(&m, AugmentationSection::recommended());
    let cfg = config(1, 6, 1e-3, 0.4);
    let out = train(&m, &manifest, &p, &cfg).unwrap();
    let loader = Loader::default();
    let before = evaluate(&m, &manifest, Split::Test, &p, &loader).unwrap();

    let run = RunDir::create(&dir.path().join("runs"), "t").unwrap();
    let meta = save_checkpoint(&m, &manifest.class_names, p.normalization, Some(&cfg), out.history.last(), &run.best_checkpoint()).unwrap();
    let (loaded, meta2) = load_checkpoint(&run.best_checkpoint()).unwrap();
    assert_eq!(meta, meta2);
    assert_eq!(meta2.config.as_ref(), Some(&cfg));
    assert_eq!(snapshot(&m), snapshot(&loaded));
    let after = evaluate(&loaded, &manifest, Split::Test, &p, &loader).unwrap();
    assert_eq!(before, after);

    let bytes = std::fs::read(run.best_checkpoint()).unwrap();
    for cut in [0, 5, 13, 40, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, TrainerError::CorruptCheckpoint(_)), "cut {cut}: {err}");
    }
    let mut flipped = bytes.clone();
    let n = flipped.len();
    flipped[n - 3] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(TrainerError::CorruptCheckpoint(_))));
    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&future),
        Err(TrainerError::VersionMismatch { found, .. }) if found == FORMAT_VERSION + 1
    ));
}

#[test]
fn empty_splits_and_nan_loss() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = shapes(dir.path(), 2, 1, 0);
    let m = model("mobilevit_s", &manifest.class_names, false, 0.0, 64);
    let p = policy_for(&m, AugmentationSection::empty());
    let err = evaluate(&m, &manifest, Split::Test, &p, &Loader::default()).unwrap_err();
    assert!(matches!(err, TrainerError::EmptySplit(Split::Test)));
    let no_val = manifest.with_records(manifest.records_in(Split::Train).cloned().collect());
    let err = train(&m, &no_val, &p, &config(1, 2, 1e-3, 0.0)).unwrap_err();
    assert!(matches!(err, TrainerError::EmptySplit(Split::Val)));

    // large enough to overflow f32 weights on the first step
    let mut cfg = config(3, 2, 1e39, 0.0);
    cfg.optimizer = OptimizerKind::Sgd;
    let mut seen = Vec::new();
    let err = train_with(&m, &manifest, &p, &cfg, |e| {
        seen.push(e.epoch);
        Ok(())
    })
    .unwrap_err();
    match err {
        TrainerError::NaNLoss { epoch, history } => {
            assert_eq!(history.len(), epoch - 1);
            assert_eq!(seen.len(), epoch - 1);
        }
        other => panic!("expected NaNLoss, got {other}"),
    }
}

#[test]
fn run_dir_metrics_lines_follow_schema() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = shapes(&dir.path().join("data"), 2, 1, 0);
    let m = model("mobilevit_s", &manifest.class_names, false, 0.3, 64);
    let p = policy_for(&m, AugmentationSection::empty());
    let run = RunDir::create(&dir.path().join("runs"), "demo").unwrap();
    let out = train_with(&m, &manifest, &p, &config(2, 3, 1e-3, 0.3), |e| run.append_metrics(e)).unwrap();
    assert_eq!(run.read_metrics().unwrap(), out.history);
    let text = std::fs::read_to_string(run.metrics_path()).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 6);
        for k in ["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "lr"] {
            assert!(keys.contains(&k), "{k} missing in {line}");
        }
        assert!(v["epoch"].is_u64());
    }
    assert_eq!(SHAPE_CLASSES.len(), manifest.num_classes);
}
