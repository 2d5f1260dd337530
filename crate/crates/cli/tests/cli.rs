use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use carid_core::config::RunConfig;
use carid_core::dataset::synthetic::{write_shapes_dataset, ShapeCounts};
use carid_core::dataset::{DatasetManifest, Split};
use carid_core::hpo::{Study, TrialState};
use carid_core::trainer::{Checkpoint, EpochMetrics, Loader, RunDir};
use clap::CommandFactory;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_carid"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A tiny shapes dataset with its manifest on disk, plus the overrides that
/// make a run fast: small random-init backbone, no augmentation, 64px.
struct Fixture {
    dir: tempfile::TempDir,
    manifest: PathBuf,
}

impl Fixture {
    fn new(train: usize, val: usize, test: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let m = write_shapes_dataset(&dir.path().join("data"), ShapeCounts { train, val, test }, 48, 21).unwrap();
        let manifest = dir.path().join("manifest.json");
        m.save_json(&manifest).unwrap();
        Self { dir, manifest }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn args(&self, cmd: &[&str], extra: &[&str]) -> Vec<String> {
        let mut v: Vec<String> = cmd.iter().map(|s| s.to_string()).collect();
        let sets = [
            "model=mobilevit_s".to_string(),
            "name=shapes".into(),
            "model.net.pretrained=false".into(),
            "augmentation=none".into(),
            "augmentation.output_size=[64,64]".into(),
            "data.batch_size=4".into(),
            format!("data.manifest={}", self.manifest.display()),
            format!("trainer.runs_dir={}", self.path("runs").display()),
        ];
        v.extend(["--config-root".into(), configs().display().to_string()]);
        for s in sets {
            v.extend(["--set".into(), s]);
        }
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    }

    fn run(&self, cmd: &[&str], extra: &[&str]) -> Output {
        bin().args(self.args(cmd, extra)).output().unwrap()
    }
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), stderr(o));
}

#[test]
fn help_matches_snapshot_and_lists_every_flag() {
    let snapshot_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots");
    let cmd = carid_cli::Cli::command();
    let mut pages = vec![("carid".to_string(), run(&["--help"]))];
    for sub in cmd.get_subcommands() {
        let name = sub.get_name().to_string();
        pages.push((name.clone(), run(&[&name, "--help"])));
    }
    for (name, out) in &pages {
        assert_eq!(out.status.code(), Some(0));
        let text = stdout(out);
        let expected = std::fs::read_to_string(snapshot_dir.join(format!("help_{name}.txt")))
            .unwrap_or_else(|_| panic!("missing snapshot for {name}"));
        assert_eq!(text, expected, "help for {name} changed");
    }
    // every accepted long flag shows up in the help page of its command
    for sub in cmd.get_subcommands() {
        let help = stdout(&run(&[sub.get_name(), "--help"]));
        let globals = cmd.get_arguments().filter(|a| a.is_global_set());
        for arg in sub.get_arguments().chain(globals) {
            if let Some(long) = arg.get_long() {
                assert!(help.contains(&format!("--{long}")), "--{long} missing from {} help", sub.get_name());
            }
        }
    }
    let top = stdout(&run(&["--help"]));
    for sub in cmd.get_subcommands() {
        assert!(top.contains(sub.get_name()));
    }
}

#[test]
fn usage_errors_exit_2() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage:"));

    let o = run(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));

    let root = configs().display().to_string();
    let o = run(&["train", "--config-root", &root, "--set", "model.optimizer.learning_rate=0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.optimizer.learning_rate"), "{}", stderr(&o));

    let o = run(&["train", "--config-root", &root, "--set", "model.net.dropout_value=1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.net.dropout_value"));

    let o = run(&["eval", "--split", "holdout"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resolved_config_is_written_before_work_starts() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let root = configs().display().to_string();
    let o = run(&[
        "train",
        "--config-root",
        &root,
        "--model",
        "efficientnetv2_b2",
        "--set",
        "model.optimizer.lr=0.00157",
        "--set",
        &format!("trainer.runs_dir={}", runs.display()),
        "--set",
        &format!("data.root={}", dir.path().join("no-data").display()),
    ]);
    // no dataset here, so the work itself fails
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let cfg_path = runs.join("efficientnetv2_b2/config.yaml");
    let cfg = RunConfig::from_yaml(&std::fs::read_to_string(cfg_path).unwrap()).unwrap();
    assert_eq!(cfg.model.optimizer.lr, 0.00157);
    assert_eq!(cfg.model.net.backbone, "efficientnetv2_b2");
    assert_eq!(cfg.name, "efficientnetv2_b2");
}

#[test]
fn train_writes_run_directory_and_reruns_identically() {
    let fx = Fixture::new(4, 2, 3);
    let o = fx.run(&["train"], &["--epochs", "3", "--json", "--seed", "5"]);
    assert_ok(&o);
    let summary: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let run_a = fx.path("runs/shapes");
    assert_eq!(summary["run_dir"], run_a.display().to_string());

    let run = RunDir::at(run_a.clone()).unwrap();
    let metrics = run.read_metrics().unwrap();
    assert_eq!(metrics.len(), 3);
    assert_eq!(metrics.iter().map(|m| m.epoch).collect::<Vec<_>>(), [1, 2, 3]);
    let cfg = RunConfig::from_yaml(&std::fs::read_to_string(run.config_path()).unwrap()).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.trainer.epochs, 3);
    let ckpt = Checkpoint::load(&run.best_checkpoint()).unwrap();
    assert_eq!(summary["model_version"], ckpt.meta.model_version.as_str());
    let best: EpochMetrics = serde_json::from_value(summary["best"].clone()).unwrap();
    assert_eq!(ckpt.meta.metrics.as_ref(), Some(&best));

    // the persisted config alone reproduces the run
    let run_b = fx.path("rerun");
    let o = bin()
        .args(["train", "--config"])
        .arg(run.config_path())
        .arg("--run-dir")
        .arg(&run_b)
        .output()
        .unwrap();
    assert_ok(&o);
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(run_a.join("metrics.jsonl")), read(run_b.join("metrics.jsonl")));
    assert_eq!(read(run_a.join("best.ckpt")), read(run_b.join("best.ckpt")));
    assert_eq!(read(run_a.join("config.yaml")), read(run_b.join("config.yaml")));

    // --model is a group selection, meaningless on a resolved file
    let o = bin()
        .args(["train", "--model", "resnet50", "--config"])
        .arg(run.config_path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_reports_json_and_rejects_foreign_class_tables() {
    let fx = Fixture::new(3, 2, 4);
    assert_ok(&fx.run(&["train"], &["--epochs", "2"]));
    let o = fx.run(&["eval"], &["--json"]);
    assert_ok(&o);
    let report: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["split"], "test");
    assert_eq!(report["total"], 12);

    // same numbers as an in-process evaluation
    let manifest = DatasetManifest::load_json(&fx.manifest).unwrap();
    let ckpt = fx.path("runs/shapes/best.ckpt");
    let loader = Loader {
        batch_size: 4,
        ..Loader::default()
    };
    let (offline, _) = carid_cli::pipeline::evaluate_checkpoint(&ckpt, &manifest, Split::Test, &loader).unwrap();
    assert_eq!(report["accuracy"].as_f64().unwrap(), offline.accuracy);
    assert_eq!(report["loss"].as_f64().unwrap(), offline.loss);
    assert_eq!(report["model_version"], Checkpoint::load(&ckpt).unwrap().meta.model_version.as_str());
    assert!(fx.path("runs/shapes/eval.config.yaml").is_file());

    let o = fx.run(&["eval"], &["--split", "val"]);
    assert_ok(&o);
    assert!(stdout(&o).starts_with("val: accuracy"));

    // a manifest whose classes are in another order
    let mut other = manifest.clone();
    other.class_names.reverse();
    for r in &mut other.records {
        r.class_id = other.num_classes - 1 - r.class_id;
    }
    let other_path = fx.path("reversed.json");
    other.save_json(&other_path).unwrap();
    let o = fx.run(&["eval"], &["--set", &format!("data.manifest={}", other_path.display())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("classes do not match"), "{}", stderr(&o));

    let o = fx.run(&["eval"], &["--checkpoint", fx.path("absent.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn tune_writes_a_study_with_the_requested_trials() {
    let fx = Fixture::new(2, 1, 0);
    let o = fx.run(&["tune"], &["--n-trials", "30", "--epochs", "1", "--json", "--set", "data.batch_size=32"]);
    assert_ok(&o);
    let out: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let study_file = fx.path("runs/shapes/study.json");
    assert_eq!(out["study_file"], study_file.display().to_string());
    let study: Study = serde_json::from_str(&std::fs::read_to_string(&study_file).unwrap()).unwrap();
    assert_eq!(study.trials.len(), 30);
    assert!(study.trials.iter().all(|t| t.state != TrialState::Pending));
    study.validate_trials().unwrap();
    let best = study.best_trial().unwrap();
    assert_eq!(out["best_trial"], best.id);

    // each trial ran with its own parameters
    let t = &study.trials[7];
    let trial_cfg = fx.path(&format!("runs/shapes/trials/{:03}/config.yaml", t.id));
    let cfg = RunConfig::from_yaml(&std::fs::read_to_string(trial_cfg).unwrap()).unwrap();
    for (name, value) in &t.params {
        assert_eq!(cfg.param(name).as_ref(), Some(value), "{name}");
    }
    assert_eq!(cfg.trainer.epochs, 1);
    let best_cfg = RunConfig::from_yaml(&std::fs::read_to_string(fx.path("runs/shapes/best_config.yaml")).unwrap()).unwrap();
    for (name, value) in &best.params {
        assert_eq!(best_cfg.param(name).as_ref(), Some(value));
    }

    // a second invocation resumes the finished study without new trials
    let o = fx.run(&["tune"], &["--n-trials", "30", "--epochs", "1", "--set", "data.batch_size=32"]);
    assert_ok(&o);
    let again: Study = serde_json::from_str(&std::fs::read_to_string(&study_file).unwrap()).unwrap();
    assert_eq!(again, study);
}

#[test]
fn prepare_data_then_train_from_the_manifest() {
    let fx = Fixture::new(6, 2, 2);
    let data = fx.path("data");
    let o = bin()
        .args(fx.args(&["prepare-data"], &["--json", "--set", "data.manifest=null"]))
        .args(["--set", &format!("data.root={}", data.display())])
        .args(["--set", "data.dedup.enabled=false", "--set", "data.split.train=0.6", "--set", "data.split.val=0.2", "--set", "data.split.test=0.2"])
        .output()
        .unwrap();
    assert_ok(&o);
    let out: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(out["records"], 30);
    assert_eq!(out["train"], 18);
    assert_eq!(out["val"], 6);
    assert_eq!(out["test"], 6);
    let manifest_path = fx.path("runs/shapes/manifest.json");
    let m = DatasetManifest::load_json(&manifest_path).unwrap();
    assert_eq!(m.records.len(), 30);
    assert!(fx.path("runs/shapes/prepare-data.config.yaml").is_file());
    assert!(fx.path("runs/shapes/load_issues.jsonl").is_file());

    // dedup on: the noisy shapes are distinct enough to survive an exact-match threshold
    let o = bin()
        .args(fx.args(&["prepare-data"], &["--json", "--set", "data.manifest=null"]))
        .args(["--set", &format!("data.root={}", data.display()), "--set", "data.dedup.threshold=0"])
        .args(["--out", fx.path("dedup.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert_ok(&o);

    let o = fx.run(&["train"], &["--epochs", "1", "--set", &format!("data.manifest={}", manifest_path.display())]);
    assert_ok(&o);
}

#[test]
fn export_and_dump_augmented() {
    let fx = Fixture::new(2, 1, 1);
    assert_ok(&fx.run(&["train"], &["--epochs", "1"]));
    let out = fx.path("export");
    let o = fx.run(&["export"], &["--out", out.to_str().unwrap(), "--json"]);
    assert_ok(&o);
    let ckpt = Checkpoint::load(&fx.path("runs/shapes/best.ckpt")).unwrap();
    let tensors = candle_core::safetensors::load(out.join("model.safetensors"), &candle_core::Device::Cpu).unwrap();
    assert_eq!(tensors.len(), ckpt.tensors.len());
    for (name, t) in &ckpt.tensors {
        let a = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = tensors[name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b, "{name}");
    }
    let meta: Value = serde_json::from_slice(&std::fs::read(out.join("model.json")).unwrap()).unwrap();
    assert_eq!(meta["model_version"], ckpt.meta.model_version.as_str());
    assert_eq!(meta["class_names"].as_array().unwrap().len(), 3);

    // the augmentation chain is on for the dump
    let dump = fx.path("dump");
    let o = fx.run(
        &["dump-augmented"],
        &["--n", "5", "--out", dump.to_str().unwrap(), "--set", "augmentation=default", "--json"],
    );
    assert_ok(&o);
    let index: Vec<Value> = serde_json::from_slice(&std::fs::read(dump.join("index.json")).unwrap()).unwrap();
    assert_eq!(index.len(), 5);
    for entry in &index {
        let img = image::open(entry["file"].as_str().unwrap()).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
    }
    // same seed, same pixels
    let again = fx.path("dump2");
    assert_ok(&fx.run(
        &["dump-augmented"],
        &["--n", "5", "--out", again.to_str().unwrap(), "--set", "augmentation=default"],
    ));
    for i in 0..5 {
        let name = index[i]["file"].as_str().unwrap();
        let file = Path::new(name).file_name().unwrap();
        assert_eq!(std::fs::read(name).unwrap(), std::fs::read(again.join(file)).unwrap());
    }
}

#[test]
fn serve_answers_over_http_and_stops_on_interrupt() {
    let fx = Fixture::new(2, 1, 1);
    assert_ok(&fx.run(&["train"], &["--epochs", "1"]));
    let mut child = bin()
        .args(fx.args(&["serve"], &["--port", "0", "--host", "127.0.0.1", "--set", "serve.access_log=false"]))
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let banner = lines.next().unwrap().unwrap();
    let addr = banner.rsplit("http://").next().unwrap().trim().to_string();

    let mut stream = std::net::TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /api/labels HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("Acme Roadster 2012"));

    let status = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    let code = child.wait().unwrap();
    assert_eq!(code.code(), Some(0));

    // no checkpoint, no server
    let o = fx.run(&["serve"], &["--checkpoint", fx.path("missing.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.ckpt"), "{}", stderr(&o));
}
