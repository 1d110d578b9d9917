mod common;

use std::fs;

use common::{csv_rows, pcn, small_config, stdout_value, SMALL};
use pcn::backbone::FeatureTap;
use pcn::checkpoint::Checkpoint;
use pcn::fusion::CalibKind;
use pcn_cli::{commands, RunDir, EXIT_CONFIG};

fn write_config(dir: &std::path::Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn gen_data_digest_depends_only_on_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("runs").display().to_string();
    let digest = |seed: &str| {
        let o = pcn(&["--config", &cfg, "--out", &out, "--seed", seed, "gen-data"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout_value(&o, "sha256:").unwrap()
    };
    let a = digest("11");
    assert_eq!(a.len(), 64);
    assert_eq!(a, digest("11"));
    assert_ne!(a, digest("12"));
    assert_eq!(fs::read_dir(tmp.path().join("runs")).unwrap().count(), 3);
}

#[test]
fn bad_split_is_a_config_error_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}\n[dataset.synth.split]\nnum_folds = 3\nfold = 0\n"));
    let out = tmp.path().join("runs");
    let o = pcn(&["--config", &cfg, "--out", &out.display().to_string(), "gen-data"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&o.stderr).contains("split"));
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "version = 1\n[evaluation]\nnum_taks = 4\n");
    let o = pcn(&["--config", &cfg, "--out", &tmp.path().display().to_string(), "grad-check"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&o.stderr).contains("num_taks"));
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = pcn(&["--config", &cfg, "--out", &tmp.path().display().to_string(), "eval", "--base", "nowhere.ckpt"]);
    assert_eq!(o.status.code(), Some(pcn_cli::EXIT_DATA));
}

#[test]
fn grad_check_writes_one_row_per_case() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pcn(&["--out", &tmp.path().display().to_string(), "grad-check", "--seeds", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = stdout_value(&o, "run directory:").unwrap();
    let rows = csv_rows(&std::path::Path::new(&run).join(commands::GRADCHECK_CSV));
    assert_eq!(rows.len(), pcn::gradsuite::CASES.len());
    assert!(rows.iter().all(|r| r["passed"] == "true" && r["seeds"] == "2"));
}

#[test]
fn small_pipeline_round_trips_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());

    let data = commands::gen_data(&cfg, &RunDir::create(tmp.path(), "gen-data", &cfg).unwrap()).unwrap();
    let in_memory = commands::train_base(&cfg, &RunDir::create(tmp.path(), "train-base", &cfg).unwrap()).unwrap();
    cfg.dataset.path = Some(data.dir.clone());
    let base = commands::train_base(&cfg, &RunDir::create(tmp.path(), "train-base", &cfg).unwrap()).unwrap();
    assert_eq!(in_memory.losses, base.losses);
    let (a, b) = (Checkpoint::load(&in_memory.checkpoint).unwrap(), Checkpoint::load(&base.checkpoint).unwrap());
    assert_eq!(a.tensors, b.tensors);
    assert_eq!(b.meta["kind"], "base");

    let meta_run = RunDir::create(tmp.path(), "meta-train", &cfg).unwrap();
    let trained = commands::meta_train(&cfg, &meta_run, &base.checkpoint, &[CalibKind::Pcn, CalibKind::Linear]).unwrap();
    assert_eq!(trained.len(), 2);
    for t in &trained {
        assert_eq!(t.losses.len(), cfg.training.meta.iterations);
        assert!(t.losses.iter().all(|l| l.is_finite()));
        assert_eq!(csv_rows(&t.log).len(), cfg.training.meta.iterations);
    }

    cfg.evaluation.heatmaps = true;
    let eval_run = RunDir::create(tmp.path(), "eval", &cfg).unwrap();
    let calibs: Vec<_> = trained.iter().map(|t| t.checkpoint.clone()).collect();
    let modes: Vec<String> = ["plain", "npf", "nsf", "pcn", "linear", "oracle", "background"].map(String::from).into();
    let out = commands::eval(&cfg, &eval_run, &base.checkpoint, &calibs, &modes).unwrap();
    let rows = csv_rows(&out.metrics);
    assert_eq!(rows.iter().map(|r| r["mode"].as_str()).collect::<Vec<_>>(), modes);
    assert!(rows.iter().all(|r| r["task_seed_digest"] == rows[0]["task_seed_digest"]));
    assert!(rows.iter().all(|r| r["config_hash"] == cfg.hash() && r["master_seed"] == "5"));
    let oracle = &rows[5];
    for k in ["miou_base", "miou_novel", "miou_all", "h_mean"] {
        assert_eq!(oracle[k].parse::<f64>().unwrap(), 1.0, "{k}");
    }
    assert_eq!(rows[6]["h_mean"].parse::<f64>().unwrap(), 0.0);
    assert!(eval_run.file(commands::PER_CLASS_CSV).exists());
    assert!(eval_run.file(commands::TABLE_TXT).exists());
    let heat = fs::read_dir(eval_run.file("heatmaps")).unwrap().count();
    assert!(heat > 0);

    // a second evaluation of the same files reproduces the metrics exactly
    let again = RunDir::create(tmp.path(), "eval", &cfg).unwrap();
    let out2 = commands::eval(&cfg, &again, &base.checkpoint, &calibs, &modes).unwrap();
    assert_eq!(fs::read(&out.metrics).unwrap(), fs::read(&out2.metrics).unwrap());

    let mixed = commands::eval(&cfg, &again, &base.checkpoint, &calibs[..1], &["linear".to_string()]);
    assert_eq!(mixed.unwrap_err().code, EXIT_CONFIG);
}

#[test]
fn ablation_covers_every_tap_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.training.meta.iterations = 3;
    let base = commands::train_base(&cfg, &RunDir::create(tmp.path(), "train-base", &cfg).unwrap()).unwrap();
    let run = RunDir::create(tmp.path(), "ablate-features", &cfg).unwrap();
    let out = commands::ablate_features(&cfg, &run, &base.checkpoint).unwrap();
    let rows = csv_rows(&run.file(commands::ABLATION_CSV));
    let taps: Vec<&str> = rows.iter().map(|r| r["tap"].as_str()).collect();
    assert_eq!(taps, FeatureTap::ALL.map(FeatureTap::name));
    assert!(rows.iter().all(|r| r["mode"] == "pcn" && r["task_seed_digest"] == rows[0]["task_seed_digest"]));
    assert_eq!(out.calibrators.len(), 5);
}
