#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use pcn_cli::ExperimentConfig;

/// A configuration small enough to run the whole pipeline in seconds.
pub const SMALL: &str = r#"
version = 1
seed = 5

[dataset.synth]
train_images_per_class = 6
val_images_per_class = 6

[training.base]
epochs = 1

[training.meta]
iterations = 6

[training.meta.inner]
iters = 5

[evaluation]
num_tasks = 3
"#;

pub fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

pub fn pcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcn")).args(args).output().expect("binary runs")
}

pub fn stdout_value(out: &Output, key: &str) -> Option<String> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().to_string()))
}

/// Rows of a CSV file as header-keyed maps.
pub fn csv_rows(path: &Path) -> Vec<std::collections::BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| header.iter().zip(l.split(',')).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect()
}
