//! Experiment configuration file.
//!
//! One TOML file drives every subcommand. Every section is optional and
//! falls back to the defaults below; unknown keys are rejected.
//!
//! ```toml
//! version = 1
//! seed = 0
//! out_dir = "runs"
//!
//! [dataset]
//! # path = "runs/gen-data-.../dataset"   # load instead of generating
//! [dataset.synth]
//! image_size = 32
//!
//! [backbone]
//! feature_tap = "layer4+high"
//!
//! [training.base]
//! epochs = 12
//! [training.meta]
//! iterations = 2000
//!
//! [pipeline]
//! fusion = "nsf"
//! calibration = "pcn"
//!
//! [evaluation]
//! num_tasks = 100
//! modes = ["plain", "npf", "nsf", "pcn"]
//! ```

use std::path::{Path, PathBuf};

use pcn::backbone::BackboneConfig;
use pcn::classifiers::BaseTrainConfig;
use pcn::data::SynthConfig;
use pcn::episodic::MetaTrainConfig;
use pcn::eval::EvalConfig;
use pcn::fusion::CalibKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out_dir: default_out_dir(),
            dataset: DatasetSection::default(),
            backbone: BackboneConfig::default(),
            training: TrainingSection::default(),
            pipeline: PipelineSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Dataset directory written by `gen-data`; when absent the dataset is
    /// generated in memory from `synth` and the master seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub base: BaseTrainConfig,
    /// Also supplies the novel-classifier settings used at evaluation.
    pub meta: MetaTrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Plain,
    Npf,
    Nsf,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Plain => "plain",
            FusionMode::Npf => "npf",
            FusionMode::Nsf => "nsf",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    None,
    Linear,
    LinearNores,
    Selfattn,
    Pcn,
}

impl Calibration {
    pub fn kind(self) -> Option<CalibKind> {
        match self {
            Calibration::None => None,
            Calibration::Linear => Some(CalibKind::Linear),
            Calibration::LinearNores => Some(CalibKind::LinearNores),
            Calibration::Selfattn => Some(CalibKind::SelfAttn),
            Calibration::Pcn => Some(CalibKind::Pcn),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub fusion: FusionMode,
    pub calibration: Calibration,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self { fusion: FusionMode::Nsf, calibration: Calibration::Pcn }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub num_tasks: usize,
    pub shots: usize,
    pub global_accumulate: bool,
    pub include_background: bool,
    /// Export score heatmaps of the first task's queries.
    pub heatmaps: bool,
    pub heatmap_queries: usize,
    /// Modes to report. Empty means the pipeline's fusion followed by its
    /// calibration variant.
    pub modes: Vec<String>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            num_tasks: e.num_tasks,
            shots: e.shots,
            global_accumulate: e.global_accumulate,
            include_background: e.include_background,
            heatmaps: false,
            heatmap_queries: e.heatmap_queries,
            modes: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, Failure> {
        let cfg: Self = toml::from_str(text).map_err(|e| Failure::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|f| Failure { msg: format!("{}: {}", path.display(), f.msg), ..f })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.version != CONFIG_VERSION {
            return Err(Failure::config(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version)));
        }
        self.dataset.synth.validate()?;
        self.backbone.validate()?;
        self.training.base.validate()?;
        if self.pipeline.calibration != Calibration::None && self.pipeline.fusion != FusionMode::Nsf {
            return Err(Failure::config("calibration applies to NSF scores; set pipeline.fusion = \"nsf\" or calibration = \"none\""));
        }
        if self.evaluation.num_tasks == 0 || self.evaluation.shots == 0 {
            return Err(Failure::config("evaluation needs num_tasks > 0 and shots > 0"));
        }
        Ok(())
    }

    /// Digest of everything that affects results; the output directory is
    /// left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn eval_config(&self) -> EvalConfig {
        let e = &self.evaluation;
        EvalConfig {
            num_tasks: e.num_tasks,
            shots: e.shots,
            global_accumulate: e.global_accumulate,
            include_background: e.include_background,
            inner: self.training.meta.inner,
            heatmap_queries: e.heatmap_queries,
        }
    }

    pub fn mode_names(&self) -> Vec<String> {
        if !self.evaluation.modes.is_empty() {
            return self.evaluation.modes.clone();
        }
        let mut m = vec![self.pipeline.fusion.name().to_string()];
        if let Some(k) = self.pipeline.calibration.kind() {
            m.push(k.name().to_string());
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_defaults() {
        let cfg = ExperimentConfig::from_toml("version = 1").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("version = 1\n[training.meta]\niteratoins = 5").unwrap_err();
        assert_eq!(err.code, crate::EXIT_CONFIG);
        assert!(err.msg.contains("iteratoins"), "{}", err.msg);
    }

    #[test]
    fn version_is_checked() {
        assert!(ExperimentConfig::from_toml("version = 2").is_err());
        assert!(ExperimentConfig::from_toml("seed = 1").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 9;
        cfg.evaluation.modes = vec!["nsf".into(), "pcn".into()];
        cfg.dataset.path = Some("data".into());
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn default_modes_follow_the_pipeline() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.mode_names(), ["nsf", "pcn"]);
        cfg.pipeline.calibration = Calibration::None;
        assert_eq!(cfg.mode_names(), ["nsf"]);
    }

    #[test]
    fn calibration_needs_nsf() {
        let err = ExperimentConfig::from_toml("version = 1\n[pipeline]\nfusion = \"plain\"").unwrap_err();
        assert_eq!(err.code, crate::EXIT_CONFIG);
    }
}
