//! The subcommands. Each writes only into its own [`RunDir`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pcn::backbone::{Backbone, FeatureTap};
use pcn::checkpoint::{load_base, load_calibrator, save_base, save_calibrator, BaseModels};
use pcn::classifiers::{self, ClassSplit};
use pcn::data::{self, Dataset};
use pcn::episodic::{self, write_log, FrozenModels};
use pcn::eval::{evaluate_gfss, format_table, heatmap_dir, write_per_class_csv, write_reports_csv, EvalMode, EvalModels, MetricsReport};
use pcn::fusion::{CalibKind, Calibrator};
use pcn::gradsuite;
use pcn::tensor::gradcheck::GradCheckReport;

use crate::{ExperimentConfig, Failure, RunDir};

pub const DATASET_DIR: &str = "dataset";
pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const BASE_LOSS_CSV: &str = "base_loss.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const PER_CLASS_CSV: &str = "per_class.csv";
pub const TABLE_TXT: &str = "table.txt";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const GRADCHECK_CSV: &str = "gradcheck.csv";

pub fn calibrator_file(kind: CalibKind, tap: FeatureTap) -> String {
    format!("calib-{}-{}.ckpt", kind.name(), tap.name())
}

pub fn meta_log_file(kind: CalibKind, tap: FeatureTap) -> String {
    format!("meta_log-{}-{}.csv", kind.name(), tap.name())
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("[pcn] {}", msg.as_ref());
}

/// Loads `dataset.path` or generates the configured synthetic dataset.
pub fn dataset(cfg: &ExperimentConfig) -> Result<Dataset, Failure> {
    match &cfg.dataset.path {
        Some(p) => Ok(data::load_dataset(p)?.0),
        None => Ok(data::generate_dataset(&cfg.dataset.synth, cfg.seed)?),
    }
}

#[derive(Debug, Clone)]
pub struct GenDataOutput {
    pub dir: PathBuf,
    pub sha256: String,
}

pub fn gen_data(cfg: &ExperimentConfig, run: &RunDir) -> Result<GenDataOutput, Failure> {
    cfg.dataset.synth.validate()?;
    let ds = data::generate_dataset(&cfg.dataset.synth, cfg.seed)?;
    let dir = run.file(DATASET_DIR);
    data::save_dataset(&dir, &ds, &run.provenance)?;
    let sha256 = data::dataset_digest(&dir)?;
    Ok(GenDataOutput { dir, sha256 })
}

#[derive(Debug, Clone)]
pub struct TrainBaseOutput {
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
    pub train_pixel_accuracy: f64,
}

pub fn train_base(cfg: &ExperimentConfig, run: &RunDir) -> Result<TrainBaseOutput, Failure> {
    let ds = dataset(cfg)?;
    ds.check_train_split()?;
    let mut backbone = Backbone::<f64>::new(cfg.backbone.clone(), cfg.seed)?;
    progress(format!("training backbone and base classifier on {} images", ds.train.len()));
    let out = classifiers::train_base(&ds, &mut backbone, &cfg.training.base, cfg.seed)?;
    let checkpoint = run.file(BASE_CHECKPOINT);
    save_base(&checkpoint, &backbone, &out.classifier, &ds.novel_ids, &run.provenance)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    run.write(BASE_LOSS_CSV, csv)?;
    Ok(TrainBaseOutput { checkpoint, losses: out.losses, train_pixel_accuracy: out.train_pixel_accuracy })
}

/// Base models plus the dataset they were trained for, with the split checked.
struct Loaded {
    models: BaseModels<f64>,
    data: Dataset,
    split: ClassSplit,
}

fn load_with_data(cfg: &ExperimentConfig, base: &Path) -> Result<Loaded, Failure> {
    let models = load_base::<f64>(base)?;
    let data = dataset(cfg)?;
    if models.base.ids != data.base_ids || models.novel_ids != data.novel_ids {
        return Err(Failure::config(format!(
            "checkpoint {} was trained for base {:?} / novel {:?}, dataset has {:?} / {:?}",
            base.display(),
            models.base.ids,
            models.novel_ids,
            data.base_ids,
            data.novel_ids
        )));
    }
    let split = ClassSplit::new(data.base_ids.clone(), data.novel_ids.clone())?;
    Ok(Loaded { models, data, split })
}

#[derive(Debug, Clone)]
pub struct TrainedCalibrator {
    pub kind: CalibKind,
    pub tap: FeatureTap,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub losses: Vec<f64>,
}

fn train_calibrators(
    cfg: &ExperimentConfig,
    run: &RunDir,
    l: &Loaded,
    variants: &[(CalibKind, FeatureTap)],
) -> Result<(Vec<TrainedCalibrator>, Vec<Calibrator<f64>>), Failure> {
    let meta = &cfg.training.meta;
    progress(format!("meta-training {} calibrator(s) for {} iterations", variants.len(), meta.iterations));
    let frozen = FrozenModels { backbone: &l.models.backbone, base: &l.models.base };
    let slots = episodic::meta_train(&l.data.train, &l.split, frozen, meta, variants, cfg.seed)?;
    let hw = l.models.backbone.config().latent_pixels();
    let c = l.split.test_layout().len();
    let mut trained = Vec::new();
    let mut cals = Vec::new();
    for s in slots {
        let kind = s.kind();
        let checkpoint = run.file(&calibrator_file(kind, s.tap));
        save_calibrator(&checkpoint, &s.calibrator, s.tap, hw, c, &meta.calib, &run.provenance)?;
        let log = run.file(&meta_log_file(kind, s.tap));
        write_log(&log, &s.log)?;
        trained.push(TrainedCalibrator { kind, tap: s.tap, checkpoint, log, losses: s.log.iter().map(|r| r.meta_loss).collect() });
        cals.push(s.calibrator);
    }
    Ok((trained, cals))
}

/// Meta-trains each of `kinds` (or the configured calibration variant) on
/// the configured feature tap.
pub fn meta_train(cfg: &ExperimentConfig, run: &RunDir, base: &Path, kinds: &[CalibKind]) -> Result<Vec<TrainedCalibrator>, Failure> {
    let kinds: Vec<CalibKind> = if kinds.is_empty() {
        match cfg.pipeline.calibration.kind() {
            Some(k) => vec![k],
            None => return Err(Failure::config("pipeline.calibration is \"none\"; nothing to meta-train")),
        }
    } else {
        kinds.to_vec()
    };
    let l = load_with_data(cfg, base)?;
    let tap = cfg.backbone.feature_tap;
    let variants: Vec<(CalibKind, FeatureTap)> = kinds.iter().map(|&k| (k, tap)).collect();
    Ok(train_calibrators(cfg, run, &l, &variants)?.0)
}

/// Resolves `name` or `name@tap` against the loaded calibrators.
pub fn parse_mode(name: &str, loaded: &[(FeatureTap, Calibrator<f64>)], default_tap: FeatureTap) -> Result<EvalMode, Failure> {
    let (kind_name, tap) = match name.split_once('@') {
        Some((k, t)) => (k, Some(t.parse::<FeatureTap>()?)),
        None => (name, None),
    };
    let mode = EvalMode::parse(kind_name, default_tap)?;
    let EvalMode::Calibrated { kind, .. } = mode else {
        return Ok(mode);
    };
    let tap = match tap {
        Some(t) => t,
        None => {
            let taps: Vec<FeatureTap> = loaded.iter().filter(|(_, c)| c.kind() == kind).map(|(t, _)| *t).collect();
            match taps.as_slice() {
                [only] => *only,
                [] => return Err(Failure::config(format!("mode '{name}' needs a {kind} calibrator checkpoint (--calib)"))),
                _ => return Err(Failure::config(format!("several {kind} calibrators loaded; write the mode as '{kind}@<tap>'"))),
            }
        }
    };
    Ok(EvalMode::Calibrated { kind, tap })
}

fn write_reports(run: &RunDir, csv_name: &str, reports: &[MetricsReport], split: &ClassSplit) -> Result<String, Failure> {
    write_reports_csv(&run.file(csv_name), reports, &run.provenance)?;
    write_per_class_csv(&run.file(PER_CLASS_CSV), reports, split)?;
    let table = format_table(reports);
    run.write(TABLE_TXT, &table)?;
    Ok(table)
}

fn evaluate(
    cfg: &ExperimentConfig,
    run: &RunDir,
    l: &Loaded,
    calibrators: &[(FeatureTap, Calibrator<f64>)],
    modes: &[EvalMode],
) -> Result<Vec<MetricsReport>, Failure> {
    let models = EvalModels {
        backbone: &l.models.backbone,
        base: &l.models.base,
        calibrators: calibrators.iter().map(|(t, c)| (*t, c)).collect(),
    };
    let heat = cfg.evaluation.heatmaps.then(|| heatmap_dir(&run.path));
    progress(format!("evaluating {} mode(s) on {} tasks", modes.len(), cfg.evaluation.num_tasks));
    Ok(evaluate_gfss(&models, &l.data.val, &l.split, modes, &cfg.eval_config(), cfg.seed, heat.as_deref())?)
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub reports: Vec<MetricsReport>,
    pub table: String,
    pub metrics: PathBuf,
}

/// Evaluates `modes` (or the configured ones) with paired task sampling.
pub fn eval(cfg: &ExperimentConfig, run: &RunDir, base: &Path, calibs: &[PathBuf], modes: &[String]) -> Result<EvalOutput, Failure> {
    let l = load_with_data(cfg, base)?;
    let mut loaded = Vec::new();
    for p in calibs {
        let (cal, tap, _) = load_calibrator::<f64>(p)?;
        loaded.push((tap, cal));
    }
    let names = if modes.is_empty() { cfg.mode_names() } else { modes.to_vec() };
    let modes: Vec<EvalMode> = names.iter().map(|m| parse_mode(m, &loaded, cfg.backbone.feature_tap)).collect::<Result<_, _>>()?;
    let reports = evaluate(cfg, run, &l, &loaded, &modes)?;
    let table = write_reports(run, METRICS_CSV, &reports, &l.split)?;
    Ok(EvalOutput { reports, table, metrics: run.file(METRICS_CSV) })
}

#[derive(Debug, Clone)]
pub struct AblationOutput {
    pub reports: Vec<MetricsReport>,
    pub table: String,
    pub calibrators: Vec<TrainedCalibrator>,
}

/// Meta-trains the configured calibrator once per feature tap on a shared
/// episode stream, then evaluates all taps on shared tasks.
pub fn ablate_features(cfg: &ExperimentConfig, run: &RunDir, base: &Path) -> Result<AblationOutput, Failure> {
    let kind = cfg
        .pipeline
        .calibration
        .kind()
        .ok_or_else(|| Failure::config("pipeline.calibration is \"none\"; nothing to ablate"))?;
    let l = load_with_data(cfg, base)?;
    let variants: Vec<(CalibKind, FeatureTap)> = FeatureTap::ALL.iter().map(|&t| (kind, t)).collect();
    let (trained, cals) = train_calibrators(cfg, run, &l, &variants)?;
    let loaded: Vec<(FeatureTap, Calibrator<f64>)> = trained.iter().map(|t| t.tap).zip(cals).collect();
    let modes: Vec<EvalMode> = FeatureTap::ALL.iter().map(|&tap| EvalMode::Calibrated { kind, tap }).collect();
    let reports = evaluate(cfg, run, &l, &loaded, &modes)?;
    let table = write_reports(run, ABLATION_CSV, &reports, &l.split)?;
    Ok(AblationOutput { reports, table, calibrators: trained })
}

#[derive(Debug, Clone)]
pub struct GradCheckOutput {
    pub cases: Vec<(&'static str, GradCheckReport)>,
}

impl GradCheckOutput {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|(_, r)| r.passed())
    }
}

/// Checks every op and the calibration objective over `seeds` consecutive
/// seeds starting at the master seed.
pub fn grad_check(cfg: &ExperimentConfig, run: &RunDir, seeds: u64, tolerance: f64) -> Result<GradCheckOutput, Failure> {
    let cases = gradsuite::run_all(cfg.seed..cfg.seed + seeds, tolerance)?;
    let mut csv = String::from("case,seeds,checked,max_rel_error,max_abs_error,tolerance,passed\n");
    for (name, r) in &cases {
        let _ = writeln!(csv, "{name},{seeds},{},{:e},{:e},{:e},{}", r.checked, r.max_rel_error, r.max_abs_error, r.tolerance, r.passed());
    }
    run.write(GRADCHECK_CSV, csv)?;
    Ok(GradCheckOutput { cases })
}
