//! Test-time protocol and segmentation metrics.
//!
//! A task fits a novel classifier on a K-shot support of the novel classes
//! and scores `N_base` query pairs, each one novel-class image and one image
//! of the j-th base class. Every mode of a run sees the same supports and
//! queries because they are drawn once per task, before any mode runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, FeatureTap};
use crate::classifiers::{relabel_targets, train_novel, BaseClassifier, ClassSplit, Labeled, NovelClassifier, NovelTrainConfig};
use crate::data::{Mask, Provenance, Sample};
use crate::episodic::FeatureBank;
use crate::error::{Error, Result};
use crate::fusion::{argmax_segment, export_heatmaps, flatten_map, fuse_npf, fuse_plain, upsample_mask, CalibKind, Calibrator, ScoreField, ScoreStack};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::scalar::Scalar;

/// IoU of `class_id`, or `None` when neither mask contains it.
pub fn iou(pred: &Mask, gt: &Mask, class_id: u8) -> Result<Option<f64>> {
    let c = counts(pred, gt, class_id)?;
    Ok(c.iou())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn iou(self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }

    fn add(&mut self, o: Overlap) {
        self.intersection += o.intersection;
        self.union += o.union;
    }
}

fn counts(pred: &Mask, gt: &Mask, k: u8) -> Result<Overlap> {
    if (pred.width, pred.height) != (gt.width, gt.height) || pred.data.len() != gt.data.len() {
        return Err(Error::dim(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut o = Overlap::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (p == k, g == k);
        o.intersection += u64::from(a && b);
        o.union += u64::from(a || b);
    }
    Ok(o)
}

/// Harmonic mean `2ab / (a + b)`, zero when both are zero.
pub fn h_mean(miou_base: f64, miou_novel: f64) -> Result<f64> {
    if !(miou_base >= 0.0 && miou_novel >= 0.0) {
        return Err(Error::Numeric(format!("h_mean of ({miou_base}, {miou_novel})")));
    }
    let s = miou_base + miou_novel;
    Ok(if s == 0.0 { 0.0 } else { 2.0 * miou_base * miou_novel / s })
}

/// Class-count-weighted mean of the two group mIoUs.
pub fn miou_all(miou_base: f64, miou_novel: f64, n_base: usize, n_novel: usize) -> Result<f64> {
    if n_base == 0 || n_novel == 0 {
        return Err(Error::Numeric(format!("miou_all with class counts ({n_base}, {n_novel})")));
    }
    Ok((n_base as f64 * miou_base + n_novel as f64 * miou_novel) / (n_base + n_novel) as f64)
}

/// What produces a query's prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalMode {
    Plain,
    Npf,
    Nsf,
    Calibrated { kind: CalibKind, tap: FeatureTap },
    /// Ground truth, for harness checks.
    Oracle,
    /// Background everywhere, for harness checks.
    Background,
}

impl EvalMode {
    pub fn name(&self) -> String {
        match self {
            EvalMode::Plain => "plain".into(),
            EvalMode::Npf => "npf".into(),
            EvalMode::Nsf => "nsf".into(),
            EvalMode::Calibrated { kind, .. } => kind.name().into(),
            EvalMode::Oracle => "oracle".into(),
            EvalMode::Background => "background".into(),
        }
    }

    pub fn tap(&self) -> Option<FeatureTap> {
        match self {
            EvalMode::Calibrated { tap, .. } => Some(*tap),
            _ => None,
        }
    }

    /// Parses `plain`, `npf`, `nsf`, `oracle`, `background` or a calibrator
    /// name, which uses `tap`.
    pub fn parse(s: &str, tap: FeatureTap) -> Result<Self> {
        Ok(match s {
            "plain" => EvalMode::Plain,
            "npf" => EvalMode::Npf,
            "nsf" => EvalMode::Nsf,
            "oracle" => EvalMode::Oracle,
            "background" => EvalMode::Background,
            other => EvalMode::Calibrated { kind: other.parse()?, tap },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub num_tasks: usize,
    pub shots: usize,
    /// Sum overlaps over all tasks before dividing, instead of averaging
    /// per-task mIoUs.
    pub global_accumulate: bool,
    /// Count background as a base class.
    pub include_background: bool,
    pub inner: NovelTrainConfig,
    /// Queries of task 0 whose score maps are exported when a heatmap
    /// directory is given.
    pub heatmap_queries: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_tasks: 100,
            shots: 1,
            global_accumulate: false,
            include_background: false,
            inner: NovelTrainConfig::default(),
            heatmap_queries: 2,
        }
    }
}

/// Models used at test time.
#[derive(Clone, Debug)]
pub struct EvalModels<'a, T> {
    pub backbone: &'a Backbone<T>,
    pub base: &'a BaseClassifier<T>,
    pub calibrators: Vec<(FeatureTap, &'a Calibrator<T>)>,
}

impl<T: Scalar> EvalModels<'_, T> {
    fn calibrator(&self, kind: CalibKind, tap: FeatureTap) -> Result<&Calibrator<T>> {
        self.calibrators
            .iter()
            .find(|(t, c)| *t == tap && c.kind() == kind)
            .map(|(_, c)| *c)
            .ok_or_else(|| Error::Config(format!("no trained {kind} calibrator for feature tap {}", tap.name())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub tap: Option<FeatureTap>,
    pub per_class_iou: BTreeMap<u8, f64>,
    pub miou_base: f64,
    pub miou_novel: f64,
    pub miou_all: f64,
    pub h_mean: f64,
    pub num_tasks: usize,
    pub shots: usize,
    /// SHA-256 prefix over the task seeds, equal for paired rows.
    pub task_seed_digest: String,
}

/// A drawn task: support and query indices into the test subset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalTask {
    pub index: u64,
    pub seed: u64,
    pub support: Vec<usize>,
    pub queries: Vec<usize>,
}

fn draw(pool: Vec<usize>, used: &mut Vec<usize>, rng: &mut ChaCha8Rng, what: &str) -> Result<usize> {
    let free: Vec<usize> = pool.into_iter().filter(|i| !used.contains(i)).collect();
    let &i = free.choose(rng).ok_or_else(|| Error::Sampling(format!("no unused test image for {what}")))?;
    used.push(i);
    Ok(i)
}

/// Draws the support and query pairs of task `index`.
pub fn sample_task(samples: &[Sample], split: &ClassSplit, shots: usize, seed: u64, index: u64) -> Result<EvalTask> {
    let task_seed = derive_seed(seed, Stream::EvalTask, index);
    let mut rng = stream_rng(task_seed, Stream::EvalTask, 0);
    let with = |k: u8| -> Vec<usize> { (0..samples.len()).filter(|&i| samples[i].mask.contains(k)).collect() };
    for &k in split.base_ids.iter().chain(&split.novel_ids) {
        if with(k).is_empty() {
            return Err(Error::Sampling(format!("class {k} has no test images")));
        }
    }
    let mut used = Vec::new();
    let mut support = Vec::new();
    for &k in &split.novel_ids {
        let pure: Vec<usize> = with(k)
            .into_iter()
            .filter(|&i| samples[i].mask.classes().iter().all(|c| split.novel_ids.contains(c)))
            .collect();
        for _ in 0..shots {
            support.push(draw(pure.clone(), &mut used, &mut rng, &format!("support of class {k}"))?);
        }
    }
    let mut queries = Vec::new();
    for &j in &split.base_ids {
        let k = *split.novel_ids.choose(&mut rng).expect("novel ids are non-empty");
        queries.push(draw(with(k), &mut used, &mut rng, &format!("novel query of class {k}"))?);
        queries.push(draw(with(j), &mut used, &mut rng, &format!("base query of class {j}"))?);
    }
    Ok(EvalTask { index, seed: task_seed, support, queries })
}

type ModeCounts = BTreeMap<u8, Overlap>;

struct TaskOutcome<T> {
    counts: Vec<ModeCounts>,
    stacks: Vec<ScoreStack<T>>,
}

fn fit_task_classifier<T: Scalar>(
    task: &EvalTask,
    samples: &[Sample],
    bank: &FeatureBank<T>,
    split: &ClassSplit,
    inner: &NovelTrainConfig,
) -> Result<NovelClassifier<T>> {
    let layout: Vec<u8> = std::iter::once(0).chain(split.novel_ids.iter().copied()).collect();
    let support: Vec<Labeled<T>> = task
        .support
        .iter()
        .map(|&i| Labeled { features: bank.taps[i].fused.clone(), targets: relabel_targets(&samples[i].mask, &layout) })
        .collect();
    Ok(train_novel(&support, &split.novel_ids, inner, &mut stream_rng(task.seed, Stream::NovelInit, 0))?.classifier)
}

fn run_task<T: Scalar>(
    task: &EvalTask,
    samples: &[Sample],
    bank: &FeatureBank<T>,
    models: &EvalModels<'_, T>,
    split: &ClassSplit,
    modes: &[EvalMode],
    cfg: &EvalConfig,
    keep_stacks: usize,
) -> Result<TaskOutcome<T>> {
    let novel = fit_task_classifier(task, samples, bank, split, &cfg.inner)?;
    let classes = split.test_layout();
    let needs_npf = modes.contains(&EvalMode::Npf);
    if needs_npf && models.base.ids != split.base_ids {
        return Err(Error::Config("NPF needs the split's base classes to match the base classifier".into()));
    }
    let rows = models.base.rows_for(&split.base_ids)?;
    let mut counts = vec![ModeCounts::new(); modes.len()];
    let mut stacks = Vec::new();
    for (qi, &i) in task.queries.iter().enumerate() {
        let gt = &samples[i].mask;
        let taps = &bank.taps[i];
        let (base_logits, h, w) = bank.base_logits_rows(i, &rows)?;
        let (novel_logits, _, _) = flatten_map(&novel.predict_scores(&taps.fused)?)?;
        let mut heat: Option<ScoreStack<T>> = None;
        let stack = if needs_npf {
            fuse_npf(models.base, &novel, &taps.fused)?
        } else {
            fuse_plain(&base_logits, &novel_logits, &split.base_ids, &split.novel_ids, h, w)?
        };
        let factor = gt.width / w;
        for (mi, mode) in modes.iter().enumerate() {
            let pred = match *mode {
                EvalMode::Oracle => gt.clone(),
                EvalMode::Background => Mask { width: gt.width, height: gt.height, data: vec![0; gt.len()] },
                EvalMode::Plain => upsample_mask(&argmax_segment(&stack, ScoreField::Plain)?, factor),
                EvalMode::Npf => upsample_mask(&argmax_segment(&stack, ScoreField::Npf)?, factor),
                EvalMode::Nsf => upsample_mask(&argmax_segment(&stack, ScoreField::Nsf)?, factor),
                EvalMode::Calibrated { kind, tap } => {
                    let cal = models.calibrator(kind, tap)?;
                    let mut s = stack.clone();
                    cal.calibrate(&mut s, &taps.tap(tap))?;
                    let m = upsample_mask(&argmax_segment(&s, ScoreField::Calib)?, factor);
                    if qi < keep_stacks && heat.is_none() {
                        heat = Some(s);
                    }
                    m
                }
            };
            for &k in &classes {
                counts[mi].entry(k).or_default().add(self::counts(&pred, gt, k)?);
            }
        }
        if qi < keep_stacks {
            stacks.push(heat.unwrap_or(stack));
        }
    }
    Ok(TaskOutcome { counts, stacks })
}

fn group_mean(ious: &BTreeMap<u8, f64>, ids: &[u8]) -> Option<f64> {
    let vals: Vec<f64> = ids.iter().filter_map(|k| ious.get(k).copied()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 }
}

/// Per-class IoUs and group means from per-task overlaps.
pub fn summarize(tasks: &[BTreeMap<u8, Overlap>], base_group: &[u8], novel_group: &[u8], global: bool) -> (BTreeMap<u8, f64>, f64, f64) {
    let ious = |c: &BTreeMap<u8, Overlap>| -> BTreeMap<u8, f64> { c.iter().filter_map(|(&k, o)| o.iou().map(|v| (k, v))).collect() };
    if global {
        let mut total: BTreeMap<u8, Overlap> = BTreeMap::new();
        for t in tasks {
            for (&k, &o) in t {
                total.entry(k).or_default().add(o);
            }
        }
        let per = ious(&total);
        let b = group_mean(&per, base_group).unwrap_or(0.0);
        let n = group_mean(&per, novel_group).unwrap_or(0.0);
        return (per, b, n);
    }
    let per_task: Vec<BTreeMap<u8, f64>> = tasks.iter().map(ious).collect();
    let mut per_class: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for t in &per_task {
        for (&k, &v) in t {
            per_class.entry(k).or_default().push(v);
        }
    }
    let per = per_class.into_iter().map(|(k, v)| (k, mean(&v))).collect();
    let b: Vec<f64> = per_task.iter().filter_map(|t| group_mean(t, base_group)).collect();
    let n: Vec<f64> = per_task.iter().filter_map(|t| group_mean(t, novel_group)).collect();
    (per, mean(&b), mean(&n))
}

/// Runs `cfg.num_tasks` paired tasks and reports every mode.
pub fn evaluate_gfss<T: Scalar>(
    models: &EvalModels<'_, T>,
    samples: &[Sample],
    split: &ClassSplit,
    modes: &[EvalMode],
    cfg: &EvalConfig,
    seed: u64,
    heatmap_dir: Option<&Path>,
) -> Result<Vec<MetricsReport>> {
    if cfg.num_tasks == 0 || cfg.shots == 0 {
        return Err(Error::Config("evaluation needs num_tasks > 0 and shots > 0".into()));
    }
    for m in modes {
        if let EvalMode::Calibrated { kind, tap } = *m {
            models.calibrator(kind, tap)?;
        }
    }
    let bank = FeatureBank::build(models.backbone, models.base, samples)?;
    let tasks: Vec<EvalTask> = (0..cfg.num_tasks as u64).map(|t| sample_task(samples, split, cfg.shots, seed, t)).collect::<Result<_>>()?;
    let keep = if heatmap_dir.is_some() { cfg.heatmap_queries } else { 0 };
    let outcomes: Vec<TaskOutcome<T>> = tasks
        .par_iter()
        .map(|t| run_task(t, samples, &bank, models, split, modes, cfg, if t.index == 0 { keep } else { 0 }))
        .collect::<Result<_>>()?;

    if let Some(dir) = heatmap_dir {
        export_task_heatmaps(dir, &outcomes[0].stacks)?;
    }

    let mut hasher = Sha256::new();
    for t in &tasks {
        hasher.update(t.seed.to_le_bytes());
    }
    let digest = hex::encode(&hasher.finalize()[..8]);
    let mut base_group = split.base_ids.clone();
    if cfg.include_background {
        base_group.insert(0, 0);
    }
    modes
        .iter()
        .enumerate()
        .map(|(mi, mode)| {
            let per_task: Vec<ModeCounts> = outcomes.iter().map(|o| o.counts[mi].clone()).collect();
            let (mut per_class, b, n) = summarize(&per_task, &base_group, &split.novel_ids, cfg.global_accumulate);
            if !cfg.include_background {
                per_class.remove(&0);
            }
            Ok(MetricsReport {
                mode: mode.name(),
                tap: mode.tap(),
                per_class_iou: per_class,
                miou_base: b,
                miou_novel: n,
                miou_all: miou_all(b, n, base_group.len(), split.novel_ids.len())?,
                h_mean: h_mean(b, n)?,
                num_tasks: cfg.num_tasks,
                shots: cfg.shots,
                task_seed_digest: digest.clone(),
            })
        })
        .collect()
}

fn export_task_heatmaps<T: Scalar>(dir: &Path, stacks: &[ScoreStack<T>]) -> Result<()> {
    for (i, s) in stacks.iter().enumerate() {
        export_heatmaps(dir, &format!("query{i}_nsf"), &s.y_nsf, &s.layout, s.height, s.width)?;
        for (name, field) in [("calib", &s.y_calib), ("delta", &s.y_delta), ("plain", &s.y_plain), ("npf", &s.y_npf)] {
            if let Some(t) = field {
                export_heatmaps(dir, &format!("query{i}_{name}"), t, &s.layout, s.height, s.width)?;
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CsvRow<'a> {
    mode: &'a str,
    tap: &'a str,
    num_tasks: usize,
    shots: usize,
    miou_base: f64,
    miou_novel: f64,
    miou_all: f64,
    h_mean: f64,
    task_seed_digest: &'a str,
    config_hash: &'a str,
    master_seed: u64,
}

/// One row per report, values in `[0, 1]`, stamped with the run's provenance.
pub fn write_reports_csv(path: &Path, reports: &[MetricsReport], prov: &Provenance) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in reports {
        w.serialize(CsvRow {
            mode: &r.mode,
            tap: r.tap.map(FeatureTap::name).unwrap_or(""),
            num_tasks: r.num_tasks,
            shots: r.shots,
            miou_base: r.miou_base,
            miou_novel: r.miou_novel,
            miou_all: r.miou_all,
            h_mean: r.h_mean,
            task_seed_digest: &r.task_seed_digest,
            config_hash: &prov.config_hash,
            master_seed: prov.master_seed,
        })
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Long-format per-class IoUs: mode, tap, class id, group, IoU.
pub fn write_per_class_csv(path: &Path, reports: &[MetricsReport], split: &ClassSplit) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["mode", "tap", "class_id", "group", "iou"]).map_err(err)?;
    for r in reports {
        for (k, v) in &r.per_class_iou {
            let group = if split.novel_ids.contains(k) { "novel" } else if *k == 0 { "background" } else { "base" };
            let tap = r.tap.map(FeatureTap::name).unwrap_or("");
            w.write_record([r.mode.as_str(), tap, &k.to_string(), group, &v.to_string()]).map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fixed-width table with values ×100.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>8} {:>8}", "Method", "Base", "Novel", "mIoU", "H_mean");
    for r in reports {
        let name = match r.tap {
            Some(t) => format!("{} [{}]", r.mode, t.name()),
            None => r.mode.clone(),
        };
        let _ = writeln!(
            s,
            "{:<24} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            name,
            100.0 * r.miou_base,
            100.0 * r.miou_novel,
            100.0 * r.miou_all,
            100.0 * r.h_mean
        );
    }
    s
}

/// Reads rows written by [`write_reports_csv`] back as `(mode, tap, base, novel, all, h_mean)`.
pub fn read_reports_csv(path: &Path) -> Result<Vec<(String, String, f64, f64, f64, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        mode: String,
        tap: String,
        miou_base: f64,
        miou_novel: f64,
        miou_all: f64,
        h_mean: f64,
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize::<Row>()
        .map(|row| {
            let row = row.map_err(|e| Error::format(path, e.to_string()))?;
            Ok((row.mode, row.tap, row.miou_base, row.miou_novel, row.miou_all, row.h_mean))
        })
        .collect()
}

/// Default heatmap directory inside a run directory.
pub fn heatmap_dir(run: &Path) -> PathBuf {
    run.join("heatmaps")
}
