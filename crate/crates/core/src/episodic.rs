//! Episodic meta-training of calibrators.
//!
//! Each episode picks fake-novel classes among the base classes, fits a
//! fresh novel classifier on a few support images of them, fuses its scores
//! with the matching rows of the frozen base classifier on query images and
//! takes one SGD step on the calibrator against the query masks. The novel
//! classifier is treated as fixed when the calibrator is updated.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureTap, FeatureTaps};
use crate::classifiers::{full_res_scores, relabel_targets, train_novel, BaseClassifier, ClassSplit, Labeled, NovelTrainConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::{flatten_map, fuse_nsf, CalibConfig, CalibKind, Calibrator};
use crate::nn::Parameterized;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Sgd, SgdConfig, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaTrainConfig {
    /// Calibrator updates.
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub n_fake_novel: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub episodes_per_step: usize,
    pub inner: NovelTrainConfig,
    pub calib: CalibConfig,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 1e-2,
            momentum: 0.9,
            n_fake_novel: 1,
            shots: 1,
            queries_per_class: 1,
            episodes_per_step: 1,
            inner: NovelTrainConfig::default(),
            calib: CalibConfig::default(),
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self, n_base: usize) -> Result<()> {
        if self.iterations == 0 || self.episodes_per_step == 0 {
            return Err(Error::Config("iterations and episodes_per_step must be positive".into()));
        }
        if self.n_fake_novel == 0 || self.n_fake_novel >= n_base {
            return Err(Error::Config(format!("n_fake_novel {} must be in 1..{n_base}", self.n_fake_novel)));
        }
        if self.shots == 0 || self.queries_per_class == 0 {
            return Err(Error::Config("shots and queries_per_class must be positive".into()));
        }
        SgdConfig::cosine(self.learning_rate, self.momentum, self.iterations).validate()?;
        SgdConfig::fixed(self.inner.learning_rate, self.inner.momentum).validate()
    }

    pub fn total_episodes(&self) -> usize {
        self.iterations * self.episodes_per_step
    }
}

/// One image of an episode with per-pixel targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeItem {
    /// Index into the sampled subset.
    pub image: usize,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub index: u64,
    pub split: ClassSplit,
    pub shots: usize,
    pub queries_per_class: usize,
    /// Targets index `[background, fake-novel ids...]`.
    pub support: Vec<EpisodeItem>,
    /// Targets index the episode layout `[background, remaining base..., fake novel...]`.
    pub query: Vec<EpisodeItem>,
}

fn pick(pool: &[usize], used: &mut Vec<usize>, n: usize, rng: &mut ChaCha8Rng, what: &str) -> Result<Vec<usize>> {
    let free: Vec<usize> = pool.iter().copied().filter(|i| !used.contains(i)).collect();
    if free.len() < n {
        return Err(Error::Sampling(format!("{what}: need {n} images, {} available", free.len())));
    }
    let chosen: Vec<usize> = free.choose_multiple(rng, n).copied().collect();
    used.extend_from_slice(&chosen);
    Ok(chosen)
}

/// Draws fake-novel classes, a K-shot support of them and queries of the
/// fake-novel and remaining base classes. Support images contain no
/// remaining-base pixels; support and query images are disjoint.
pub fn sample_episode(
    samples: &[Sample],
    split: &ClassSplit,
    cfg: &MetaTrainConfig,
    index: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let mut base = split.base_ids.clone();
    base.shuffle(rng);
    let mut fake = base[..cfg.n_fake_novel].to_vec();
    fake.sort_unstable();
    let split = split.clone().with_fake_novel(fake)?;
    let containing = |k: u8| -> Vec<usize> { (0..samples.len()).filter(|&i| samples[i].mask.contains(k)).collect() };
    let support_layout: Vec<u8> = std::iter::once(0).chain(split.fake_novel_ids.iter().copied()).collect();
    let episode_layout = split.episode_layout();

    let mut used = Vec::new();
    let mut support_idx = Vec::new();
    let mut query_idx = Vec::new();
    for &k in &split.fake_novel_ids {
        let pool: Vec<usize> = containing(k)
            .into_iter()
            .filter(|&i| samples[i].mask.classes().iter().all(|c| split.fake_novel_ids.contains(c)))
            .collect();
        support_idx.extend(pick(&pool, &mut used, cfg.shots, rng, &format!("support of class {k}"))?);
    }
    for &k in &split.fake_novel_ids {
        query_idx.extend(pick(&containing(k), &mut used, cfg.queries_per_class, rng, &format!("queries of class {k}"))?);
    }
    for _ in 0..cfg.n_fake_novel * cfg.queries_per_class {
        let k = *split.remaining_base_ids.choose(rng).expect("remaining base ids are non-empty");
        query_idx.extend(pick(&containing(k), &mut used, 1, rng, &format!("queries of class {k}"))?);
    }
    Ok(Episode {
        index,
        shots: cfg.shots,
        queries_per_class: cfg.queries_per_class,
        support: support_idx
            .into_iter()
            .map(|i| EpisodeItem { image: i, targets: relabel_targets(&samples[i].mask, &support_layout) })
            .collect(),
        query: query_idx
            .into_iter()
            .map(|i| EpisodeItem { image: i, targets: relabel_targets(&samples[i].mask, &episode_layout) })
            .collect(),
        split,
    })
}

/// Frozen features and base logits of every image of a subset.
#[derive(Clone, Debug)]
pub struct FeatureBank<T> {
    pub taps: Vec<FeatureTaps<Tensor<T>>>,
    /// Full base-classifier logits `[(N_base+1)×h×w]`.
    pub base_logits: Vec<Tensor<T>>,
}

impl<T: Scalar> FeatureBank<T> {
    pub fn build(backbone: &Backbone<T>, base: &BaseClassifier<T>, samples: &[Sample]) -> Result<Self> {
        let rows: Vec<(FeatureTaps<Tensor<T>>, Tensor<T>)> = samples
            .par_iter()
            .map(|s| {
                let taps = backbone.extract_all(&s.image_tensor())?;
                let logits = base.predict_scores(&taps.fused)?;
                Ok((taps, logits))
            })
            .collect::<Result<_>>()?;
        let (taps, base_logits) = rows.into_iter().unzip();
        Ok(Self { taps, base_logits })
    }

    /// Flattened base logits of image `i`, keeping only `rows`.
    pub fn base_logits_rows(&self, i: usize, rows: &[usize]) -> Result<(Tensor<T>, usize, usize)> {
        let (full, h, w) = flatten_map(&self.base_logits[i])?;
        let hw = h * w;
        let sel: Vec<T> = rows.iter().flat_map(|&r| full.data()[r * hw..(r + 1) * hw].iter().copied()).collect();
        Ok((Tensor::new([rows.len(), hw], sel)?, h, w))
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

/// Query scores of an episode, ready for calibrator updates.
#[derive(Clone, Debug)]
pub struct PreparedEpisode<T> {
    pub episode: Episode,
    pub inner_final_loss: f64,
    /// NSF scores `[c×hw]` per query, rows in the episode layout.
    pub y_nsf: Vec<Tensor<T>>,
}

/// Fits the fake-novel classifier and fuses query scores. Only reads
/// frozen state, so episodes can be prepared concurrently.
pub fn prepare_episode<T: Scalar>(
    ep: Episode,
    bank: &FeatureBank<T>,
    base: &BaseClassifier<T>,
    inner: &NovelTrainConfig,
    seed: u64,
) -> Result<PreparedEpisode<T>> {
    let support: Vec<Labeled<T>> = ep
        .support
        .iter()
        .map(|s| Labeled { features: bank.taps[s.image].fused.clone(), targets: s.targets.clone() })
        .collect();
    let trained = train_novel(&support, &ep.split.fake_novel_ids, inner, &mut stream_rng(seed, Stream::NovelInit, ep.index))?;
    let rows = base.rows_for(&ep.split.remaining_base_ids)?;
    let y_nsf = ep
        .query
        .iter()
        .map(|q| {
            let (base_logits, h, w) = bank.base_logits_rows(q.image, &rows)?;
            let (novel_logits, _, _) = flatten_map(&trained.classifier.predict_scores(&bank.taps[q.image].fused)?)?;
            Ok(fuse_nsf(&base_logits, &novel_logits, &ep.split.remaining_base_ids, &ep.split.fake_novel_ids, h, w)?.y_nsf)
        })
        .collect::<Result<_>>()?;
    Ok(PreparedEpisode { inner_final_loss: trained.final_loss(), episode: ep, y_nsf })
}

/// Slot of each episode-layout row in the test layout
/// `[background, base..., novel...]`: remaining base ids keep their base
/// slot and fake-novel ids take the novel slots in order.
pub fn linear_slots(split: &ClassSplit) -> Result<Vec<usize>> {
    if split.fake_novel_ids.len() > split.novel_ids.len() {
        return Err(Error::Config(format!(
            "{} fake-novel classes do not fit {} novel slots",
            split.fake_novel_ids.len(),
            split.novel_ids.len()
        )));
    }
    let mut slots = vec![0];
    for k in &split.remaining_base_ids {
        slots.push(1 + split.base_ids.iter().position(|b| b == k).ok_or_else(|| Error::Label(format!("{k} is not a base id")))?);
    }
    slots.extend((0..split.fake_novel_ids.len()).map(|j| 1 + split.base_ids.len() + j));
    Ok(slots)
}

/// Calibration loss on prepared episodes: one softmax over each pixel's
/// calibrated class vector, cross-entropy against the query masks.
/// Returns the loss value, after applying gradients to `calibrator`'s buffers.
pub fn calibration_loss<T: Scalar>(
    calibrator: &mut Calibrator<T>,
    tap: FeatureTap,
    episodes: &[&PreparedEpisode<T>],
    bank: &FeatureBank<T>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = calibrator.bind(&mut tape);
    let mut cols = Vec::new();
    let mut targets = Vec::new();
    for ep in episodes {
        let slots = linear_slots(&ep.episode.split)?;
        for (q, y) in ep.episode.query.iter().zip(&ep.y_nsf) {
            let (f, h, w) = flatten_map(&bank.taps[q.image].tap(tap))?;
            let c = y.shape()[0];
            let yv = tape.constant(y.clone());
            let fv = tape.constant(f);
            let out = calibrator.calibrated(&mut tape, &vars, yv, fv, &slots)?;
            let map = tape.reshape(out, &[c, h, w])?;
            cols.push(full_res_scores(&mut tape, map, q.targets.len())?);
            targets.extend_from_slice(&q.targets);
        }
    }
    let scores = if cols.len() == 1 { cols[0] } else { tape.concat(&cols, 1)? };
    let loss = tape.cross_entropy(scores, &targets, None, None)?;
    let value = tape.scalar_value(loss).as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("calibration loss became {value}")));
    }
    let grads = tape.backward(loss)?;
    calibrator.absorb(&grads, &vars)?;
    Ok(value)
}

/// One row of the meta-training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub episode: usize,
    /// Semicolon-separated fake-novel ids of the step's episodes.
    pub fake_novel_ids: String,
    pub inner_final_loss: f64,
    pub meta_loss: f64,
    pub lr: f64,
}

/// A calibrator being meta-trained, with its optimizer and log.
#[derive(Clone, Debug)]
pub struct MetaSlot<T> {
    pub tap: FeatureTap,
    pub calibrator: Calibrator<T>,
    pub optimizer: Sgd<T>,
    pub log: Vec<LogRow>,
}

impl<T: Scalar> MetaSlot<T> {
    pub fn new(kind: CalibKind, tap: FeatureTap, cfg: &MetaTrainConfig, hw: usize, c: usize, seed: u64) -> Result<Self> {
        let calibrator = Calibrator::new(kind, &cfg.calib, hw, c, &mut stream_rng(seed, Stream::CalibInit, 0))?;
        Ok(Self {
            tap,
            calibrator,
            optimizer: Sgd::new(SgdConfig::cosine(cfg.learning_rate, cfg.momentum, cfg.iterations))?,
            log: Vec::with_capacity(cfg.iterations),
        })
    }

    pub fn kind(&self) -> CalibKind {
        self.calibrator.kind()
    }
}

/// Frozen models an episode reads.
#[derive(Clone, Copy, Debug)]
pub struct FrozenModels<'a, T> {
    pub backbone: &'a Backbone<T>,
    pub base: &'a BaseClassifier<T>,
}

impl<T: Scalar> FrozenModels<'_, T> {
    pub fn check(&self) -> Result<()> {
        if !self.backbone.is_frozen() || !self.base.is_frozen() {
            return Err(Error::contract("backbone and base classifier must be frozen before meta-training"));
        }
        Ok(())
    }
}

/// Updates every slot once on the given prepared episodes and logs a row.
pub fn run_step<T: Scalar>(
    step: usize,
    episodes: &[&PreparedEpisode<T>],
    models: FrozenModels<'_, T>,
    bank: &FeatureBank<T>,
    slots: &mut [MetaSlot<T>],
) -> Result<()> {
    models.check()?;
    let fake_novel_ids = episodes
        .iter()
        .map(|e| e.episode.split.fake_novel_ids.iter().map(u8::to_string).collect::<Vec<_>>().join("+"))
        .collect::<Vec<_>>()
        .join(";");
    let inner = episodes.iter().map(|e| e.inner_final_loss).sum::<f64>() / episodes.len() as f64;
    for slot in slots.iter_mut() {
        let loss = calibration_loss(&mut slot.calibrator, slot.tap, episodes, bank)?;
        let lr = slot.calibrator.sgd_step(&mut slot.optimizer, step)?;
        slot.log.push(LogRow {
            episode: step,
            fake_novel_ids: fake_novel_ids.clone(),
            inner_final_loss: inner,
            meta_loss: loss,
            lr,
        });
    }
    Ok(())
}

/// Samples, prepares and trains on a single episode.
pub fn run_episode<T: Scalar>(
    ep: Episode,
    models: FrozenModels<'_, T>,
    bank: &FeatureBank<T>,
    slots: &mut [MetaSlot<T>],
    cfg: &MetaTrainConfig,
    step: usize,
    seed: u64,
) -> Result<PreparedEpisode<T>> {
    models.check()?;
    let prepared = prepare_episode(ep, bank, models.base, &cfg.inner, seed)?;
    run_step(step, &[&prepared], models, bank, slots)?;
    Ok(prepared)
}

/// Episodes prepared ahead of the sequential calibrator updates.
const PREPARE_CHUNK: usize = 16;

/// Meta-trains one calibrator per `(kind, tap)` on a shared episode stream.
/// Episode `i` draws from its own RNG streams, so the result does not depend
/// on how many threads prepare episodes.
pub fn meta_train<T: Scalar>(
    samples: &[Sample],
    split: &ClassSplit,
    models: FrozenModels<'_, T>,
    cfg: &MetaTrainConfig,
    variants: &[(CalibKind, FeatureTap)],
    seed: u64,
) -> Result<Vec<MetaSlot<T>>> {
    models.check()?;
    cfg.validate(split.n_base())?;
    if variants.is_empty() {
        return Err(Error::Config("no calibrator variants to train".into()));
    }
    let bank = FeatureBank::build(models.backbone, models.base, samples)?;
    let latent = models.backbone.config().latent_pixels();
    let c = split.test_layout().len();
    let mut slots: Vec<MetaSlot<T>> = variants
        .iter()
        .map(|&(kind, tap)| MetaSlot::new(kind, tap, cfg, latent, c, seed))
        .collect::<Result<_>>()?;
    let total = cfg.total_episodes();
    let mut next = 0;
    while next < total {
        let end = (next + PREPARE_CHUNK * cfg.episodes_per_step).min(total);
        let prepared: Vec<PreparedEpisode<T>> = (next..end)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(seed, Stream::Episode, i as u64);
                let ep = sample_episode(samples, split, cfg, i as u64, &mut rng)?;
                prepare_episode(ep, &bank, models.base, &cfg.inner, seed)
            })
            .collect::<Result<_>>()?;
        for group in prepared.chunks(cfg.episodes_per_step) {
            let step = next / cfg.episodes_per_step;
            let refs: Vec<&PreparedEpisode<T>> = group.iter().collect();
            run_step(step, &refs, models, &bank, &mut slots)?;
            next += group.len();
        }
    }
    Ok(slots)
}

/// Seed of episode `i`, for reports.
pub fn episode_seed(seed: u64, i: u64) -> u64 {
    derive_seed(seed, Stream::Episode, i)
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::format(path, e.to_string()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthConfig};

    fn data() -> (Vec<Sample>, ClassSplit) {
        let cfg = SynthConfig { train_images_per_class: 4, val_images_per_class: 1, ..SynthConfig::default() };
        let ds = generate_dataset(&cfg, 2).unwrap();
        let split = ClassSplit::new(ds.base_ids.clone(), ds.novel_ids.clone()).unwrap();
        (ds.train, split)
    }

    #[test]
    fn episodes_are_deterministic_and_well_formed() {
        let (samples, split) = data();
        let cfg = MetaTrainConfig::default();
        for i in 0..50u64 {
            let a = sample_episode(&samples, &split, &cfg, i, &mut stream_rng(1, Stream::Episode, i)).unwrap();
            let b = sample_episode(&samples, &split, &cfg, i, &mut stream_rng(1, Stream::Episode, i)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.support.len(), cfg.n_fake_novel * cfg.shots);
            assert_eq!(a.query.len(), 2 * cfg.n_fake_novel * cfg.queries_per_class);
            let s = &a.split;
            assert!(s.fake_novel_ids.iter().all(|k| !s.remaining_base_ids.contains(k)));
            assert_eq!(s.fake_novel_ids.len() + s.remaining_base_ids.len(), s.base_ids.len());
            for sup in &a.support {
                assert!(a.query.iter().all(|q| q.image != sup.image));
                assert!(sup.targets.iter().all(|&t| t <= s.fake_novel_ids.len()));
            }
        }
    }

    #[test]
    fn starved_classes_are_a_sampling_error() {
        let (samples, split) = data();
        let cfg = MetaTrainConfig { shots: 4, ..MetaTrainConfig::default() };
        let r = sample_episode(&samples, &split, &cfg, 0, &mut stream_rng(0, Stream::Episode, 0));
        assert!(matches!(r, Err(Error::Sampling(_))));
    }

    #[test]
    fn linear_slots_follow_test_layout() {
        let s = ClassSplit::new(vec![3, 4, 5, 6], vec![1, 2]).unwrap().with_fake_novel(vec![5]).unwrap();
        // episode layout [0, 3, 4, 6, 5]; test layout [0, 3, 4, 5, 6, 1, 2]
        assert_eq!(linear_slots(&s).unwrap(), vec![0, 1, 2, 4, 5]);
    }

    #[test]
    fn log_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![LogRow { episode: 0, fake_novel_ids: "3".into(), inner_final_loss: 0.25, meta_loss: 1.5, lr: 0.01 }];
        let p = dir.path().join("log.csv");
        write_log(&p, &rows).unwrap();
        assert_eq!(read_log(&p).unwrap(), rows);
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("episode,fake_novel_ids,inner_final_loss,meta_loss,lr"));
    }
}
