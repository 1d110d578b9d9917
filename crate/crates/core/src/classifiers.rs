//! Per-pixel base and novel classifiers and their training loops.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{Dataset, Mask};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, Parameterized};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Sgd, SgdConfig, Tape, Tensor, Var};

pub const BACKGROUND: u8 = 0;

/// Class bookkeeping for one run or one episode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base_ids: Vec<u8>,
    pub novel_ids: Vec<u8>,
    pub fake_novel_ids: Vec<u8>,
    pub remaining_base_ids: Vec<u8>,
}

impl ClassSplit {
    pub fn new(base_ids: Vec<u8>, novel_ids: Vec<u8>) -> Result<Self> {
        if base_ids.is_empty() || novel_ids.is_empty() {
            return Err(Error::Config("base and novel id lists must be non-empty".into()));
        }
        let all: Vec<u8> = base_ids.iter().chain(&novel_ids).copied().collect();
        if all.contains(&BACKGROUND) {
            return Err(Error::Config("class id 0 is reserved for background".into()));
        }
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != all.len() {
            return Err(Error::Config(format!("base {base_ids:?} and novel {novel_ids:?} overlap or repeat")));
        }
        Ok(Self {
            base_ids,
            novel_ids,
            fake_novel_ids: Vec::new(),
            remaining_base_ids: Vec::new(),
        })
    }

    /// Marks `fake` (a subset of the base ids) as fake-novel; the rest of
    /// the base ids become the remaining-base set.
    pub fn with_fake_novel(mut self, fake: Vec<u8>) -> Result<Self> {
        if fake.is_empty() || fake.len() >= self.base_ids.len() {
            return Err(Error::Config(format!(
                "need 1..{} fake-novel ids, got {}",
                self.base_ids.len(),
                fake.len()
            )));
        }
        if let Some(k) = fake.iter().find(|k| !self.base_ids.contains(k)) {
            return Err(Error::Config(format!("fake-novel id {k} is not a base id")));
        }
        self.remaining_base_ids = self.base_ids.iter().copied().filter(|k| !fake.contains(k)).collect();
        self.fake_novel_ids = fake;
        Ok(self)
    }

    pub fn n_base(&self) -> usize {
        self.base_ids.len()
    }

    pub fn n_novel(&self) -> usize {
        self.novel_ids.len()
    }

    /// Test-time score layout: background, base ids, novel ids.
    pub fn test_layout(&self) -> Vec<u8> {
        std::iter::once(BACKGROUND).chain(self.base_ids.iter().copied()).chain(self.novel_ids.iter().copied()).collect()
    }

    /// Episode score layout: background, remaining base ids, fake-novel ids.
    pub fn episode_layout(&self) -> Vec<u8> {
        std::iter::once(BACKGROUND)
            .chain(self.remaining_base_ids.iter().copied())
            .chain(self.fake_novel_ids.iter().copied())
            .collect()
    }
}

/// Maps mask ids to positions in `layout`. Ids missing from the layout are
/// a label error.
pub fn layout_targets(mask: &Mask, layout: &[u8]) -> Result<Vec<usize>> {
    let lut = lookup(layout);
    mask.data
        .iter()
        .map(|&v| lut[v as usize].ok_or_else(|| Error::Label(format!("mask id {v} not in {layout:?}"))))
        .collect()
}

/// Maps mask ids to positions in `layout`, sending ids outside it to
/// background.
pub fn relabel_targets(mask: &Mask, layout: &[u8]) -> Vec<usize> {
    let lut = lookup(layout);
    mask.data.iter().map(|&v| lut[v as usize].unwrap_or(0)).collect()
}

fn lookup(layout: &[u8]) -> [Option<usize>; 256] {
    let mut lut = [None; 256];
    for (i, &k) in layout.iter().enumerate() {
        lut[k as usize] = Some(i);
    }
    lut
}

/// Features of one image paired with per-pixel targets at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeled<T> {
    pub features: Tensor<T>,
    pub targets: Vec<usize>,
}

/// Upsampling factor from a `[c×h×w]` score map to `n_targets` pixels.
fn target_factor(h: usize, w: usize, n_targets: usize) -> Result<usize> {
    let f = ((n_targets / (h * w).max(1)) as f64).sqrt().round() as usize;
    if f == 0 || h * w * f * f != n_targets {
        return Err(Error::dim(format!("{n_targets} targets do not tile a {h}x{w} score map")));
    }
    Ok(f)
}

/// Logits `[c×h×w]` upsampled to target resolution and flattened to `[c×N]`.
pub fn full_res_scores<T: Scalar>(tape: &mut Tape<T>, logits: Var, n_targets: usize) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("score map must be 3-d, got {shape:?}")));
    }
    let f = target_factor(shape[1], shape[2], n_targets)?;
    let up = if f > 1 { tape.upsample_nearest(logits, f)? } else { logits };
    tape.reshape(up, &[shape[0], n_targets])
}

/// Inverse pixel-frequency class weights over the classes present in
/// `targets`, normalized to mean one and clipped to `[0.1, 10]`. Absent
/// classes get weight one.
pub fn support_class_weights<T: Scalar>(targets: &[usize], num_classes: usize) -> Vec<T> {
    let mut counts = vec![0usize; num_classes];
    for &t in targets {
        if t < num_classes {
            counts[t] += 1;
        }
    }
    let present: Vec<usize> = (0..num_classes).filter(|&k| counts[k] > 0).collect();
    let total = targets.len() as f64;
    let inv: Vec<f64> = present.iter().map(|&k| total / counts[k] as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len().max(1) as f64;
    let mut w = vec![T::one(); num_classes];
    for (&k, &v) in present.iter().zip(&inv) {
        w[k] = T::lit((v / mean).clamp(0.1, 10.0));
    }
    w
}

/// A single 1×1 convolution over the feature map. Output rows follow
/// `[background, ids...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseClassifier<T> {
    pub head: Conv2dLayer<T>,
    pub ids: Vec<u8>,
}

impl<T: Scalar> BaseClassifier<T> {
    pub fn new(ids: Vec<u8>, feature_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            head: Conv2dLayer::kaiming(ids.len() + 1, feature_channels, 1, 0, 1, rng),
            ids,
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.ids.len() + 1
    }

    pub fn layout(&self) -> Vec<u8> {
        std::iter::once(BACKGROUND).chain(self.ids.iter().copied()).collect()
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], features: Var) -> Result<Var> {
        self.head.forward(tape, vars, features)
    }

    /// Logits `[(N+1)×h×w]`.
    pub fn predict_scores(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        predict_with(self, features, |m, tape, vars, x| m.forward(tape, vars, x))
    }

    /// Output rows of `[background, ids...]`, the sub-classifier over a
    /// subset of the base ids.
    pub fn rows_for(&self, ids: &[u8]) -> Result<Vec<usize>> {
        let layout = self.layout();
        std::iter::once(&BACKGROUND)
            .chain(ids)
            .map(|k| {
                layout
                    .iter()
                    .position(|x| x == k)
                    .ok_or_else(|| Error::Label(format!("class {k} is not a base class")))
            })
            .collect()
    }

    /// Final-layer weight row of output `row`.
    pub fn weight_row(&self, row: usize) -> &[T] {
        let m = self.head.in_channels();
        &self.head.weight.data()[row * m..(row + 1) * m]
    }
}

impl<T: Scalar> Parameterized<T> for BaseClassifier<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.head.push_named("base.head", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.head.push_mut(&mut out);
        out
    }
}

/// 3×3 conv, ReLU, 1×1 conv. Output rows follow `[background, ids...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NovelClassifier<T> {
    pub conv: Conv2dLayer<T>,
    pub head: Conv2dLayer<T>,
    pub ids: Vec<u8>,
}

impl<T: Scalar> NovelClassifier<T> {
    pub fn new(ids: Vec<u8>, feature_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let m = feature_channels;
        Self {
            conv: Conv2dLayer::kaiming(m, m, 3, 1, 1, rng),
            head: Conv2dLayer::kaiming(ids.len() + 1, m, 1, 0, 1, rng),
            ids,
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.ids.len() + 1
    }

    pub fn layout(&self) -> Vec<u8> {
        std::iter::once(BACKGROUND).chain(self.ids.iter().copied()).collect()
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], features: Var) -> Result<Var> {
        let z = self.conv.forward(tape, &vars[..2], features)?;
        let z = tape.relu(z);
        self.head.forward(tape, &vars[2..4], z)
    }

    /// Hidden activations after the ReLU, the input of the final layer.
    pub fn hidden(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        predict_with(self, features, |m, tape, vars, x| {
            let z = m.conv.forward(tape, &vars[..2], x)?;
            Ok(tape.relu(z))
        })
    }

    pub fn predict_scores(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        predict_with(self, features, |m, tape, vars, x| m.forward(tape, vars, x))
    }

    pub fn weight_row(&self, row: usize) -> &[T] {
        let m = self.head.in_channels();
        &self.head.weight.data()[row * m..(row + 1) * m]
    }
}

impl<T: Scalar> Parameterized<T> for NovelClassifier<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.conv.push_named("novel.conv", &mut out);
        self.head.push_named("novel.head", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.conv.push_mut(&mut out);
        self.head.push_mut(&mut out);
        out
    }
}

fn predict_with<T: Scalar, M: Parameterized<T>>(
    model: &M,
    features: &Tensor<T>,
    f: impl Fn(&M, &mut Tape<T>, &[Var], Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = model.named_params().into_iter().map(|(_, p)| tape.constant(p.detached())).collect();
    let x = tape.constant(features.detached());
    let out = f(model, &mut tape, &vars, x)?;
    Ok(tape.to_tensor(out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
        }
    }
}

impl BaseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("base training needs epochs > 0 and batch_size > 0".into()));
        }
        SgdConfig::fixed(self.learning_rate, self.momentum).validate()
    }
}

#[derive(Clone, Debug)]
pub struct BaseTrainOutcome<T> {
    pub classifier: BaseClassifier<T>,
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
    /// Pixel accuracy over the training set after the last step.
    pub train_pixel_accuracy: f64,
}

/// Joint training of the backbone and the base classifier with momentum SGD
/// and cosine decay. Both are frozen on return.
pub fn train_base<T: Scalar>(
    dataset: &Dataset,
    backbone: &mut Backbone<T>,
    cfg: &BaseTrainConfig,
    seed: u64,
) -> Result<BaseTrainOutcome<T>> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Sampling("training subset is empty".into()));
    }
    dataset.check_train_split()?;
    let mut clf = BaseClassifier::new(
        dataset.base_ids.clone(),
        backbone.feature_channels(),
        &mut stream_rng(seed, Stream::BaseTrain, 0),
    );
    let layout = clf.layout();
    let targets: Vec<Vec<usize>> = dataset.train.iter().map(|s| layout_targets(&s.mask, &layout)).collect::<Result<_>>()?;
    let images: Vec<Tensor<T>> = dataset.train.iter().map(|s| s.image_tensor()).collect();

    backbone.unfreeze();
    clf.unfreeze();
    let steps_per_epoch = images.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut opt_bb = Sgd::new(SgdConfig::cosine(cfg.learning_rate, cfg.momentum, total))?;
    let mut opt_clf = Sgd::new(SgdConfig::cosine(cfg.learning_rate, cfg.momentum, total))?;
    let mut losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(seed, Stream::BaseTrain, 1 + epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            let per_image: Vec<(f64, Vec<Vec<T>>)> = batch
                .par_iter()
                .map(|&i| image_grads(backbone, &clf, &images[i], &targets[i]))
                .collect::<Result<_>>()?;
            let scale = T::lit(1.0 / batch.len() as f64);
            let mut loss = 0.0;
            for (l, grads) in &per_image {
                loss += l / batch.len() as f64;
                let mut params = backbone.params_mut();
                params.extend(clf.params_mut());
                for (p, g) in params.into_iter().zip(grads) {
                    let scaled: Vec<T> = g.iter().map(|&v| v * scale).collect();
                    p.accumulate_grad(&scaled)?;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("base training loss became {loss} at step {step}")));
            }
            losses.push(loss);
            backbone.sgd_step(&mut opt_bb, step)?;
            clf.sgd_step(&mut opt_clf, step)?;
            step += 1;
        }
    }
    backbone.freeze();
    clf.freeze();

    let correct: usize = images
        .par_iter()
        .zip(&targets)
        .map(|(x, t)| -> Result<usize> {
            let logits = clf.predict_scores(&backbone.extract_all(x)?.fused)?;
            let pred = upsampled_argmax(&logits, t.len())?;
            Ok(pred.iter().zip(t).filter(|(a, b)| a == b).count())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    let n_pix: usize = targets.iter().map(Vec::len).sum();
    Ok(BaseTrainOutcome {
        classifier: clf,
        losses,
        train_pixel_accuracy: correct as f64 / n_pix as f64,
    })
}

fn image_grads<T: Scalar>(
    backbone: &Backbone<T>,
    clf: &BaseClassifier<T>,
    image: &Tensor<T>,
    targets: &[usize],
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let mut vars = backbone.bind(&mut tape);
    let n_bb = vars.len();
    vars.extend(clf.bind(&mut tape));
    let x = tape.constant(image.detached());
    let taps = backbone.forward(&mut tape, &vars[..n_bb], x)?;
    let logits = clf.forward(&mut tape, &vars[n_bb..], taps.fused)?;
    let scores = full_res_scores(&mut tape, logits, targets.len())?;
    let loss = tape.cross_entropy(scores, targets, None, None)?;
    let grads = tape.backward(loss)?;
    let per_param = vars
        .iter()
        .map(|&v| grads.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); tape.value(v).len()]))
        .collect();
    Ok((tape.scalar_value(loss).as_f64(), per_param))
}

/// Per-pixel argmax of `[c×h×w]` scores after nearest upsampling to
/// `n_targets` pixels. Ties go to the lowest row.
pub fn upsampled_argmax<T: Scalar>(scores: &Tensor<T>, n_targets: usize) -> Result<Vec<usize>> {
    let s = scores.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("score map must be 3-d, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let f = target_factor(h, w, n_targets)?;
    let ow = w * f;
    let d = scores.data();
    Ok((0..n_targets)
        .map(|p| {
            let (y, x) = (p / ow / f, p % ow / f);
            let mut best = 0;
            for k in 1..c {
                if d[(k * h + y) * w + x] > d[(best * h + y) * w + x] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NovelTrainConfig {
    pub iters: usize,
    /// Fixed step size; plain SGD unless `momentum` is set.
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for NovelTrainConfig {
    fn default() -> Self {
        Self {
            iters: 50,
            learning_rate: 0.1,
            momentum: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NovelTrainOutcome<T> {
    pub classifier: NovelClassifier<T>,
    /// Support loss at each iteration, before that iteration's update.
    pub losses: Vec<f64>,
}

impl<T> NovelTrainOutcome<T> {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Fits a freshly initialized novel classifier on frozen support features
/// with full-batch, fixed-rate SGD and class-weighted cross-entropy.
/// `support` targets index `[background, ids...]`.
pub fn train_novel<T: Scalar>(
    support: &[Labeled<T>],
    ids: &[u8],
    cfg: &NovelTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NovelTrainOutcome<T>> {
    let first = support.first().ok_or_else(|| Error::contract("novel classifier needs a non-empty support set"))?;
    SgdConfig::fixed(cfg.learning_rate, cfg.momentum).validate()?;
    let m = first.features.shape()[0];
    let mut clf = NovelClassifier::new(ids.to_vec(), m, rng);
    let c = clf.num_outputs();
    let all_targets: Vec<usize> = support.iter().flat_map(|s| s.targets.iter().copied()).collect();
    if let Some(&t) = all_targets.iter().find(|&&t| t >= c) {
        return Err(Error::Label(format!("support target {t} outside {c} classes")));
    }
    let weights = support_class_weights::<T>(&all_targets, c);
    let mut opt = Sgd::new(SgdConfig::fixed(cfg.learning_rate, cfg.momentum))?;
    let mut losses = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let mut tape = Tape::new();
        let vars = clf.bind(&mut tape);
        let mut cols = Vec::with_capacity(support.len());
        for s in support {
            let x = tape.constant(s.features.detached());
            let logits = clf.forward(&mut tape, &vars, x)?;
            cols.push(full_res_scores(&mut tape, logits, s.targets.len())?);
        }
        let scores = if cols.len() == 1 { cols[0] } else { tape.concat(&cols, 1)? };
        let loss = tape.cross_entropy(scores, &all_targets, Some(&weights), None)?;
        let value = tape.scalar_value(loss).as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("novel classifier loss became {value} at iteration {it}")));
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        clf.absorb(&grads, &vars)?;
        clf.sgd_step(&mut opt, it)?;
    }
    clf.freeze();
    Ok(NovelTrainOutcome { classifier: clf, losses })
}

/// Support loss of a trained classifier without updating it.
pub fn support_loss<T: Scalar>(clf: &NovelClassifier<T>, support: &[Labeled<T>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = clf.named_params().into_iter().map(|(_, p)| tape.constant(p.detached())).collect();
    let mut cols = Vec::new();
    let mut targets = Vec::new();
    for s in support {
        let x = tape.constant(s.features.detached());
        let logits = clf.forward(&mut tape, &vars, x)?;
        cols.push(full_res_scores(&mut tape, logits, s.targets.len())?);
        targets.extend_from_slice(&s.targets);
    }
    let scores = tape.concat(&cols, 1)?;
    let weights = support_class_weights::<T>(&targets, clf.num_outputs());
    let loss = tape.cross_entropy(scores, &targets, Some(&weights), None)?;
    Ok(tape.scalar_value(loss).as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::snapshot;

    fn rng() -> ChaCha8Rng {
        stream_rng(9, Stream::NovelInit, 0)
    }

    #[test]
    fn split_partitions() {
        let s = ClassSplit::new(vec![3, 4, 5], vec![1, 2]).unwrap().with_fake_novel(vec![4]).unwrap();
        assert_eq!(s.remaining_base_ids, vec![3, 5]);
        assert_eq!(s.episode_layout(), vec![0, 3, 5, 4]);
        assert_eq!(s.test_layout(), vec![0, 3, 4, 5, 1, 2]);
        assert!(ClassSplit::new(vec![1, 2], vec![2]).is_err());
        assert!(ClassSplit::new(vec![1, 2], vec![3]).unwrap().with_fake_novel(vec![3]).is_err());
    }

    #[test]
    fn targets_map_through_layout() {
        let mask = Mask { width: 2, height: 2, data: vec![0, 5, 3, 7] };
        assert_eq!(relabel_targets(&mask, &[0, 3, 5]), vec![0, 2, 1, 0]);
        assert!(matches!(layout_targets(&mask, &[0, 3, 5]), Err(Error::Label(_))));
    }

    #[test]
    fn class_weights_are_mean_one_over_present() {
        // counts: 6 background, 2 of class 1, none of class 2
        let t = [0, 0, 0, 0, 0, 0, 1, 1];
        let w: Vec<f64> = support_class_weights(&t, 3);
        // inverse frequencies 8/6 and 8/2, mean 8/3
        assert!((w[0] - 0.5).abs() < 1e-12);
        assert!((w[1] - 1.5).abs() < 1e-12);
        assert_eq!(w[2], 1.0);
        let skew: Vec<usize> = std::iter::repeat_n(0, 10_000).chain([1]).collect();
        let w: Vec<f64> = support_class_weights(&skew, 2);
        assert!(w.iter().all(|&v| (0.1..=10.0).contains(&v)));
    }

    #[test]
    fn zero_features_zero_bias_give_zero_logits() {
        let clf = BaseClassifier::<f64>::new(vec![1, 2, 3], 4, &mut rng());
        let out = clf.predict_scores(&Tensor::zeros([4, 3, 3])).unwrap();
        assert_eq!(out.shape(), &[4, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(clf.predict_scores(&Tensor::zeros([5, 3, 3])).is_err());
    }

    #[test]
    fn sub_classifier_is_row_selection() {
        let clf = BaseClassifier::<f64>::new(vec![3, 4, 5, 6], 4, &mut rng());
        let f = Tensor::from_fn([4, 2, 2], |i| (i as f64 * 0.7).sin());
        let full = clf.predict_scores(&f).unwrap();
        let rows = clf.rows_for(&[5, 3]).unwrap();
        assert_eq!(rows, vec![0, 3, 1]);
        let mut tape = Tape::new();
        let v = tape.constant(full.clone());
        let sel = tape.select_rows(v, &rows).unwrap();
        let sel = tape.to_tensor(sel);
        for (r, &src) in rows.iter().enumerate() {
            assert_eq!(&sel.data()[r * 4..r * 4 + 4], &full.data()[src * 4..src * 4 + 4]);
        }
    }

    #[test]
    fn upsampled_argmax_breaks_ties_low() {
        let s = Tensor::new([3, 1, 2], vec![0.5, 0.1, 0.5, 0.9, 0.2, 0.9]).unwrap();
        assert_eq!(upsampled_argmax(&s, 2).unwrap(), vec![0, 1]);
        assert_eq!(upsampled_argmax(&s, 8).unwrap(), vec![0, 0, 1, 1, 0, 0, 1, 1]);
    }

    fn blob_support(shift: f64) -> Labeled<f64> {
        // two channels; channel 0 is high on the left half where the class lives
        let (h, w) = (4, 4);
        let features = Tensor::from_fn([2, h, w], |i| {
            let (c, x) = (i / (h * w), i % w);
            if c == 0 { if x < 2 { 1.0 + shift } else { -1.0 } } else { 0.3 }
        });
        let targets = (0..h * w).map(|p| usize::from(p % w < 2)).collect();
        Labeled { features, targets }
    }

    #[test]
    fn novel_training_fits_separable_support() {
        let support = vec![blob_support(0.0)];
        let out = train_novel(&support, &[7], &NovelTrainConfig::default(), &mut rng()).unwrap();
        assert_eq!(out.losses.len(), 50);
        assert!(out.final_loss() < out.losses[0]);
        let pred = upsampled_argmax(&out.classifier.predict_scores(&support[0].features).unwrap(), 16).unwrap();
        let acc = pred.iter().zip(&support[0].targets).filter(|(a, b)| a == b).count() as f64 / 16.0;
        assert!(acc >= 0.9, "{acc}");
    }

    #[test]
    fn zero_rate_keeps_initialization() {
        let support = vec![blob_support(0.0)];
        let cfg = NovelTrainConfig { learning_rate: 0.0, ..NovelTrainConfig::default() };
        let trained = train_novel(&support, &[7], &cfg, &mut rng()).unwrap().classifier;
        let fresh = NovelClassifier::<f64>::new(vec![7], 2, &mut rng());
        assert_eq!(snapshot(&trained), snapshot(&fresh));
    }

    #[test]
    fn empty_support_is_a_contract_error() {
        let r = train_novel::<f64>(&[], &[1], &NovelTrainConfig::default(), &mut rng());
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
