//! Score fusion and prediction calibration.
//!
//! Fusers turn base and novel logits into one score per class and pixel:
//! plain fusion (one softmax over raw logits), NPF (one softmax over logits
//! from L2-normalized class weights) and NSF (a softmax per classifier,
//! then a union of the two blocks). Calibrators add a learned offset to the
//! NSF scores.
//!
//! The cross-covariance calibrator treats every class-score row and every
//! feature channel as a token. With `y[c×hw]` and `f[m×hw]`:
//!
//! ```text
//! σ = Ω(y) · Γ(f)ᵀ                 c × m
//! v = softmax_m(σ) / √d · Λ(f)     c × d
//! ŷ_Δ = Δ(v)                       c × hw
//! ```
//!
//! All heads are affine maps shared across tokens, so the parameter count
//! depends only on `hw` and `d`.

use std::fmt;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::{BaseClassifier, NovelClassifier};
use crate::data::netpbm;
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::nn::{Parameterized, RowLinear};
use crate::scalar::Scalar;
use crate::tensor::kernels::softmax_axis;
use crate::tensor::{Tape, Tensor, Var};

/// Per-pixel scores of one image, rows ordered `[background, base, novel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreStack<T> {
    /// Class id of each row of the fused fields.
    pub layout: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub base_probs: Tensor<T>,
    pub novel_probs: Tensor<T>,
    pub y_nsf: Tensor<T>,
    /// Offset realized by calibration, `y_calib − y_nsf`.
    pub y_delta: Option<Tensor<T>>,
    pub y_calib: Option<Tensor<T>>,
    pub y_plain: Option<Tensor<T>>,
    pub y_npf: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreField {
    Nsf,
    Calib,
    Plain,
    Npf,
}

impl<T: Scalar> ScoreStack<T> {
    pub fn field(&self, which: ScoreField) -> Result<&Tensor<T>> {
        let f = match which {
            ScoreField::Nsf => Some(&self.y_nsf),
            ScoreField::Calib => self.y_calib.as_ref(),
            ScoreField::Plain => self.y_plain.as_ref(),
            ScoreField::Npf => self.y_npf.as_ref(),
        };
        f.ok_or_else(|| Error::contract(format!("score stack has no {which:?} field")))
    }

    pub fn num_classes(&self) -> usize {
        self.layout.len()
    }

    /// Stores a calibrated result and the realized offset.
    pub fn set_calibrated(&mut self, y_calib: Tensor<T>) -> Result<()> {
        if y_calib.shape() != self.y_nsf.shape() {
            return Err(Error::dim(format!("calibrated {:?} vs nsf {:?}", y_calib.shape(), self.y_nsf.shape())));
        }
        let delta = Tensor::new(
            y_calib.shape().to_vec(),
            y_calib.data().iter().zip(self.y_nsf.data()).map(|(&a, &b)| a - b).collect(),
        )?;
        self.y_delta = Some(delta);
        self.y_calib = Some(y_calib);
        Ok(())
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        ref s => Err(Error::dim(format!("{what} must be 2-d, got {s:?}"))),
    }
}

/// Flattens `[c×h×w]` to `[c×hw]`, returning `(tensor, h, w)`.
pub fn flatten_map<T: Scalar>(t: &Tensor<T>) -> Result<(Tensor<T>, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((t.detached().reshape([c, h * w])?, h, w)),
        ref s => Err(Error::dim(format!("score or feature map must be 3-d, got {s:?}"))),
    }
}

fn check_blocks<T: Scalar>(base: &Tensor<T>, novel: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (cb, hw) = dims2(base, "base logits")?;
    let (cn, hw2) = dims2(novel, "novel logits")?;
    if hw != hw2 {
        return Err(Error::dim(format!("base logits cover {hw} pixels, novel logits {hw2}")));
    }
    if cb < 1 || cn < 2 {
        return Err(Error::dim("base logits need a background row; novel logits need one class row"));
    }
    Ok((cb, cn, hw))
}

fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in logits".into()));
    }
    Tensor::new(x.shape().to_vec(), softmax_axis(x.data(), x.shape(), 0))
}

/// Stacks the base block with the novel block minus its background row.
fn union_rows<T: Scalar>(base: &Tensor<T>, novel: &Tensor<T>, hw: usize) -> Result<Tensor<T>> {
    let mut data = base.data().to_vec();
    data.extend_from_slice(&novel.data()[hw..]);
    let c = data.len() / hw;
    Tensor::new([c, hw], data)
}

fn layout_of(base_ids: &[u8], novel_ids: &[u8], cb: usize, cn: usize) -> Result<Vec<u8>> {
    if base_ids.len() + 1 != cb || novel_ids.len() + 1 != cn {
        return Err(Error::dim(format!(
            "{} base ids for {cb} base rows, {} novel ids for {cn} novel rows",
            base_ids.len(),
            novel_ids.len()
        )));
    }
    Ok(std::iter::once(0).chain(base_ids.iter().copied()).chain(novel_ids.iter().copied()).collect())
}

/// Normalized score fusion of `[(N_base+1)×hw]` and `[(N_novel+1)×hw]` logits.
/// The novel background row is dropped.
pub fn fuse_nsf<T: Scalar>(
    base_logits: &Tensor<T>,
    novel_logits: &Tensor<T>,
    base_ids: &[u8],
    novel_ids: &[u8],
    height: usize,
    width: usize,
) -> Result<ScoreStack<T>> {
    let (cb, cn, hw) = check_blocks(base_logits, novel_logits)?;
    if height * width != hw {
        return Err(Error::dim(format!("{height}x{width} grid for {hw} pixels")));
    }
    let layout = layout_of(base_ids, novel_ids, cb, cn)?;
    let base_probs = softmax_rows(base_logits)?;
    let novel_probs = softmax_rows(novel_logits)?;
    let y_nsf = union_rows(&base_probs, &novel_probs, hw)?;
    Ok(ScoreStack {
        layout,
        height,
        width,
        base_probs,
        novel_probs,
        y_nsf,
        y_delta: None,
        y_calib: None,
        y_plain: None,
        y_npf: None,
    })
}

/// NSF plus the plain fusion field: one softmax over the raw logit union.
pub fn fuse_plain<T: Scalar>(
    base_logits: &Tensor<T>,
    novel_logits: &Tensor<T>,
    base_ids: &[u8],
    novel_ids: &[u8],
    height: usize,
    width: usize,
) -> Result<ScoreStack<T>> {
    let mut stack = fuse_nsf(base_logits, novel_logits, base_ids, novel_ids, height, width)?;
    let hw = height * width;
    stack.y_plain = Some(softmax_rows(&union_rows(base_logits, novel_logits, hw)?)?);
    Ok(stack)
}

fn normalized_rows<T: Scalar>(weights: &Tensor<T>, rows: usize, cols: usize, who: &str) -> Result<Vec<T>> {
    let mut out = weights.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm > T::zero()) {
            return Err(Error::Normalization(format!("{who} class row {r} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// `W[rows×m] · x[m×hw] + b`.
fn affine_map<T: Scalar>(w: &[T], b: &[T], x: &Tensor<T>, rows: usize) -> Result<Tensor<T>> {
    let (m, hw) = dims2(x, "classifier input")?;
    if w.len() != rows * m {
        return Err(Error::dim(format!("weights for {} inputs, features have {m} channels", w.len() / rows.max(1))));
    }
    let mut out = vec![T::zero(); rows * hw];
    crate::tensor::kernels::gemm_acc(w, x.data(), &mut out, rows, m, hw);
    for r in 0..rows {
        out[r * hw..(r + 1) * hw].iter_mut().for_each(|v| *v += b[r]);
    }
    Tensor::new([rows, hw], out)
}

/// Normalized parameter fusion. Each class's final-layer weight vector is
/// L2-normalized over its input channels, biases are kept, and one softmax
/// runs over the union of logits. The NSF and plain fields are filled from
/// the unnormalized classifiers.
pub fn fuse_npf<T: Scalar>(base: &BaseClassifier<T>, novel: &NovelClassifier<T>, features: &Tensor<T>) -> Result<ScoreStack<T>> {
    let (f, h, w) = flatten_map(features)?;
    let (base_logits, _, _) = flatten_map(&base.predict_scores(features)?)?;
    let (novel_logits, _, _) = flatten_map(&novel.predict_scores(features)?)?;
    let mut stack = fuse_plain(&base_logits, &novel_logits, &base.ids, &novel.ids, h, w)?;

    let (cb, cn) = (base.num_outputs(), novel.num_outputs());
    let wb = normalized_rows(&base.head.weight, cb, base.head.in_channels(), "base")?;
    let wn = normalized_rows(&novel.head.weight, cn, novel.head.in_channels(), "novel")?;
    let lb = affine_map(&wb, base.head.bias.data(), &f, cb)?;
    let (hidden, _, _) = flatten_map(&novel.hidden(features)?)?;
    let ln = affine_map(&wn, novel.head.bias.data(), &hidden, cn)?;
    stack.y_npf = Some(softmax_rows(&union_rows(&lb, &ln, h * w)?)?);
    Ok(stack)
}

/// Per-pixel argmax of a fused field as class ids on the score grid. Ties
/// go to the lowest class id.
pub fn argmax_segment<T: Scalar>(stack: &ScoreStack<T>, field: ScoreField) -> Result<Mask> {
    let y = stack.field(field)?;
    let hw = stack.height * stack.width;
    let c = stack.layout.len();
    if y.shape() != [c, hw] {
        return Err(Error::dim(format!("field {:?} for layout of {c} classes over {hw} pixels", y.shape())));
    }
    let d = y.data();
    let data = (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                let (v, bv) = (d[k * hw + p], d[best * hw + p]);
                if v > bv || (v == bv && stack.layout[k] < stack.layout[best]) {
                    best = k;
                }
            }
            stack.layout[best]
        })
        .collect();
    Ok(Mask {
        width: stack.width,
        height: stack.height,
        data,
    })
}

/// Nearest-neighbour enlargement of a label map.
pub fn upsample_mask(mask: &Mask, factor: usize) -> Mask {
    let (w, h) = (mask.width * factor, mask.height * factor);
    let data = (0..w * h).map(|p| mask.data[(p / w / factor) * mask.width + (p % w) / factor]).collect();
    Mask { width: w, height: h, data }
}

/// Where the √d division of the attention weights happens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    #[default]
    AfterSoftmax,
    BeforeSoftmax,
}

/// Which rows the key and value heads read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeySource {
    /// Feature channels (cross-covariance attention).
    Features,
    /// Class-score rows (self-attention).
    Scores,
}

/// Attention calibrator with token-shared heads Ω, Γ, Λ, Δ.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibTransformer<T> {
    pub omega: RowLinear<T>,
    pub gamma: RowLinear<T>,
    pub lambda: RowLinear<T>,
    pub delta: RowLinear<T>,
    pub scale: AttnScale,
    pub keys: KeySource,
}

impl<T: Scalar> CalibTransformer<T> {
    /// Ω, Γ, Λ get He initialization; Δ starts at zero so the first
    /// calibrated output equals its input.
    pub fn new(hw: usize, d: usize, keys: KeySource, scale: AttnScale, rng: &mut ChaCha8Rng) -> Self {
        Self {
            omega: RowLinear::kaiming(hw, d, rng),
            gamma: RowLinear::kaiming(hw, d, rng),
            lambda: RowLinear::kaiming(hw, d, rng),
            delta: RowLinear::zeros(d, hw),
            scale,
            keys,
        }
    }

    pub fn dim(&self) -> usize {
        self.omega.output_dim()
    }

    pub fn pixels(&self) -> usize {
        self.omega.input_dim()
    }

    /// Attention logits `σ` (`c×m`, or `c×c` for self-attention).
    pub fn attention_logits(&self, tape: &mut Tape<T>, vars: &[Var], y: Var, f: Var) -> Result<(Var, Var)> {
        let hw = self.pixels();
        let yw = tape.shape(y)[1];
        let src = match self.keys {
            KeySource::Features => f,
            KeySource::Scores => y,
        };
        let fw = tape.shape(src)[1];
        if yw != hw || fw != hw {
            return Err(Error::dim(format!("calibrator heads take {hw} pixels, got scores of {yw} and keys of {fw}")));
        }
        let q = self.omega.forward(tape, &vars[0..2], y)?;
        let k = self.gamma.forward(tape, &vars[2..4], src)?;
        let kt = tape.transpose(k)?;
        Ok((tape.matmul(q, kt)?, src))
    }

    /// Offset `ŷ_Δ[c×hw]` for scores `y[c×hw]` and features `f[m×hw]`.
    pub fn offset(&self, tape: &mut Tape<T>, vars: &[Var], y: Var, f: Var) -> Result<Var> {
        let (sigma, src) = self.attention_logits(tape, vars, y, f)?;
        let inv_sqrt_d = T::lit(1.0 / (self.dim() as f64).sqrt());
        let attn = match self.scale {
            AttnScale::AfterSoftmax => {
                let a = tape.softmax(sigma, 1)?;
                tape.scale(a, inv_sqrt_d)
            }
            AttnScale::BeforeSoftmax => {
                let s = tape.scale(sigma, inv_sqrt_d);
                tape.softmax(s, 1)?
            }
        };
        let values = self.lambda.forward(tape, &vars[4..6], src)?;
        let v = tape.matmul(attn, values)?;
        self.delta.forward(tape, &vars[6..8], v)
    }

    pub fn push_named<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.omega.push_named("calib.omega", out);
        self.gamma.push_named("calib.gamma", out);
        self.lambda.push_named("calib.lambda", out);
        self.delta.push_named("calib.delta", out);
    }

    pub fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.omega.push_mut(out);
        self.gamma.push_mut(out);
        self.lambda.push_mut(out);
        self.delta.push_mut(out);
    }
}

/// One affine map on every pixel's class vector, over a fixed layout of
/// `c` slots.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCalibrator<T> {
    /// Acts on row vectors: `out = y · W + b`, `W[c×c]`.
    pub map: RowLinear<T>,
    pub residual: bool,
}

impl<T: Scalar> LinearCalibrator<T> {
    /// Zero map with the residual, identity map without it.
    pub fn new(c: usize, residual: bool) -> Self {
        let mut map = RowLinear::zeros(c, c);
        if !residual {
            for i in 0..c {
                map.weight.data_mut()[i * c + i] = T::one();
            }
        }
        Self { map, residual }
    }

    pub fn slots(&self) -> usize {
        self.map.input_dim()
    }

    /// Output for `y[c'×hw]` whose row `r` occupies slot `slots[r]`.
    /// Unused slots read zero.
    pub fn output(&self, tape: &mut Tape<T>, vars: &[Var], y: Var, slots: &[usize]) -> Result<Var> {
        let (rows, hw) = (tape.shape(y)[0], tape.shape(y)[1]);
        let c = self.slots();
        if slots.len() != rows || slots.iter().any(|&s| s >= c) {
            return Err(Error::dim(format!("{rows} score rows placed into {c} slots via {slots:?}")));
        }
        let identity = rows == c && slots.iter().enumerate().all(|(i, &s)| i == s);
        let padded = if identity {
            y
        } else {
            let zero = tape.constant(Tensor::zeros([1, hw]));
            let ext = tape.concat(&[y, zero], 0)?;
            let gather: Vec<usize> = (0..c).map(|s| slots.iter().position(|&x| x == s).unwrap_or(rows)).collect();
            tape.select_rows(ext, &gather)?
        };
        let yt = tape.transpose(padded)?;
        let z = self.map.forward(tape, vars, yt)?;
        let z = tape.transpose(z)?;
        if identity { Ok(z) } else { tape.select_rows(z, slots) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibKind {
    Pcn,
    SelfAttn,
    Linear,
    LinearNores,
}

impl CalibKind {
    pub fn name(self) -> &'static str {
        match self {
            CalibKind::Pcn => "pcn",
            CalibKind::SelfAttn => "selfattn",
            CalibKind::Linear => "linear",
            CalibKind::LinearNores => "linear_nores",
        }
    }
}

impl fmt::Display for CalibKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CalibKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [CalibKind::Pcn, CalibKind::SelfAttn, CalibKind::Linear, CalibKind::LinearNores]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown calibrator '{s}'")))
    }
}

/// Any trainable calibrator.
#[derive(Clone, Debug, PartialEq)]
pub enum Calibrator<T> {
    Attention(CalibTransformer<T>),
    Linear(LinearCalibrator<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibConfig {
    /// Head width `d`.
    pub dim: usize,
    pub scale: AttnScale,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self { dim: 16, scale: AttnScale::AfterSoftmax }
    }
}

impl<T: Scalar> Calibrator<T> {
    /// `hw` is the score grid size and `c` the test-time class count.
    pub fn new(kind: CalibKind, cfg: &CalibConfig, hw: usize, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.dim == 0 {
            return Err(Error::Config("calibrator dim must be positive".into()));
        }
        Ok(match kind {
            CalibKind::Pcn => Calibrator::Attention(CalibTransformer::new(hw, cfg.dim, KeySource::Features, cfg.scale, rng)),
            CalibKind::SelfAttn => Calibrator::Attention(CalibTransformer::new(hw, cfg.dim, KeySource::Scores, cfg.scale, rng)),
            CalibKind::Linear => Calibrator::Linear(LinearCalibrator::new(c, true)),
            CalibKind::LinearNores => Calibrator::Linear(LinearCalibrator::new(c, false)),
        })
    }

    pub fn kind(&self) -> CalibKind {
        match self {
            Calibrator::Attention(t) if t.keys == KeySource::Features => CalibKind::Pcn,
            Calibrator::Attention(_) => CalibKind::SelfAttn,
            Calibrator::Linear(l) if l.residual => CalibKind::Linear,
            Calibrator::Linear(_) => CalibKind::LinearNores,
        }
    }

    /// Records `y_calib` for scores `y[c×hw]` and features `f[m×hw]`.
    /// `slots` places score rows into a linear calibrator's layout and is
    /// ignored by attention calibrators.
    pub fn calibrated(&self, tape: &mut Tape<T>, vars: &[Var], y: Var, f: Var, slots: &[usize]) -> Result<Var> {
        match self {
            Calibrator::Attention(t) => {
                let d = t.offset(tape, vars, y, f)?;
                tape.add(y, d)
            }
            Calibrator::Linear(l) => {
                let z = l.output(tape, vars, y, slots)?;
                if l.residual { tape.add(y, z) } else { Ok(z) }
            }
        }
    }

    /// Fills the calibrated fields of `stack` from features `f[m×h×w]`.
    pub fn calibrate(&self, stack: &mut ScoreStack<T>, f: &Tensor<T>) -> Result<()> {
        let (f, _, _) = flatten_map(f)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.named_params().into_iter().map(|(_, p)| tape.constant(p.detached())).collect();
        let y = tape.constant(stack.y_nsf.detached());
        let fv = tape.constant(f);
        let slots: Vec<usize> = (0..stack.num_classes()).collect();
        let out = self.calibrated(&mut tape, &vars, y, fv, &slots)?;
        let out = tape.to_tensor(out);
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("calibrated scores are not finite".into()));
        }
        stack.set_calibrated(out)
    }
}

impl<T: Scalar> Parameterized<T> for Calibrator<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        match self {
            Calibrator::Attention(t) => t.push_named(&mut out),
            Calibrator::Linear(l) => l.map.push_named("calib.linear", &mut out),
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        match self {
            Calibrator::Attention(t) => t.push_mut(&mut out),
            Calibrator::Linear(l) => l.map.push_mut(&mut out),
        }
        out
    }
}

/// Cross-covariance `σ = Ω(y)·Γ(f)ᵀ` of `y[c×hw]` and `f[m×hw]`.
pub fn cross_covariance<T: Scalar>(y: &Tensor<T>, f: &Tensor<T>, t: &CalibTransformer<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut named = Vec::new();
    t.push_named(&mut named);
    let vars: Vec<Var> = named.into_iter().map(|(_, p)| tape.constant(p.detached())).collect();
    let yv = tape.constant(y.detached());
    let fv = tape.constant(f.detached());
    let (sigma, _) = t.attention_logits(&mut tape, &vars, yv, fv)?;
    Ok(tape.to_tensor(sigma))
}

/// Writes one 16-bit PGM per class row plus `<stem>.csv` with every raw
/// value. All planes share one linear intensity scale.
pub fn export_heatmaps<T: Scalar>(dir: &Path, stem: &str, scores: &Tensor<T>, layout: &[u8], height: usize, width: usize) -> Result<()> {
    let (c, hw) = dims2(scores, "heatmap scores")?;
    if c != layout.len() || hw != height * width {
        return Err(Error::dim(format!("heatmap of {:?} for {} classes on {height}x{width}", scores.shape(), layout.len())));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vals: Vec<f64> = scores.data().iter().map(|v| v.as_f64()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (k, &id) in layout.iter().enumerate() {
        let plane: Vec<u16> = vals[k * hw..(k + 1) * hw]
            .iter()
            .map(|v| ((v - lo) / span * 65535.0).round() as u16)
            .collect();
        let path = dir.join(format!("{stem}_class{id}.pgm"));
        std::fs::write(&path, netpbm::encode_pgm16(width, height, &plane)).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut write = |rec: [String; 4]| w.write_record(&rec).map_err(|e| Error::format(&path, e.to_string()));
    write(["class_id".into(), "row".into(), "col".into(), "value".into()])?;
    for (k, &id) in layout.iter().enumerate() {
        for p in 0..hw {
            write([id.to_string(), (p / width).to_string(), (p % width).to_string(), format!("{:e}", vals[k * hw + p])])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}
