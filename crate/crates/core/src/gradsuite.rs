//! Gradient checks over every tape op and over the calibration objective.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::classifiers::full_res_scores;
use crate::error::Result;
use crate::fusion::{AttnScale, CalibTransformer, KeySource};
use crate::nn::RowLinear;
use crate::rng::{stream_rng, Stream};
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::{Tape, Tensor, Var};

/// Step used for the central differences.
pub const EPS: f64 = 1e-5;

/// Shape of the tiny episode used for the composite check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompositeShape {
    pub classes: usize,
    pub channels: usize,
    /// Side of the square latent map, so `hw = side²`.
    pub side: usize,
    pub dim: usize,
}

impl Default for CompositeShape {
    fn default() -> Self {
        Self { classes: 4, channels: 6, side: 3, dim: 3 }
    }
}

/// Names of the cases [`run_case`] understands, in report order.
pub const CASES: &[&str] = &[
    "matmul",
    "conv2d",
    "conv2d_stride2",
    "softmax_rows",
    "softmax_cols",
    "cross_entropy",
    "cross_entropy_weighted",
    "relu",
    "add",
    "mul",
    "scale",
    "sum",
    "concat_axis0",
    "concat_axis1",
    "reshape",
    "transpose",
    "adaptive_avg_pool",
    "upsample_nearest",
    "add_row_bias",
    "select_rows",
    "calibration_after_softmax",
    "calibration_before_softmax",
    "self_attention",
];

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so `relu` stays differentiable under the probe.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(2..5)
}

/// Reduces `x` to a scalar through a fixed random weighting so every output
/// element carries a distinct gradient.
fn project(tape: &mut Tape<f64>, x: Var, seed_tensor: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(seed_tensor.clone());
    let p = tape.mul(x, r)?;
    Ok(tape.sum(p))
}

fn weights_for(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, rng)
}

/// Checks one named case with inputs drawn from `seed`.
pub fn run_case(name: &str, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = stream_rng(seed, Stream::GradCheck, 0);
    let rng = &mut rng;
    let (p, q, r) = (dim(rng), dim(rng), dim(rng));
    match name {
        "matmul" => {
            let w = weights_for(&[p, r], rng);
            grad_check(&[uniform(&[p, q], rng), uniform(&[q, r], rng)], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, &w)
            }, EPS, tolerance)
        }
        "conv2d" | "conv2d_stride2" => {
            let stride = if name == "conv2d" { 1 } else { 2 };
            let (cin, cout, side) = (p, q, r + 2);
            let x = uniform(&[cin, side, side], rng);
            let k = uniform(&[cout, cin, 3, 3], rng);
            let b = uniform(&[cout], rng);
            let o = (side + 2 - 3) / stride + 1;
            let w = weights_for(&[cout, o, o], rng);
            grad_check(&[x, k, b], |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, stride)?;
                project(t, y, &w)
            }, EPS, tolerance)
        }
        "softmax_rows" | "softmax_cols" => {
            let axis = usize::from(name == "softmax_rows");
            let w = weights_for(&[p, q], rng);
            grad_check(&[uniform(&[p, q], rng)], |t, v| {
                let y = t.softmax(v[0], axis)?;
                project(t, y, &w)
            }, EPS, tolerance)
        }
        "cross_entropy" | "cross_entropy_weighted" => {
            let (c, n) = (p, q + 3);
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let cw: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..3.0)).collect();
            let weighted = name == "cross_entropy_weighted";
            grad_check(&[uniform(&[c, n], rng).map(|v| 3.0 * v)], |t, v| {
                t.cross_entropy(v[0], &targets, weighted.then_some(&cw[..]), None)
            }, EPS, tolerance)
        }
        "relu" => {
            let w = weights_for(&[p, q], rng);
            grad_check(&[off_kink(&[p, q], rng)], |t, v| {
                let y = t.relu(v[0]);
                project(t, y, &w)
            }, EPS, tolerance)
        }
        "add" | "mul" => {
            let w = weights_for(&[p, q], rng);
            let is_add = name == "add";
            grad_check(&[uniform(&[p, q], rng), uniform(&[p, q], rng)], |t, v| {
                let y = if is_add { t.add(v[0], v[1])? } else { t.mul(v[0], v[1])? };
                project(t, y, &w)
            }, EPS, tolerance)
        }
        "scale" => {
            let w = weights_for(&[p, q], rng);
            let s = rng.random_range(-2.0..2.0);
            grad_check(&[uniform(&[p, q], rng)], |t, v| {
                let y = t.scale(v[0], s);
                project(t, y, &w)
            }, EPS, tolerance)
        }
        "sum" => grad_check(&[uniform(&[p, q, r], rng)], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        }, EPS, tolerance),
        "concat_axis0" => {
            let w = weights_for(&[p + r, q], rng);
            grad_check(&[uniform(&[p, q], rng), uniform(&[r, q], rng)], |t, v| {
                let y = t.concat(&[v[0], v[1]], 0)?;
                project(t, y, &w)
            }, EPS, tolerance)
        }
        "concat_axis1" => {
            let w = weights_for(&[p, q + r], rng);
            grad_check(&[uniform(&[p, q], rng), uniform(&[p, r], rng)], |t, v| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                project(t, y, &w)
            }, EPS, tolerance)
        }
        "reshape" => {
            let w = weights_for(&[q, p * r], rng);
            grad_check(&[uniform(&[p, q, r], rng)], |t, v| {
                let y = t.reshape(v[0], &[q, p * r])?;
                project(t, y, &w)
            }, EPS, tolerance)
        }
        "transpose" => {
            let w = weights_for(&[q, p], rng);
            grad_check(&[uniform(&[p, q], rng)], |t, v| {
                let y = t.transpose(v[0])?;
                project(t, y, &w)
            }, EPS, tolerance)
        }
        "adaptive_avg_pool" => {
            let side = r + 3;
            let bins = rng.random_range(1..=3);
            let w = weights_for(&[p, bins, bins], rng);
            grad_check(&[uniform(&[p, side, side], rng)], |t, v| {
                let y = t.adaptive_avg_pool(v[0], bins)?;
                project(t, y, &w)
            }, EPS, tolerance)
        }
        "upsample_nearest" => {
            let f = rng.random_range(2..=3);
            let w = weights_for(&[p, q * f, r * f], rng);
            grad_check(&[uniform(&[p, q, r], rng)], |t, v| {
                let y = t.upsample_nearest(v[0], f)?;
                project(t, y, &w)
            }, EPS, tolerance)
        }
        "add_row_bias" => {
            let w = weights_for(&[p, q], rng);
            grad_check(&[uniform(&[p, q], rng), uniform(&[q], rng)], |t, v| {
                let y = t.add_row_bias(v[0], v[1])?;
                project(t, y, &w)
            }, EPS, tolerance)
        }
        "select_rows" => {
            let rows: Vec<usize> = (0..p + 1).map(|_| rng.random_range(0..p)).collect();
            let w = weights_for(&[rows.len(), q], rng);
            grad_check(&[uniform(&[p, q], rng)], |t, v| {
                let y = t.select_rows(v[0], &rows)?;
                project(t, y, &w)
            }, EPS, tolerance)
        }
        "calibration_after_softmax" => composite(CompositeShape::default(), AttnScale::AfterSoftmax, KeySource::Features, rng, tolerance),
        "calibration_before_softmax" => composite(CompositeShape::default(), AttnScale::BeforeSoftmax, KeySource::Features, rng, tolerance),
        "self_attention" => composite(CompositeShape::default(), AttnScale::AfterSoftmax, KeySource::Scores, rng, tolerance),
        other => Err(crate::Error::Config(format!("unknown gradient-check case '{other}'"))),
    }
}

/// Cross-entropy of `y + offset(y, f)` against full-resolution targets, with
/// every calibrator parameter and both inputs under the probe.
fn composite(s: CompositeShape, scale: AttnScale, keys: KeySource, rng: &mut ChaCha8Rng, tolerance: f64) -> Result<GradCheckReport> {
    let hw = s.side * s.side;
    let mut cal = CalibTransformer::<f64>::new(hw, s.dim, keys, scale, rng);
    cal.delta = RowLinear::kaiming(s.dim, hw, rng);
    let mut inputs: Vec<Tensor<f64>> = Vec::new();
    for layer in [&cal.omega, &cal.gamma, &cal.lambda, &cal.delta] {
        inputs.push(layer.weight.clone());
        inputs.push(uniform(layer.bias.shape(), rng).map(|v| 0.1 * v));
    }
    let logits = uniform(&[s.classes, hw], rng).map(|v| 2.0 * v);
    let mut probs = Tensor::zeros([s.classes, hw]);
    for px in 0..hw {
        let col: Vec<f64> = (0..s.classes).map(|k| logits.data()[k * hw + px].exp()).collect();
        let z: f64 = col.iter().sum();
        for (k, e) in col.iter().enumerate() {
            probs.data_mut()[k * hw + px] = e / z;
        }
    }
    inputs.push(probs);
    inputs.push(uniform(&[s.channels, hw], rng));
    let n_targets = 4 * hw;
    let targets: Vec<usize> = (0..n_targets).map(|_| rng.random_range(0..s.classes)).collect();
    let (c, side) = (s.classes, s.side);
    grad_check(&inputs, |t, v| {
        let d = cal.offset(t, &v[..8], v[8], v[9])?;
        let y = t.add(v[8], d)?;
        let map = t.reshape(y, &[c, side, side])?;
        let full = full_res_scores(t, map, n_targets)?;
        t.cross_entropy(full, &targets, None, None)
    }, EPS, tolerance)
}

/// Runs every case over `seeds` and returns the worst report per case.
pub fn run_all(seeds: impl IntoIterator<Item = u64> + Clone, tolerance: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    CASES
        .iter()
        .map(|&name| {
            let mut worst = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0, tolerance };
            for seed in seeds.clone() {
                worst.merge(&run_case(name, seed, tolerance)?);
            }
            Ok((name, worst))
        })
        .collect()
}
