//! Generalized few-shot segmentation with prediction calibration.
//!
//! The crate carries its own reverse-mode autodiff engine ([`tensor`]), a
//! small convolutional backbone, base and novel per-pixel classifiers, score
//! fusion and calibration, episodic meta-training, a synthetic dataset
//! generator and the evaluation harness. Everything is generic over the
//! floating-point type; the aliases below fix it to `f64` or `f32`.

pub mod backbone;
pub mod checkpoint;
pub mod classifiers;
pub mod data;
pub mod episodic;
pub mod fusion;
pub mod gradsuite;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Backbone64 = backbone::Backbone<f64>;
pub type Backbone32 = backbone::Backbone<f32>;
pub type BaseClassifier64 = classifiers::BaseClassifier<f64>;
pub type BaseClassifier32 = classifiers::BaseClassifier<f32>;
pub type NovelClassifier64 = classifiers::NovelClassifier<f64>;
pub type NovelClassifier32 = classifiers::NovelClassifier<f32>;
pub type Calibrator64 = fusion::Calibrator<f64>;
pub type Calibrator32 = fusion::Calibrator<f32>;
pub type ScoreStack64 = fusion::ScoreStack<f64>;
pub type ScoreStack32 = fusion::ScoreStack<f32>;
