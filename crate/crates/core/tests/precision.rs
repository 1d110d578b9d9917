use pcn::backbone::{Backbone, BackboneConfig};
use pcn::checkpoint::{load_base, save_base};
use pcn::classifiers::BaseClassifier;
use pcn::data::{generate_dataset, Provenance, SynthConfig};
use pcn::fusion::{flatten_map, fuse_nsf, CalibConfig, CalibKind, Calibrator};
use pcn::nn::Parameterized;
use pcn::rng::{stream_rng, Stream};
use pcn::{Backbone32, Backbone64, Tensor32, Tensor64};

fn rel_gap(a: &Tensor32, b: &Tensor64) -> f64 {
    let scale = b.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max) / scale
}

#[test]
fn single_precision_tracks_double_through_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    let cfg = BackboneConfig::default();
    let backbone = Backbone::<f64>::new(cfg.clone(), 3).unwrap();
    let base = BaseClassifier::<f64>::new(vec![3, 4, 5, 6, 7, 8], backbone.feature_channels(), &mut stream_rng(3, Stream::BaseTrain, 0));
    save_base(&path, &backbone, &base, &[1, 2], &Provenance { config_hash: "0".into(), master_seed: 3 }).unwrap();

    let m64 = load_base::<f64>(&path).unwrap();
    let m32 = load_base::<f32>(&path).unwrap();
    let (b64, b32): (&Backbone64, &Backbone32) = (&m64.backbone, &m32.backbone);
    assert_eq!(b64.num_params(), b32.num_params());

    let synth = SynthConfig { train_images_per_class: 1, val_images_per_class: 1, ..Default::default() };
    let ds = generate_dataset(&synth, 3).unwrap();
    let x64: Tensor64 = ds.train[0].image_tensor();
    let x32: Tensor32 = ds.train[0].image_tensor();
    let f64_ = b64.extract_features(&x64).unwrap();
    let f32_ = b32.extract_features(&x32).unwrap();
    assert!(rel_gap(&f32_, &f64_) < 1e-4);

    let logits64 = flatten_map(&m64.base.predict_scores(&f64_).unwrap()).unwrap();
    let logits32 = flatten_map(&m32.base.predict_scores(&f32_).unwrap()).unwrap();
    let (h, w) = (logits64.1, logits64.2);
    let novel64 = Tensor64::from_fn([3, h * w], |i| (i as f64 * 0.01).sin());
    let novel32: Tensor32 = novel64.cast();
    let mut s64 = fuse_nsf(&logits64.0, &novel64, &[3, 4, 5, 6, 7, 8], &[1, 2], h, w).unwrap();
    let mut s32 = fuse_nsf(&logits32.0, &novel32, &[3, 4, 5, 6, 7, 8], &[1, 2], h, w).unwrap();
    assert!(rel_gap(&s32.y_nsf, &s64.y_nsf) < 1e-4);

    let mut c64 = Calibrator::<f64>::new(CalibKind::Pcn, &CalibConfig::default(), h * w, 9, &mut stream_rng(3, Stream::CalibInit, 0)).unwrap();
    c64.params_mut().into_iter().for_each(|p| p.data_mut().iter_mut().for_each(|v| *v = (*v * 7.0 + 0.3).sin() * 0.1));
    let mut c32 = Calibrator::<f32>::new(CalibKind::Pcn, &CalibConfig::default(), h * w, 9, &mut stream_rng(3, Stream::CalibInit, 0)).unwrap();
    let named: Vec<_> = c64.named_params().into_iter().map(|(n, t)| (n, t.cast::<f32>())).collect();
    c32.load_named(&named).unwrap();
    c64.calibrate(&mut s64, &f64_).unwrap();
    c32.calibrate(&mut s32, &f32_).unwrap();
    let d64 = s64.y_delta.unwrap();
    assert!(d64.data().iter().any(|&v| v != 0.0));
    assert!(rel_gap(s32.y_delta.as_ref().unwrap(), &d64) < 1e-3);
}
