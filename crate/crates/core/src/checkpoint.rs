//! Parameter checkpoints.
//!
//! A checkpoint is a text header followed by raw little-endian `f64` data:
//!
//! ```text
//! PCNCKPT 1
//! meta <key> <value to end of line>
//! tensor <name> <dim> <dim> ...
//! end
//! <values of every tensor, in header order>
//! ```
//!
//! Values are widened to `f64` on save, so `f32` and `f64` models both
//! round-trip bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::backbone::{Backbone, BackboneConfig, FeatureTap};
use crate::classifiers::BaseClassifier;
use crate::data::Provenance;
use crate::error::{Error, Result};
use crate::fusion::{AttnScale, CalibConfig, CalibKind, Calibrator};
use crate::nn::Parameterized;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &str = "PCNCKPT 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar, M: Parameterized<T> + ?Sized>(model: &M) -> Self {
        let mut c = Self::default();
        c.extend(model);
        c
    }

    pub fn extend<T: Scalar, M: Parameterized<T> + ?Sized>(&mut self, model: &M) {
        self.tensors.extend(model.named_params().into_iter().map(|(n, t)| (n, t.cast())));
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn set_provenance(&mut self, p: &Provenance) {
        self.set_meta("config_hash", &p.config_hash);
        self.set_meta("master_seed", p.master_seed);
    }

    pub fn meta_str(&self, key: &str, path: &Path) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(path, format!("checkpoint lacks meta key '{key}'")))
    }

    fn meta_json<V: serde::de::DeserializeOwned>(&self, key: &str, path: &Path) -> Result<V> {
        serde_json::from_str(self.meta_str(key, path)?).map_err(|e| Error::format(path, format!("meta '{key}': {e}")))
    }

    pub fn provenance(&self, path: &Path) -> Result<Provenance> {
        Ok(Provenance {
            config_hash: self.meta_str("config_hash", path)?.to_string(),
            master_seed: self
                .meta_str("master_seed", path)?
                .parse()
                .map_err(|_| Error::format(path, "master_seed is not an integer"))?,
        })
    }

    /// Tensors cast to `T`, for [`Parameterized::load_named`].
    pub fn tensors_as<T: Scalar>(&self) -> Vec<(String, Tensor<T>)> {
        self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::from(MAGIC);
        head.push('\n');
        for (k, v) in &self.meta {
            head.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            head.push_str(&format!("tensor {name} {}\n", dims.join(" ")).replace(" \n", "\n"));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let n = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("unterminated header".into()))?;
            pos += n + 1;
            std::str::from_utf8(&rest[..n]).map_err(|_| bad("header is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic line)"));
        }
        let mut ck = Checkpoint::default();
        let mut shapes = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next()) {
                (Some("meta"), Some(k)) => {
                    ck.meta.insert(k.to_string(), parts.next().unwrap_or("").to_string());
                }
                (Some("tensor"), Some(name)) => {
                    let dims = parts
                        .next()
                        .unwrap_or("")
                        .split_whitespace()
                        .map(|d| d.parse::<usize>().map_err(|_| Error::format(path, format!("bad dimension '{d}' for {name}"))))
                        .collect::<Result<Vec<usize>>>()?;
                    shapes.push((name.to_string(), dims));
                }
                _ => return Err(Error::format(path, format!("unexpected header line '{line}'"))),
            }
        }
        let mut data = &bytes[pos..];
        let needed: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>() * 8).sum();
        if data.len() != needed {
            return Err(Error::format(path, format!("payload has {} bytes, header needs {needed}", data.len())));
        }
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let vals = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            data = &data[n * 8..];
            ck.tensors.push((name, Tensor::new(shape, vals)?));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Writes the trained backbone and base classifier.
pub fn save_base<T: Scalar>(path: &Path, backbone: &Backbone<T>, base: &BaseClassifier<T>, novel_ids: &[u8], prov: &Provenance) -> Result<()> {
    let mut ck = Checkpoint::from_model(backbone);
    ck.extend(base);
    ck.set_provenance(prov);
    ck.set_meta("kind", "base");
    ck.set_meta("backbone_config", serde_json::to_string(backbone.config()).expect("config serializes"));
    ck.set_meta("base_ids", serde_json::to_string(&base.ids).expect("ids serialize"));
    ck.set_meta("novel_ids", serde_json::to_string(novel_ids).expect("ids serialize"));
    ck.save(path)
}

/// A base checkpoint restored into frozen models.
#[derive(Clone, Debug)]
pub struct BaseModels<T> {
    pub backbone: Backbone<T>,
    pub base: BaseClassifier<T>,
    pub novel_ids: Vec<u8>,
    pub provenance: Provenance,
}

pub fn load_base<T: Scalar>(path: &Path) -> Result<BaseModels<T>> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.get("kind").map(String::as_str) != Some("base") {
        return Err(Error::format(path, "not a base-model checkpoint"));
    }
    let cfg: BackboneConfig = ck.meta_json("backbone_config", path)?;
    let base_ids: Vec<u8> = ck.meta_json("base_ids", path)?;
    let novel_ids: Vec<u8> = ck.meta_json("novel_ids", path)?;
    let mut backbone = Backbone::new(cfg, 0)?;
    let mut base = BaseClassifier::new(base_ids, backbone.feature_channels(), &mut stream_rng(0, Stream::BaseTrain, 0));
    let tensors = ck.tensors_as::<T>();
    backbone.load_named(&tensors)?;
    base.load_named(&tensors)?;
    backbone.freeze();
    base.freeze();
    Ok(BaseModels { backbone, base, novel_ids, provenance: ck.provenance(path)? })
}

/// Writes a trained calibrator with what is needed to rebuild it.
pub fn save_calibrator<T: Scalar>(path: &Path, cal: &Calibrator<T>, tap: FeatureTap, hw: usize, c: usize, cfg: &CalibConfig, prov: &Provenance) -> Result<()> {
    let mut ck = Checkpoint::from_model(cal);
    ck.set_provenance(prov);
    ck.set_meta("kind", "calibrator");
    ck.set_meta("calibrator", cal.kind().name());
    ck.set_meta("feature_tap", tap.name());
    ck.set_meta("pixels", hw);
    ck.set_meta("classes", c);
    ck.set_meta("dim", cfg.dim);
    ck.set_meta("scale", serde_json::to_string(&cfg.scale).expect("scale serializes"));
    ck.save(path)
}

pub fn load_calibrator<T: Scalar>(path: &Path) -> Result<(Calibrator<T>, FeatureTap, Provenance)> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.get("kind").map(String::as_str) != Some("calibrator") {
        return Err(Error::format(path, "not a calibrator checkpoint"));
    }
    let parse = |k: &str| -> Result<usize> { ck.meta_str(k, path)?.parse().map_err(|_| Error::format(path, format!("meta '{k}' is not an integer"))) };
    let kind: CalibKind = ck.meta_str("calibrator", path)?.parse()?;
    let tap: FeatureTap = ck.meta_str("feature_tap", path)?.parse()?;
    let scale: AttnScale = ck.meta_json("scale", path)?;
    let cfg = CalibConfig { dim: parse("dim")?, scale };
    let mut cal = Calibrator::new(kind, &cfg, parse("pixels")?, parse("classes")?, &mut stream_rng(0, Stream::CalibInit, 0))?;
    cal.load_named(&ck.tensors_as::<T>())?;
    cal.freeze();
    Ok((cal, tap, ck.provenance(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::snapshot;

    #[test]
    fn bytes_round_trip_exactly() {
        let mut ck = Checkpoint::default();
        ck.set_meta("note", "two words");
        ck.tensors.push(("a".into(), Tensor::new([2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0]).unwrap()));
        ck.tensors.push(("s".into(), Tensor::scalar(std::f64::consts::PI)));
        let p = Path::new("mem");
        let back = Checkpoint::from_bytes(&ck.to_bytes(), p).unwrap();
        assert_eq!(back.meta, ck.meta);
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&ck.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let mut ck = Checkpoint::default();
        ck.tensors.push(("a".into(), Tensor::zeros([3])));
        let bytes = ck.to_bytes();
        let r = Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("x.ckpt"));
        assert!(matches!(r, Err(Error::Format { .. })));
    }

    #[test]
    fn base_models_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bb = Backbone::<f64>::new(BackboneConfig::default(), 3).unwrap();
        let base = BaseClassifier::new(vec![3, 4, 5, 6, 7, 8], 32, &mut stream_rng(3, Stream::BaseTrain, 0));
        let prov = Provenance { config_hash: "h".into(), master_seed: 3 };
        let p = dir.path().join("base.ckpt");
        save_base(&p, &bb, &base, &[1, 2], &prov).unwrap();
        let back = load_base::<f64>(&p).unwrap();
        assert_eq!(snapshot(&back.backbone), snapshot(&bb));
        assert_eq!(snapshot(&back.base), snapshot(&base));
        assert_eq!(back.novel_ids, vec![1, 2]);
        assert_eq!(back.provenance, prov);
        assert!(back.backbone.is_frozen());
    }

    #[test]
    fn calibrator_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CalibConfig { dim: 4, scale: AttnScale::BeforeSoftmax };
        let cal = Calibrator::<f64>::new(CalibKind::SelfAttn, &cfg, 9, 5, &mut stream_rng(1, Stream::CalibInit, 0)).unwrap();
        let p = dir.path().join("c.ckpt");
        save_calibrator(&p, &cal, FeatureTap::Layer3, 9, 5, &cfg, &Provenance::default()).unwrap();
        let (back, tap, _) = load_calibrator::<f64>(&p).unwrap();
        assert_eq!(tap, FeatureTap::Layer3);
        assert_eq!(back.kind(), CalibKind::SelfAttn);
        assert_eq!(snapshot(&back), snapshot(&cal));
        assert!(matches!(load_base::<f64>(&p), Err(Error::Format { .. })));
    }
}
