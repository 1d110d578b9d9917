use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::netpbm;
use super::{Dataset, Mask, RgbImage, Sample, Subset, SynthConfig};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Identity of the run that produced an artifact.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub file: String,
    pub subset: Subset,
    pub classes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub provenance: Provenance,
    pub num_classes: usize,
    pub base_ids: Vec<u8>,
    pub novel_ids: Vec<u8>,
    pub config: SynthConfig,
    pub images: Vec<ManifestImage>,
    /// Number of images containing each class, per subset.
    pub class_counts: BTreeMap<Subset, BTreeMap<u8, usize>>,
}

fn count_classes(samples: &[Sample]) -> BTreeMap<u8, usize> {
    let mut counts = BTreeMap::new();
    for s in samples {
        for k in s.mask.classes() {
            *counts.entry(k).or_insert(0) += 1;
        }
    }
    counts
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(dir: &Path, ds: &Dataset, provenance: &Provenance) -> Result<Manifest> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut images = Vec::with_capacity(ds.train.len() + ds.val.len());
    let tagged = ds.train.iter().map(|s| (Subset::Train, s)).chain(ds.val.iter().map(|s| (Subset::Val, s)));
    for (i, (subset, s)) in tagged.enumerate() {
        let stem = format!("{i:04}");
        write(
            &dir.join("images").join(format!("{stem}.ppm")),
            &netpbm::encode_ppm(s.image.width, s.image.height, &s.image.data),
        )?;
        write(
            &dir.join("masks").join(format!("{stem}.pgm")),
            &netpbm::encode_pgm8(s.mask.width, s.mask.height, &s.mask.data),
        )?;
        images.push(ManifestImage {
            file: stem,
            subset,
            classes: s.mask.classes(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: ds.seed,
        provenance: provenance.clone(),
        num_classes: ds.config.num_classes,
        base_ids: ds.base_ids.clone(),
        novel_ids: ds.novel_ids.clone(),
        config: ds.config.clone(),
        images,
        class_counts: BTreeMap::from([
            (Subset::Train, count_classes(&ds.train)),
            (Subset::Val, count_classes(&ds.val)),
        ]),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let mpath = dir.join("manifest.json");
    let manifest: Manifest =
        serde_json::from_slice(&read(&mpath)?).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(&mpath, format!("unsupported format version {}", manifest.format_version)));
    }
    let mut ds = Dataset {
        config: manifest.config.clone(),
        seed: manifest.seed,
        base_ids: manifest.base_ids.clone(),
        novel_ids: manifest.novel_ids.clone(),
        train: Vec::new(),
        val: Vec::new(),
    };
    for entry in &manifest.images {
        let ipath = dir.join("images").join(format!("{}.ppm", entry.file));
        let mpath_i = dir.join("masks").join(format!("{}.pgm", entry.file));
        let (w, h, rgb) = netpbm::decode_ppm(&read(&ipath)?, &ipath)?;
        let (mw, mh, ids) = netpbm::decode_pgm8(&read(&mpath_i)?, &mpath_i)?;
        if (w, h) != (mw, mh) {
            return Err(Error::format(&mpath_i, format!("mask is {mw}x{mh} but image is {w}x{h}")));
        }
        let sample = Sample {
            image: RgbImage { width: w, height: h, data: rgb },
            mask: Mask { width: mw, height: mh, data: ids },
        };
        if sample.mask.classes() != entry.classes {
            return Err(Error::format(&mpath_i, "mask classes disagree with the manifest"));
        }
        match entry.subset {
            Subset::Train => ds.train.push(sample),
            Subset::Val => ds.val.push(sample),
        }
    }
    Ok((ds, manifest))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// SHA-256 over every file in `dir`, keyed by relative path in sorted order.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let bytes = read(&dir.join(&rel))?;
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}
