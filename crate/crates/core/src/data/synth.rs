use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{Dataset, Mask, RgbImage, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

const PLACEMENT_RETRIES: usize = 500;

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Bar { vertical: bool },
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    kind: ShapeKind,
    x0: usize,
    y0: usize,
    size: usize,
}

impl Placed {
    fn extent(&self) -> (usize, usize) {
        match self.kind {
            ShapeKind::Bar { vertical: false } => (self.size, bar_thickness(self.size)),
            ShapeKind::Bar { vertical: true } => (bar_thickness(self.size), self.size),
            _ => (self.size, self.size),
        }
    }

    fn overlaps(&self, other: &Placed) -> bool {
        let (w1, h1) = self.extent();
        let (w2, h2) = other.extent();
        // one pixel of clearance between shapes
        self.x0 < other.x0 + w2 + 1 && other.x0 < self.x0 + w1 + 1 && self.y0 < other.y0 + h2 + 1 && other.y0 < self.y0 + h1 + 1
    }

    fn covers(&self, x: usize, y: usize) -> bool {
        let (w, h) = self.extent();
        if x < self.x0 || y < self.y0 || x >= self.x0 + w || y >= self.y0 + h {
            return false;
        }
        let (dx, dy) = ((x - self.x0) as f64, (y - self.y0) as f64);
        let s = self.size as f64;
        match self.kind {
            ShapeKind::Disc => {
                let r = s / 2.0;
                (dx + 0.5 - r).powi(2) + (dy + 0.5 - r).powi(2) <= r * r
            }
            ShapeKind::Triangle => {
                // apex at the top centre, base on the bottom row
                let half = (dy + 1.0) / 2.0;
                ((dx + 0.5) - s / 2.0).abs() <= half
            }
            ShapeKind::Square | ShapeKind::Bar { .. } => true,
        }
    }
}

fn bar_thickness(size: usize) -> usize {
    (size / 3).max(2)
}

/// Unit-intensity RGB color of a foreground class: evenly spaced hues at
/// fixed saturation and value.
pub fn class_color(class_id: u8, num_classes: usize) -> [f64; 3] {
    let hue = (class_id as f64 - 1.0) / num_classes as f64;
    hsv_to_rgb(hue, 0.85, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Stripe frequency (cycles per image) and orientation of a class texture.
fn class_texture(class_id: u8) -> (f64, f64) {
    let freq = 2.0 + (class_id % 3) as f64 * 1.5;
    let angle = (class_id as f64 * 37.0).to_radians();
    (freq, angle)
}

fn place_shapes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Placed>> {
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = false;
        for _ in 0..PLACEMENT_RETRIES {
            let size = rng.random_range(cfg.min_shape_size..=cfg.max_shape_size);
            let kind = match rng.random_range(0..4) {
                0 => ShapeKind::Disc,
                1 => ShapeKind::Square,
                2 => ShapeKind::Triangle,
                _ => ShapeKind::Bar { vertical: rng.random() },
            };
            let mut cand = Placed { kind, x0: 0, y0: 0, size };
            let (w, h) = cand.extent();
            cand.x0 = rng.random_range(0..=cfg.image_size - w);
            cand.y0 = rng.random_range(0..=cfg.image_size - h);
            if placed.iter().all(|p| !p.overlaps(&cand)) {
                placed.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Generation(format!(
                "could not place {count} shapes of size {}..={} in a {}px image",
                cfg.min_shape_size, cfg.max_shape_size, cfg.image_size
            )));
        }
    }
    Ok(placed)
}

fn render(cfg: &SynthConfig, class_id: u8, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let n = cfg.image_size;
    let shapes = place_shapes(cfg, rng)?;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let gray = rng.random_range(0.4..0.6);
    let (gx, gy) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let color = class_color(class_id, cfg.num_classes);
    let (freq, angle) = class_texture(class_id);
    let (ca, sa) = (angle.cos(), angle.sin());

    let mut rgb = vec![0u8; n * n * 3];
    let mut mask = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (x as f64 / n as f64 - 0.5, y as f64 / n as f64 - 0.5);
            let inside = shapes.iter().any(|s| s.covers(x, y));
            let base = if inside {
                mask[y * n + x] = class_id;
                let stripe = (std::f64::consts::TAU * freq * (u * ca + v * sa) + phase).sin();
                let gain = 1.0 + cfg.texture_amplitude * stripe;
                [color[0] * gain, color[1] * gain, color[2] * gain]
            } else {
                let g = gray + gx * u + gy * v;
                [g, g, g]
            };
            for c in 0..3 {
                let val = base[c] + if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                rgb[(y * n + x) * 3 + c] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Ok(Sample {
        image: RgbImage { width: n, height: n, data: rgb },
        mask: Mask { width: n, height: n, data: mask },
    })
}

/// Pure function of `(cfg, seed)`. Training images cover base classes only;
/// validation images cover every class. Each image draws from its own RNG
/// stream keyed by its global index.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let (base_ids, novel_ids) = cfg.split.resolve(cfg.num_classes)?;
    let mut plan: Vec<u8> = Vec::new();
    for &k in &base_ids {
        plan.extend(std::iter::repeat_n(k, cfg.train_images_per_class));
    }
    let n_train = plan.len();
    for k in 1..=cfg.num_classes as u8 {
        plan.extend(std::iter::repeat_n(k, cfg.val_images_per_class));
    }
    let samples: Vec<Sample> = plan
        .par_iter()
        .enumerate()
        .map(|(i, &k)| render(cfg, k, &mut stream_rng(seed, Stream::DataImage, i as u64)))
        .collect::<Result<_>>()?;
    let mut train = samples;
    let val = train.split_off(n_train);
    Ok(Dataset {
        config: cfg.clone(),
        seed,
        base_ids,
        novel_ids,
        train,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            train_images_per_class: 3,
            val_images_per_class: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_dataset(&small(), 11).unwrap();
        let b = generate_dataset(&small(), 11).unwrap();
        let c = generate_dataset(&small(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train[0], c.train[0]);
    }

    #[test]
    fn split_and_label_range_hold() {
        let cfg = small();
        let ds = generate_dataset(&cfg, 3).unwrap();
        assert_eq!(ds.train.len(), 6 * 3);
        assert_eq!(ds.val.len(), 8 * 2);
        ds.check_train_split().unwrap();
        for s in ds.train.iter().chain(&ds.val) {
            let classes = s.mask.classes();
            assert_eq!(classes.len(), 1, "one foreground class per image");
            assert!(classes.iter().all(|&k| (1..=8).contains(&k)));
        }
        for &k in &ds.novel_ids {
            assert_eq!(ds.images_with(super::super::Subset::Val, k).len(), 2);
        }
    }

    #[test]
    fn impossible_placement_is_reported() {
        let cfg = SynthConfig {
            image_size: 8,
            min_shapes: 3,
            max_shapes: 3,
            min_shape_size: 8,
            max_shape_size: 8,
            ..small()
        };
        assert!(matches!(generate_dataset(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn noiseless_classes_are_separable_from_background() {
        // Background pixels are gray (r = g = b); every class color has a
        // channel spread of at least s·v, so a linear functional of the
        // channel differences separates the two sets.
        for k in 1..=8u8 {
            let c = class_color(k, 8);
            let spread = c.iter().cloned().fold(f64::MIN, f64::max) - c.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread > 0.7);
        }
    }
}
