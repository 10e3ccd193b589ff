//! Seeded generator for a scale-varying, cluttered texture classification set.
//!
//! Every image holds exactly one square texture patch whose pattern encodes
//! the class. All patterns are symmetric under horizontal flips, so flip
//! augmentation never changes a label. Colours, period, phase, position and
//! side length are random. The background is a noisy flat colour with solid
//! distractor blobs that carry no class information.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::pnm::quantize;
use super::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub image_side: usize,
    /// object side as a fraction of the image side, `[min, max]`
    pub scale_range: [f64; 2],
    /// mean number of distractor blobs per image
    pub clutter_density: f64,
    /// per-pixel Gaussian noise standard deviation
    pub noise_std: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            image_side: 64,
            scale_range: [0.12, 0.5],
            clutter_density: 6.0,
            noise_std: 0.08,
            train_per_class: 250,
            val_per_class: 50,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(2..=TEXTURES.len()).contains(&self.classes) {
            return Err(Error::Config(format!(
                "synthetic set supports 2..={} classes, got {}",
                TEXTURES.len(),
                self.classes
            )));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("scale range [{lo}, {hi}] must lie in (0, 1] with min <= max")));
        }
        if self.image_side < 8 {
            return Err(Error::Config(format!("image side {} too small", self.image_side)));
        }
        if !(self.clutter_density >= 0.0 && self.clutter_density.is_finite()) {
            return Err(Error::Config("clutter density must be finite and >= 0".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Pixel box of the class-defining patch, inclusive corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectBox {
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
}

impl ObjectBox {
    pub fn area_fraction(&self, image_side: usize) -> f64 {
        (self.side * self.side) as f64 / (image_side * image_side) as f64
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSplit {
    pub data: Dataset,
    pub boxes: Vec<ObjectBox>,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: SyntheticSplit,
    pub val: SyntheticSplit,
}

pub const TEXTURES: [&str; 6] = ["vertical_stripes", "horizontal_stripes", "checkerboard", "diamonds", "rings", "dots"];

pub fn class_names(classes: usize) -> Vec<String> {
    TEXTURES[..classes].iter().map(|s| s.to_string()).collect()
}

/// Texture intensity in `[0, 1]` at patch-local offset `(u, v)` from the
/// patch centre, for angular frequency `f` and phase `p`.
fn texture(class: usize, u: f64, v: f64, f: f64, p: f64) -> f64 {
    let t = match class {
        0 => (u * f + p).sin(),
        1 => (v * f + p).sin(),
        2 => (u * f + p).sin() * (v * f + p).sin(),
        3 => ((u + v) * f / 2f64.sqrt()).sin() * ((u - v) * f / 2f64.sqrt()).sin(),
        4 => ((u * u + v * v).sqrt() * f + p).sin(),
        _ => {
            // dot lattice: bright where both cosines peak
            let c = (u * f).cos() * 0.5 + (v * f + p).cos() * 0.5;
            2.0 * c.max(0.0) - 1.0
        }
    };
    0.5 + 0.5 * t
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// A dark and a light colour, so gratings keep strong luminance contrast.
fn contrasting_pair(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    let dark = [0; 3].map(|_| rng.random_range(0.0..0.3));
    let light = [0; 3].map(|_| rng.random_range(0.7..1.0));
    (dark, light)
}

/// Texture period range in pixels.
const PERIOD: (f64, f64) = (5.0, 8.0);

fn render(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, ObjectBox) {
    let n = spec.image_side;
    let mut img = vec![0.0f64; n * n * 3];
    let bg = random_colour(rng);
    for px in img.chunks_exact_mut(3) {
        px.copy_from_slice(&bg);
    }

    // distractors: solid discs and rectangles
    let count = if spec.clutter_density > 0.0 {
        Poisson::new(spec.clutter_density).unwrap().sample(rng) as usize
    } else {
        0
    };
    for _ in 0..count {
        let colour = random_colour(rng);
        let size = rng.random_range(n / 10..=n / 4).max(2);
        let cx = rng.random_range(0..n) as f64;
        let cy = rng.random_range(0..n) as f64;
        let disc = rng.random_bool(0.5);
        let half = size as f64 / 2.0;
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if disc {
                    dx * dx + dy * dy <= half * half
                } else {
                    dx.abs() <= half && dy.abs() <= half * 0.6
                };
                if inside {
                    img[(y * n + x) * 3..(y * n + x + 1) * 3].copy_from_slice(&colour);
                }
            }
        }
    }

    // the class-defining texture patch
    let [lo, hi] = spec.scale_range;
    let frac = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let side = ((frac * n as f64).round() as usize).clamp(2, n);
    let x0 = rng.random_range(0..=n - side);
    let y0 = rng.random_range(0..=n - side);
    let freq = 2.0 * PI / rng.random_range(PERIOD.0..PERIOD.1);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (ca, cb) = contrasting_pair(rng);
    let mid = (side as f64 - 1.0) / 2.0;
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            let t = texture(class, (x - x0) as f64 - mid, (y - y0) as f64 - mid, freq, phase);
            for ch in 0..3 {
                img[(y * n + x) * 3 + ch] = ca[ch] * t + cb[ch] * (1.0 - t);
            }
        }
    }

    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).unwrap();
        for v in &mut img {
            *v += noise.sample(rng);
        }
    }
    (img.into_iter().map(quantize).collect(), ObjectBox { x0, y0, side })
}

/// One split's 8-bit images, labels and object boxes. Labels cycle through
/// classes so every class gets exactly `per_class` samples.
pub(crate) fn render_split(spec: &SyntheticSpec, per_class: usize, stream: u64) -> (Vec<Vec<u8>>, Vec<usize>, Vec<ObjectBox>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let total = per_class * spec.classes;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut boxes = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % spec.classes;
        let (img, b) = render(spec, class, &mut rng);
        images.push(img);
        labels.push(class);
        boxes.push(b);
    }
    (images, labels, boxes)
}

pub(crate) const TRAIN_STREAM: u64 = 1;
pub(crate) const VAL_STREAM: u64 = 2;

fn to_split(spec: &SyntheticSpec, raw: (Vec<Vec<u8>>, Vec<usize>, Vec<ObjectBox>)) -> SyntheticSplit {
    let n = spec.image_side;
    let (images, labels, boxes) = raw;
    let images = images
        .into_iter()
        .map(|bytes| Tensor::new(vec![n, n, 3], bytes.iter().map(|&b| f64::from(b) / 255.0).collect()).unwrap())
        .collect();
    SyntheticSplit {
        data: Dataset {
            images,
            labels,
            class_names: class_names(spec.classes),
        },
        boxes,
    }
}

/// The dataset [`super::generate_synthetic`] writes, built in memory.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    Ok(SyntheticData {
        train: to_split(spec, render_split(spec, spec.train_per_class, TRAIN_STREAM)),
        val: to_split(spec, render_split(spec, spec.val_per_class, VAL_STREAM)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            train_per_class: 10,
            val_per_class: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn counts_and_labels() {
        let d = synthesize(&small()).unwrap();
        assert_eq!(d.train.data.len(), 40);
        assert_eq!(d.val.data.len(), 20);
        for c in 0..4 {
            assert_eq!(d.train.data.labels.iter().filter(|&&l| l == c).count(), 10);
        }
    }

    #[test]
    fn fixed_scale_area() {
        let spec = SyntheticSpec {
            scale_range: [0.5, 0.5],
            ..small()
        };
        let d = synthesize(&spec).unwrap();
        for b in d.train.boxes.iter().chain(&d.val.boxes) {
            let a = b.area_fraction(64);
            assert!((0.2..=0.3).contains(&a), "{a}");
        }
    }

    #[test]
    fn scales_stay_in_range() {
        let d = synthesize(&small()).unwrap();
        for b in &d.train.boxes {
            assert!(b.side >= 7 && b.side <= 32, "{b:?}");
            assert!(b.x0 + b.side <= 64 && b.y0 + b.side <= 64);
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = synthesize(&small()).unwrap();
        let b = synthesize(&small()).unwrap();
        assert_eq!(a.train.data.images, b.train.data.images);
        let hash = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let train: HashSet<_> = a.train.data.images.iter().map(hash).collect();
        assert!(a.val.data.images.iter().all(|t| !train.contains(&hash(t))));
        let other = synthesize(&SyntheticSpec { seed: 9, ..small() }).unwrap();
        assert_ne!(other.train.data.images, a.train.data.images);
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticSpec { classes: 1, ..small() },
            SyntheticSpec { scale_range: [0.0, 0.5], ..small() },
            SyntheticSpec { scale_range: [0.6, 0.5], ..small() },
            SyntheticSpec { scale_range: [0.5, 1.5], ..small() },
        ] {
            assert!(synthesize(&spec).is_err());
        }
    }
}

