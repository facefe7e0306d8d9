//! In-memory grayscale segmentation datasets and the synthetic scene
//! generator used for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::LabelMap;
use crate::tensor::{Scalar, Tensor};

/// One 8-bit grayscale image and its class-id mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub name: String,
    pub image: Vec<u8>,
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.height * self.width;
        for s in &self.samples {
            if s.image.len() != p || s.mask.len() != p {
                return Err(Error::Format(format!(
                    "sample {} does not match extent {}x{}",
                    s.name, self.height, self.width
                )));
            }
            if let Some(v) = s.mask.iter().find(|&&v| v as usize >= self.num_classes) {
                return Err(Error::Format(format!(
                    "sample {} has class id {v} >= {}",
                    s.name, self.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Images `[N, 1, H, W]` scaled to `[0, 1]` and labels for `indices`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, LabelMap) {
        let pairs: Vec<(&[u8], &[u8])> = indices
            .iter()
            .map(|&i| (self.samples[i].image.as_slice(), self.samples[i].mask.as_slice()))
            .collect();
        self.stack(&pairs)
    }

    pub(crate) fn stack<T: Scalar>(&self, pairs: &[(&[u8], &[u8])]) -> (Tensor<T>, LabelMap) {
        let n = pairs.len();
        let scale = T::from_f64(1.0 / 255.0);
        let mut images = Vec::with_capacity(n * self.height * self.width);
        let mut masks = Vec::with_capacity(images.capacity());
        for (img, mask) in pairs {
            images.extend(img.iter().map(|&v| T::from_usize(v as usize) * scale));
            masks.extend_from_slice(mask);
        }
        (
            Tensor::new(&[n, 1, self.height, self.width], images).expect("batch shape"),
            LabelMap::new(n, self.height, self.width, masks).expect("label shape"),
        )
    }
}

/// Parameters of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Shapes drawn per foreground class, inclusive range.
    pub shapes_per_class: (usize, usize),
    /// Shape half-extent in pixels, inclusive range.
    pub radius: (usize, usize),
    pub background_level: f64,
    /// Standard deviation of the additive pixel noise (0..255 scale).
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_classes: 3,
            shapes_per_class: (1, 2),
            radius: (3, 7),
            background_level: 50.0,
            noise_std: 12.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::InvalidArgument("num_classes must be in 2..=256".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("extent must be positive".into()));
        }
        if self.shapes_per_class.0 > self.shapes_per_class.1 || self.radius.0 == 0 || self.radius.0 > self.radius.1 {
            return Err(Error::InvalidArgument("invalid shape count or radius range".into()));
        }
        Ok(())
    }

    /// Mean intensity of class `c` (class 0 is the background).
    pub fn class_level(&self, c: usize) -> f64 {
        if c == 0 {
            return self.background_level;
        }
        let span = 240.0 - self.background_level;
        self.background_level + span * c as f64 / (self.num_classes - 1) as f64
    }
}

fn sample_stream(seed: u64, split: &str, index: usize) -> Xoshiro256StarStar {
    let tag = split.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    Xoshiro256StarStar::seed_from_u64(seed ^ tag ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Render one scene: a noisy background with ellipses (odd classes) and
/// rectangles (even classes) of class-specific brightness. Later classes
/// paint over earlier ones; the mask records the visible class exactly.
pub fn render_scene(cfg: &SynthConfig, rng: &mut impl Rng) -> (Vec<u8>, Vec<u8>) {
    let (h, w) = (cfg.height, cfg.width);
    let mut mask = vec![0u8; h * w];
    for c in 1..cfg.num_classes {
        let count = rng.gen_range(cfg.shapes_per_class.0..=cfg.shapes_per_class.1);
        for _ in 0..count {
            let cy = rng.gen_range(0..h) as f64 + 0.5;
            let cx = rng.gen_range(0..w) as f64 + 0.5;
            let ry = rng.gen_range(cfg.radius.0..=cfg.radius.1) as f64;
            let rx = rng.gen_range(cfg.radius.0..=cfg.radius.1) as f64;
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                    let inside = if c % 2 == 1 {
                        dy * dy + dx * dx <= 1.0
                    } else {
                        dy.abs() <= 1.0 && dx.abs() <= 1.0
                    };
                    if inside {
                        mask[y * w + x] = c as u8;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite noise std");
    let image = mask
        .iter()
        .map(|&c| (cfg.class_level(c as usize) + noise.sample(rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    (image, mask)
}

/// Deterministic synthetic split: sample `i` depends only on `(seed, split, i)`.
pub fn synthesize(cfg: &SynthConfig, split: &str, count: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..count)
        .map(|i| {
            let mut rng = sample_stream(seed, split, i);
            let (image, mask) = render_scene(cfg, &mut rng);
            Sample {
                name: format!("{split}_{i:05}"),
                image,
                mask,
            }
        })
        .collect();
    Ok(Dataset {
        height: cfg.height,
        width: cfg.width,
        num_classes: cfg.num_classes,
        samples,
    })
}
