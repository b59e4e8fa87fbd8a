//! Procedural labeled image set standing in for a natural-image benchmark.
//!
//! Each class is one pattern family drawn in its own foreground/background
//! color pair; samples jitter phase, frequency, scale, position and color.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, GaussianStream};

pub const CLASS_NAMES: [&str; 10] = [
    "hstripes", "vstripes", "diagonal", "checkers", "disk", "ring", "gradient", "radial",
    "dots", "cross",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub image_hw: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            per_class: 50,
            image_hw: 32,
            channels: 3,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=CLASS_NAMES.len()).contains(&self.n_classes) {
            return Err(Error::arg(format!(
                "n_classes must be in 2..={}, got {}",
                CLASS_NAMES.len(),
                self.n_classes
            )));
        }
        if self.per_class < 5 {
            return Err(Error::arg("per_class must be at least 5 for an 80/20 split"));
        }
        if self.image_hw < 4 || self.channels == 0 {
            return Err(Error::arg("image must be at least 4x4 with one channel"));
        }
        Ok(())
    }
}

/// Labeled images with a stratified train / held-out split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of `subset` whose label is `class`.
    pub fn of_class(&self, subset: &[usize], class: usize) -> Vec<usize> {
        subset
            .iter()
            .copied()
            .filter(|&i| self.labels[i] == class)
            .collect()
    }

    pub fn select(&self, idx: &[usize]) -> (Vec<ImageTensor>, Vec<usize>) {
        (
            idx.iter().map(|&i| self.images[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let n_train = (spec.per_class * 4) / 5;
    let mut images = Vec::with_capacity(spec.n_classes * spec.per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..spec.n_classes {
        for k in 0..spec.per_class {
            let seed = derive_seed(&[spec.seed, class as u64, k as u64]);
            let idx = images.len();
            images.push(render(class, spec.image_hw, spec.channels, seed)?);
            labels.push(class);
            if k < n_train {
                train.push(idx);
            } else {
                test.push(idx);
            }
        }
    }
    Ok(Dataset {
        images,
        labels,
        class_names: CLASS_NAMES[..spec.n_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        train,
        test,
    })
}

/// Foreground / background corners of the color cube per class. Each pair
/// differs in exactly one channel and no pair repeats. Classes with little
/// foreground coverage get distinct background corners.
const PALETTE: [([u8; 3], [u8; 3]); 10] = [
    ([1, 1, 0], [1, 0, 0]),
    ([1, 1, 0], [0, 1, 0]),
    ([1, 1, 1], [0, 1, 1]),
    ([1, 0, 1], [0, 0, 1]),
    ([1, 1, 0], [1, 1, 1]),
    ([0, 0, 1], [0, 0, 0]),
    ([1, 0, 0], [0, 0, 0]),
    ([1, 0, 1], [1, 0, 0]),
    ([0, 1, 1], [0, 1, 0]),
    ([0, 0, 1], [0, 1, 1]),
];

const LOW: f64 = 0.4;
const HIGH: f64 = 0.6;
const COLOR_JITTER: f64 = 0.025;

fn smoothstep(edge: f64, width: f64, x: f64) -> f64 {
    ((x - edge) / width + 0.5).clamp(0.0, 1.0)
}

/// Renders one sample of `class`.
fn render(class: usize, hw: usize, channels: usize, seed: u64) -> Result<ImageTensor> {
    let mut g = GaussianStream::new(seed);
    let mut u = || g.uniform();
    let phase = u() * TAU;
    let freq = 2.0 + 2.0 * u();
    let (cx, cy) = (0.35 + 0.3 * u(), 0.35 + 0.3 * u());
    let scale = 0.8 + 0.4 * u();
    let angle = u() * TAU;
    let (fg_corner, bg_corner) = PALETTE[class];
    let mut color = |corner: [u8; 3]| {
        corner.map(|b| if b == 1 { HIGH } else { LOW } + COLOR_JITTER * (2.0 * u() - 1.0))
    };
    let fg = color(fg_corner);
    let bg = color(bg_corner);
    let soft = 1.5 / hw as f64;

    let intensity = |x: f64, y: f64| -> f64 {
        let (dx, dy) = (x - cx, y - cy);
        let dist = (dx * dx + dy * dy).sqrt();
        match class {
            0 => 0.5 + 0.5 * (TAU * freq * y + phase).sin(),
            1 => 0.5 + 0.5 * (TAU * freq * x + phase).sin(),
            2 => 0.5 + 0.5 * (TAU * freq * (x + y) / std::f64::consts::SQRT_2 + phase).sin(),
            3 => {
                let a = (TAU * freq * 0.5 * x + phase).sin();
                let b = (TAU * freq * 0.5 * y + phase).sin();
                smoothstep(0.0, 0.2, a * b)
            }
            4 => 1.0 - smoothstep(0.25 * scale, soft, dist),
            5 => 1.0 - smoothstep(0.06 * scale, soft, (dist - 0.28 * scale).abs()),
            6 => {
                let t = (x - 0.5) * angle.cos() + (y - 0.5) * angle.sin();
                (t + 0.5).clamp(0.0, 1.0)
            }
            7 => (1.0 - dist / (0.6 * scale)).clamp(0.0, 1.0),
            8 => {
                let period = 1.0 / (freq + 1.0);
                let fx = ((x - cx) / period).rem_euclid(1.0) - 0.5;
                let fy = ((y - cy) / period).rem_euclid(1.0) - 0.5;
                1.0 - smoothstep(0.25, 0.1, (fx * fx + fy * fy).sqrt())
            }
            _ => {
                let w = 0.07 * scale;
                let bar = (dx.abs().min(dy.abs()) - w).max(0.0);
                1.0 - smoothstep(0.0, soft, bar)
            }
        }
    };

    let mut pixels = Vec::with_capacity(hw * hw * channels);
    for py in 0..hw {
        for px in 0..hw {
            let (x, y) = ((px as f64 + 0.5) / hw as f64, (py as f64 + 0.5) / hw as f64);
            let s = intensity(x, y);
            let rgb = [0, 1, 2].map(|i| bg[i] + (fg[i] - bg[i]) * s);
            if channels == 3 {
                pixels.extend(rgb);
            } else {
                let gray = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
                pixels.extend(std::iter::repeat_n(gray, channels));
            }
        }
    }
    ImageTensor::clamped(hw, hw, channels, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticDatasetSpec {
            per_class: 6,
            ..Default::default()
        };
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&SyntheticDatasetSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn counts_and_split() {
        let spec = SyntheticDatasetSpec {
            n_classes: 4,
            per_class: 10,
            ..Default::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.len(), 40);
        for c in 0..4 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 10);
            assert_eq!(ds.of_class(&ds.train, c).len(), 8);
            assert_eq!(ds.of_class(&ds.test, c).len(), 2);
        }
        assert!(ds.images.iter().all(ImageTensor::in_unit_range));
    }

    #[test]
    fn grayscale_channels() {
        let spec = SyntheticDatasetSpec {
            n_classes: 2,
            per_class: 5,
            channels: 1,
            ..Default::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.images[0].shape(), (32, 32, 1));
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticDatasetSpec {
                n_classes: 1,
                ..Default::default()
            },
            SyntheticDatasetSpec {
                n_classes: 11,
                ..Default::default()
            },
            SyntheticDatasetSpec {
                per_class: 2,
                ..Default::default()
            },
        ] {
            assert!(matches!(generate_dataset(&spec), Err(Error::Argument(_))));
        }
    }
}
