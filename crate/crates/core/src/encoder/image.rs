use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, dot, norm};

/// `h × w × c` image, channel-interleaved (`(y·w + x)·c + ch`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    h: usize,
    w: usize,
    c: usize,
    pixels: Vec<f64>,
}

impl ImageTensor {
    /// Builds an image whose pixels must lie in `[0, 1]`.
    pub fn new(h: usize, w: usize, c: usize, pixels: Vec<f64>) -> Result<Self> {
        let img = Self::unclamped(h, w, c, pixels)?;
        if let Some(i) = img.pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::arg(format!(
                "pixel {i} = {} outside [0, 1]",
                img.pixels[i]
            )));
        }
        Ok(img)
    }

    /// Finite pixels, any range. Used for unclamped optimizer iterates.
    pub fn unclamped(h: usize, w: usize, c: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != h * w * c {
            return Err(Error::shape(
                "ImageTensor",
                format!("{} values for {h}x{w}x{c}", pixels.len()),
            ));
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(Error::Numerical(format!("pixel {i} is not finite")));
        }
        Ok(Self { h, w, c, pixels })
    }

    /// Clamps `pixels` into `[0, 1]`.
    pub fn clamped(h: usize, w: usize, c: usize, mut pixels: Vec<f64>) -> Result<Self> {
        pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        Self::unclamped(h, w, c, pixels)
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Result<Self> {
        Self::new(h, w, c, vec![value; h * w * c])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.pixels[(y * self.w + x) * self.c + ch]
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }

    /// Same shape, new pixel values.
    pub fn with_pixels(&self, pixels: Vec<f64>) -> Result<Self> {
        Self::unclamped(self.h, self.w, self.c, pixels)
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        self.same_shape(other, "mean_abs_diff")?;
        let total: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(total / self.pixels.len() as f64)
    }

    pub(crate) fn same_shape(&self, other: &ImageTensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }
}

/// A point in the shared image/text space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        cosine(&self.0, &other.0)
    }

    pub fn sub(&self, other: &Embedding) -> Embedding {
        Embedding(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn distance(&self, other: &Embedding) -> f64 {
        self.sub(other).norm()
    }

    /// Arithmetic mean of a nonempty list.
    pub fn mean(embs: &[Embedding]) -> Result<Embedding> {
        let first = embs
            .first()
            .ok_or_else(|| Error::arg("mean of an empty embedding list"))?;
        let mut acc = vec![0.0; first.len()];
        for e in embs {
            if e.len() != acc.len() {
                return Err(Error::shape(
                    "Embedding::mean",
                    format!("lengths {} and {}", acc.len(), e.len()),
                ));
            }
            for (a, v) in acc.iter_mut().zip(&e.0) {
                *a += v;
            }
        }
        let n = embs.len() as f64;
        Ok(Embedding(acc.into_iter().map(|v| v / n).collect()))
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Embedding(v)
    }
}
