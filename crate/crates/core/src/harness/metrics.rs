//! Image similarity: PSNR and windowed SSIM.

use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::error::{Error, Result};

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// Set when the images are identical and `db` holds the cap.
    pub infinite: bool,
}

fn same_shape(op: &'static str, a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio with peak 1.0.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<Psnr> {
    same_shape("psnr", a, b)?;
    let n = a.len().max(1) as f64;
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 {
        Psnr {
            db: PSNR_CAP_DB,
            infinite: true,
        }
    } else {
        Psnr {
            db: 10.0 * (1.0 / mse).log10(),
            infinite: false,
        }
    })
}

fn grayscale(img: &ImageTensor) -> Vec<f64> {
    let c = img.shape().2;
    img.pixels()
        .chunks(c)
        .map(|px| px.iter().sum::<f64>() / c as f64)
        .collect()
}

/// Mean SSIM over all 8×8 windows at stride 1 of the channel-mean images.
/// Window statistics are unweighted, variances use the window size as divisor.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (h, w, _) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::arg(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let (ga, gb) = (grayscale(a), grayscale(b));
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (p, q) = (ga[y * w + x], gb[y * w + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// How far a modified image is from its original.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub psnr_db: f64,
    pub psnr_infinite: bool,
    pub ssim: f64,
    pub mean_abs_diff: f64,
}

pub fn quality(original: &ImageTensor, modified: &ImageTensor) -> Result<QualityReport> {
    let p = psnr(original, modified)?;
    Ok(QualityReport {
        psnr_db: p.db,
        psnr_infinite: p.infinite,
        ssim: ssim(original, modified)?,
        mean_abs_diff: original.mean_abs_diff(modified)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::GaussianStream;
    use proptest::prelude::*;

    fn noise_image(seed: u64, hw: usize) -> ImageTensor {
        let mut g = GaussianStream::new(seed);
        let px = (0..hw * hw * 3).map(|_| g.uniform()).collect();
        ImageTensor::new(hw, hw, 3, px).unwrap()
    }

    #[test]
    fn identical_images() {
        let a = noise_image(1, 16);
        let p = psnr(&a, &a).unwrap();
        assert_eq!(p, Psnr { db: 99.0, infinite: true });
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let q = quality(&a, &a).unwrap();
        assert_eq!(q.mean_abs_diff, 0.0);
    }

    #[test]
    fn psnr_of_known_mse() {
        let a = ImageTensor::filled(4, 4, 3, 0.5).unwrap();
        let b = ImageTensor::filled(4, 4, 3, 0.6).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!(!p.infinite);
        assert!((p.db - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_two_constants() {
        let a = ImageTensor::filled(12, 12, 3, 0.5).unwrap();
        let b = ImageTensor::filled(12, 12, 3, 0.6).unwrap();
        // zero variance: only the luminance term survives
        let (x, y) = (0.5f64, 0.6f64);
        let c1 = 0.01f64.powi(2);
        let want = (2.0 * x * y + c1) / (x * x + y * y + c1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let a = ImageTensor::filled(4, 4, 3, 0.5).unwrap();
        let b = ImageTensor::filled(4, 4, 1, 0.5).unwrap();
        assert!(matches!(psnr(&a, &b), Err(Error::Shape { .. })));
        assert!(matches!(ssim(&a, &a), Err(Error::Argument(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ssim_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
            let (a, b) = (noise_image(s1, 10), noise_image(s2, 10));
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn psnr_decreases_with_error(d1 in 0.001f64..0.2, extra in 0.001f64..0.2) {
            let a = ImageTensor::filled(4, 4, 1, 0.3).unwrap();
            let b = ImageTensor::filled(4, 4, 1, 0.3 + d1).unwrap();
            let c = ImageTensor::filled(4, 4, 1, 0.3 + d1 + extra).unwrap();
            prop_assert!(psnr(&a, &b).unwrap().db > psnr(&a, &c).unwrap().db);
        }
    }
}
