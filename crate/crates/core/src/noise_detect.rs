//! Gaussian-noise robustness experiments and the label-flip detector for
//! embedding-aligned images.
//!
//! Every noisy draw is seeded from `(seed, image id, σ value, draw index)`,
//! so a σ shared by two grids sees the same noise in both.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ConfusionMatrix};
use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::numerics::{noise_seed, GaussianStream};

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("sigma must be finite and >= 0, got {sigma}")))
    }
}

/// `img` plus i.i.d. `N(0, σ²)` per pixel, clamped to `[0, 1]`.
pub fn add_noise(img: &ImageTensor, sigma: f64, seed: u64) -> Result<ImageTensor> {
    check_sigma(sigma)?;
    let (h, w, c) = img.shape();
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut g = GaussianStream::new(seed);
    let px = img.pixels().iter().map(|p| p + sigma * g.next()).collect();
    ImageTensor::clamped(h, w, c, px)
}

fn noisy(img: &ImageTensor, sigma: f64, seed: u64, item: u64, draw: u64) -> Result<ImageTensor> {
    add_noise(img, sigma, noise_seed(seed, item, sigma, draw))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseExperimentConfig {
    pub sigma: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl NoiseExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma)?;
        if self.n_samples == 0 {
            return Err(Error::arg("n_samples must be >= 1"));
        }
        Ok(())
    }
}

/// Row `c` counts the predictions for `n_samples` noisy copies of
/// `images[c]`. Draw `k` adds the same noise matrix in every row.
pub fn noisy_confusion<C: Classifier + ?Sized>(
    classifier: &C,
    class_names: Vec<String>,
    images: &[ImageTensor],
    cfg: &NoiseExperimentConfig,
) -> Result<ConfusionMatrix> {
    cfg.validate()?;
    let c = classifier.n_classes();
    if images.len() != c || class_names.len() != c {
        return Err(Error::shape(
            "noisy_confusion",
            format!("{} images and {} names for {c} classes", images.len(), class_names.len()),
        ));
    }
    let jobs: Vec<(usize, u64)> = (0..c)
        .flat_map(|row| (0..cfg.n_samples as u64).map(move |k| (row, k)))
        .collect();
    let pred = jobs
        .par_iter()
        .map(|&(row, k)| classifier.predict(&noisy(&images[row], cfg.sigma, cfg.seed, 0, k)?))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = jobs.iter().map(|&(row, _)| row).collect();
    ConfusionMatrix::from_predictions(class_names, &truth, &pred)
}

/// Fraction of each row's mass on the diagonal, averaged over rows.
pub fn diagonal_fraction(m: &ConfusionMatrix) -> f64 {
    let rows = m.row_sums();
    let fracs: Vec<f64> = rows
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(i, &n)| m.counts[i][i] as f64 / n as f64)
        .collect();
    if fracs.is_empty() {
        0.0
    } else {
        fracs.iter().sum::<f64>() / fracs.len() as f64
    }
}

/// Smallest σ in the ascending grid at which at least one of `votes` noisy
/// draws changes the clean label; `f64::INFINITY` if none does.
pub fn flip_threshold<C: Classifier + ?Sized>(
    classifier: &C,
    img: &ImageTensor,
    image_id: u64,
    sigma_grid: &[f64],
    votes: usize,
    seed: u64,
) -> Result<f64> {
    if votes == 0 {
        return Err(Error::arg("votes must be >= 1"));
    }
    if sigma_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::arg("sigma grid must be ascending"));
    }
    sigma_grid.iter().try_for_each(|&s| check_sigma(s))?;
    let clean = classifier.predict(img)?;
    for &sigma in sigma_grid {
        for k in 0..votes as u64 {
            if classifier.predict(&noisy(img, sigma, seed, image_id, k)?)? != clean {
                return Ok(sigma);
            }
        }
    }
    Ok(f64::INFINITY)
}

/// Median with the infinite sentinel sorting last; the mean of the two middle
/// values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub sigma: f64,
    pub votes: usize,
    pub seed: u64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            votes: 5,
            seed: 0,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma)?;
        if self.votes.is_multiple_of(2) {
            return Err(Error::arg(format!("votes must be odd, got {}", self.votes)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Modified,
    Unmodified,
}

/// Flags `img` as modified when most noisy copies disagree with its clean
/// label.
pub fn detect_modified<C: Classifier + ?Sized>(
    classifier: &C,
    img: &ImageTensor,
    image_id: u64,
    cfg: &DetectionConfig,
) -> Result<Flag> {
    cfg.validate()?;
    let clean = classifier.predict(img)?;
    let mut disagree = 0;
    for k in 0..cfg.votes as u64 {
        if classifier.predict(&noisy(img, cfg.sigma, cfg.seed, image_id, k)?)? != clean {
            disagree += 1;
        }
    }
    Ok(if 2 * disagree > cfg.votes {
        Flag::Modified
    } else {
        Flag::Unmodified
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub accuracy: f64,
    /// Originals flagged as modified, over originals.
    pub fpr: f64,
    /// Modified images passed as unmodified, over modified images.
    pub fnr: f64,
    pub n_orig: usize,
    pub n_mod: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSweepReport {
    pub rows: Vec<SweepRow>,
}

impl DetectionSweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma,accuracy,fpr,fnr,n_orig,n_mod\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.sigma, r.accuracy, r.fpr, r.fnr, r.n_orig, r.n_mod
            );
        }
        out
    }

    /// One row of σ values over one row of accuracies in percent.
    pub fn to_table(&self) -> String {
        let cells = |f: &dyn Fn(&SweepRow) -> String| {
            self.rows.iter().map(f).collect::<Vec<_>>().join(" | ")
        };
        format!(
            "Std | {}\nAcc | {}\n",
            cells(&|r| r.sigma.to_string()),
            cells(&|r| format!("{:.0}%", 100.0 * r.accuracy))
        )
    }

    pub fn best(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .fold(None, |b: Option<&SweepRow>, r| match b {
                Some(b) if b.accuracy >= r.accuracy => Some(b),
                _ => Some(r),
            })
    }
}

/// Runs the detector at every σ over a balanced set. Originals take image ids
/// `0..n`, modified images `n..2n`.
pub fn detection_sweep<C: Classifier + ?Sized>(
    classifier: &C,
    originals: &[ImageTensor],
    modified: &[ImageTensor],
    sigmas: &[f64],
    votes: usize,
    seed: u64,
) -> Result<DetectionSweepReport> {
    if originals.is_empty() || originals.len() != modified.len() {
        return Err(Error::arg(format!(
            "need balanced nonempty sets, got {} originals and {} modified",
            originals.len(),
            modified.len()
        )));
    }
    let n = originals.len();
    let all: Vec<(&ImageTensor, bool)> = originals
        .iter()
        .map(|i| (i, false))
        .chain(modified.iter().map(|i| (i, true)))
        .collect();
    let rows = sigmas
        .iter()
        .map(|&sigma| {
            let cfg = DetectionConfig { sigma, votes, seed };
            cfg.validate()?;
            let flags = all
                .par_iter()
                .enumerate()
                .map(|(id, (img, _))| detect_modified(classifier, img, id as u64, &cfg))
                .collect::<Result<Vec<_>>>()?;
            let (mut fp, mut fneg) = (0, 0);
            for ((_, is_mod), f) in all.iter().zip(&flags) {
                match (is_mod, f) {
                    (false, Flag::Modified) => fp += 1,
                    (true, Flag::Unmodified) => fneg += 1,
                    _ => {}
                }
            }
            Ok(SweepRow {
                sigma,
                accuracy: (2 * n - fp - fneg) as f64 / (2 * n) as f64,
                fpr: fp as f64 / n as f64,
                fnr: fneg as f64 / n as f64,
                n_orig: n,
                n_mod: n,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectionSweepReport { rows })
}
