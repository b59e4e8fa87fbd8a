//! Embedding matching: plain gradient descent on the pixels of a source image
//! until its embedding lines up with a target embedding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{loss_grad, Differentiable};
use crate::classifier::{argmax, confusion_matrix, zero_shot_probs, ConfusionMatrix, LabelSet, ZeroShot};
use crate::encoder::{Embedding, ImageTensor};
use crate::error::{Error, Result};
use crate::harness::metrics::quality;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub lr: f64,
    pub max_steps: usize,
    pub cosine_target: f64,
    pub clamp_pixels: bool,
    pub trace_every: usize,
    /// Recorded for provenance; the descent itself draws no randomness.
    pub seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            max_steps: 30_000,
            cosine_target: 0.98,
            clamp_pixels: true,
            trace_every: 100,
            seed: 0,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1e-4..=1.0).contains(&self.lr) {
            return Err(Error::arg(format!("lr must be in [1e-4, 1], got {}", self.lr)));
        }
        if !(self.cosine_target > 0.0 && self.cosine_target <= 1.0) {
            return Err(Error::arg(format!(
                "cosine_target must be in (0, 1], got {}",
                self.cosine_target
            )));
        }
        if self.trace_every == 0 {
            return Err(Error::arg("trace_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStatus {
    Converged,
    StepCapped,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub cosine: f64,
    pub mean_abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchTrace {
    pub points: Vec<TracePoint>,
    pub status: MatchStatus,
}

impl MatchTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,cosine,mean_abs_diff\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{},{}\n", p.step, p.loss, p.cosine, p.mean_abs_diff));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub x_matched: ImageTensor,
    pub trace: MatchTrace,
    pub final_cosine: f64,
    pub final_loss: f64,
    /// Gradient steps taken.
    pub steps: usize,
    /// Embedding of `x_matched`.
    pub embedding: Embedding,
}

impl MatchResult {
    pub fn converged(&self) -> bool {
        self.trace.status == MatchStatus::Converged
    }
}

/// Descends `½‖f(x) − target‖²` from `x0`, stopping once
/// `cos(f(x), target) ≥ cosine_target` or after `max_steps` steps.
pub fn match_embedding<M: Differentiable + ?Sized>(
    model: &M,
    x0: &ImageTensor,
    target: &Embedding,
    cfg: &MatchConfig,
) -> Result<MatchResult> {
    cfg.validate()?;
    let (h, w, c) = x0.shape();
    let mut x = x0.clone();
    let mut points = Vec::new();
    let mut step = 0;
    loop {
        let lg = loss_grad(model, &x, target)?;
        if !lg.loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        let cosine = lg.embedding.cosine(target);
        let done = cosine >= cfg.cosine_target;
        let capped = !done && step >= cfg.max_steps;
        if step % cfg.trace_every == 0 || done || capped {
            points.push(TracePoint {
                step,
                loss: lg.loss,
                cosine,
                mean_abs_diff: x.mean_abs_diff(x0)?,
            });
        }
        if done || capped {
            let status = if done {
                MatchStatus::Converged
            } else {
                MatchStatus::StepCapped
            };
            return Ok(MatchResult {
                x_matched: x,
                trace: MatchTrace { points, status },
                final_cosine: cosine,
                final_loss: lg.loss,
                steps: step,
                embedding: lg.embedding,
            });
        }
        let next: Vec<f64> = x
            .pixels()
            .iter()
            .zip(&lg.grad)
            .map(|(p, g)| {
                let v = p - cfg.lr * g;
                if cfg.clamp_pixels {
                    v.clamp(0.0, 1.0)
                } else {
                    v
                }
            })
            .collect();
        x = ImageTensor::unclamped(h, w, c, next).map_err(|_| Error::Divergence { step: step + 1 })?;
        step += 1;
    }
}

/// The member nearest (Euclidean) to the arithmetic mean; lowest index on ties.
pub fn class_representative(embs: &[Embedding]) -> Result<(usize, Embedding)> {
    if embs.is_empty() {
        return Err(Error::arg("representative of an empty list"));
    }
    let mean = Embedding::mean(embs)?;
    let best = embs
        .iter()
        .map(|e| e.distance(&mean))
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bd), (i, d)| if d < bd { (i, d) } else { (bi, bd) })
        .0;
    Ok((best, embs[best].clone()))
}

/// One (image, target class) run inside a systematic evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub image: usize,
    pub source_class: usize,
    pub target_class: usize,
    pub converged: bool,
    pub steps: usize,
    pub final_cosine: f64,
    pub predicted: usize,
    pub target_prob: f64,
    pub mean_abs_diff: f64,
    pub psnr_db: f64,
    pub psnr_infinite: bool,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystematicSummary {
    pub n_matches: usize,
    pub converged_fraction: f64,
    /// Converged matches still classified as their source class.
    pub systematic_accuracy: f64,
    /// Converged matches classified as their target class.
    pub target_rate: f64,
    pub mean_abs_diff_mean: f64,
    pub mean_abs_diff_max: f64,
    pub psnr_mean: f64,
    pub psnr_min: f64,
    pub ssim_mean: f64,
    pub ssim_min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystematicReport {
    /// Zero-shot results on the unmodified images.
    pub originals: ConfusionMatrix,
    pub original_accuracy: f64,
    pub matches: Vec<MatchRecord>,
    pub summary: SystematicSummary,
    /// Matched images in `matches` order.
    #[serde(skip)]
    pub matched_images: Vec<ImageTensor>,
}

impl SystematicReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn matches_csv(&self) -> String {
        let mut out = String::from(
            "image,source_class,target_class,converged,steps,final_cosine,predicted,target_prob,mean_abs_diff,psnr_db,psnr_infinite,ssim\n",
        );
        for r in &self.matches {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.image,
                r.source_class,
                r.target_class,
                r.converged,
                r.steps,
                r.final_cosine,
                r.predicted,
                r.target_prob,
                r.mean_abs_diff,
                r.psnr_db,
                r.psnr_infinite,
                r.ssim
            ));
        }
        out
    }
}

/// Per-class matching targets: the representative of each class's embeddings.
pub fn class_targets(embs: &[Embedding], labels: &[usize], n_classes: usize) -> Result<Vec<Embedding>> {
    (0..n_classes)
        .map(|c| {
            let members: Vec<Embedding> = embs
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .map(|(e, _)| e.clone())
                .collect();
            if members.is_empty() {
                return Err(Error::arg(format!("class {c} has no members to pick a target from")));
            }
            Ok(class_representative(&members)?.1)
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Matches every image toward every other class's target and classifies the
/// results. Runs are spread over worker threads and merged in
/// (image, target class) order.
pub fn systematic_eval<M: Differentiable + ?Sized>(
    model: &M,
    labels: &LabelSet,
    images: &[ImageTensor],
    truth: &[usize],
    targets: &[Embedding],
    cfg: &MatchConfig,
) -> Result<SystematicReport> {
    cfg.validate()?;
    let c = labels.len();
    if targets.len() != c {
        return Err(Error::shape(
            "systematic_eval",
            format!("{} targets for {c} classes", targets.len()),
        ));
    }
    let zs = ZeroShot::new(model, labels);
    let originals = confusion_matrix(&zs, labels.names(), images, truth)?;

    let jobs: Vec<(usize, usize)> = (0..images.len())
        .flat_map(|i| (0..c).filter(move |&t| t != truth[i]).map(move |t| (i, t)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(i, t)| {
            let r = match_embedding(model, &images[i], &targets[t], cfg)?;
            let probs = zero_shot_probs(&r.embedding, labels)?;
            let q = quality(&images[i], &r.x_matched)?;
            let record = MatchRecord {
                image: i,
                source_class: truth[i],
                target_class: t,
                converged: r.converged(),
                steps: r.steps,
                final_cosine: r.final_cosine,
                predicted: argmax(&probs),
                target_prob: probs[t],
                mean_abs_diff: q.mean_abs_diff,
                psnr_db: q.psnr_db,
                psnr_infinite: q.psnr_infinite,
                ssim: q.ssim,
            };
            Ok((record, r.x_matched))
        })
        .collect::<Result<Vec<_>>>()?;
    let (matches, matched_images): (Vec<_>, Vec<_>) = runs.into_iter().unzip();

    let conv: Vec<&MatchRecord> = matches.iter().filter(|r| r.converged).collect();
    let frac = |pred: &dyn Fn(&MatchRecord) -> bool| {
        if conv.is_empty() {
            0.0
        } else {
            conv.iter().filter(|r| pred(r)).count() as f64 / conv.len() as f64
        }
    };
    let summary = SystematicSummary {
        n_matches: matches.len(),
        converged_fraction: if matches.is_empty() {
            0.0
        } else {
            conv.len() as f64 / matches.len() as f64
        },
        systematic_accuracy: frac(&|r| r.predicted == r.source_class),
        target_rate: frac(&|r| r.predicted == r.target_class),
        mean_abs_diff_mean: mean(conv.iter().map(|r| r.mean_abs_diff)),
        mean_abs_diff_max: conv.iter().map(|r| r.mean_abs_diff).fold(0.0, f64::max),
        psnr_mean: mean(conv.iter().map(|r| r.psnr_db)),
        psnr_min: conv.iter().map(|r| r.psnr_db).fold(f64::INFINITY, f64::min),
        ssim_mean: mean(conv.iter().map(|r| r.ssim)),
        ssim_min: conv.iter().map(|r| r.ssim).fold(f64::INFINITY, f64::min),
    };
    Ok(SystematicReport {
        original_accuracy: originals.accuracy(),
        originals,
        matches,
        summary,
        matched_images,
    })
}
