//! First-order view of the image embedding around one input: how isotropic
//! pixel noise turns into embedding covariance, the resulting two-class score
//! distribution, and the Jacobian's singular spectrum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Differentiable;
use crate::encoder::{Embedding, ImageTensor};
use crate::error::{Error, Result};
use crate::numerics::{dot, gemm_nt, noise_seed, reduced_svd, GaussianStream, Matrix};

/// I.i.d. per-pixel Gaussian noise with standard deviation `sigma_n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_n: f64,
}

impl NoiseModel {
    pub fn new(sigma_n: f64) -> Result<Self> {
        if !(sigma_n >= 0.0 && sigma_n.is_finite()) {
            return Err(Error::arg(format!("sigma_n must be finite and >= 0, got {sigma_n}")));
        }
        Ok(Self { sigma_n })
    }
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `σ² · J Jᵀ`.
pub fn noise_covariance(j: &Matrix, sigma_n: f64) -> Result<Matrix> {
    let s = NoiseModel::new(sigma_n)?.sigma_n;
    let mut m = gemm_nt(j, j)?.scale(s * s);
    // exact symmetry
    let n = m.rows();
    for a in 0..n {
        for b in a + 1..n {
            let v = 0.5 * (m.get(a, b) + m.get(b, a));
            m.set(a, b, v);
            m.set(b, a, v);
        }
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryScoreStats {
    pub mean: f64,
    pub variance: f64,
    pub predicted_p_t0: f64,
}

/// `Φ(mean/√variance)`, with zero variance giving 1, 0.5 or 0 by the sign of
/// the mean.
pub fn predicted_probability(mean: f64, variance: f64) -> f64 {
    if mean == 0.0 {
        0.5
    } else if variance <= 0.0 {
        if mean > 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        normal_cdf(mean / variance.sqrt())
    }
}

/// Distribution of the score `f(x+η)ᵀ(t0 − t1)` to first order.
pub fn binary_score_stats(
    f_x: &Embedding,
    t0: &Embedding,
    t1: &Embedding,
    j: &Matrix,
    sigma_n: f64,
) -> Result<BinaryScoreStats> {
    let n = f_x.len();
    if t0.len() != n || t1.len() != n || j.rows() != n {
        return Err(Error::shape(
            "binary_score_stats",
            format!(
                "f {n}, t0 {}, t1 {}, J {:?}",
                t0.len(),
                t1.len(),
                j.shape()
            ),
        ));
    }
    let diff = t0.sub(t1);
    let mean = f_x.dot(&diff);
    let cov = noise_covariance(j, sigma_n)?;
    let md = cov.matvec(diff.as_slice())?;
    let mut variance = dot(diff.as_slice(), &md);
    if variance < 0.0 {
        if variance < -1e-10 {
            return Err(Error::Numerical(format!("score variance {variance} is negative")));
        }
        variance = 0.0;
    }
    Ok(BinaryScoreStats {
        mean,
        variance,
        predicted_p_t0: predicted_probability(mean, variance),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sigma: f64,
    pub predicted_p: f64,
    pub empirical_p: f64,
    pub std_err: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Noisy copy of `x` without clamping; draw `k` at `sigma` has its own seed.
pub(crate) fn perturbed(x: &ImageTensor, sigma: f64, seed: u64, item: u64, k: u64) -> Result<ImageTensor> {
    let (h, w, c) = x.shape();
    let mut g = GaussianStream::new(noise_seed(seed, item, sigma, k));
    let px = x.pixels().iter().map(|p| p + sigma * g.next()).collect();
    ImageTensor::unclamped(h, w, c, px)
}

/// For each σ, the first-order prediction of `P(score > 0)` next to the
/// fraction of `n_samples` noisy draws (unclamped) with a positive score.
pub fn predicted_vs_empirical<M: Differentiable + ?Sized>(
    model: &M,
    x: &ImageTensor,
    t0: &Embedding,
    t1: &Embedding,
    sigmas: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<PredictionRow>> {
    if n_samples < 100 {
        return Err(Error::arg(format!("need at least 100 samples, got {n_samples}")));
    }
    let (f_x, j) = model.jacobian_at(x)?;
    let diff = t0.sub(t1);
    sigmas
        .iter()
        .map(|&sigma| {
            let stats = binary_score_stats(&f_x, t0, t1, &j, sigma)?;
            let positive = (0..n_samples as u64)
                .into_par_iter()
                .map(|k| {
                    let f = model.embed(&perturbed(x, sigma, seed, 0, k)?)?;
                    Ok(usize::from(f.dot(&diff) > 0.0))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .sum::<usize>();
            let p = positive as f64 / n_samples as f64;
            Ok(PredictionRow {
                sigma,
                predicted_p: stats.predicted_p_t0,
                empirical_p: p,
                std_err: (p * (1.0 - p) / n_samples as f64).sqrt(),
                mean: stats.mean,
                variance: stats.variance,
            })
        })
        .collect()
}

pub fn prediction_csv(rows: &[PredictionRow]) -> String {
    let mut out = String::from("sigma,predicted_p,empirical_p,std_err,mean,variance\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sigma, r.predicted_p, r.empirical_p, r.std_err, r.mean, r.variance
        ));
    }
    out
}

/// Sample covariance (divisor `n`) of `f(x+η_k) − f(x)` over `n` noisy draws.
pub fn empirical_covariance<M: Differentiable + ?Sized>(
    model: &M,
    x: &ImageTensor,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::arg("need at least one draw"));
    }
    let f0 = model.embed(x)?;
    let d = f0.len();
    // fixed-size chunks keep the summation order independent of threading
    const CHUNK: usize = 256;
    let partials = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; d * d];
            for k in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let df = model.embed(&perturbed(x, sigma, seed, 0, k as u64)?)?.sub(&f0);
                for a in 0..d {
                    for b in 0..d {
                        acc[a * d + b] += df.0[a] * df.0[b];
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0; d * d];
    for p in partials {
        sum.iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    Matrix::from_vec(d, d, sum.into_iter().map(|v| v / n as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    pub tau: f64,
    /// `#{s_i ≥ τ·s_max}`.
    pub effective_rank: usize,
    pub s_max: f64,
}

pub fn spectrum_report(j: &Matrix, tau: f64) -> Result<SpectrumReport> {
    if !(tau >= 0.0) {
        return Err(Error::arg(format!("tau must be >= 0, got {tau}")));
    }
    let s = reduced_svd(j)?.s;
    let s_max = s.first().copied().unwrap_or(0.0);
    Ok(SpectrumReport {
        effective_rank: s.iter().filter(|&&v| v >= tau * s_max).count(),
        singular_values: s,
        tau,
        s_max,
    })
}

impl SpectrumReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,singular_value\n");
        for (i, s) in self.singular_values.iter().enumerate() {
            out.push_str(&format!("{i},{s}\n"));
        }
        out
    }
}
