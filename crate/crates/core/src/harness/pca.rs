//! Two-component PCA of embedding clouds.

use serde::{Deserialize, Serialize};

use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::numerics::{dot, reduced_svd, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    /// One `(x, y)` per input embedding.
    pub coords: Vec<[f64; 2]>,
    /// Orthonormal principal directions.
    pub basis: [Vec<f64>; 2],
    /// Fraction of fit-set variance along each direction.
    pub explained: [f64; 2],
    /// Mean of the fit set, subtracted before projecting.
    pub center: Vec<f64>,
}

/// Fits the top two principal directions on `fit_on` (all embeddings when
/// `None`) and projects every embedding onto them. Each direction's sign is
/// fixed so that its largest-magnitude entry is positive.
pub fn pca_project(embs: &[Embedding], fit_on: Option<&[usize]>) -> Result<Projection2D> {
    let all: Vec<usize>;
    let fit = match fit_on {
        Some(idx) => idx,
        None => {
            all = (0..embs.len()).collect();
            &all
        }
    };
    if fit.len() < 3 {
        return Err(Error::arg(format!(
            "PCA needs at least 3 fit embeddings, got {}",
            fit.len()
        )));
    }
    if let Some(&bad) = fit.iter().find(|&&i| i >= embs.len()) {
        return Err(Error::arg(format!("fit index {bad} out of range")));
    }
    let dim = embs[fit[0]].len();
    if let Some(e) = embs.iter().find(|e| e.len() != dim) {
        return Err(Error::shape(
            "pca_project",
            format!("embedding lengths {dim} and {}", e.len()),
        ));
    }
    let fit_embs: Vec<Embedding> = fit.iter().map(|&i| embs[i].clone()).collect();
    let center = Embedding::mean(&fit_embs)?.0;
    let rows: Vec<Vec<f64>> = fit_embs
        .iter()
        .map(|e| e.0.iter().zip(&center).map(|(v, m)| v - m).collect())
        .collect();
    let svd = reduced_svd(&Matrix::from_rows(&rows)?)?;
    let total: f64 = svd.s.iter().map(|s| s * s).sum();
    if svd.s.len() < 2 || svd.s[1] <= 1e-12 * svd.s[0].max(f64::MIN_POSITIVE) {
        return Err(Error::Numerical(
            "fit set has rank below 2; no second principal direction".into(),
        ));
    }
    let direction = |c: usize| {
        let mut v = svd.v.column(c);
        let lead = v
            .iter()
            .cloned()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let basis = [direction(0), direction(1)];
    let coords = embs
        .iter()
        .map(|e| {
            let c: Vec<f64> = e.0.iter().zip(&center).map(|(v, m)| v - m).collect();
            [dot(&c, &basis[0]), dot(&c, &basis[1])]
        })
        .collect();
    Ok(Projection2D {
        coords,
        basis,
        explained: [svd.s[0].powi(2) / total, svd.s[1].powi(2) / total],
        center,
    })
}

impl Projection2D {
    /// `id,class,x,y` rows; `classes` labels each embedding.
    pub fn to_csv(&self, classes: &[String]) -> String {
        let mut out = String::from("id,class,x,y\n");
        for (i, [x, y]) in self.coords.iter().enumerate() {
            let class = classes.get(i).map_or("", String::as_str);
            out.push_str(&format!("{i},{class},{x},{y}\n"));
        }
        out
    }
}
