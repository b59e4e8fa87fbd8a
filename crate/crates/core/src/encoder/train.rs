//! Minimal contrastive trainer: symmetric cross-entropy over in-batch
//! image/text cosine similarities at a fixed temperature, plain SGD.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::encoder::{EncoderNodes, EncoderParams, ImageTensor};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, GaussianStream, Matrix};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.01,
            batch_size: 32,
            temperature: 0.07,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss over the first epoch's batches before any update.
    pub initial_loss: f64,
    /// Mean batch loss recorded during each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Labeled training examples plus the fixed token sequence of every class.
pub struct TrainSet<'d> {
    pub images: &'d [ImageTensor],
    pub labels: &'d [usize],
    pub class_tokens: &'d [Vec<usize>],
}

impl TrainSet<'_> {
    fn validate(&self, params: &EncoderParams) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::arg("training set is empty"));
        }
        if self.images.len() != self.labels.len() {
            return Err(Error::shape(
                "train_contrastive",
                format!("{} images, {} labels", self.images.len(), self.labels.len()),
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_tokens.len()) {
            return Err(Error::arg(format!("label {bad} has no token sequence")));
        }
        for img in self.images {
            params.check_image(img)?;
        }
        for t in self.class_tokens {
            params.check_tokens(t)?;
        }
        Ok(())
    }
}

pub fn train_contrastive(
    params: &EncoderParams,
    data: &TrainSet<'_>,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, TrainReport)> {
    data.validate(params)?;
    if cfg.batch_size < 2 {
        return Err(Error::arg("batch_size must be at least 2"));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::arg("temperature must be positive"));
    }
    let mut current = params.clone();
    let mut rng = GaussianStream::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.images.len()).collect();
    let mut shuffle = |order: &mut Vec<usize>| {
        // Fisher–Yates
        for i in (1..order.len()).rev() {
            let j = rng.below(i + 1);
            order.swap(i, j);
        }
    };
    // measured on the first epoch's batches, before any update
    shuffle(&mut order);
    let initial_loss = {
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            total += batch_step(&current, data, chunk, cfg.temperature, false)?.0;
            batches += 1;
        }
        total / batches as f64
    };

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            shuffle(&mut order);
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_step(&current, data, chunk, cfg.temperature, true)?;
            for (w, g) in current.tensors_mut().into_iter().zip(&grads) {
                if let Some(g) = g {
                    for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                        *wv -= cfg.lr * gv;
                    }
                }
            }
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok((
        current,
        TrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}

/// Loss of one batch and, when requested, gradients for every parameter in
/// [`EncoderParams::tensors_mut`] order.
fn batch_step(
    params: &EncoderParams,
    data: &TrainSet<'_>,
    batch: &[usize],
    temperature: f64,
    with_grad: bool,
) -> Result<(f64, Vec<Option<Matrix>>)> {
    let mut classes: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();

    let pixels: Vec<Matrix> = batch
        .iter()
        .map(|&i| Matrix::row_vector(data.images[i].pixels()))
        .collect();
    let mut tape = Tape::new();
    let nodes = EncoderNodes::register(&mut tape, params, with_grad);
    let mut img_out = Vec::with_capacity(batch.len());
    for px in &pixels {
        let x = tape.constant(px);
        img_out.push(nodes.vision(&mut tape, params, x)?);
    }
    let mut txt_out = Vec::with_capacity(classes.len());
    for &c in &classes {
        txt_out.push(nodes.text(&mut tape, params, &data.class_tokens[c])?);
    }

    let img: Vec<&[f64]> = img_out.iter().map(|&n| tape.value(n).data()).collect();
    let txt: Vec<&[f64]> = txt_out.iter().map(|&n| tape.value(n).data()).collect();
    let target: Vec<usize> = batch
        .iter()
        .map(|&i| classes.binary_search(&data.labels[i]).expect("present"))
        .collect();
    let (loss, d_img, d_txt) = symmetric_loss(&img, &txt, &target, temperature);
    if !with_grad {
        return Ok((loss, Vec::new()));
    }

    let seeds_owned: Vec<Matrix> = d_img
        .iter()
        .chain(&d_txt)
        .map(|g| Matrix::row_vector(g))
        .collect();
    let seeds: Vec<_> = img_out
        .iter()
        .chain(&txt_out)
        .copied()
        .zip(seeds_owned.iter())
        .collect();
    let mut adj = tape.backward(&seeds)?;
    let grads = nodes.param_ids().into_iter().map(|id| adj.take(id)).collect();
    Ok((loss, grads))
}

fn unit(v: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(v).max(1e-12);
    (v.iter().map(|x| x / n).collect(), n)
}

/// Symmetric cross-entropy over cosine similarities / temperature.
/// Image→text targets are the true class; text→image targets are uniform over
/// the batch images of that class. Returns the loss and gradients w.r.t. the
/// raw (unnormalized) embeddings.
pub(crate) fn symmetric_loss(
    img: &[&[f64]],
    txt: &[&[f64]],
    target: &[usize],
    temperature: f64,
) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (b, c) = (img.len(), txt.len());
    let (ui, ni): (Vec<_>, Vec<_>) = img.iter().map(|v| unit(v)).unzip();
    let (ut, nt): (Vec<_>, Vec<_>) = txt.iter().map(|v| unit(v)).unzip();
    let inv_t = 1.0 / temperature;
    let logits: Vec<Vec<f64>> = ui
        .iter()
        .map(|a| ut.iter().map(|t| dot(a, t) * inv_t).collect())
        .collect();

    // dL/dlogits, accumulated from both directions
    let mut dlog = vec![vec![0.0; c]; b];
    let mut loss_i2t = 0.0;
    for r in 0..b {
        let p = softmax(&logits[r]);
        loss_i2t -= p[target[r]].ln();
        for j in 0..c {
            let y = if j == target[r] { 1.0 } else { 0.0 };
            dlog[r][j] += 0.5 * (p[j] - y) / b as f64;
        }
    }
    let mut loss_t2i = 0.0;
    for j in 0..c {
        let col: Vec<f64> = (0..b).map(|r| logits[r][j]).collect();
        let p = softmax(&col);
        let members: Vec<usize> = (0..b).filter(|&r| target[r] == j).collect();
        let w = 1.0 / members.len() as f64;
        for &r in &members {
            loss_t2i -= w * p[r].ln();
        }
        for r in 0..b {
            let y = if target[r] == j { w } else { 0.0 };
            dlog[r][j] += 0.5 * (p[r] - y) / c as f64;
        }
    }
    let loss = 0.5 * (loss_i2t / b as f64 + loss_t2i / c as f64);

    // through the cosine: d(â·t̂)/da = (t̂ − â(â·t̂)) / ‖a‖
    let mut d_img = vec![vec![0.0; img[0].len()]; b];
    let mut d_txt = vec![vec![0.0; txt[0].len()]; c];
    for r in 0..b {
        for j in 0..c {
            let g = dlog[r][j] * inv_t;
            if g == 0.0 {
                continue;
            }
            let cs = dot(&ui[r], &ut[j]);
            for k in 0..d_img[r].len() {
                d_img[r][k] += g * (ut[j][k] - ui[r][k] * cs) / ni[r];
                d_txt[j][k] += g * (ui[r][k] - ut[j][k] * cs) / nt[j];
            }
        }
    }
    (loss, d_img, d_txt)
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    crate::numerics::ops::softmax_in_place(&mut out);
    out
}
