//! Toy dual encoder: a patch-based vision transformer and a token-based text
//! transformer projecting into one shared embedding space.
//!
//! Block structure (per token `x_i`):
//!
//! ```text
//! u'_i = Σ_h W_{c,h}ᵀ Σ_j α_ij^(h) W_{v,h}ᵀ x_j      α^(h) = softmax_j(<W_qᵀx_i, W_kᵀx_j> / √k)
//! u_i  = LN(x_i + u'_i; γ1, β1)
//! z_i  = LN(u_i + W_2ᵀ ReLU(W_1ᵀ u_i); γ2, β2)
//! ```
//!
//! Both towers mean-pool their token outputs before a linear head.

mod forward;
mod image;
pub mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, GaussianStream};

pub use forward::{attention_weights, block_forward, EncoderNodes};
pub use image::{Embedding, ImageTensor};
pub use train::{train_contrastive, TrainConfig, TrainReport};

/// Shape of the dual encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Square image side in pixels.
    pub image_hw: usize,
    pub channels: usize,
    pub patch: usize,
    /// Model width.
    pub d: usize,
    /// Per-head width.
    pub k: usize,
    pub heads: usize,
    pub m_mlp: usize,
    pub layers: usize,
    pub n_embed: usize,
    pub vocab: usize,
    pub text_len: usize,
    /// Std of every weight matrix at init, as a multiple of `1/√d`.
    pub init_gain: f64,
    /// When set, image embeddings are unit vectors and text embeddings have
    /// norm `logit_scale`, so their inner product is a scaled cosine.
    pub normalize: bool,
    pub logit_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_hw: 32,
            channels: 3,
            patch: 8,
            d: 64,
            k: 16,
            heads: 4,
            m_mlp: 128,
            layers: 2,
            n_embed: 32,
            vocab: 64,
            text_len: 4,
            init_gain: 2.0,
            normalize: true,
            logit_scale: 100.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_hw", self.image_hw),
            ("channels", self.channels),
            ("patch", self.patch),
            ("d", self.d),
            ("k", self.k),
            ("heads", self.heads),
            ("m_mlp", self.m_mlp),
            ("vocab", self.vocab),
            ("text_len", self.text_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::arg(format!("{name} must be positive")));
        }
        if !self.image_hw.is_multiple_of(self.patch) {
            return Err(Error::arg(format!(
                "image_hw {} not divisible by patch {}",
                self.image_hw, self.patch
            )));
        }
        if self.n_embed < 2 {
            return Err(Error::arg("n_embed must be at least 2"));
        }
        if !(self.init_gain >= 0.0 && self.init_gain.is_finite()) {
            return Err(Error::arg("init_gain must be finite and non-negative"));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::arg("logit_scale must be finite and positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_hw / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per patch token (channels folded in).
    pub fn patch_pixels(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.image_hw * self.image_hw * self.channels
    }

    pub fn init_std(&self) -> f64 {
        self.init_gain / (self.d as f64).sqrt()
    }
}

/// Weights of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    /// Per-head output maps, `k × d`.
    pub wc: Vec<Matrix>,
    /// Layer-norm gains and shifts, each `1 × d`.
    pub gamma1: Matrix,
    pub beta1: Matrix,
    pub gamma2: Matrix,
    pub beta2: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

impl BlockParams {
    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    fn random(cfg: &EncoderConfig, std: f64, g: &mut GaussianStream) -> Self {
        let mut draw = |r, c| random_matrix(r, c, std, g);
        let (d, k, h) = (cfg.d, cfg.k, cfg.heads);
        let wq = (0..h).map(|_| draw(d, k)).collect();
        let wk = (0..h).map(|_| draw(d, k)).collect();
        let wv = (0..h).map(|_| draw(d, k)).collect();
        let wc = (0..h).map(|_| draw(k, d)).collect();
        let w1 = draw(d, cfg.m_mlp);
        let w2 = draw(cfg.m_mlp, d);
        let ones = Matrix::from_vec(1, d, vec![1.0; d]).expect("1×d");
        Self {
            wq,
            wk,
            wv,
            wc,
            gamma1: ones.clone(),
            beta1: Matrix::zeros(1, d),
            gamma2: ones,
            beta2: Matrix::zeros(1, d),
            w1,
            w2,
        }
    }

    /// Named views of every matrix, in a fixed order.
    pub fn named(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (h, m) in self.wq.iter().enumerate() {
            out.push((format!("{prefix}.wq.{h}"), m));
        }
        for (h, m) in self.wk.iter().enumerate() {
            out.push((format!("{prefix}.wk.{h}"), m));
        }
        for (h, m) in self.wv.iter().enumerate() {
            out.push((format!("{prefix}.wv.{h}"), m));
        }
        for (h, m) in self.wc.iter().enumerate() {
            out.push((format!("{prefix}.wc.{h}"), m));
        }
        out.push((format!("{prefix}.gamma1"), &self.gamma1));
        out.push((format!("{prefix}.beta1"), &self.beta1));
        out.push((format!("{prefix}.gamma2"), &self.gamma2));
        out.push((format!("{prefix}.beta2"), &self.beta2));
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out
    }

    fn named_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        out.extend(self.wq.iter_mut());
        out.extend(self.wk.iter_mut());
        out.extend(self.wv.iter_mut());
        out.extend(self.wc.iter_mut());
        out.push(&mut self.gamma1);
        out.push(&mut self.beta1);
        out.push(&mut self.gamma2);
        out.push(&mut self.beta2);
        out.push(&mut self.w1);
        out.push(&mut self.w2);
        out
    }
}

/// All weights of both towers.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub vision_blocks: Vec<BlockParams>,
    pub text_blocks: Vec<BlockParams>,
    /// `patch_pixels × d`
    pub patch_proj: Matrix,
    /// `vocab × d`
    pub token_table: Matrix,
    /// `n_patches × d`
    pub pos_vision: Matrix,
    /// `text_len × d`
    pub pos_text: Matrix,
    /// `d × n_embed`
    pub head_vision: Matrix,
    pub head_text: Matrix,
    /// Head offsets, `1 × n_embed`, applied before normalization.
    pub bias_vision: Matrix,
    pub bias_text: Matrix,
}

fn random_matrix(rows: usize, cols: usize, std: f64, g: &mut GaussianStream) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| std * g.next()).collect())
        .expect("sized")
}

/// Gaussian initialization; layer-norm gains start at one and shifts at zero.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut g = GaussianStream::new(seed);
    let std = config.init_std();
    let vision_blocks = (0..config.layers)
        .map(|_| BlockParams::random(config, std, &mut g))
        .collect();
    let text_blocks = (0..config.layers)
        .map(|_| BlockParams::random(config, std, &mut g))
        .collect();
    let patch_proj = random_matrix(config.patch_pixels(), config.d, std, &mut g);
    let token_table = random_matrix(config.vocab, config.d, std, &mut g);
    let pos_vision = random_matrix(config.n_patches(), config.d, std, &mut g);
    let pos_text = random_matrix(config.text_len, config.d, std, &mut g);
    let head_vision = random_matrix(config.d, config.n_embed, std, &mut g);
    let head_text = random_matrix(config.d, config.n_embed, std, &mut g);
    Ok(EncoderParams {
        config: config.clone(),
        vision_blocks,
        text_blocks,
        patch_proj,
        token_table,
        pos_vision,
        pos_text,
        head_vision,
        head_text,
        bias_vision: Matrix::zeros(1, config.n_embed),
        bias_text: Matrix::zeros(1, config.n_embed),
    })
}

impl EncoderParams {
    /// Every matrix with a stable name; the serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("patch_proj".to_string(), &self.patch_proj),
            ("token_table".to_string(), &self.token_table),
            ("pos_vision".to_string(), &self.pos_vision),
            ("pos_text".to_string(), &self.pos_text),
            ("head_vision".to_string(), &self.head_vision),
            ("head_text".to_string(), &self.head_text),
            ("bias_vision".to_string(), &self.bias_vision),
            ("bias_text".to_string(), &self.bias_text),
        ];
        for (l, b) in self.vision_blocks.iter().enumerate() {
            out.extend(b.named(&format!("vision.{l}")));
        }
        for (l, b) in self.text_blocks.iter().enumerate() {
            out.extend(b.named(&format!("text.{l}")));
        }
        out
    }

    /// Mutable views in the same order as [`EncoderParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![
            &mut self.patch_proj,
            &mut self.token_table,
            &mut self.pos_vision,
            &mut self.pos_text,
            &mut self.head_vision,
            &mut self.head_text,
            &mut self.bias_vision,
            &mut self.bias_text,
        ];
        for b in &mut self.vision_blocks {
            out.extend(b.named_mut());
        }
        for b in &mut self.text_blocks {
            out.extend(b.named_mut());
        }
        out
    }

    pub fn check_image(&self, img: &ImageTensor) -> Result<()> {
        let c = &self.config;
        if img.shape() != (c.image_hw, c.image_hw, c.channels) {
            return Err(Error::shape(
                "vision_encode",
                format!(
                    "image {:?}, model expects {:?}",
                    img.shape(),
                    (c.image_hw, c.image_hw, c.channels)
                ),
            ));
        }
        Ok(())
    }

    pub fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        let c = &self.config;
        if ids.len() != c.text_len {
            return Err(Error::shape(
                "text_encode",
                format!("{} tokens, expected {}", ids.len(), c.text_len),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= c.vocab) {
            return Err(Error::arg(format!(
                "token id {bad} out of vocabulary of {}",
                c.vocab
            )));
        }
        Ok(())
    }
}

/// Anything that maps an image to an embedding.
pub trait ImageEmbedder: Sync {
    /// `(h, w, c)` of accepted images.
    fn image_shape(&self) -> (usize, usize, usize);
    fn embed_dim(&self) -> usize;
    fn embed(&self, img: &ImageTensor) -> Result<Embedding>;
}

pub fn vision_encode(params: &EncoderParams, img: &ImageTensor) -> Result<Embedding> {
    params.check_image(img)?;
    let x = Matrix::row_vector(img.pixels());
    let mut tape = crate::autodiff::Tape::new();
    let nodes = EncoderNodes::register(&mut tape, params, false);
    let xin = tape.constant(&x);
    let out = nodes.vision(&mut tape, params, xin)?;
    Ok(Embedding(tape.value(out).data().to_vec()))
}

/// Encodes every image independently, in input order.
pub fn vision_encode_batch<M: ImageEmbedder + ?Sized>(
    model: &M,
    images: &[ImageTensor],
) -> Result<Vec<Embedding>> {
    images.par_iter().map(|img| model.embed(img)).collect()
}

/// Sets the vision head offset so that pre-normalization head outputs average
/// to zero over `images`. The mean shared by all images otherwise dominates
/// the normalized embeddings.
pub fn center_vision_head(params: &mut EncoderParams, images: &[ImageTensor]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::arg("centering needs at least one image"));
    }
    let outs = images
        .par_iter()
        .map(|img| {
            params.check_image(img)?;
            let x = Matrix::row_vector(img.pixels());
            let mut tape = crate::autodiff::Tape::new();
            let nodes = EncoderNodes::register(&mut tape, params, false);
            let xin = tape.constant(&x);
            let out = nodes.vision_head(&mut tape, params, xin)?;
            Ok(Embedding(tape.value(out).data().to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = Embedding::mean(&outs)?;
    for (b, m) in params.bias_vision.data_mut().iter_mut().zip(mean.as_slice()) {
        *b -= m;
    }
    Ok(())
}

pub fn text_encode(params: &EncoderParams, token_ids: &[usize]) -> Result<Embedding> {
    params.check_tokens(token_ids)?;
    let mut tape = crate::autodiff::Tape::new();
    let nodes = EncoderNodes::register(&mut tape, params, false);
    let out = nodes.text(&mut tape, params, token_ids)?;
    Ok(Embedding(tape.value(out).data().to_vec()))
}

impl ImageEmbedder for EncoderParams {
    fn image_shape(&self) -> (usize, usize, usize) {
        let c = &self.config;
        (c.image_hw, c.image_hw, c.channels)
    }

    fn embed_dim(&self) -> usize {
        self.config.n_embed
    }

    fn embed(&self, img: &ImageTensor) -> Result<Embedding> {
        vision_encode(self, img)
    }
}
