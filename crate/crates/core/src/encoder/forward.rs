use std::sync::Arc;

use crate::autodiff::{NodeId, Tape};
use crate::encoder::{BlockParams, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{gemm, gemm_nt, softmax_rows, Matrix, LN_EPS};

/// Pixels enter the patch projection as `2·x − 1`.
pub(crate) const INPUT_SCALE: f64 = 2.0;
pub(crate) const INPUT_SHIFT: f64 = -1.0;

/// Tape handles for one block's weights.
pub struct BlockNodes {
    wq: Vec<NodeId>,
    wk: Vec<NodeId>,
    wv: Vec<NodeId>,
    wc: Vec<NodeId>,
    gamma1: NodeId,
    beta1: NodeId,
    gamma2: NodeId,
    beta2: NodeId,
    w1: NodeId,
    w2: NodeId,
    head_scale: f64,
}

impl BlockNodes {
    fn register<'a>(tape: &mut Tape<'a>, b: &'a BlockParams, trainable: bool) -> Self {
        let mut leaf = |m: &'a Matrix| {
            if trainable {
                tape.variable(m)
            } else {
                tape.constant(m)
            }
        };
        let wq = b.wq.iter().map(&mut leaf).collect();
        let wk = b.wk.iter().map(&mut leaf).collect();
        let wv = b.wv.iter().map(&mut leaf).collect();
        let wc = b.wc.iter().map(&mut leaf).collect();
        let k = b.wq.first().map_or(1, Matrix::cols);
        Self {
            wq,
            wk,
            wv,
            wc,
            gamma1: leaf(&b.gamma1),
            beta1: leaf(&b.beta1),
            gamma2: leaf(&b.gamma2),
            beta2: leaf(&b.beta2),
            w1: leaf(&b.w1),
            w2: leaf(&b.w2),
            head_scale: 1.0 / (k as f64).sqrt(),
        }
    }

    fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        out.extend(&self.wq);
        out.extend(&self.wk);
        out.extend(&self.wv);
        out.extend(&self.wc);
        out.extend([
            self.gamma1,
            self.beta1,
            self.gamma2,
            self.beta2,
            self.w1,
            self.w2,
        ]);
        out
    }

    /// Records one transformer block applied to `x` (`n × d`).
    pub fn apply(&self, tape: &mut Tape<'_>, x: NodeId) -> Result<NodeId> {
        let mut mixed: Option<NodeId> = None;
        for h in 0..self.wq.len() {
            let q = tape.matmul(x, self.wq[h])?;
            let k = tape.matmul(x, self.wk[h])?;
            let v = tape.matmul(x, self.wv[h])?;
            let logits = tape.matmul_nt(q, k)?;
            let logits = tape.scale(logits, self.head_scale)?;
            let alpha = tape.softmax_rows(logits)?;
            let attended = tape.matmul(alpha, v)?;
            let out = tape.matmul(attended, self.wc[h])?;
            mixed = Some(match mixed {
                Some(acc) => tape.add(acc, out)?,
                None => out,
            });
        }
        let pre = match mixed {
            Some(m) => tape.add(x, m)?,
            None => x,
        };
        let u = tape.layer_norm_rows(pre, self.gamma1, self.beta1, LN_EPS)?;
        let hidden = tape.matmul(u, self.w1)?;
        let hidden = tape.relu(hidden)?;
        let ff = tape.matmul(hidden, self.w2)?;
        let pre = tape.add(u, ff)?;
        tape.layer_norm_rows(pre, self.gamma2, self.beta2, LN_EPS)
    }
}

/// Tape handles for every encoder weight.
pub struct EncoderNodes {
    vision_blocks: Vec<BlockNodes>,
    text_blocks: Vec<BlockNodes>,
    pub patch_proj: NodeId,
    pub token_table: NodeId,
    pub pos_vision: NodeId,
    pub pos_text: NodeId,
    pub head_vision: NodeId,
    pub head_text: NodeId,
    pub bias_vision: NodeId,
    pub bias_text: NodeId,
    patch_index: Arc<[usize]>,
}

impl EncoderNodes {
    /// Registers all weights as leaves: variables when `trainable`, else constants.
    pub fn register<'a>(tape: &mut Tape<'a>, p: &'a EncoderParams, trainable: bool) -> Self {
        let vision_blocks = p
            .vision_blocks
            .iter()
            .map(|b| BlockNodes::register(tape, b, trainable))
            .collect();
        let text_blocks = p
            .text_blocks
            .iter()
            .map(|b| BlockNodes::register(tape, b, trainable))
            .collect();
        let mut leaf = |m: &'a Matrix| {
            if trainable {
                tape.variable(m)
            } else {
                tape.constant(m)
            }
        };
        Self {
            vision_blocks,
            text_blocks,
            patch_proj: leaf(&p.patch_proj),
            token_table: leaf(&p.token_table),
            pos_vision: leaf(&p.pos_vision),
            pos_text: leaf(&p.pos_text),
            head_vision: leaf(&p.head_vision),
            head_text: leaf(&p.head_text),
            bias_vision: leaf(&p.bias_vision),
            bias_text: leaf(&p.bias_text),
            patch_index: patch_index(&p.config),
        }
    }

    /// Leaf ids in [`EncoderParams::tensors_mut`] order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut out = vec![
            self.patch_proj,
            self.token_table,
            self.pos_vision,
            self.pos_text,
            self.head_vision,
            self.head_text,
            self.bias_vision,
            self.bias_text,
        ];
        for b in self.vision_blocks.iter().chain(&self.text_blocks) {
            out.extend(b.ids());
        }
        out
    }

    /// Image row vector (`1 × h·w·c`) to embedding (`1 × n_embed`).
    pub fn vision(&self, tape: &mut Tape<'_>, p: &EncoderParams, x: NodeId) -> Result<NodeId> {
        let out = self.vision_head(tape, p, x)?;
        finish(tape, &p.config, out, 1.0)
    }

    /// Vision tower up to the head offset, before normalization.
    pub fn vision_head(
        &self,
        tape: &mut Tape<'_>,
        p: &EncoderParams,
        x: NodeId,
    ) -> Result<NodeId> {
        let c = &p.config;
        let scaled = tape.affine(x, INPUT_SCALE, INPUT_SHIFT)?;
        let patches = tape.gather(
            scaled,
            self.patch_index.clone(),
            c.n_patches(),
            c.patch_pixels(),
        )?;
        let tokens = tape.matmul(patches, self.patch_proj)?;
        let mut h = tape.add(tokens, self.pos_vision)?;
        for b in &self.vision_blocks {
            h = b.apply(tape, h)?;
        }
        let pooled = tape.mean_rows(h)?;
        let out = tape.matmul(pooled, self.head_vision)?;
        tape.add(out, self.bias_vision)
    }

    /// Token ids to embedding (`1 × n_embed`).
    pub fn text(&self, tape: &mut Tape<'_>, p: &EncoderParams, ids: &[usize]) -> Result<NodeId> {
        let d = p.config.d;
        let index: Arc<[usize]> = ids
            .iter()
            .flat_map(|&t| (0..d).map(move |j| t * d + j))
            .collect();
        let tokens = tape.gather(self.token_table, index, ids.len(), d)?;
        let mut h = tape.add(tokens, self.pos_text)?;
        for b in &self.text_blocks {
            h = b.apply(tape, h)?;
        }
        let pooled = tape.mean_rows(h)?;
        let out = tape.matmul(pooled, self.head_text)?;
        let out = tape.add(out, self.bias_text)?;
        finish(tape, &p.config, out, p.config.logit_scale)
    }
}

fn finish(tape: &mut Tape<'_>, c: &EncoderConfig, out: NodeId, norm: f64) -> Result<NodeId> {
    if c.normalize {
        tape.normalize_rows(out, norm)
    } else {
        Ok(out)
    }
}

/// Flat-image index for each (patch, within-patch value), patches row-major
/// over the grid, values ordered `(dy, dx, channel)`.
pub(crate) fn patch_index(c: &EncoderConfig) -> Arc<[usize]> {
    let (g, p, ch, w) = (c.grid(), c.patch, c.channels, c.image_hw);
    let mut out = Vec::with_capacity(c.image_len());
    for py in 0..g {
        for px in 0..g {
            for dy in 0..p {
                for dx in 0..p {
                    let base = ((py * p + dy) * w + (px * p + dx)) * ch;
                    out.extend(base..base + ch);
                }
            }
        }
    }
    out.into()
}

/// Attention weights `α` (`n × n`) of one head.
pub fn attention_weights(tokens: &Matrix, block: &BlockParams, head: usize) -> Result<Matrix> {
    if head >= block.heads() {
        return Err(Error::arg(format!(
            "head {head} out of range for {} heads",
            block.heads()
        )));
    }
    let q = gemm(tokens, &block.wq[head])?;
    let k = gemm(tokens, &block.wk[head])?;
    let scale = 1.0 / (block.wq[head].cols() as f64).sqrt();
    Ok(softmax_rows(&gemm_nt(&q, &k)?.scale(scale)))
}

/// One block applied to an `n × d` token matrix.
pub fn block_forward(tokens: &Matrix, block: &BlockParams) -> Result<Matrix> {
    let d = block.gamma1.cols();
    if tokens.cols() != d {
        return Err(Error::shape(
            "block_forward",
            format!("tokens {:?}, block width {d}", tokens.shape()),
        ));
    }
    let mut tape = Tape::new();
    let nodes = BlockNodes::register(&mut tape, block, false);
    let x = tape.constant(tokens);
    let out = nodes.apply(&mut tape, x)?;
    Ok(tape.value(out).clone())
}
