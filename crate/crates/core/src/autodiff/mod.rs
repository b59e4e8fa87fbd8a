//! Reverse-mode differentiation of the image tower: vector-Jacobian
//! products, the embedding-matching loss gradient, and full Jacobians.

mod tape;

pub use tape::{Adjoints, NodeId, Tape};

use crate::encoder::{EncoderNodes, EncoderParams, Embedding, ImageEmbedder, ImageTensor};
use crate::error::{Error, Result};
use crate::numerics::{dot, reduced_svd, Matrix, SvdFactors};

/// An image embedder with exact vector-Jacobian products.
pub trait Differentiable: ImageEmbedder {
    /// `f(x)` together with `(∂f/∂x)ᵀ · cotangent`, the latter laid out like
    /// the image pixels.
    fn vjp(&self, img: &ImageTensor, cotangent: &[f64]) -> Result<(Embedding, Vec<f64>)>;

    /// Like [`Differentiable::vjp`], with the cotangent computed from `f(x)`.
    fn vjp_with(
        &self,
        img: &ImageTensor,
        cotangent: &dyn Fn(&Embedding) -> Vec<f64>,
    ) -> Result<(Embedding, Vec<f64>)> {
        let f = self.embed(img)?;
        let (_, g) = self.vjp(img, &cotangent(&f))?;
        Ok((f, g))
    }

    /// `f(x)` and the `n_embed × pixels` Jacobian.
    fn jacobian_at(&self, img: &ImageTensor) -> Result<(Embedding, Matrix)> {
        let n = self.embed_dim();
        let mut rows = Vec::with_capacity(n);
        let mut f = None;
        let mut e = vec![0.0; n];
        for i in 0..n {
            e[i] = 1.0;
            let (fx, g) = self.vjp(img, &e)?;
            e[i] = 0.0;
            f.get_or_insert(fx);
            rows.push(g);
        }
        let f = f.ok_or_else(|| Error::arg("embedding dimension is zero"))?;
        Ok((f, Matrix::from_rows(&rows)?))
    }
}

fn check_cotangent(n: usize, cot: &[f64]) -> Result<()> {
    if cot.len() != n {
        return Err(Error::shape(
            "vjp",
            format!("cotangent length {}, embedding dim {n}", cot.len()),
        ));
    }
    Ok(())
}

impl Differentiable for EncoderParams {
    fn vjp(&self, img: &ImageTensor, cotangent: &[f64]) -> Result<(Embedding, Vec<f64>)> {
        check_cotangent(self.config.n_embed, cotangent)?;
        self.vjp_with(img, &|_| cotangent.to_vec())
    }

    fn vjp_with(
        &self,
        img: &ImageTensor,
        cotangent: &dyn Fn(&Embedding) -> Vec<f64>,
    ) -> Result<(Embedding, Vec<f64>)> {
        self.check_image(img)?;
        let x = Matrix::row_vector(img.pixels());
        let mut tape = Tape::new();
        let nodes = EncoderNodes::register(&mut tape, self, false);
        let xin = tape.variable(&x);
        let out = nodes.vision(&mut tape, self, xin)?;
        let f = Embedding(tape.value(out).data().to_vec());
        let cot = cotangent(&f);
        check_cotangent(self.config.n_embed, &cot)?;
        let seed = Matrix::row_vector(&cot);
        let mut adj = tape.backward(&[(out, &seed)])?;
        let grad = adj
            .take(xin)
            .map(Matrix::into_data)
            .unwrap_or_else(|| vec![0.0; img.len()]);
        Ok((f, grad))
    }

    /// One forward pass, `n_embed` reverse sweeps over the same tape.
    fn jacobian_at(&self, img: &ImageTensor) -> Result<(Embedding, Matrix)> {
        self.check_image(img)?;
        let n = self.config.n_embed;
        let x = Matrix::row_vector(img.pixels());
        let mut tape = Tape::new();
        let nodes = EncoderNodes::register(&mut tape, self, false);
        let xin = tape.variable(&x);
        let out = nodes.vision(&mut tape, self, xin)?;
        let mut j = Matrix::zeros(n, img.len());
        let mut seed = Matrix::zeros(1, n);
        for i in 0..n {
            seed.data_mut()[i] = 1.0;
            let mut adj = tape.backward(&[(out, &seed)])?;
            seed.data_mut()[i] = 0.0;
            if let Some(g) = adj.take(xin) {
                j.row_mut(i).copy_from_slice(g.data());
            }
        }
        Ok((Embedding(tape.value(out).data().to_vec()), j))
    }
}

/// `f(x) = A · x` over flattened pixels. Test surrogate for the encoder.
#[derive(Clone, Debug)]
pub struct LinearSurrogate {
    pub a: Matrix,
    pub shape: (usize, usize, usize),
}

impl LinearSurrogate {
    pub fn new(a: Matrix, shape: (usize, usize, usize)) -> Result<Self> {
        if a.cols() != shape.0 * shape.1 * shape.2 {
            return Err(Error::shape(
                "LinearSurrogate",
                format!("{} columns for image {:?}", a.cols(), shape),
            ));
        }
        Ok(Self { a, shape })
    }

    fn check(&self, img: &ImageTensor) -> Result<()> {
        if img.shape() != self.shape {
            return Err(Error::shape(
                "LinearSurrogate",
                format!("image {:?}, expected {:?}", img.shape(), self.shape),
            ));
        }
        Ok(())
    }
}

impl ImageEmbedder for LinearSurrogate {
    fn image_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    fn embed_dim(&self) -> usize {
        self.a.rows()
    }

    fn embed(&self, img: &ImageTensor) -> Result<Embedding> {
        self.check(img)?;
        Ok(Embedding(self.a.matvec(img.pixels())?))
    }
}

impl Differentiable for LinearSurrogate {
    fn vjp(&self, img: &ImageTensor, cotangent: &[f64]) -> Result<(Embedding, Vec<f64>)> {
        self.check(img)?;
        check_cotangent(self.a.rows(), cotangent)?;
        Ok((self.embed(img)?, self.a.tr_matvec(cotangent)?))
    }

    fn jacobian_at(&self, img: &ImageTensor) -> Result<(Embedding, Matrix)> {
        Ok((self.embed(img)?, self.a.clone()))
    }
}

/// `(∂f/∂x)ᵀ · cotangent` at `img`.
pub fn vjp<M: Differentiable + ?Sized>(
    model: &M,
    img: &ImageTensor,
    cotangent: &[f64],
) -> Result<Vec<f64>> {
    Ok(model.vjp(img, cotangent)?.1)
}

/// Matching loss `½‖f(x) − target‖²` and its gradient w.r.t. the pixels.
pub fn loss_grad<M: Differentiable + ?Sized>(
    model: &M,
    x: &ImageTensor,
    target: &Embedding,
) -> Result<LossGrad> {
    let n = model.embed_dim();
    if target.len() != n {
        return Err(Error::shape(
            "loss_grad",
            format!("target length {}, embedding dim {n}", target.len()),
        ));
    }
    let (f, grad) = model.vjp_with(x, &|fx| fx.sub(target).0)?;
    let r = f.sub(target);
    Ok(LossGrad {
        loss: 0.5 * dot(r.as_slice(), r.as_slice()),
        grad,
        embedding: f,
    })
}

#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// `f(x)` at the evaluation point.
    pub embedding: Embedding,
}

/// Jacobian of the image embedding at one input, with its reduced SVD.
#[derive(Clone, Debug)]
pub struct JacobianReport {
    pub j: Matrix,
    pub svd: SvdFactors,
    pub embedding: Embedding,
    pub at_input: ImageTensor,
}

pub fn jacobian<M: Differentiable + ?Sized>(model: &M, img: &ImageTensor) -> Result<JacobianReport> {
    let (embedding, j) = model.jacobian_at(img)?;
    let svd = reduced_svd(&j)?;
    Ok(JacobianReport {
        j,
        svd,
        embedding,
        at_input: img.clone(),
    })
}

#[cfg(test)]
mod tests;
