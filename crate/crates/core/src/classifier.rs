//! Zero-shot classification in the shared space: softmax over inner products
//! between an image embedding and one embedding per class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{text_encode, vision_encode_batch, EncoderParams, Embedding, ImageEmbedder, ImageTensor};
use crate::error::{Error, Result};
use crate::numerics::ops::softmax_in_place;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub name: String,
    pub tokens: Vec<usize>,
}

/// Fixed token sequence of class `c`: ids `1 + (c·len + j) mod (vocab − 1)`,
/// so id 0 stays free for padding.
pub fn class_tokens(class: usize, text_len: usize, vocab: usize) -> Vec<usize> {
    (0..text_len)
        .map(|j| 1 + (class * text_len + j) % (vocab - 1).max(1))
        .collect()
}

/// Class labels with one embedding each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub labels: Vec<ClassLabel>,
    pub text_embs: Vec<Embedding>,
}

impl LabelSet {
    pub fn new(labels: Vec<ClassLabel>, text_embs: Vec<Embedding>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::arg("a label set needs at least two classes"));
        }
        if labels.len() != text_embs.len() {
            return Err(Error::shape(
                "LabelSet",
                format!("{} labels, {} embeddings", labels.len(), text_embs.len()),
            ));
        }
        let n = text_embs[0].len();
        if let Some(e) = text_embs.iter().find(|e| e.len() != n) {
            return Err(Error::shape(
                "LabelSet",
                format!("embedding lengths {n} and {}", e.len()),
            ));
        }
        Ok(Self { labels, text_embs })
    }

    /// Class embeddings from the text tower.
    pub fn from_text_tower(params: &EncoderParams, names: &[String]) -> Result<Self> {
        let c = &params.config;
        let labels: Vec<ClassLabel> = names
            .iter()
            .enumerate()
            .map(|(i, n)| ClassLabel {
                name: n.clone(),
                tokens: class_tokens(i, c.text_len, c.vocab),
            })
            .collect();
        let embs = labels
            .iter()
            .map(|l| text_encode(params, &l.tokens))
            .collect::<Result<Vec<_>>>()?;
        Self::new(labels, embs)
    }

    /// Anchor mode: class `c` is represented by `scale` times the mean image
    /// embedding of its members in `images`.
    pub fn from_anchors<M: ImageEmbedder + ?Sized>(
        model: &M,
        images: &[ImageTensor],
        labels: &[usize],
        names: &[String],
        scale: f64,
    ) -> Result<Self> {
        let embs = vision_encode_batch(model, images)?;
        Self::from_anchor_embeddings(&embs, labels, names, scale)
    }

    pub fn from_anchor_embeddings(
        embs: &[Embedding],
        labels: &[usize],
        names: &[String],
        scale: f64,
    ) -> Result<Self> {
        if embs.len() != labels.len() {
            return Err(Error::shape(
                "LabelSet::from_anchors",
                format!("{} embeddings, {} labels", embs.len(), labels.len()),
            ));
        }
        let anchors = (0..names.len())
            .map(|c| {
                let members: Vec<Embedding> = embs
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(e, _)| e.clone())
                    .collect();
                if members.is_empty() {
                    return Err(Error::arg(format!("class {c} has no anchor images")));
                }
                let mean = Embedding::mean(&members)?;
                Ok(Embedding(mean.0.into_iter().map(|v| v * scale).collect()))
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = names
            .iter()
            .map(|n| ClassLabel {
                name: n.clone(),
                tokens: Vec::new(),
            })
            .collect();
        Self::new(labels, anchors)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.text_embs[0].len()
    }

    pub fn names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.name.clone()).collect()
    }

    /// Raw inner products with every class embedding.
    pub fn scores(&self, img_emb: &Embedding) -> Result<Vec<f64>> {
        if img_emb.len() != self.embed_dim() {
            return Err(Error::shape(
                "zero_shot_probs",
                format!("embedding {}, labels {}", img_emb.len(), self.embed_dim()),
            ));
        }
        Ok(self.text_embs.iter().map(|t| img_emb.dot(t)).collect())
    }
}

pub fn zero_shot_probs(img_emb: &Embedding, labels: &LabelSet) -> Result<Vec<f64>> {
    let mut p = labels.scores(img_emb)?;
    softmax_in_place(&mut p);
    Ok(p)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

pub fn classify(img_emb: &Embedding, labels: &LabelSet) -> Result<usize> {
    Ok(argmax(&zero_shot_probs(img_emb, labels)?))
}

/// Anything that assigns a class to an image.
pub trait Classifier: Sync {
    fn n_classes(&self) -> usize;
    fn predict(&self, img: &ImageTensor) -> Result<usize>;
}

/// An image embedder paired with a label set.
pub struct ZeroShot<'a, M: ?Sized> {
    pub model: &'a M,
    pub labels: &'a LabelSet,
}

impl<'a, M: ImageEmbedder + ?Sized> ZeroShot<'a, M> {
    pub fn new(model: &'a M, labels: &'a LabelSet) -> Self {
        Self { model, labels }
    }

    pub fn probs(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        zero_shot_probs(&self.model.embed(img)?, self.labels)
    }
}

impl<M: ImageEmbedder + ?Sized> Classifier for ZeroShot<'_, M> {
    fn n_classes(&self) -> usize {
        self.labels.len()
    }

    fn predict(&self, img: &ImageTensor) -> Result<usize> {
        classify(&self.model.embed(img)?, self.labels)
    }
}

/// Counts with rows indexed by true class and columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let c = class_names.len();
        Self {
            class_names,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn from_predictions(class_names: Vec<String>, truth: &[usize], pred: &[usize]) -> Result<Self> {
        let mut m = Self::new(class_names);
        let c = m.counts.len();
        if truth.len() != pred.len() {
            return Err(Error::shape(
                "confusion_matrix",
                format!("{} labels, {} predictions", truth.len(), pred.len()),
            ));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= c || p >= c {
                return Err(Error::arg(format!("label {} out of range for {c} classes", t.max(p))));
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Fraction on the diagonal; zero for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Header of class names, then one row of counts per true class.
    pub fn to_csv(&self) -> String {
        let mut out = self.class_names.join(",");
        out.push('\n');
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "class_names": self.class_names,
            "counts": self.counts,
            "total": self.total(),
            "accuracy": self.accuracy(),
        })
        .to_string()
    }
}

/// Classifies every image (in parallel) and tallies against `truth`.
pub fn confusion_matrix<C: Classifier + ?Sized>(
    classifier: &C,
    class_names: Vec<String>,
    images: &[ImageTensor],
    truth: &[usize],
) -> Result<ConfusionMatrix> {
    if images.len() != truth.len() {
        return Err(Error::shape(
            "confusion_matrix",
            format!("{} images, {} labels", images.len(), truth.len()),
        ));
    }
    let c = classifier.n_classes();
    if let Some(&bad) = truth.iter().find(|&&t| t >= c) {
        return Err(Error::arg(format!("label {bad} out of range for {c} classes")));
    }
    let pred = images
        .par_iter()
        .map(|img| classifier.predict(img))
        .collect::<Result<Vec<_>>>()?;
    ConfusionMatrix::from_predictions(class_names, truth, &pred)
}

fn checked_norms(embs: &[Embedding], side: &str) -> Result<Vec<f64>> {
    embs.iter()
        .enumerate()
        .map(|(i, e)| {
            let n = e.norm();
            if n == 0.0 {
                Err(Error::Numerical(format!("{side} embedding {i} has zero norm")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

fn check_lists(a: &[Embedding], b: &[Embedding]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::arg("cosine lists must be nonempty"));
    }
    let n = a[0].len();
    if let Some(e) = a.iter().chain(b).find(|e| e.len() != n) {
        return Err(Error::shape(
            "pairwise_cosine",
            format!("embedding lengths {n} and {}", e.len()),
        ));
    }
    Ok(())
}

/// Cosine of every `(a_i, b_j)` pair, row-major over `a`.
pub fn pairwise_cosine(a: &[Embedding], b: &[Embedding]) -> Result<Vec<f64>> {
    check_lists(a, b)?;
    let na = checked_norms(a, "first-list")?;
    let nb = checked_norms(b, "second-list")?;
    Ok(a.iter()
        .zip(&na)
        .flat_map(|(x, nx)| {
            b.iter()
                .zip(&nb)
                .map(move |(y, ny)| (x.dot(y) / (nx * ny)).clamp(-1.0, 1.0))
        })
        .collect())
}

/// Cosine of every unordered pair of distinct members of `a`.
pub fn within_cosine(a: &[Embedding]) -> Result<Vec<f64>> {
    check_lists(a, a)?;
    let n = checked_norms(a, "list")?;
    let mut out = Vec::with_capacity(a.len() * a.len().saturating_sub(1) / 2);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            out.push((a[i].dot(&a[j]) / (n[i] * n[j])).clamp(-1.0, 1.0));
        }
    }
    Ok(out)
}

/// Rows of images, columns of class probabilities.
pub fn probability_grid_csv(ids: &[usize], probs: &[Vec<f64>], class_names: &[String]) -> String {
    let mut out = format!("id,{}\n", class_names.join(","));
    for (id, row) in ids.iter().zip(probs) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&format!("{id},{}\n", cells.join(",")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{softmax_rows, GaussianStream, Matrix};
    use proptest::prelude::*;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("c{i}")).collect()
    }

    fn labels_from(embs: Vec<Vec<f64>>) -> LabelSet {
        let c = embs.len();
        let labels = names(c)
            .into_iter()
            .map(|name| ClassLabel { name, tokens: vec![] })
            .collect();
        LabelSet::new(labels, embs.into_iter().map(Embedding).collect()).unwrap()
    }

    #[test]
    fn uniform_when_scores_tie() {
        let l = labels_from(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let p = zero_shot_probs(&Embedding(vec![0.0, 0.0]), &l).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn two_class_analytic() {
        let l = labels_from(vec![vec![std::f64::consts::LN_2], vec![0.0]]);
        let p = zero_shot_probs(&Embedding(vec![1.0]), &l).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax(&[0.1, 0.8, 0.1]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        let l = labels_from(vec![vec![1.0], vec![1.0]]);
        assert_eq!(classify(&Embedding(vec![3.0]), &l).unwrap(), 0);
    }

    #[test]
    fn label_set_validation() {
        assert!(LabelSet::new(vec![], vec![]).is_err());
        let one = ClassLabel { name: "a".into(), tokens: vec![] };
        assert!(LabelSet::new(vec![one.clone(), one.clone()], vec![Embedding(vec![1.0])]).is_err());
        let l = labels_from(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(zero_shot_probs(&Embedding(vec![1.0]), &l), Err(Error::Shape { .. })));
    }

    #[test]
    fn tokens_skip_padding_id() {
        for c in 0..20 {
            let t = class_tokens(c, 4, 64);
            assert_eq!(t.len(), 4);
            assert!(t.iter().all(|&v| (1..64).contains(&v)));
        }
        assert_ne!(class_tokens(0, 4, 64), class_tokens(1, 4, 64));
    }

    struct Oracle(Vec<usize>);

    impl Classifier for Oracle {
        fn n_classes(&self) -> usize {
            3
        }

        fn predict(&self, img: &ImageTensor) -> Result<usize> {
            // the first pixel encodes the sample index
            Ok(self.0[(img.pixels()[0] * 10.0).round() as usize])
        }
    }

    fn indexed_images(n: usize) -> Vec<ImageTensor> {
        (0..n)
            .map(|i| ImageTensor::filled(1, 1, 1, i as f64 / 10.0).unwrap())
            .collect()
    }

    #[test]
    fn perfect_classifier_is_diagonal() {
        let truth = vec![0, 1, 2, 2, 1];
        let m = confusion_matrix(&Oracle(truth.clone()), names(3), &indexed_images(5), &truth).unwrap();
        assert_eq!(m.accuracy(), 1.0);
        assert_eq!(m.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
    }

    #[test]
    fn hand_tallied_case() {
        let truth = vec![0, 0, 1, 2];
        let pred = vec![0, 2, 1, 1];
        let m = confusion_matrix(&Oracle(pred), names(3), &indexed_images(4), &truth).unwrap();
        assert_eq!(m.counts, vec![vec![1, 0, 1], vec![0, 1, 0], vec![0, 1, 0]]);
        assert_eq!(m.accuracy(), 0.5);
        assert_eq!(m.to_csv(), "c0,c1,c2\n1,0,1\n0,1,0\n0,1,0\n");
        let j: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(j["total"], 4);
        let bad = confusion_matrix(&Oracle(vec![0; 4]), names(3), &indexed_images(4), &[0, 0, 3, 0]);
        assert!(matches!(bad, Err(Error::Argument(_))));
    }

    #[test]
    fn cosine_cases() {
        let v = Embedding(vec![1.0, 2.0, -0.5]);
        let neg = Embedding(vec![-1.0, -2.0, 0.5]);
        let orth = Embedding(vec![2.0, -1.0, 0.0]);
        let c = pairwise_cosine(std::slice::from_ref(&v), &[v.clone(), neg, orth]).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-15);
        assert!((c[1] + 1.0).abs() < 1e-15);
        assert!(c[2].abs() < 1e-15);
        let zero = Embedding(vec![0.0; 3]);
        let e = pairwise_cosine(std::slice::from_ref(&v), &[v.clone(), zero.clone()]).unwrap_err();
        assert!(e.to_string().contains("embedding 1"), "{e}");
        assert_eq!(within_cosine(&[v.clone(), v.clone(), v]).unwrap().len(), 3);
        assert!(within_cosine(&[zero]).is_err());
    }

    #[test]
    fn anchors_are_scaled_class_means() {
        let embs = vec![
            Embedding(vec![1.0, 0.0]),
            Embedding(vec![0.0, 1.0]),
            Embedding(vec![3.0, 0.0]),
        ];
        let l = LabelSet::from_anchor_embeddings(&embs, &[0, 1, 0], &names(2), 10.0).unwrap();
        assert_eq!(l.text_embs[0].0, vec![20.0, 0.0]);
        assert_eq!(l.text_embs[1].0, vec![0.0, 10.0]);
        assert!(LabelSet::from_anchor_embeddings(&embs, &[0, 0, 0], &names(2), 1.0).is_err());
    }

    #[test]
    fn grid_layout() {
        let csv = probability_grid_csv(&[4, 9], &[vec![0.25, 0.75], vec![1.0, 0.0]], &names(2));
        assert_eq!(csv, "id,c0,c1\n4,0.25,0.75\n9,1,0\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_softmax_rows(seed in any::<u64>(), c in 2usize..12, shift in -50.0f64..50.0) {
            let mut g = GaussianStream::new(seed);
            let text: Vec<Vec<f64>> = (0..c).map(|_| (0..5).map(|_| 3.0 * g.next()).collect()).collect();
            let l = labels_from(text);
            let img = Embedding((0..5).map(|_| g.next()).collect());
            let p = zero_shot_probs(&img, &l).unwrap();
            let dots = l.scores(&img).unwrap();
            let oracle = softmax_rows(&Matrix::row_vector(&dots));
            for (a, b) in p.iter().zip(oracle.data()) {
                prop_assert!((a - b).abs() <= 1e-14);
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            // shifting every score leaves probabilities and argmax alone
            let mut shifted = dots.clone();
            shifted.iter_mut().for_each(|v| *v += shift);
            softmax_in_place(&mut shifted);
            for (a, b) in p.iter().zip(&shifted) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert_eq!(argmax(&p), argmax(&dots));
        }

        #[test]
        fn row_sums_conserve_counts(truth in proptest::collection::vec(0usize..4, 1..60), seed in any::<u64>()) {
            let mut g = GaussianStream::new(seed);
            let pred: Vec<usize> = truth.iter().map(|_| g.below(4)).collect();
            let m = ConfusionMatrix::from_predictions(names(4), &truth, &pred).unwrap();
            for c in 0..4 {
                prop_assert_eq!(m.row_sums()[c], truth.iter().filter(|&&t| t == c).count());
            }
            prop_assert_eq!(m.total(), truth.len());
        }
    }
}
