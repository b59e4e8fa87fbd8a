//! The standard toy setup shared by the CLI and the end-to-end tests: the
//! synthetic dataset, a model, its label set and matching targets, all
//! derived from one [`RunConfig`].

use rayon::prelude::*;

use crate::classifier::{Classifier, LabelSet, ZeroShot};
use crate::encoder::{
    center_vision_head, init_params, train_contrastive, vision_encode_batch, Embedding,
    EncoderParams, ImageTensor, TrainConfig, TrainReport,
};
use crate::encoder::train::TrainSet;
use crate::error::{Error, Result};
use crate::harness::{generate_dataset, Dataset, LabelMode, RunConfig};
use crate::matcher::{class_targets, match_embedding, MatchConfig, MatchResult};

pub struct Experiment {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub params: EncoderParams,
    pub labels: LabelSet,
}

/// Random init from the master seed, head centered on the train split.
pub fn fresh_params(config: &RunConfig, dataset: &Dataset) -> Result<EncoderParams> {
    let mut params = init_params(&config.encoder, config.seed)?;
    let (train, _) = dataset.select(&dataset.train);
    center_vision_head(&mut params, &train)?;
    Ok(params)
}

impl Experiment {
    /// Builds the dataset and label set; `params` defaults to
    /// [`fresh_params`].
    pub fn new(config: &RunConfig, params: Option<EncoderParams>) -> Result<Self> {
        let dataset = generate_dataset(&config.dataset_spec())?;
        let params = match params {
            Some(p) => {
                if p.config != config.encoder {
                    return Err(Error::arg("model parameters do not match the encoder config"));
                }
                p
            }
            None => fresh_params(config, &dataset)?,
        };
        let labels = label_set(config, &dataset, &params)?;
        Ok(Self {
            config: config.clone(),
            dataset,
            params,
            labels,
        })
    }

    pub fn classifier(&self) -> ZeroShot<'_, EncoderParams> {
        ZeroShot::new(&self.params, &self.labels)
    }

    pub fn n_classes(&self) -> usize {
        self.dataset.n_classes()
    }

    pub fn image(&self, id: usize) -> Result<&ImageTensor> {
        self.dataset
            .images
            .get(id)
            .ok_or_else(|| Error::arg(format!("image id {id} out of range for {} images", self.dataset.len())))
    }

    /// Matching target per class: the train-split representative.
    pub fn targets(&self) -> Result<Vec<Embedding>> {
        let (train, labels) = self.dataset.select(&self.dataset.train);
        let embs = vision_encode_batch(&self.params, &train)?;
        class_targets(&embs, &labels, self.n_classes())
    }

    pub fn match_config(&self) -> MatchConfig {
        let c = &self.config;
        MatchConfig {
            lr: c.lr,
            max_steps: c.max_steps,
            cosine_target: c.cosine_target,
            clamp_pixels: c.clamp,
            trace_every: c.trace_every,
            seed: c.seed,
        }
    }

    /// Held-out ids taken round-robin over classes: the first of each class,
    /// then the second, and so on.
    pub fn held_out_round_robin(&self, n: usize) -> Vec<usize> {
        round_robin(&self.dataset, self.n_classes())
            .into_iter()
            .take(n)
            .collect()
    }

    /// Like [`Experiment::held_out_round_robin`], skipping images the
    /// classifier gets wrong.
    pub fn correct_round_robin(&self, n: usize) -> Result<Vec<usize>> {
        let zs = self.classifier();
        let order = round_robin(&self.dataset, self.n_classes());
        let ok = order
            .par_iter()
            .map(|&i| Ok(zs.predict(&self.dataset.images[i])? == self.dataset.labels[i]))
            .collect::<Result<Vec<bool>>>()?;
        let ids: Vec<usize> = order
            .into_iter()
            .zip(ok)
            .filter(|(_, ok)| *ok)
            .map(|(i, _)| i)
            .take(n)
            .collect();
        if ids.len() < n {
            return Err(Error::arg(format!(
                "only {} correctly classified held-out images, {n} requested",
                ids.len()
            )));
        }
        Ok(ids)
    }

    /// Target class used when one image is paired with one other class.
    pub fn paired_class(&self, class: usize) -> usize {
        (class + 1) % self.n_classes()
    }

    /// Matches each image toward the target of its paired class.
    pub fn match_paired(&self, ids: &[usize]) -> Result<Vec<MatchResult>> {
        let targets = self.targets()?;
        let cfg = self.match_config();
        ids.par_iter()
            .map(|&i| {
                let t = self.paired_class(self.dataset.labels[i]);
                match_embedding(&self.params, self.image(i)?, &targets[t], &cfg)
            })
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        let c = &self.config;
        TrainConfig {
            epochs: c.train_epochs,
            lr: c.train_lr,
            batch_size: c.train_batch,
            temperature: c.temperature,
            seed: c.seed,
        }
    }

    /// Contrastive training on the train split, then the label set is
    /// rebuilt from the new parameters.
    pub fn train(&mut self) -> Result<TrainReport> {
        let (images, labels) = self.dataset.select(&self.dataset.train);
        let tokens: Vec<Vec<usize>> = (0..self.n_classes())
            .map(|c| {
                crate::classifier::class_tokens(c, self.config.encoder.text_len, self.config.encoder.vocab)
            })
            .collect();
        let set = TrainSet {
            images: &images,
            labels: &labels,
            class_tokens: &tokens,
        };
        let (params, report) = train_contrastive(&self.params, &set, &self.train_config())?;
        self.params = params;
        self.labels = label_set(&self.config, &self.dataset, &self.params)?;
        Ok(report)
    }
}

fn label_set(config: &RunConfig, dataset: &Dataset, params: &EncoderParams) -> Result<LabelSet> {
    match config.mode {
        LabelMode::Anchor => {
            let (train, labels) = dataset.select(&dataset.train);
            LabelSet::from_anchors(
                params,
                &train,
                &labels,
                &dataset.class_names,
                config.encoder.logit_scale,
            )
        }
        LabelMode::Trained => LabelSet::from_text_tower(params, &dataset.class_names),
    }
}

fn round_robin(dataset: &Dataset, n_classes: usize) -> Vec<usize> {
    let per: Vec<Vec<usize>> = (0..n_classes)
        .map(|c| dataset.of_class(&dataset.test, c))
        .collect();
    let longest = per.iter().map(Vec::len).max().unwrap_or(0);
    (0..longest)
        .flat_map(|j| per.iter().filter_map(move |ids| ids.get(j).copied()))
        .collect()
}
