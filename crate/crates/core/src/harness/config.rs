//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are listed in
//! `docs/config.md`. Rendering is canonical: every key in a fixed order with
//! round-trip float formatting, so a rendered config hashes stably.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::SyntheticDatasetSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Class-mean image embeddings stand in for text embeddings.
    Anchor,
    /// The text tower encodes each class's token sequence.
    Trained,
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor" => Ok(LabelMode::Anchor),
            "trained" => Ok(LabelMode::Trained),
            _ => Err(Error::arg(format!("mode must be anchor or trained, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelMode::Anchor => "anchor",
            LabelMode::Trained => "trained",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Master seed: dataset, model init and noise streams all derive from it.
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub n_classes: usize,
    pub per_class: usize,
    /// Parameter archive to load instead of a fresh init.
    pub model: Option<String>,
    /// Image tensor file analysed instead of dataset image `source`.
    pub input: Option<String>,
    pub mode: LabelMode,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub train_batch: usize,
    pub temperature: f64,
    pub lr: f64,
    pub max_steps: usize,
    pub cosine_target: f64,
    pub trace_every: usize,
    pub clamp: bool,
    /// Dataset image id used by single-image commands.
    pub source: usize,
    pub target_class: usize,
    /// Held-out images taken (round-robin over classes) by `systematic`.
    pub n_images: usize,
    /// Originals and matched images per side in `sweep-detect`.
    pub n_detect: usize,
    pub sigma: f64,
    pub sigma_grid: Vec<f64>,
    pub votes: usize,
    pub n_samples: usize,
    pub tau: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            n_classes: 10,
            per_class: 50,
            model: None,
            input: None,
            mode: LabelMode::Anchor,
            train_epochs: 5,
            train_lr: 0.01,
            train_batch: 32,
            temperature: 0.07,
            lr: 0.01,
            max_steps: 30_000,
            cosine_target: 0.98,
            trace_every: 100,
            clamp: true,
            source: 40,
            target_class: 1,
            n_images: 50,
            n_detect: 40,
            sigma: 0.05,
            sigma_grid: vec![0.0, 0.005, 0.01, 0.02, 0.03, 0.05, 0.1, 0.2, 0.3, 0.5],
            votes: 5,
            n_samples: 100,
            tau: 0.01,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::arg(format!("bad value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Prefixes of keys a manifest adds on top of a config.
const MANIFEST_KEYS: [&str; 3] = ["command", "input.", "output."];

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.encoder;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "image_hw" => e.image_hw = parse(key, v)?,
            "channels" => e.channels = parse(key, v)?,
            "patch" => e.patch = parse(key, v)?,
            "d" => e.d = parse(key, v)?,
            "k" => e.k = parse(key, v)?,
            "heads" => e.heads = parse(key, v)?,
            "m_mlp" => e.m_mlp = parse(key, v)?,
            "layers" => e.layers = parse(key, v)?,
            "n_embed" => e.n_embed = parse(key, v)?,
            "vocab" => e.vocab = parse(key, v)?,
            "text_len" => e.text_len = parse(key, v)?,
            "init_gain" => e.init_gain = parse(key, v)?,
            "normalize" => e.normalize = parse(key, v)?,
            "logit_scale" => e.logit_scale = parse(key, v)?,
            "n_classes" => self.n_classes = parse(key, v)?,
            "per_class" => self.per_class = parse(key, v)?,
            "model" => self.model = (!v.is_empty()).then(|| v.to_string()),
            "input" => self.input = (!v.is_empty()).then(|| v.to_string()),
            "mode" => self.mode = v.parse()?,
            "train_epochs" => self.train_epochs = parse(key, v)?,
            "train_lr" => self.train_lr = parse(key, v)?,
            "train_batch" => self.train_batch = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "cosine_target" => self.cosine_target = parse(key, v)?,
            "trace_every" => self.trace_every = parse(key, v)?,
            "clamp" => self.clamp = parse(key, v)?,
            "source" => self.source = parse(key, v)?,
            "target_class" => self.target_class = parse(key, v)?,
            "n_images" => self.n_images = parse(key, v)?,
            "n_detect" => self.n_detect = parse(key, v)?,
            "sigma" => self.sigma = parse(key, v)?,
            "sigma_grid" => self.sigma_grid = parse_list(key, v)?,
            "votes" => self.votes = parse(key, v)?,
            "n_samples" => self.n_samples = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            _ => return Err(Error::arg(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its canonical text value, in rendering order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.encoder;
        let grid = self
            .sigma_grid
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("seed", self.seed.to_string()),
            ("image_hw", e.image_hw.to_string()),
            ("channels", e.channels.to_string()),
            ("patch", e.patch.to_string()),
            ("d", e.d.to_string()),
            ("k", e.k.to_string()),
            ("heads", e.heads.to_string()),
            ("m_mlp", e.m_mlp.to_string()),
            ("layers", e.layers.to_string()),
            ("n_embed", e.n_embed.to_string()),
            ("vocab", e.vocab.to_string()),
            ("text_len", e.text_len.to_string()),
            ("init_gain", e.init_gain.to_string()),
            ("normalize", e.normalize.to_string()),
            ("logit_scale", e.logit_scale.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("per_class", self.per_class.to_string()),
            ("model", self.model.clone().unwrap_or_default()),
            ("input", self.input.clone().unwrap_or_default()),
            ("mode", self.mode.to_string()),
            ("train_epochs", self.train_epochs.to_string()),
            ("train_lr", self.train_lr.to_string()),
            ("train_batch", self.train_batch.to_string()),
            ("temperature", self.temperature.to_string()),
            ("lr", self.lr.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("cosine_target", self.cosine_target.to_string()),
            ("trace_every", self.trace_every.to_string()),
            ("clamp", self.clamp.to_string()),
            ("source", self.source.to_string()),
            ("target_class", self.target_class.to_string()),
            ("n_images", self.n_images.to_string()),
            ("n_detect", self.n_detect.to_string()),
            ("sigma", self.sigma.to_string()),
            ("sigma_grid", grid),
            ("votes", self.votes.to_string()),
            ("n_samples", self.n_samples.to_string()),
            ("tau", self.tau.to_string()),
        ]
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses config text. Manifest keys (`command`, `input.*`, `output.*`)
    /// are returned separately, in file order.
    pub fn parse_with_extras(text: &str) -> Result<(Self, Vec<(String, String)>)> {
        let mut cfg = Self::default();
        let mut extras = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::arg(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if MANIFEST_KEYS
                .iter()
                .any(|p| k == *p || (p.ends_with('.') && k.starts_with(p)))
            {
                extras.push((k.to_string(), v.to_string()));
                continue;
            }
            cfg.set(k, v)
                .map_err(|e| Error::arg(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok((cfg, extras))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self::parse_with_extras(text)?.0)
    }

    pub fn dataset_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            n_classes: self.n_classes,
            per_class: self.per_class,
            image_hw: self.encoder.image_hw,
            channels: self.encoder.channels,
            seed: self.seed,
        }
    }
}
