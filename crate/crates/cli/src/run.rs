//! Config resolution, input loading and the output writer shared by every
//! subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use embspace::encoder::{EncoderParams, ImageTensor};
use embspace::harness::io::{decode_tensor, params_from_archive, decode_archive};
use embspace::harness::{content_hash, Manifest, RunConfig, MANIFEST_FILE};

use crate::CliError;

/// Flags accepted by every subcommand. Precedence, lowest first: built-in
/// defaults, `--config`, `--set`, the named flags.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Config file or a previous run's manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: runs/<command>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override any config key, e.g. `--set per_class=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Comma-separated noise levels.
    #[arg(long)]
    pub sigma_grid: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub cosine_target: Option<f64>,
    #[arg(long)]
    pub votes: Option<usize>,
    /// `anchor` or `trained`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Parameter archive to load.
    #[arg(long)]
    pub model: Option<String>,
    /// Image tensor to analyse instead of dataset image `source`.
    #[arg(long)]
    pub input: Option<String>,
}

impl Common {
    fn flag_overrides(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let mut push = |k, s: Option<String>| {
            if let Some(s) = s {
                v.push((k, s));
            }
        };
        push("seed", self.seed.map(|x| x.to_string()));
        push("sigma", self.sigma.map(|x| x.to_string()));
        push("sigma_grid", self.sigma_grid.clone());
        push("lr", self.lr.map(|x| x.to_string()));
        push("max_steps", self.max_steps.map(|x| x.to_string()));
        push("cosine_target", self.cosine_target.map(|x| x.to_string()));
        push("votes", self.votes.map(|x| x.to_string()));
        push("mode", self.mode.clone());
        push("model", self.model.clone());
        push("input", self.input.clone());
        v
    }
}

pub struct Run {
    pub config: RunConfig,
    out: PathBuf,
    manifest: Manifest,
    /// The manifest passed as `--config`, if any.
    recorded: Option<Manifest>,
}

impl Run {
    pub fn setup(command: &str, args: &Common) -> Result<Self, CliError> {
        let (mut config, recorded) = match &args.config {
            None => (RunConfig::default(), None),
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                let (config, extras) = RunConfig::parse_with_extras(&text)?;
                if extras.is_empty() {
                    (config, None)
                } else {
                    let m = Manifest::parse(&text)?;
                    if m.command != command {
                        return Err(CliError::Usage(format!(
                            "manifest records command {:?}, not {command:?}",
                            m.command
                        )));
                    }
                    (config, Some(m))
                }
            }
        };
        for s in &args.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            config.set(k.trim(), v.trim())?;
        }
        for (k, v) in args.flag_overrides() {
            config.set(k, &v)?;
        }
        let out = args
            .out
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(command));
        fs::create_dir_all(&out)?;
        Ok(Self {
            manifest: Manifest::new(command, &config),
            config,
            out,
            recorded,
        })
    }

    fn read_input(&mut self, name: &str, path: &str) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("{path}: {e}")))?;
        if let Some(want) = self.recorded.as_ref().and_then(|m| m.input(name)) {
            if want != content_hash(&bytes) {
                return Err(CliError::Mismatch(format!(
                    "{path} differs from the {name} recorded in the manifest"
                )));
            }
        }
        self.manifest.add_input(name, &bytes);
        Ok(bytes)
    }

    /// The `model` archive, if configured.
    pub fn model(&mut self) -> Result<Option<EncoderParams>, CliError> {
        let Some(path) = self.config.model.clone() else {
            return Ok(None);
        };
        let bytes = self.read_input("model", &path)?;
        let p = params_from_archive(&self.config.encoder, decode_archive(&bytes)?)?;
        Ok(Some(p))
    }

    /// The `input` image, if configured.
    pub fn input(&mut self) -> Result<Option<ImageTensor>, CliError> {
        let Some(path) = self.config.input.clone() else {
            return Ok(None);
        };
        let bytes = self.read_input("input", &path)?;
        Ok(Some(decode_tensor(&bytes)?.into_image()?))
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let bytes = bytes.as_ref();
        fs::write(self.out.join(name), bytes)?;
        self.manifest.add_output(name, bytes);
        Ok(())
    }

    /// Writes the manifest. When repeating a recorded run under the same
    /// config, every output must hash as recorded.
    pub fn finish(self) -> Result<PathBuf, CliError> {
        fs::write(self.out.join(MANIFEST_FILE), self.manifest.render())?;
        if let Some(rec) = &self.recorded {
            if rec.input("config") == self.manifest.input("config") {
                for (name, hash) in &rec.outputs {
                    let now = self.manifest.outputs.iter().find(|(n, _)| n == name);
                    if now.map(|(_, h)| h) != Some(hash) {
                        return Err(CliError::Mismatch(format!(
                            "output {name} does not reproduce the recorded run"
                        )));
                    }
                }
                println!("reproduced {} recorded outputs", rec.outputs.len());
            }
        }
        Ok(self.out)
    }
}
