//! Run manifests: the command, a config snapshot and content hashes of the
//! run's inputs and outputs. A manifest parses as a config file, so a run can
//! be repeated by passing it back as `--config`.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.cfg";

/// SHA-256 over `"blob <len>\0"` followed by the content, in the manner of git
/// object ids.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub config: RunConfig,
    /// `(name, hash)`; the rendered config is always the first input.
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            inputs: vec![("config".into(), content_hash(config.render().as_bytes()))],
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, name: &str, bytes: &[u8]) {
        self.inputs.push((name.to_string(), content_hash(bytes)));
    }

    pub fn add_output(&mut self, name: &str, bytes: &[u8]) {
        self.outputs.push((name.to_string(), content_hash(bytes)));
    }

    pub fn input(&self, name: &str) -> Option<&str> {
        self.inputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, h)| h.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# run manifest; pass back with --config to repeat the run\n");
        let _ = writeln!(out, "command = {}", self.command);
        for (n, h) in &self.inputs {
            let _ = writeln!(out, "input.{n} = {h}");
        }
        for (n, h) in &self.outputs {
            let _ = writeln!(out, "output.{n} = {h}");
        }
        out.push_str(&self.config.render());
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (config, extras) = RunConfig::parse_with_extras(text)?;
        let mut command = None;
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (k, v) in extras {
            if k == "command" {
                command = Some(v);
            } else if let Some(n) = k.strip_prefix("input.") {
                inputs.push((n.to_string(), v));
            } else if let Some(n) = k.strip_prefix("output.") {
                outputs.push((n.to_string(), v));
            }
        }
        Ok(Self {
            command: command.ok_or_else(|| Error::arg("manifest lacks a command line"))?,
            config,
            inputs,
            outputs,
        })
    }
}
