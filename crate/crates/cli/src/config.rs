//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use priorprobe_core::diagnostics::DiagnosticConfig;
use priorprobe_core::llm::BackendConfig;
use priorprobe_core::{AgentSpec, SweepSpec, Task};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_error, CliError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub initial_values: Vec<u64>,
    pub chains_per_init: u64,
    pub steps: u64,
    #[serde(default)]
    pub burn_in: u64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_output_dir")]
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_output_dir() }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Reads and validates `path`. Relative output and cache directories are
    /// resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| read_error(path, e))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if config.output.dir.is_relative() {
            config.output.dir = base.join(&config.output.dir);
        }
        if let Some(b) = &mut config.backend {
            if b.cache_dir.is_relative() {
                b.cache_dir = base.join(&b.cache_dir);
            }
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." || path.is_empty() {
                CliError::config(format!("config: {inner}"))
            } else {
                CliError::config(format!("config field `{path}`: {inner}"))
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Range and consistency checks; every message names the offending field.
    pub fn validate(&self) -> Result<(), CliError> {
        self.task
            .validate()
            .map_err(|e| CliError::config(format!("config field `task`: {e}")))?;
        if let Some(agent) = &self.agent {
            agent
                .build(&self.task)
                .map_err(|e| CliError::config(format!("config field `agent`: {e}")))?;
        }
        if let Some(backend) = &self.backend {
            backend
                .validate()
                .map_err(|(field, reason)| CliError::config(format!("config field `backend.{field}`: {reason}")))?;
        }
        if let Some(sweep) = &self.sweep {
            self.validate_sweep(sweep)?;
        }
        if let Some(d) = &self.diagnostics {
            d.validate()
                .map_err(|reason| CliError::config(format!("config field `diagnostics`: {reason}")))?;
        }
        if self.output.dir.as_os_str().is_empty() {
            return Err(CliError::config("config field `output.dir`: must not be empty"));
        }
        Ok(())
    }

    fn validate_sweep(&self, sweep: &SweepSection) -> Result<(), CliError> {
        let field = |name: &str, reason: String| CliError::config(format!("config field `sweep.{name}`: {reason}"));
        if sweep.initial_values.is_empty() {
            return Err(field("initial_values", "must list at least one value".into()));
        }
        for (i, &v) in sweep.initial_values.iter().enumerate() {
            if !self.task.contains_observation(v) {
                return Err(field(
                    &format!("initial_values[{i}]"),
                    format!("{v} is outside the {} task range", self.task.name()),
                ));
            }
            if sweep.initial_values[..i].contains(&v) {
                return Err(field(&format!("initial_values[{i}]"), format!("{v} is listed twice")));
            }
        }
        if sweep.chains_per_init == 0 {
            return Err(field("chains_per_init", "must be positive".into()));
        }
        if sweep.steps == 0 {
            return Err(field("steps", "must be positive".into()));
        }
        if sweep.burn_in >= sweep.steps {
            return Err(field("burn_in", format!("must be smaller than steps ({})", sweep.steps)));
        }
        Ok(())
    }

    pub fn sweep_section(&self, command: &str) -> Result<&SweepSection, CliError> {
        self.sweep
            .as_ref()
            .ok_or_else(|| CliError::config(format!("config field `sweep`: required by {command}")))
    }

    pub fn sweep_spec(&self, command: &str) -> Result<SweepSpec, CliError> {
        let s = self.sweep_section(command)?;
        Ok(SweepSpec {
            task: self.task,
            initial_values: s.initial_values.clone(),
            chains_per_init: s.chains_per_init,
            steps: s.steps,
            burn_in: s.burn_in,
            master_seed: s.seed,
        })
    }

    pub fn diagnostics(&self) -> DiagnosticConfig {
        self.diagnostics.unwrap_or_default()
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
