//! Run configuration: a flat JSON file naming the inputs (a generation
//! spec or tensor files), the attention variants to evaluate, trial
//! count, seeds, and the output format.

use qattn_core::GenSpec;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
    #[serde(alias = "markdown-table")]
    Md,
}

impl std::str::FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "md" | "markdown-table" => Ok(Self::Md),
            other => Err(format!("unknown output format '{other}' (expected json|csv|md)")),
        }
    }
}

/// Paths to pre-generated Q/K/V tensor files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorPaths {
    pub q: PathBuf,
    pub k: PathBuf,
    pub v: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputSource {
    Gen(GenSpec),
    Files(TensorPaths),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Synthetic input spec; its seed field is replaced per trial by
    /// `seed + trial_index`.
    #[serde(default)]
    pub gen: Option<GenSpec>,
    /// Tensor file inputs; mutually exclusive with `gen`.
    #[serde(default)]
    pub tensors: Option<TensorPaths>,
    /// Named attention variants to evaluate, in report order.
    pub variants: Vec<String>,
    #[serde(default = "RunConfig::default_trials")]
    pub trials: usize,
    /// Base seed; trial t runs at seed + t.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub causal: bool,
    #[serde(default = "RunConfig::default_format")]
    pub format: OutputFormat,
    /// Worker threads; the QATTN_THREADS environment variable overrides.
    #[serde(default)]
    pub parallelism: Option<usize>,
}

impl RunConfig {
    fn default_trials() -> usize {
        1
    }

    fn default_format() -> OutputFormat {
        OutputFormat::Md
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.variants.is_empty() {
            return Err("config needs at least one variant".into());
        }
        if self.trials == 0 {
            return Err("config needs at least one trial".into());
        }
        match (&self.gen, &self.tensors) {
            (None, None) => Err("config needs either a 'gen' spec or 'tensors' paths".into()),
            (Some(_), Some(_)) => Err("'gen' and 'tensors' are mutually exclusive".into()),
            _ => Ok(()),
        }
    }

    pub fn input_source(&self) -> InputSource {
        match (&self.gen, &self.tensors) {
            (Some(spec), None) => InputSource::Gen(spec.clone()),
            (None, Some(paths)) => InputSource::Files(paths.clone()),
            _ => unreachable!("validated"),
        }
    }
}
