//! Versioned run configuration shared by every command.
//!
//! A run configuration is a TOML document. Every section is optional except
//! `format_version`; unknown keys are rejected. [`RunConfig::to_toml`]
//! writes the fully materialized form, which replays the run exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{SubgroupCell, DEFAULT_TOP_K};
use crate::data::{Binarize, SplitFractions, SyntheticConfig, GROUP_ATTRIBUTE};
use crate::error::{NirError, Result};
use crate::model::Architecture;
use crate::trainer::TrainConfig;

pub const RUN_CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(flatten)]
    pub fractions: SplitFractions,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> Vec<usize> {
    vec![32, 16]
}

/// Hidden widths; the input width comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: default_hidden(),
        }
    }
}

fn default_attributes() -> Vec<String> {
    vec![GROUP_ATTRIBUTE.to_string()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default = "default_attributes")]
    pub attributes: Vec<String>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            attributes: default_attributes(),
        }
    }
}

fn default_reference() -> String {
    "label=+,group=A".into()
}
fn default_privileged() -> String {
    "label=+,group=B".into()
}
fn default_cells() -> Vec<String> {
    [
        "label=+,group=A",
        "label=+,group=B",
        "label=-,group=A",
        "label=-,group=B",
    ]
    .map(String::from)
    .to_vec()
}
fn default_k() -> usize {
    DEFAULT_TOP_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_reference")]
    pub reference: String,
    #[serde(default = "default_privileged")]
    pub privileged: String,
    #[serde(default = "default_cells")]
    pub cells: Vec<String>,
    #[serde(default = "default_k")]
    pub k: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            reference: default_reference(),
            privileged: default_privileged(),
            cells: default_cells(),
            k: default_k(),
        }
    }
}

impl AnalysisConfig {
    /// The reference cell first, then the remaining configured cells, then
    /// the privileged cell if it was not listed.
    pub fn resolved_cells(&self) -> Result<Vec<SubgroupCell>> {
        let reference: SubgroupCell = self.reference.parse()?;
        let mut cells = vec![reference];
        for spec in self.cells.iter().chain(std::iter::once(&self.privileged)) {
            let cell: SubgroupCell = spec.parse()?;
            if !cells.contains(&cell) {
                cells.push(cell);
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    #[serde(default)]
    pub data: SyntheticConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    /// Numeric attributes to split at the median after loading.
    #[serde(default)]
    pub binarize: Vec<Binarize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: RUN_CONFIG_FORMAT_VERSION,
            data: SyntheticConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            audit: AuditConfig::default(),
            analysis: AnalysisConfig::default(),
            binarize: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| NirError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| NirError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            NirError::Config(msg) => NirError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| NirError::Serialization(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != RUN_CONFIG_FORMAT_VERSION {
            return Err(NirError::Config(format!(
                "format_version: unsupported value {} (expected {RUN_CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let section = |name: &'static str| {
            move |e: NirError| match e {
                NirError::Config(msg) => NirError::Config(format!("[{name}] {msg}")),
                other => other,
            }
        };
        self.data.validate().map_err(section("data"))?;
        self.split.fractions.validate().map_err(section("split"))?;
        self.train.validate().map_err(section("train"))?;
        Architecture::new(1, self.model.hidden_dims.clone()).map_err(section("model"))?;
        if self.audit.attributes.is_empty() {
            return Err(NirError::Config(
                "[audit] attributes must not be empty".into(),
            ));
        }
        self.analysis
            .resolved_cells()
            .map_err(section("analysis"))?;
        if self.analysis.k == 0 {
            return Err(NirError::Config("[analysis] k must be at least 1".into()));
        }
        Ok(())
    }

    /// Uses `seed` for data generation, splitting and training alike.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn architecture(&self, input_dim: usize) -> Result<Architecture> {
        Architecture::new(input_dim, self.model.hidden_dims.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_materializes_defaults() {
        let cfg = RunConfig::from_toml("format_version = 1\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("adam_beta2"));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("format_version = 1\n[train]\nlamda = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
    }

    #[test]
    fn missing_version_is_rejected() {
        let err = RunConfig::from_toml("[train]\nlambda = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("format_version"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        for doc in [
            "format_version = 2",
            "format_version = 1\n[split]\ntrain = 0.8\nval = 0.1\ntest = 0.2",
            "format_version = 1\n[train]\nlambda = -1.0",
            "format_version = 1\n[model]\nhidden_dims = [8, 1]",
            "format_version = 1\n[analysis]\nreference = \"label=?\"",
        ] {
            assert!(
                matches!(RunConfig::from_toml(doc), Err(NirError::Config(_))),
                "{doc}"
            );
        }
    }

    #[test]
    fn float_fields_survive_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.learning_rate = 0.1 + 0.2;
        cfg.data.noise_std = 1.0 / 3.0;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(
            back.train.learning_rate.to_bits(),
            cfg.train.learning_rate.to_bits()
        );
        assert_eq!(back.data.noise_std.to_bits(), cfg.data.noise_std.to_bits());
    }
}
