//! Pipeline configuration, presets and override merging.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Default,
    /// Narrower smoothing for question answering.
    Qa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub chunk_size: usize,
    /// Configured smoothing width; even values are widened by one when
    /// applied (see [`PipelineConfig::smoothing_kernel`]).
    pub kernel_size: usize,
    pub top_centers: usize,
    /// Suppression radius; defaults to `kernel_size`.
    pub nms_radius: Option<usize>,
    pub lead_tokens: usize,
    pub tail_tokens: usize,
    pub stop_feature_threshold: u64,
    pub bm25_window: usize,
    pub top_m: usize,
    pub token_budget: Option<usize>,
    pub seed: u64,
    pub retriever: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            chunk_size: 2048,
            kernel_size: 48,
            top_centers: 40,
            nms_radius: None,
            lead_tokens: 64,
            tail_tokens: 64,
            stop_feature_threshold: 5000,
            bm25_window: 256,
            top_m: 2,
            token_budget: None,
            seed: 0,
            retriever: "s3-hybrid".to_string(),
        }
    }
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Default => Self::default(),
            Preset::Qa => PipelineConfig {
                kernel_size: 8,
                ..Self::default()
            },
        }
    }

    /// Odd box width actually used for smoothing.
    pub fn smoothing_kernel(&self) -> usize {
        self.kernel_size | 1
    }

    pub fn radius(&self) -> usize {
        self.nms_radius.unwrap_or(self.kernel_size)
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            lead_tokens: self.lead_tokens,
            tail_tokens: self.tail_tokens,
            token_budget: self.token_budget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("chunk_size", self.chunk_size),
            ("kernel_size", self.kernel_size),
            ("top_centers", self.top_centers),
            ("bm25_window", self.bm25_window),
            ("top_m", self.top_m),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if self.nms_radius == Some(0) {
            return Err(Error::contract("nms_radius must be positive"));
        }
        if self.token_budget == Some(0) {
            return Err(Error::contract("token_budget must be positive when set"));
        }
        if self.retriever.is_empty() {
            return Err(Error::contract("retriever name is empty"));
        }
        Ok(())
    }

    /// Resolves the preset, then applies `flags`, then `file` (the file wins),
    /// then validates.
    pub fn resolve(flags: &ConfigOverrides, file: Option<&ConfigOverrides>) -> Result<Self> {
        let preset = file
            .and_then(|f| f.preset)
            .or(flags.preset)
            .unwrap_or_default();
        let mut config = Self::preset(preset);
        flags.apply(&mut config);
        if let Some(file) = file {
            file.apply(&mut config);
        }
        config.validate()?;
        Ok(config)
    }
}

/// Optional values for every configuration field, as given on the command
/// line or in a TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigOverrides {
    pub preset: Option<Preset>,
    pub chunk_size: Option<usize>,
    pub kernel_size: Option<usize>,
    pub top_centers: Option<usize>,
    pub nms_radius: Option<usize>,
    pub lead_tokens: Option<usize>,
    pub tail_tokens: Option<usize>,
    pub stop_feature_threshold: Option<u64>,
    pub bm25_window: Option<usize>,
    pub top_m: Option<usize>,
    pub token_budget: Option<usize>,
    pub seed: Option<u64>,
    pub retriever: Option<String>,
}

impl ConfigOverrides {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(format!("bad config file: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn apply(&self, c: &mut PipelineConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { c.$field = v.clone(); })*
            };
        }
        set!(
            chunk_size,
            kernel_size,
            top_centers,
            lead_tokens,
            tail_tokens,
            stop_feature_threshold,
            bm25_window,
            top_m,
            seed,
            retriever
        );
        if self.nms_radius.is_some() {
            c.nms_radius = self.nms_radius;
        }
        if self.token_budget.is_some() {
            c.token_budget = self.token_budget;
        }
    }
}
