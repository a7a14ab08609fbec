//! The JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fbcnet::attention::{AttentionConfig, AttentionKind};
use fbcnet::checks::SuiteConfig;
use fbcnet::evalkit::ablation::Variant;
use fbcnet::evalkit::train::Experiment;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub variants: Vec<Variant>,
    /// Empty means five seeds counting up from the run seed.
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { variants: Variant::ALL.to_vec(), seeds: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub kinds: Vec<AttentionKind>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub attention: AttentionConfig,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            kinds: AttentionKind::ALL.to_vec(),
            channels: 64,
            height: 80,
            width: 80,
            k: 5,
            attention: AttentionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpSection {
    /// Index into the evaluation split.
    pub image_index: usize,
    /// Weights manifest; the freshly initialized model when absent.
    pub weights: Option<PathBuf>,
    /// Put every FBCA site into its symmetric configuration first.
    pub symmetric: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `experiment.train.seed` and the gradcheck base seed.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub precision: Precision,
    pub experiment: Experiment,
    pub gradcheck: SuiteConfig,
    pub ablation: AblationSection,
    pub bench: BenchSection,
    pub dump: DumpSection,
}

/// A parsed config plus the exact text it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub source: String,
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::usage(format!("config: at `{path}`: {}", e.into_inner()))
    })
}

pub fn load(path: Option<&Path>) -> Result<LoadedConfig, CliError> {
    match path {
        Some(p) => {
            let source = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?;
            Ok(LoadedConfig { config: parse(&source)?, source })
        }
        None => {
            let config = RunConfig::default();
            let source = serde_json::to_string_pretty(&config).expect("config serializes") + "\n";
            Ok(LoadedConfig { config, source })
        }
    }
}
