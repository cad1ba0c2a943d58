//! Pipeline configuration read from TOML or JSON; command-line flags override it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::CliError;
use crate::detect::ArchConfig;
use crate::evaluate::EvalOptions;
use crate::fusion::VariantKind;
use crate::train::{PredictOptions, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub calibration: Option<PathBuf>,
    /// Holds `annotations.json`, `split.json` and the media folders.
    pub dataset_root: Option<PathBuf>,
    pub output_root: Option<PathBuf>,
    /// Defaults to `<dataset_root>/annotations.json`.
    pub coco: Option<PathBuf>,
    /// Defaults to `<dataset_root>/split.json`.
    pub split: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    /// `rgb`, `depth`, `rgbd` or `all`.
    pub variant: String,
    pub runs: usize,
    pub seed: u64,
    /// Integer factor by which images are shrunk before entering the network.
    pub input_downscale: u32,
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub eval: EvalOptions,
    pub predict: PredictOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            variant: "all".into(),
            runs: 10,
            seed: 0,
            input_downscale: 1,
            train: TrainConfig::default(),
            arch: ArchConfig::default(),
            eval: EvalOptions::default(),
            predict: PredictOptions::default(),
        }
    }
}

/// Parses a `.toml` or `.json` file into `T`.
pub fn read_config_file<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| e.to_string()),
        Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
        _ => return Err(CliError::Usage(format!("config {} must end in .toml or .json", path.display()))),
    };
    parsed.map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => read_config_file(p),
            None => Ok(Self::default()),
        }
    }

    pub fn variants(&self) -> Result<Vec<VariantKind>, CliError> {
        if self.variant == "all" {
            return Ok(VariantKind::ALL.to_vec());
        }
        self.variant
            .parse::<VariantKind>()
            .map(|v| vec![v])
            .map_err(|_| CliError::Usage(format!("variant must be rgb, depth, rgbd or all, got {:?}", self.variant)))
    }

    fn dataset_file(&self, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
        match (explicit, &self.paths.dataset_root) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(root)) => Ok(root.join(name)),
            (None, None) => Err(CliError::Usage(format!("set paths.dataset_root or the path of {name}"))),
        }
    }

    pub fn coco_path(&self) -> Result<PathBuf, CliError> {
        self.dataset_file(&self.paths.coco, "annotations.json")
    }

    pub fn split_path(&self) -> Result<PathBuf, CliError> {
        self.dataset_file(&self.paths.split, "split.json")
    }

    /// Directory the COCO file's media folders live in.
    pub fn media_root(&self) -> Result<PathBuf, CliError> {
        match &self.paths.dataset_root {
            Some(root) => Ok(root.clone()),
            None => Ok(self.coco_path()?.parent().map(Path::to_path_buf).unwrap_or_default()),
        }
    }

    pub fn output_root(&self) -> Result<PathBuf, CliError> {
        self.paths.output_root.clone().ok_or_else(|| CliError::Usage("set paths.output_root or --out".into()))
    }

    /// Checks values and that the dataset inputs exist.
    pub fn validate_for_dataset(&self) -> Result<(), CliError> {
        self.variants()?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.arch.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.runs == 0 {
            return Err(CliError::Usage("runs must be at least 1".into()));
        }
        if self.input_downscale == 0 {
            return Err(CliError::Usage("input_downscale must be at least 1".into()));
        }
        for p in [self.coco_path()?, self.split_path()?] {
            if !p.is_file() {
                return Err(CliError::Usage(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
