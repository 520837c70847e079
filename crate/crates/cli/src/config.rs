use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use onhw_core::dataio::SplitMode;
use onhw_core::losses::LossParams;
use onhw_core::netcore::{LossSelector, ModelConfig, TrainConfig};
use onhw_core::preprocess::{AugmentConfig, AugmentMethod};
use onhw_core::segment::StrokeParams;
use serde::{Deserialize, Serialize};

/// Where `ingest` takes its alphabet from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AlphabetSource {
    /// The fixed 15 equation symbols.
    #[default]
    Equations,
    /// Every distinct character of the labels file.
    Auto,
}

/// Contents of the `--config` file. Every field is optional; command-line
/// flags take precedence.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub folds: Option<PathBuf>,
    pub alphabet: AlphabetSource,
    pub mode: SplitMode,
    pub k: usize,
    pub fold: usize,
    pub loss: LossSelector,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss_params: LossParams,
    pub augment: AugmentConfig,
    pub augment_methods: Vec<AugmentMethod>,
    pub strokes: StrokeParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: None,
            out: None,
            data: None,
            labels: None,
            dataset: None,
            folds: None,
            alphabet: AlphabetSource::Equations,
            mode: SplitMode::WriterDependent,
            k: 5,
            fold: 0,
            loss: LossSelector::Ctc,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss_params: LossParams::default(),
            augment: AugmentConfig::default(),
            augment_methods: AugmentMethod::ALL.to_vec(),
            strokes: StrokeParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Resolved global options shared by every command.
pub struct Context {
    pub cfg: ExperimentConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        let seed = seed.or(cfg.seed);
        let out = out.or_else(|| cfg.out.clone());
        Context { cfg, seed, out }
    }

    pub fn seed(&self) -> Result<u64> {
        match self.seed {
            Some(s) => Ok(s),
            None => bail!("a seed is required: pass --seed or set \"seed\" in the config"),
        }
    }

    pub fn seed_opt(&self) -> Option<u64> {
        self.seed
    }

    /// The output directory, created if missing.
    pub fn out_dir(&self) -> Result<PathBuf> {
        let Some(dir) = &self.out else {
            bail!("an output directory is required: pass --out or set \"out\" in the config");
        };
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir.clone())
    }

    pub fn has_out(&self) -> bool {
        self.out.is_some()
    }
}

/// Picks the flag over the config value and checks that the file exists.
pub fn input_path(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let Some(path) = flag.or_else(|| fallback.clone()) else {
        bail!("missing {what}: pass --{what} or set \"{what}\" in the config");
    };
    if !path.exists() {
        bail!("{what} file {} does not exist", path.display());
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.loss, LossSelector::Ctc);
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.augment_methods.len(), 5);
    }

    #[test]
    fn nested_sections_are_partial() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 3, "mode": "WI", "loss": "focal", "train": {"epochs": 2}}"#).unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.mode, SplitMode::WriterIndependent);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.loss.to_string(), "focal");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 3}"#).is_err());
    }

    #[test]
    fn flags_override_config() {
        let cfg = ExperimentConfig {
            seed: Some(1),
            ..Default::default()
        };
        assert_eq!(Context::new(cfg.clone(), Some(9), None).seed().unwrap(), 9);
        assert_eq!(Context::new(cfg, None, None).seed().unwrap(), 1);
        assert!(Context::new(ExperimentConfig::default(), None, None).seed().is_err());
    }
}
