use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::data::{GeneratorConfig, NoiseFilter};
use crate::eval::ProtocolConfig;
use crate::pipeline::{FinetuneConfig, ModelVariant, PretrainConfig};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

fn default_variant() -> ModelVariant {
    ModelVariant::AnchorVmAbm
}

fn default_k() -> usize {
    5
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn yes() -> bool {
    true
}

/// Declarative run description, read from TOML.
///
/// Exactly one of `dataset_path` and `[generator]` must be present. Relative
/// paths are resolved against the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    #[serde(default)]
    pub dataset_path: Option<PathBuf>,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    #[serde(default = "default_variant")]
    pub variant: ModelVariant,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Pre-training noise filter; overrides `pretrain.noise_filter` when set.
    #[serde(default)]
    pub noise_filter: Option<NoiseFilter>,
    /// Extra filters evaluated with the pre-trained variant by `ablation`.
    #[serde(default)]
    pub noise_sweep: Vec<NoiseFilter>,
    #[serde(default = "yes")]
    pub bias_probe: bool,
    #[serde(default)]
    pub export_embeddings: bool,
    #[serde(default)]
    pub save_bundle: bool,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(p) = &cfg.dataset_path {
            cfg.dataset_path = Some(base.join(p));
        }
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config format_version {} (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.dataset_path.is_some() == self.generator.is_some() {
            return Err(CliError::Config(
                "exactly one of dataset_path and [generator] must be given".into(),
            ));
        }
        self.protocol().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(g) = &self.generator {
            g.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn protocol(&self) -> ProtocolConfig {
        let mut pretrain = self.pretrain.clone();
        if let Some(f) = &self.noise_filter {
            pretrain.noise_filter = f.clone();
        }
        ProtocolConfig {
            k: self.k,
            seeds: self.seeds.clone(),
            pretrain,
            finetune: self.finetune.clone(),
            bias_probe: self.bias_probe,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config() {
        let cfg = RunConfig::from_toml("format_version = 1\n[generator]\nsubjects = 10\n").unwrap();
        assert_eq!(cfg.generator.unwrap().subjects, 10);
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.variant, ModelVariant::AnchorVmAbm);
    }

    #[test]
    fn rejects_both_or_neither_source() {
        assert!(RunConfig::from_toml("format_version = 1\n").is_err());
        assert!(RunConfig::from_toml("format_version = 1\ndataset_path = \"d\"\n[generator]\n").is_err());
        assert!(RunConfig::from_toml("format_version = 1\ndataset_path = \"d\"\n").is_ok());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("format_version = 2\ndataset_path = \"d\"\n").is_err());
        assert!(RunConfig::from_toml("format_version = 1\ndataset_path = \"d\"\nseeds = []\n").is_err());
        assert!(RunConfig::from_toml("format_version = 1\ndataset_path = \"d\"\nbogus = 3\n").is_err());
        assert!(RunConfig::from_toml("format_version = 1\ndataset_path = \"d\"\nnoise_filter = [\"quiet\"]\n").is_err());
    }

    #[test]
    fn noise_filter_overrides_pretrain() {
        let cfg = RunConfig::from_toml(
            "format_version = 1\ndataset_path = \"d\"\nnoise_filter = [\"db55\", \"db75\"]\n[pretrain]\nepochs = 3\n",
        )
        .unwrap();
        let p = cfg.protocol();
        assert_eq!(p.pretrain.noise_filter.to_string(), "55,75");
        assert_eq!(p.pretrain.epochs, 3);
    }
}
