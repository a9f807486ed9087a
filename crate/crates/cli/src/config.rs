//! Run configuration: one TOML file, overridden by flags, snapshotted per run.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use polystain::evalkit::{SegConfig, StainMatrix, DEFAULT_DAB_THRESHOLD};
use polystain::stainer::{BasePretrainConfig, ModelConfig};
use polystain::synthdata::{PromptMode, TissueSpec};
use polystain::training::{PairPretrainConfig, TrainConfig};

use crate::ConfigError;

pub const OUT_ROOT_ENV: &str = "POLYSTAIN_OUT_ROOT";
pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub tissue: TissueSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 2000,
            test_count: 400,
            tissue: TissueSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub dab_threshold: f64,
    /// Rows: hematoxylin, residual, DAB. Defaults to the standard H-DAB vectors.
    pub stain_matrix: Option<[[f64; 3]; 3]>,
    /// Prompt family used to query the model; defaults to the training mode's.
    pub prompt_mode: Option<PromptMode>,
    pub segmenter: SegConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dab_threshold: DEFAULT_DAB_THRESHOLD,
            stain_matrix: None,
            prompt_mode: None,
            segmenter: SegConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn matrix(&self) -> Result<StainMatrix, ConfigError> {
        match self.stain_matrix {
            Some(rows) => StainMatrix::new(rows).map_err(|e| ConfigError(e.to_string())),
            None => Ok(StainMatrix::hdab()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_root: PathBuf,
    pub data: DataConfig,
    pub pair: PairPretrainConfig,
    pub base: BasePretrainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_root: PathBuf::from("runs"),
            data: DataConfig::default(),
            pair: PairPretrainConfig::default(),
            base: BasePretrainConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or defaults) and applies the output-root environment override.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(root) = std::env::var_os(OUT_ROOT_ENV).filter(|v| !v.is_empty()) {
            cfg.out_root = PathBuf::from(root);
        }
        Ok(cfg)
    }

    /// Pushes the global seed into every section and validates.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        self.train.seed = self.seed;
        self.eval.segmenter.seed = self.seed;
        self.data.tissue.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.model.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.pair.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.eval.matrix()?;
        if self.data.tissue.tile_size as usize != self.model.tile_size {
            return Err(ConfigError(format!(
                "data tile size {} differs from model tile size {}",
                self.data.tissue.tile_size, self.model.tile_size
            )));
        }
        Ok(self)
    }

    pub fn write_snapshot(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, toml::to_string_pretty(self)?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nw_advv = 0.1").is_err());
        let ok: RunConfig = toml::from_str("seed = 3\n[train]\nw_adv = 0.1").unwrap();
        assert_eq!((ok.seed, ok.train.w_adv), (3, 0.1));
    }

    #[test]
    fn seed_reaches_every_section() {
        let cfg = RunConfig {
            seed: 42,
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!((cfg.train.seed, cfg.eval.segmenter.seed), (42, 42));
    }
}
