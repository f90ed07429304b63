//! Run configuration: a TOML file with `[data]` (generator) and `[train]`
//! sections plus an optional top-level `seed` applied to both. Unknown keys
//! are rejected. Every command archives the resolved config beside its
//! outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use deta_core::synthdata::ShiftConfig;
use deta_core::trainer::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides both section seeds when present.
    pub seed: Option<u64>,
    pub data: ShiftConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Loads the file (or defaults when `path` is `None`), then applies the
    /// top-level seed and the `--seed` flag, in that order.
    pub fn resolve(path: Option<&Path>, seed_flag: Option<u64>) -> Result<RunConfig, CliError> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = cfg.seed {
            cfg.data.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(seed) = seed_flag {
            cfg.seed = Some(seed);
            cfg.data.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.data
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        cfg.train
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        if cfg.data.k_bins != cfg.train.k_bins {
            return Err(CliError::config(format!(
                "data.k_bins ({}) and train.k_bins ({}) disagree",
                cfg.data.k_bins, cfg.train.k_bins
            )));
        }
        Ok(cfg)
    }

    /// Writes the resolved config next to the outputs of a run.
    pub fn archive(&self, out_dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::config(format!("serializing config: {e}")))?;
        std::fs::write(out_dir.join("config.toml"), text)
            .map_err(|e| CliError::io(format!("archiving config: {e}")))?;
        Ok(())
    }
}
