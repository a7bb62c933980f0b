//! Run configuration: built-in defaults, overridden by a TOML file, then by
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use rdseg::sampler::SampleConfig;
use rdseg::trainer::TrainConfig;
use rdseg::DenoiserConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_failure, Failure, Outcome};

pub const OUTPUT_ROOT_ENV: &str = "RDSEG_OUTPUT_ROOT";
pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output: Option<PathBuf>,
    pub data: DataPaths,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Outcome<Self> {
        toml::from_str(text).map_err(|e| Failure::Validation(format!("bad config: {e}")))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Outcome<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
                Self::parse(&text).map_err(|e| match e {
                    Failure::Validation(m) => Failure::Validation(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn to_toml(&self) -> Outcome<String> {
        toml::to_string(self).map_err(|e| Failure::Internal(format!("config serialization: {e}")))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Outcome<()> {
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()?).map_err(|e| io_failure(&path, e))
    }
}

/// `flag`, else the config's path, else `$RDSEG_OUTPUT_ROOT/<name>` (root
/// defaults to `runs`).
pub fn output_dir(flag: Option<&Path>, config: Option<&Path>, name: &str) -> PathBuf {
    if let Some(p) = flag.or(config) {
        return p.to_path_buf();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(name)
}

pub fn create_dir(dir: &Path) -> Outcome<()> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rdseg::sampler::StepSelection;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::parse(
            "[model]\nbase_channels = 8\n[train]\nepochs = 3\n[train.augment]\nhflip_p = 0.0\n[sample.steps]\nstride = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.model.base_channels, 8);
        assert_eq!(cfg.model.depth, DenoiserConfig::default().depth);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.time_steps, 25);
        assert_eq!(cfg.train.augment.hflip_p, 0.0);
        assert_eq!(cfg.train.augment.contrast_p, 0.5);
        assert_eq!(cfg.sample.steps, StepSelection::Stride(2));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("epochs = 3\n"), Err(Failure::Validation(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.lr = 0.1 + 0.2;
        cfg.sample.steps = StepSelection::Explicit(vec![5, 3, 1]);
        cfg.data.train = Some("a/b".into());
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }
}
