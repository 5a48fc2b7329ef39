//! JSON run configuration: generator spec, training recipe, artifact paths
//! and analysis options. Every section is optional; unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sacd_core::datagen::SyntheticSpec;
use sacd_core::evalkit::DEFAULT_CHANNEL_THRESHOLD;
use sacd_core::trainer::TrainConfig;
use sacd_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl Paths {
    pub fn teacher(&self) -> PathBuf {
        self.checkpoint_dir.join("teacher")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Channels with Spearman rho above this are selected.
    pub threshold: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_CHANNEL_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synthetic: SyntheticSpec,
    pub train: TrainConfig,
    pub paths: Paths,
    pub analysis: AnalysisConfig,
}

/// Pulls the offending key out of a serde message such as
/// "unknown field `foo`, expected ...".
fn field_of(message: &str) -> String {
    for marker in ["unknown field `", "missing field `", "unknown variant `"] {
        if let Some(rest) = message.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    "config".to_string()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            let message = e.to_string();
            Error::Config {
                field: field_of(&message),
                message,
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// The file at `path`, or defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    /// Applies a command-line seed to both the generator and the trainer.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.synthetic.seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.train.validate()?;
        if !(self.analysis.threshold > -1.0 && self.analysis.threshold < 1.0) {
            return Err(Error::Config {
                field: "analysis.threshold".into(),
                message: "must lie in (-1, 1)".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default_recipe() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.analysis.threshold, 0.4);
    }

    #[test]
    fn unknown_keys_name_the_field() {
        match RunConfig::from_json(r#"{"train": {"learning_rate": 0.1}}"#) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "learning_rate"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(RunConfig::from_json("{not json"), Err(Error::Config { .. })));
    }

    #[test]
    fn validation_reaches_nested_sections() {
        match RunConfig::from_json(r#"{"train": {"batch_size": 1}}"#) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "batch_size"),
            other => panic!("unexpected {other:?}"),
        }
        match RunConfig::from_json(r#"{"synthetic": {"gap": 1.5}}"#) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "gap"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn seed_override_reaches_both_sections() {
        let cfg = RunConfig::default().with_seed(Some(7));
        assert_eq!((cfg.synthetic.seed, cfg.train.seed), (7, 7));
    }
}
