//! TOML run configuration. Command-line flags override file values.
//!
//! ```toml
//! [training]
//! learning_rate = 2e-4
//! batch_size_stage1 = 8
//! batch_size_stage2 = 16
//! epochs_stage1 = 3
//! epochs_stage2 = 3
//! window_size = 12
//! seeds = [0, 1, 2, 3, 4]
//! key_element = "oReact"
//! template_variant = 4
//!
//! [paths]
//! train = "data/meld/train.jsonl"
//! test = "data/meld/test.jsonl"
//! store = "characteristics.jsonl"
//! output_dir = "runs"
//!
//! [backend]
//! kind = "toy"
//! parallelism = 4
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use ercforge_core::TrainingConfig;

use crate::failure::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Deterministic hashed text; fine-tuning only records lineage.
    Mock,
    /// Small trainable classifier persisted under the cache directory.
    Toy,
    /// Serves responses recorded in a characteristic store.
    Replay,
    /// HTTP completion service at `ERCFORGE_BASE_URL`.
    Remote,
}

impl BackendKind {
    pub fn from_id(id: &str) -> Option<Self> {
        Self::from_str(id, true).ok()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub store: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_map: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<BackendKind>,
    /// Model name sent to a remote service.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    /// Recorded store served by the replay backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub paths: Paths,
    pub backend: BackendSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.paths.resolve(base);
        if let Some(replay) = &mut config.backend.replay {
            *replay = base.join(&*replay);
        }
        Ok(config)
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.train,
            &mut self.dev,
            &mut self.test,
            &mut self.store,
            &mut self.templates,
            &mut self.label_map,
            &mut self.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            *p = base.join(&*p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_example() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ercforge.toml");
        let doc: String = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| format!("{}\n", l.trim_start_matches("//!").trim_start()))
            .collect();
        std::fs::write(&path, doc).unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.training, TrainingConfig::default());
        assert_eq!(c.backend.kind, Some(BackendKind::Toy));
        assert_eq!(c.paths.train, Some(dir.path().join("data/meld/train.jsonl")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[training]\nlearning_rat = 0.1\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.message.contains("learning_rat"), "{}", err.message);
    }
}
