//! Run directories and the per-command manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use ercforge_core::digest::sha256_hex;

use crate::config::RunConfig;
use crate::failure::{Failure, IoContext};

pub const COMMAND_MANIFEST: &str = "command.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    /// Contains timings, so it is not expected to reproduce byte-for-byte.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub volatile: bool,
}

/// Written as `command.json` in every run directory. `argv` replays the
/// command through `ercforge rerun`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<OutputFile>,
    pub started_at: String,
    pub elapsed_ms: u64,
}

impl CommandManifest {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).at(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub struct RunDir {
    pub path: PathBuf,
    command: String,
    argv: Vec<String>,
    config: RunConfig,
    inputs: Vec<FileDigest>,
    outputs: Vec<OutputFile>,
    started_at: String,
    started: Instant,
}

impl RunDir {
    /// Creates `<out_dir>/<name>`, or `<out_dir>/<timestamp>-<label>` when
    /// no name is given. A numeric suffix avoids clobbering earlier runs.
    pub fn create(
        out_dir: &Path,
        name: Option<&str>,
        label: &str,
        command: &str,
        argv: Vec<String>,
        config: RunConfig,
    ) -> Result<Self, Failure> {
        let now = chrono::Local::now();
        let stem = match name {
            Some(n) => n.to_string(),
            None => format!("{}-{label}", now.format("%Y%m%d-%H%M%S")),
        };
        let mut path = out_dir.join(&stem);
        let mut n = 2;
        while path.exists() {
            path = out_dir.join(format!("{stem}-{n}"));
            n += 1;
        }
        std::fs::create_dir_all(&path).at(&path)?;
        Ok(Self {
            path,
            command: command.to_string(),
            argv,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: now.to_rfc3339(),
            started: Instant::now(),
        })
    }

    /// Records the training configuration after flags were applied.
    pub fn set_training(&mut self, training: &ercforge_core::TrainingConfig) {
        self.config.training = training.clone();
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        let bytes = std::fs::read(path).at(path)?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    /// Registers a file already written under the run directory.
    pub fn output(&mut self, rel: &str) -> Result<PathBuf, Failure> {
        self.register(rel, false)
    }

    pub fn volatile_output(&mut self, rel: &str) -> Result<PathBuf, Failure> {
        self.register(rel, true)
    }

    fn register(&mut self, rel: &str, volatile: bool) -> Result<PathBuf, Failure> {
        let path = self.path.join(rel);
        let bytes = std::fs::read(&path).at(&path)?;
        self.outputs.retain(|o| o.path != rel);
        self.outputs.push(OutputFile {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            volatile,
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf, Failure> {
        let path = self.path.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n").at(&path)?;
        self.output(rel)
    }

    pub fn finish(self) -> Result<PathBuf, Failure> {
        let manifest = CommandManifest {
            tool: "ercforge".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            argv: self.argv,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            started_at: self.started_at,
            elapsed_ms: self.started.elapsed().as_millis() as u64,
        };
        let path = self.path.join(COMMAND_MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").at(&path)?;
        Ok(self.path)
    }
}

/// Non-volatile outputs whose bytes differ between two runs.
pub fn compare_outputs(original: &CommandManifest, rerun: &CommandManifest) -> Vec<String> {
    original
        .outputs
        .iter()
        .filter(|o| !o.volatile)
        .filter(|o| {
            rerun
                .outputs
                .iter()
                .find(|r| r.path == o.path)
                .is_none_or(|r| r.sha256 != o.sha256)
        })
        .map(|o| o.path.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_do_not_collide() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunDir::create(dir.path(), Some("x"), "", "mix", vec![], RunConfig::default()).unwrap();
        let b = RunDir::create(dir.path(), Some("x"), "", "mix", vec![], RunConfig::default()).unwrap();
        assert_ne!(a.path, b.path);
        assert!(b.path.ends_with("x-2"));
    }

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(
            dir.path(),
            None,
            "wS-oReact",
            "train",
            vec!["train".into()],
            RunConfig::default(),
        )
        .unwrap();
        run.write_json("a/b.json", &vec![1, 2]).unwrap();
        let path = run.finish().unwrap();
        assert!(path.file_name().unwrap().to_str().unwrap().ends_with("-wS-oReact"));
        let m = CommandManifest::load(&path.join(COMMAND_MANIFEST)).unwrap();
        assert_eq!(m.outputs.len(), 1);
        assert_eq!(m.outputs[0].path, "a/b.json");
        assert!(compare_outputs(&m, &m).is_empty());
    }
}
