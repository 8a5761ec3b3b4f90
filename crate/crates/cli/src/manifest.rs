//! Run manifests: enough to reproduce a run's outputs byte for byte.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    /// The full command line; `dealflow replay` re-runs it.
    pub argv: Vec<String>,
    /// Relative paths in `argv` resolve against this directory.
    pub working_dir: PathBuf,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub threads: usize,
    pub duration_secs: f64,
}

pub struct Recorder {
    subcommand: &'static str,
    argv: Vec<String>,
    started: Instant,
}

impl Recorder {
    pub fn start(subcommand: &'static str, argv: &[String]) -> Self {
        Self {
            subcommand,
            argv: argv.to_vec(),
            started: Instant::now(),
        }
    }

    /// Writes `<primary>.manifest.json` next to the primary output.
    pub fn finish<C: Serialize>(
        self,
        primary: &Path,
        seed: Option<u64>,
        config: &C,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> anyhow::Result<PathBuf> {
        let manifest = RunManifest {
            subcommand: self.subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            argv: self.argv,
            working_dir: std::env::current_dir()?,
            seed,
            config: serde_json::to_value(config)?,
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
            threads: rayon::current_num_threads(),
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = manifest_path(primary);
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json + "\n")
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(path)
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn load(path: &Path) -> anyhow::Result<RunManifest> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading manifest {}", path.display()))
        .map_err(|e| crate::usage(format!("{e:#}")))?;
    serde_json::from_str(&text)
        .map_err(|e| crate::usage(format!("malformed manifest {}: {e}", path.display())))
}
