//! Run directories and manifests.
//!
//! A run is one command invocation. Its directory receives the resolved
//! config first (so aborted runs are still diagnosable), then whatever
//! artifacts the command produces, and finally `manifest.json`, written
//! atomically on success only: a directory without a manifest is a failed
//! or still-running run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const OUT_ROOT_ENV: &str = "AOLAB_OUT";

/// Output root precedence: `--out` flag, `$AOLAB_OUT`, then `./runs`.
pub fn output_root(flag: &Option<PathBuf>) -> PathBuf {
    if let Some(p) = flag {
        return p.clone();
    }
    if let Some(env) = std::env::var_os(OUT_ROOT_ENV) {
        return PathBuf::from(env);
    }
    PathBuf::from("runs")
}

pub fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub code_version: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub artifacts: Vec<String>,
    pub final_metrics: serde_json::Value,
}

/// An open run directory accumulating artifacts.
pub struct RunContext {
    dir: PathBuf,
    command: String,
    config_sha256: String,
    started_unix_ms: u64,
    artifacts: Vec<String>,
}

impl RunContext {
    /// Creates `root/name`, refuses to reuse a finished run, and echoes
    /// the resolved config as `config.toml`.
    pub fn create(
        root: &Path,
        name: &str,
        command: &str,
        resolved_config_toml: &str,
    ) -> anyhow::Result<RunContext> {
        let dir = root.join(name);
        if dir.join("manifest.json").exists() {
            bail!(
                "run directory {} already holds a finished run; runs are immutable",
                dir.display()
            );
        }
        fs::create_dir_all(&dir)
            .with_context(|| format!("creating run directory {}", dir.display()))?;
        fs::write(dir.join("config.toml"), resolved_config_toml)
            .with_context(|| format!("echoing config into {}", dir.display()))?;
        let config_sha256 = hex(&Sha256::digest(resolved_config_toml.as_bytes()));
        let mut ctx = RunContext {
            dir,
            command: command.to_string(),
            config_sha256,
            started_unix_ms: now_unix_ms(),
            artifacts: Vec::new(),
        };
        ctx.record("config.toml");
        Ok(ctx)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Declares `rel` as an artifact of this run.
    pub fn record(&mut self, rel: &str) {
        self.artifacts.push(rel.to_string());
    }

    /// Writes the manifest atomically and closes the run.
    pub fn finish(self, final_metrics: serde_json::Value) -> anyhow::Result<()> {
        for rel in &self.artifacts {
            if !self.dir.join(rel).exists() {
                bail!("declared artifact {rel} was never written");
            }
        }
        let manifest = RunManifest {
            command: self.command,
            config_sha256: self.config_sha256,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: self.started_unix_ms,
            finished_unix_ms: now_unix_ms(),
            artifacts: self.artifacts,
            final_metrics,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        let tmp = self.dir.join("manifest.json.tmp");
        fs::write(&tmp, &json)?;
        fs::rename(&tmp, self.dir.join("manifest.json"))?;
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
