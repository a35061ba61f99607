use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

impl FileRef {
    pub fn of(path: &Path) -> Result<Self> {
        if !path.exists() {
            bail!("{}: referenced file does not exist", path.display());
        }
        let bytes = std::fs::read(path).with_context(|| format!("{}: cannot read", path.display()))?;
        Ok(Self { path: path.display().to_string(), sha256: format!("{:x}", Sha256::digest(&bytes)) })
    }
}

/// Everything needed to rerun a command and get the same bytes back.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Vec<String>,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, FileRef>,
    pub outputs: BTreeMap<String, FileRef>,
    /// Effective configuration after defaults and flag overrides.
    pub settings: serde_json::Value,
}

impl RunManifest {
    pub fn new(seed: Option<u64>, settings: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: std::env::args().collect(),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            settings,
        }
    }

    pub fn input(mut self, role: &str, path: Option<&Path>) -> Result<Self> {
        if let Some(p) = path {
            self.inputs.insert(role.to_owned(), FileRef::of(p)?);
        }
        Ok(self)
    }

    pub fn output(&mut self, role: &str, path: &Path) -> Result<()> {
        self.outputs.insert(role.to_owned(), FileRef::of(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).with_context(|| format!("{}: cannot write manifest", path.display()))
    }
}

/// `<out>.manifest.json` next to `out`.
pub fn sibling(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
