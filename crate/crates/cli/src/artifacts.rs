use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use dialoglab::{Error, Result};

/// Name of the manifest written at the root of every output directory.
pub const MANIFEST: &str = "manifest.json";

/// Files written by one command under an output directory.
#[derive(Debug)]
pub struct Artifacts {
    root: PathBuf,
    command: String,
    files: Vec<String>,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

impl Artifacts {
    pub fn new(root: &Path, command: &str) -> Self {
        Artifacts {
            root: root.to_path_buf(),
            command: command.to_string(),
            files: Vec::new(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Records a file that was written by other means.
    pub fn record(&mut self, rel: &str) {
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
    }

    pub fn text(&mut self, rel: &str, contents: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        write(&path, contents)?;
        self.record(rel);
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.text(rel, &s)
    }

    /// Merges this command's files into the manifest, which maps each
    /// command name to the sorted list of files it produced.
    pub fn finish(mut self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST);
        let mut manifest: BTreeMap<String, Vec<String>> = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => BTreeMap::new(),
        };
        let entry = manifest.entry(self.command.clone()).or_default();
        entry.append(&mut self.files);
        entry.sort();
        entry.dedup();
        let mut s = serde_json::to_string_pretty(&manifest)?;
        s.push('\n');
        write(&path, &s)?;
        Ok(path)
    }
}
