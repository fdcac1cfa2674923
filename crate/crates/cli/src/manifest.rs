//! Output bookkeeping: every artifact goes through an [`Outputs`] writer so
//! the manifest can list it with its CRC32.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::settings::Settings;

pub const GIT_DESCRIBE: &str = env!("P2P_GIT_DESCRIBE");

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub crc32: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    pub git_describe: String,
    pub seeds: BTreeMap<String, u64>,
    pub config: Settings,
    pub out_dir: String,
    pub inputs: Vec<FileEntry>,
    /// Paths relative to `out_dir`.
    pub outputs: Vec<FileEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings_s: Option<BTreeMap<String, f64>>,
}

pub fn crc_of(bytes: &[u8]) -> String {
    format!("{:08x}", crc32fast::hash(bytes))
}

fn entry(path: String, bytes: &[u8]) -> FileEntry {
    FileEntry {
        path,
        crc32: crc_of(bytes),
        bytes: bytes.len() as u64,
    }
}

/// Writes artifacts under one directory and records them.
pub struct Outputs {
    dir: PathBuf,
    force: bool,
    timing: bool,
    written: Vec<FileEntry>,
    inputs: Vec<FileEntry>,
    timings: BTreeMap<String, f64>,
    started: Option<(String, Instant)>,
}

impl Outputs {
    pub fn new(dir: &Path, force: bool, timing: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            force,
            timing,
            written: Vec::new(),
            inputs: Vec::new(),
            timings: BTreeMap::new(),
            started: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn timing(&self) -> bool {
        self.timing
    }

    /// Fails early when any of `names` exists and `--force` is off.
    pub fn claim(&self, names: &[String]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        let taken: Vec<String> = names
            .iter()
            .map(|n| self.dir.join(n))
            .filter(|p| p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !taken.is_empty() {
            bail!("refusing to overwrite {} (pass --force)", taken.join(", "));
        }
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.written.retain(|e| e.path != name);
        self.written.push(entry(name.to_string(), bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Records a file some library call already wrote under the directory.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.dir.join(name))?;
        self.written.retain(|e| e.path != name);
        self.written.push(entry(name.to_string(), &bytes));
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let p = path.display().to_string();
        if !self.inputs.iter().any(|e| e.path == p) {
            self.inputs.push(entry(p, &bytes));
        }
        Ok(())
    }

    /// Starts timing a phase, closing the previous one.
    pub fn phase(&mut self, name: &str) {
        self.end_phase();
        self.started = Some((name.to_string(), Instant::now()));
    }

    fn end_phase(&mut self) {
        if let Some((name, t)) = self.started.take() {
            *self.timings.entry(name).or_default() += t.elapsed().as_secs_f64();
        }
    }

    /// Writes `manifest.<tag>.json` and returns the manifest.
    pub fn finish(mut self, command: &str, tag: &str, args: Vec<String>, settings: &Settings) -> Result<ExperimentManifest> {
        self.end_phase();
        let mut seeds = BTreeMap::new();
        seeds.insert("seed".to_string(), settings.seed);
        seeds.insert("base".to_string(), settings.base.seed);
        seeds.insert("embed".to_string(), settings.p2p.embed_seed);
        seeds.insert("init".to_string(), settings.p2p.init_seed);
        seeds.insert("train".to_string(), settings.p2p.train.seed);
        let mut outputs = self.written.clone();
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = ExperimentManifest {
            command: command.to_string(),
            args,
            git_describe: GIT_DESCRIBE.to_string(),
            seeds,
            config: settings.clone(),
            out_dir: self.dir.display().to_string(),
            inputs: self.inputs.clone(),
            outputs,
            timings_s: self.timing.then(|| self.timings.clone()),
        };
        let name = format!("manifest.{tag}.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(self.dir.join(&name), text)?;
        Ok(manifest)
    }
}
