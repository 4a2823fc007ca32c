use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use diffmix_core::fingerprint;
use serde::{Deserialize, Serialize};

/// Record written beside a command's outputs naming the inputs and settings
/// that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub command: String,
    pub fingerprint: String,
    pub outputs: Vec<PathBuf>,
    /// Fingerprints of the produced files, keyed like `outputs`.
    pub output_fingerprints: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct StaleOutput(pub String);

#[derive(Debug, thiserror::Error)]
#[error("path does not exist: {}", .0.display())]
pub struct MissingPath(pub PathBuf);

pub fn require_exists(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(MissingPath(p.to_path_buf()).into());
        }
    }
    Ok(())
}

/// `out.stamp.json` for files, `out/.stamp.json` for directories.
pub fn stamp_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join(".stamp.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".stamp.json");
        out.with_file_name(name)
    }
}

/// Builds the run fingerprint from input files and a serializable settings
/// value.
pub fn run_fingerprint<T: Serialize>(command: &str, inputs: &[&Path], settings: &T) -> Result<String> {
    let mut parts = vec![command.to_string(), fingerprint::of_json(settings)];
    for p in inputs {
        let fp = if p.is_dir() {
            fingerprint::of_json(&p.display().to_string())
        } else {
            fingerprint::of_file(p).with_context(|| format!("fingerprinting {}", p.display()))?
        };
        parts.push(fp);
    }
    Ok(fingerprint::combine(parts.iter().map(String::as_str)))
}

pub struct Guard {
    command: String,
    fingerprint: String,
    stamp: PathBuf,
}

pub enum Check {
    UpToDate(Stamp),
    Run(Guard),
}

fn outputs_intact(stamp: &Stamp) -> bool {
    stamp.outputs.len() == stamp.output_fingerprints.len()
        && stamp
            .outputs
            .iter()
            .zip(&stamp.output_fingerprints)
            .all(|(p, fp)| fingerprint::of_file(p).is_ok_and(|got| &got == fp))
}

/// Decides whether a command must run. Matching stamps with intact outputs
/// short-circuit; a stamp from different inputs is refused unless `force`.
pub fn check(command: &str, fingerprint: String, out: &Path, is_dir: bool, force: bool) -> Result<Check> {
    let stamp = stamp_path(out, is_dir);
    if stamp.exists() {
        let text = std::fs::read_to_string(&stamp).with_context(|| format!("reading {}", stamp.display()))?;
        let prev: Stamp = serde_json::from_str(&text).with_context(|| format!("parsing {}", stamp.display()))?;
        if prev.fingerprint == fingerprint && prev.command == command && outputs_intact(&prev) {
            return Ok(Check::UpToDate(prev));
        }
        if prev.fingerprint != fingerprint && !force {
            return Err(StaleOutput(format!(
                "{} was produced by `{}` from different inputs or settings; pass --force to overwrite",
                out.display(),
                prev.command
            ))
            .into());
        }
    }
    Ok(Check::Run(Guard {
        command: command.to_string(),
        fingerprint,
        stamp,
    }))
}

impl Guard {
    pub fn finish(self, outputs: Vec<PathBuf>) -> Result<Stamp> {
        let output_fingerprints = outputs
            .iter()
            .map(|p| fingerprint::of_file(p).with_context(|| format!("fingerprinting {}", p.display())))
            .collect::<Result<Vec<_>>>()?;
        let stamp = Stamp {
            command: self.command,
            fingerprint: self.fingerprint,
            outputs,
            output_fingerprints,
        };
        if let Some(dir) = self.stamp.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&self.stamp, serde_json::to_string_pretty(&stamp)? + "\n")
            .with_context(|| format!("writing {}", self.stamp.display()))?;
        Ok(stamp)
    }
}
