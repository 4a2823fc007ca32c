use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context, Result};
use diffmix_core::io::{read_jsonl, read_npy, write_jsonl, Dataset, IndexRecord};
use diffmix_core::synthesis::{DatasetManifest, SyntheticSample};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

pub const INFO_FILE: &str = "dataset.json";

/// Per-directory dataset description read by every command that consumes
/// an index from that directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub name: String,
    pub metaclass: String,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

impl DatasetInfo {
    pub fn beside(index: &Path) -> Result<Option<Self>> {
        let path = index.parent().unwrap_or(Path::new(".")).join(INFO_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
    }

    pub fn save_in(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(INFO_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

pub struct Loaded {
    pub data: Dataset,
    pub info: Option<DatasetInfo>,
}

impl Loaded {
    pub fn name(&self, index: &Path) -> String {
        match &self.info {
            Some(i) => i.name.clone(),
            None => index.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
        }
    }

    /// Metaclass from the flag or config, else the dataset description.
    pub fn metaclass(&self, preferred: Option<String>) -> Result<String> {
        preferred
            .or_else(|| self.info.as_ref().map(|i| i.metaclass.clone()))
            .context("no metaclass: pass --metaclass, set it in the config, or add a dataset.json")
    }

    pub fn class_names(&self) -> Option<Vec<String>> {
        self.info.as_ref().and_then(|i| i.class_names.clone())
    }
}

pub fn load_dataset(index: &Path) -> Result<Loaded> {
    let info = DatasetInfo::beside(index)?;
    let data = Dataset::load(index, info.as_ref().map(|i| i.num_classes))
        .with_context(|| format!("loading dataset {}", index.display()))?;
    Ok(Loaded { data, info })
}

/// Images of a manifest's records, resolved against the manifest directory.
pub fn load_synthetic_image(manifest_path: &Path, record: &SyntheticSample) -> diffmix_core::Result<Array1<f32>> {
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let arr = read_npy(&root.join(&record.image_ref))?;
    Ok(Array1::from_iter(arr.iter().copied()))
}

pub fn load_synthetic_images(manifest_path: &Path, manifest: &DatasetManifest) -> Result<Vec<Array1<f32>>> {
    manifest
        .records
        .iter()
        .map(|r| load_synthetic_image(manifest_path, r).with_context(|| format!("loading {}", r.image_ref)))
        .collect()
}

fn normalize(path: &Path) -> Result<PathBuf> {
    let abs = if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()?.join(path)
    };
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    Ok(out)
}

/// `target` expressed relative to directory `base`.
pub fn relative_to(target: &Path, base: &Path) -> Result<PathBuf> {
    let (t, b) = (normalize(target)?, normalize(base)?);
    let tc: Vec<_> = t.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c);
    }
    Ok(out)
}

/// Writes an index listing `positions` of the source index, with image
/// paths rewritten relative to the new index. The dataset description is
/// copied alongside.
pub fn write_subset_index(source: &Path, loaded: &Loaded, positions: &[usize], out: &Path) -> Result<Vec<PathBuf>> {
    let src_dir = source.parent().unwrap_or(Path::new("."));
    let out_dir = out.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(out_dir)?;
    let records: Vec<IndexRecord> = read_jsonl(source)?;
    if records.len() != loaded.data.len() {
        bail!("{} changed while it was being read", source.display());
    }
    let prefix = relative_to(src_dir, out_dir)?;
    let rows: Vec<IndexRecord> = positions
        .iter()
        .map(|&i| {
            let r = &records[i];
            let rel = prefix.join(&r.image_ref);
            IndexRecord {
                image_ref: rel.to_string_lossy().replace('\\', "/"),
                class: r.class,
            }
        })
        .collect();
    write_jsonl(out, &rows)?;
    let mut written = vec![out.to_path_buf()];
    if let Some(info) = &loaded.info {
        written.push(info.save_in(out_dir)?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths() {
        assert_eq!(relative_to(Path::new("/a/b/c"), Path::new("/a/b")).unwrap(), Path::new("c"));
        assert_eq!(relative_to(Path::new("/a/x"), Path::new("/a/b/c")).unwrap(), Path::new("../../x"));
        assert_eq!(relative_to(Path::new("/a/b"), Path::new("/a/b")).unwrap(), Path::new(""));
    }
}
