use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Strategy;
use crate::class::ClassId;
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::io::create;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSample {
    pub image_ref: String,
    pub target_class: ClassId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_class: Option<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl SyntheticSample {
    pub fn check(&self, strategy: Strategy, num_classes: usize) -> Result<()> {
        self.target_class.check(num_classes)?;
        if let Some(j) = self.reference_class {
            j.check(num_classes)?;
        }
        let consistent = match strategy {
            Strategy::Gen => self.reference_class.is_none() && self.strength.is_none(),
            Strategy::Aug => self.reference_class == Some(self.target_class) && self.strength.is_some(),
            Strategy::Mix => self.reference_class.is_some() && self.strength.is_some(),
        };
        if !consistent {
            return Err(Error::format(
                "manifest",
                format!("{} is inconsistent with strategy {strategy}", self.image_ref),
            ));
        }
        if let Some(s) = self.strength.filter(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::format("manifest", format!("{} has strength {s}", self.image_ref)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub version: u32,
    pub dataset: String,
    pub num_classes: usize,
    pub metaclass: String,
    pub strategy: Strategy,
    pub spec_fingerprint: String,
    pub checkpoint_fingerprint: Option<String>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    manifest: ManifestHeader,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<SyntheticSample>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.header.version != MANIFEST_VERSION {
            return Err(Error::Version {
                what: "manifest",
                found: self.header.version,
                expected: MANIFEST_VERSION,
            });
        }
        for r in &self.records {
            r.check(self.header.strategy, self.header.num_classes)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&HeaderLine {
            manifest: self.header.clone(),
        })
        .map_err(|e| Error::format("manifest", e.to_string()))?;
        out.push(b'\n');
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(|e| Error::format("manifest", e.to_string()))?;
            out.push(b'\n');
        }
        Ok(out)
    }

    /// Writes the manifest and returns its fingerprint.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("jsonl.tmp");
        let mut w = create(&tmp)?;
        w.write_all(&bytes).map_err(Error::io(&tmp))?;
        w.flush().map_err(Error::io(&tmp))?;
        drop(w);
        fs::rename(&tmp, path).map_err(Error::io(path))?;
        Ok(fingerprint::of_bytes(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(Error::io(path))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let what = path.display().to_string();
        let header = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(Error::io(path))?;
                serde_json::from_str::<HeaderLine>(&line)
                    .map_err(|e| Error::format(&what, format!("header: {e}")))?
                    .manifest
            }
            None => return Err(Error::format(&what, "empty manifest")),
        };
        let mut records = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(Error::io(path))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line).map_err(|e| Error::format(&what, format!("line {}: {e}", n + 1)))?,
            );
        }
        let m = DatasetManifest { header, records };
        m.validate()?;
        Ok(m)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.header.num_classes];
        for r in &self.records {
            counts[r.target_class.zero_based()] += 1;
        }
        counts
    }
}
