use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Classifier;
use crate::error::{Error, Result};
use crate::io::{read_jsonl, Dataset, GroupRecord};

const CHUNK: usize = 256;

/// Predicted class per example (zero-based); ties go to the lowest index.
pub fn predict(model: &dyn Classifier, data: &Dataset) -> Result<Vec<usize>> {
    if data.dim() != model.input_dim() {
        return Err(Error::invalid(format!(
            "dataset has {} values per image, classifier expects {}",
            data.dim(),
            model.input_dim()
        )));
    }
    let chunks: Vec<Vec<usize>> = data
        .examples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut x = Array2::zeros((chunk.len(), data.dim()));
            for (mut row, e) in x.axis_iter_mut(Axis(0)).zip(chunk) {
                row.assign(&e.image);
            }
            model
                .predict_logits(x.view())
                .axis_iter(Axis(0))
                .map(|row| {
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect();
    Ok(chunks.concat())
}

fn hits(model: &dyn Classifier, data: &Dataset) -> Result<Vec<bool>> {
    if data.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    Ok(predict(model, data)?
        .into_iter()
        .zip(&data.examples)
        .map(|(p, e)| p == e.class.zero_based())
        .collect())
}

fn rate(h: impl Iterator<Item = bool>) -> f64 {
    let (mut n, mut k) = (0usize, 0usize);
    for v in h {
        n += 1;
        k += usize::from(v);
    }
    k as f64 / n as f64
}

pub fn evaluate_accuracy(model: &dyn Classifier, testset: &Dataset) -> Result<f64> {
    Ok(rate(hits(model, testset)?.into_iter()))
}

/// Group assignment of test items, keyed by image reference.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupSpec {
    pub groups: BTreeMap<String, String>,
}

impl GroupSpec {
    pub fn from_records(records: Vec<GroupRecord>) -> Result<Self> {
        let mut groups = BTreeMap::new();
        for r in records {
            if let Some(prev) = groups.insert(r.image_ref.clone(), r.group_id) {
                return Err(Error::invalid(format!("{} is listed twice (first in group {prev})", r.image_ref)));
            }
        }
        Ok(GroupSpec { groups })
    }

    pub fn load(path: &Path) -> Result<Self> {
        GroupSpec::from_records(read_jsonl(path)?)
    }

    /// Every item in one group.
    pub fn single(testset: &Dataset, name: &str) -> Self {
        GroupSpec {
            groups: testset
                .examples
                .iter()
                .map(|e| (e.image_ref.clone(), name.to_string()))
                .collect(),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.groups.values().map(String::as_str).collect();
        names.sort_unstable();
        names.dedup();
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub per_group: BTreeMap<String, f64>,
    /// Over all items, not over groups.
    pub average: f64,
}

pub fn group_accuracy(model: &dyn Classifier, testset: &Dataset, groups: &GroupSpec) -> Result<GroupAccuracy> {
    let ids = testset
        .examples
        .iter()
        .map(|e| {
            groups
                .groups
                .get(&e.image_ref)
                .ok_or_else(|| Error::invalid(format!("{} has no group", e.image_ref)))
        })
        .collect::<Result<Vec<_>>>()?;
    let h = hits(model, testset)?;
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (g, &ok) in ids.iter().zip(&h) {
        let t = tally.entry((*g).clone()).or_default();
        t.0 += usize::from(ok);
        t.1 += 1;
    }
    Ok(GroupAccuracy {
        per_group: tally.into_iter().map(|(g, (k, n))| (g, k as f64 / n as f64)).collect(),
        average: rate(h.into_iter()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Many,
    Medium,
    Few,
}

impl Band {
    /// Many above `many_min` training items, few below `few_max`.
    pub fn of(count: usize, many_min: usize, few_max: usize) -> Band {
        if count > many_min {
            Band::Many
        } else if count < few_max {
            Band::Few
        } else {
            Band::Medium
        }
    }
}

/// Accuracy per shot band. Bands without test items are absent.
pub fn shot_band_accuracy(
    model: &dyn Classifier,
    testset: &Dataset,
    train_counts: &[usize],
    thresholds: (usize, usize),
) -> Result<BTreeMap<Band, f64>> {
    let (many_min, few_max) = thresholds;
    if few_max >= many_min {
        return Err(Error::invalid(format!(
            "few-shot bound {few_max} must be below many-shot bound {many_min}"
        )));
    }
    if train_counts.len() != testset.num_classes {
        return Err(Error::invalid(format!(
            "{} training counts for {} classes",
            train_counts.len(),
            testset.num_classes
        )));
    }
    let h = hits(model, testset)?;
    let mut tally: BTreeMap<Band, (usize, usize)> = BTreeMap::new();
    for (e, ok) in testset.examples.iter().zip(h) {
        let t = tally
            .entry(Band::of(train_counts[e.class.zero_based()], many_min, few_max))
            .or_default();
        t.0 += usize::from(ok);
        t.1 += 1;
    }
    Ok(tally.into_iter().map(|(b, (k, n))| (b, k as f64 / n as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub top1: f64,
    #[serde(default)]
    pub per_group: BTreeMap<String, f64>,
    #[serde(default)]
    pub bands: BTreeMap<Band, f64>,
    #[serde(default)]
    pub fid: Option<f64>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let accs = std::iter::once(self.top1)
            .chain(self.per_group.values().copied())
            .chain(self.bands.values().copied());
        for a in accs {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid(format!("accuracy {a} outside [0, 1]")));
            }
        }
        if let Some(f) = self.fid.filter(|f| f.is_nan() || *f < 0.0) {
            return Err(Error::invalid(format!("FID {f} is negative")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format("metrics", e))?;
        std::fs::write(path, text + "\n").map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let r: MetricsReport =
            serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e))?;
        r.validate()?;
        Ok(r)
    }

    /// Fixed-order text table: top-1, groups by name, bands, FID.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24}{:>10}", "metric", "value");
        let _ = writeln!(out, "{:<24}{:>10.2}", "top1", 100.0 * self.top1);
        for (g, a) in &self.per_group {
            let _ = writeln!(out, "{:<24}{:>10.2}", format!("group:{g}"), 100.0 * a);
        }
        for (b, a) in &self.bands {
            let name = serde_json::to_value(b).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            let _ = writeln!(out, "{:<24}{:>10.2}", format!("band:{name}"), 100.0 * a);
        }
        if let Some(f) = self.fid {
            let _ = writeln!(out, "{:<24}{:>10.4}", "fid", f);
        }
        out
    }
}
