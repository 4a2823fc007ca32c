use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, SyntheticSample};
use crate::error::{Error, Result};
use crate::io::Dataset;

/// Two-caption contrastive scorer: returns one logit per caption.
pub trait ContrastiveScorer: Sync {
    fn logits(&self, image: ArrayView1<f32>, captions: [&str; 2]) -> std::result::Result<[f64; 2], String>;
}

fn captions(metaclass: &str) -> [String; 2] {
    [
        format!("a photo with a {metaclass} on it"),
        format!("a photo without a {metaclass} on it"),
    ]
}

fn sigmoid(margin: f64) -> f64 {
    if margin >= 0.0 {
        1.0 / (1.0 + (-margin).exp())
    } else {
        let e = margin.exp();
        e / (1.0 + e)
    }
}

/// Softmax probability of the positive caption against the negative one.
pub fn clip_confidence(image: ArrayView1<f32>, metaclass: &str, scorer: &dyn ContrastiveScorer) -> Result<f64> {
    let [pos, neg] = captions(metaclass);
    let [a, b] = scorer.logits(image, [&pos, &neg]).map_err(|reason| Error::Scorer {
        sample: "<image>".into(),
        reason,
    })?;
    let margin = a - b;
    if margin.is_nan() {
        return Err(Error::Scorer {
            sample: "<image>".into(),
            reason: format!("logits {a} and {b} give no finite margin"),
        });
    }
    Ok(sigmoid(margin))
}

/// Confidence for every record, in manifest order. Failures name the record.
pub fn score_records(
    manifest: &DatasetManifest,
    scorer: &dyn ContrastiveScorer,
    load: &(dyn Fn(&SyntheticSample) -> Result<Array1<f32>> + Sync),
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    manifest
        .records
        .par_iter()
        .map(|r| {
            let image = load(r)?;
            clip_confidence(image.view(), &manifest.header.metaclass, scorer).map_err(|e| match e {
                Error::Scorer { reason, .. } => Error::Scorer {
                    sample: r.image_ref.clone(),
                    reason,
                },
                other => other,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanMode {
    /// Drop the lowest scores across the whole manifest.
    #[default]
    Global,
    /// Drop the same fraction within each target class.
    PerClass,
}

fn lowest(indices: &[usize], scores: &[f64], fraction: f64) -> Vec<usize> {
    let drop = (fraction * indices.len() as f64 + 1e-9).floor() as usize;
    let mut order = indices.to_vec();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(drop);
    order
}

/// Removes the `⌊fraction·M⌋` lowest-scored records (lower index first on
/// ties) and annotates survivors with their scores.
pub fn clean_scores(manifest: &DatasetManifest, scores: &[f64], fraction: f64, mode: CleanMode) -> Result<DatasetManifest> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("clean fraction {fraction} outside [0, 1)")));
    }
    if scores.len() != manifest.records.len() {
        return Err(Error::invalid("one score is required per record"));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Scorer {
            sample: manifest.records[i].image_ref.clone(),
            reason: "score is NaN".into(),
        });
    }
    let mut removed = vec![false; scores.len()];
    let groups: Vec<Vec<usize>> = match mode {
        CleanMode::Global => vec![(0..scores.len()).collect()],
        CleanMode::PerClass => {
            let mut g = vec![Vec::new(); manifest.header.num_classes];
            for (i, r) in manifest.records.iter().enumerate() {
                g[r.target_class.zero_based()].push(i);
            }
            g
        }
    };
    for g in &groups {
        for i in lowest(g, scores, fraction) {
            removed[i] = true;
        }
    }
    let records = manifest
        .records
        .iter()
        .zip(scores)
        .zip(&removed)
        .filter(|(_, &gone)| !gone)
        .map(|((r, &s), _)| SyntheticSample {
            confidence: Some(s),
            ..r.clone()
        })
        .collect();
    Ok(DatasetManifest {
        header: manifest.header.clone(),
        records,
    })
}

pub fn clean(
    manifest: &DatasetManifest,
    fraction: f64,
    mode: CleanMode,
    scorer: &dyn ContrastiveScorer,
    load: &(dyn Fn(&SyntheticSample) -> Result<Array1<f32>> + Sync),
) -> Result<DatasetManifest> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("clean fraction {fraction} outside [0, 1)")));
    }
    let scores = score_records(manifest, scorer, load)?;
    clean_scores(manifest, &scores, fraction, mode)
}

/// Scores closeness to the data manifold: the positive logit falls with the
/// distance to the nearest class centroid, the negative logit sits at the
/// typical within-class distance of the real data.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScorer {
    centroids: Array2<f32>,
    radius: f64,
    temperature: f64,
}

impl ToyScorer {
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("scorer needs real data"));
        }
        let mut centroids = Array2::<f32>::zeros((data.num_classes, data.dim()));
        let counts = data.class_counts();
        for e in &data.examples {
            let mut row = centroids.row_mut(e.class.zero_based());
            row += &e.image;
        }
        for (mut row, &n) in centroids.axis_iter_mut(Axis(0)).zip(&counts) {
            if n > 0 {
                row /= n as f32;
            } else {
                row.fill(f32::NAN);
            }
        }
        let mut dists: Vec<f64> = data
            .examples
            .iter()
            .map(|e| dist(centroids.row(e.class.zero_based()), e.image.view()))
            .collect();
        dists.sort_by(f64::total_cmp);
        let radius = dists[dists.len() / 2].max(1e-6);
        Ok(ToyScorer {
            centroids,
            radius,
            temperature: radius,
        })
    }

    pub fn nearest(&self, image: ArrayView1<f32>) -> (usize, f64) {
        self.centroids
            .axis_iter(Axis(0))
            .enumerate()
            .filter(|(_, c)| c.iter().all(|v| v.is_finite()))
            .map(|(i, c)| (i, dist(c, image)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("at least one populated class")
    }
}

fn dist(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

impl ContrastiveScorer for ToyScorer {
    fn logits(&self, image: ArrayView1<f32>, _captions: [&str; 2]) -> std::result::Result<[f64; 2], String> {
        if image.len() != self.centroids.ncols() {
            return Err(format!("image has {} values, expected {}", image.len(), self.centroids.ncols()));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err("image has non-finite values".into());
        }
        let d = self.nearest(image).1;
        Ok([-d / self.temperature, -self.radius / self.temperature])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::class::ClassId;
    use crate::io::Example;
    use crate::rng::{normal_vec, seeded};
    use crate::synthesis::{ManifestHeader, Strategy, MANIFEST_VERSION};
    use proptest::prelude::*;

    struct Fixed(f64, f64);

    impl ContrastiveScorer for Fixed {
        fn logits(&self, _: ArrayView1<f32>, captions: [&str; 2]) -> std::result::Result<[f64; 2], String> {
            assert_eq!(captions, ["a photo with a bird on it", "a photo without a bird on it"]);
            Ok([self.0, self.1])
        }
    }

    fn manifest(m: usize) -> DatasetManifest {
        DatasetManifest {
            header: ManifestHeader {
                version: MANIFEST_VERSION,
                dataset: "toy".into(),
                num_classes: 2,
                metaclass: "bird".into(),
                strategy: Strategy::Gen,
                spec_fingerprint: String::new(),
                checkpoint_fingerprint: None,
                seed: 0,
            },
            records: (0..m)
                .map(|i| SyntheticSample {
                    image_ref: format!("{i}"),
                    target_class: ClassId::from_zero_based(i % 2),
                    reference_class: None,
                    strength: None,
                    gamma: 0.5,
                    confidence: None,
                })
                .collect(),
        }
    }

    #[test]
    fn confidence_limits() {
        let x = Array1::zeros(2);
        assert_eq!(clip_confidence(x.view(), "bird", &Fixed(1.0, 1.0)).unwrap(), 0.5);
        assert_eq!(clip_confidence(x.view(), "bird", &Fixed(f64::INFINITY, 0.0)).unwrap(), 1.0);
        assert_eq!(clip_confidence(x.view(), "bird", &Fixed(0.0, f64::INFINITY)).unwrap(), 0.0);
        assert!(clip_confidence(x.view(), "bird", &Fixed(f64::INFINITY, f64::INFINITY)).is_err());
        let p = clip_confidence(x.view(), "bird", &Fixed(2.0, 0.0)).unwrap();
        assert!((p - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn removes_floor_of_fraction() {
        let m = manifest(100);
        let scores: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64).collect();
        let out = clean_scores(&m, &scores, 0.1, CleanMode::Global).unwrap();
        assert_eq!(out.records.len(), 90);
        assert!(out.records.iter().all(|r| r.confidence.unwrap() >= 10.0));
        let same = clean_scores(&m, &scores, 0.0, CleanMode::Global).unwrap();
        assert_eq!(same.records.len(), 100);
        assert_eq!(same.records[3].confidence, Some(scores[3]));
        assert!(clean_scores(&m, &scores, 1.0, CleanMode::Global).is_err());
    }

    #[test]
    fn ties_remove_lower_indices() {
        let m = manifest(20);
        let out = clean_scores(&m, &[0.3; 20], 0.1, CleanMode::Global).unwrap();
        let kept: Vec<_> = out.records.iter().map(|r| r.image_ref.as_str()).collect();
        assert_eq!(kept.first(), Some(&"2"));
        assert_eq!(kept.len(), 18);
    }

    #[test]
    fn per_class_mode() {
        let m = manifest(20);
        let scores: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { i as f64 } else { 100.0 + i as f64 }).collect();
        let out = clean_scores(&m, &scores, 0.2, CleanMode::PerClass).unwrap();
        assert_eq!(out.class_counts(), vec![8, 8]);
        let global = clean_scores(&m, &scores, 0.2, CleanMode::Global).unwrap();
        assert_eq!(global.class_counts(), vec![6, 10]);
    }

    #[test]
    fn scorer_failures_name_the_record() {
        struct Broken;
        impl ContrastiveScorer for Broken {
            fn logits(&self, _: ArrayView1<f32>, _: [&str; 2]) -> std::result::Result<[f64; 2], String> {
                Err("model offline".into())
            }
        }
        let m = manifest(3);
        let err = clean(&m, 0.1, CleanMode::Global, &Broken, &|_| Ok(Array1::zeros(2))).unwrap_err();
        assert!(matches!(err, Error::Scorer { ref sample, .. } if sample == "0"));
    }

    #[test]
    fn toy_scorer_prefers_manifold_over_noise() {
        let mut rng = seeded(9);
        let examples = (0..200)
            .map(|i| {
                let c = i % 2;
                let centre = if c == 0 { -3.0 } else { 3.0 };
                let noise = normal_vec(&mut rng, 4);
                Example {
                    image_ref: format!("{i}"),
                    class: ClassId::from_zero_based(c),
                    image: Array1::from_iter(noise.iter().map(|z| centre + 0.3 * z)),
                }
            })
            .collect();
        let data = Dataset::new(vec![4], 2, examples).unwrap();
        let scorer = ToyScorer::fit(&data).unwrap();
        let mut wins = 0;
        for e in &data.examples {
            let noise = Array1::from_vec(normal_vec(&mut rng, 4)) * 3.0f32;
            let real = clip_confidence(e.image.view(), "x", &scorer).unwrap();
            let fake = clip_confidence(noise.view(), "x", &scorer).unwrap();
            wins += usize::from(real > fake);
        }
        assert!(wins >= 190, "{wins}/200");
    }

    proptest! {
        #[test]
        fn survivors_are_nested(scores in proptest::collection::vec(0.0f64..1.0, 1..60), f1 in 0.0f64..0.99, f2 in 0.0f64..0.99) {
            let m = manifest(scores.len());
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let a = clean_scores(&m, &scores, lo, CleanMode::Global).unwrap();
            let b = clean_scores(&m, &scores, hi, CleanMode::Global).unwrap();
            let keep: std::collections::BTreeSet<_> = a.records.iter().map(|r| r.image_ref.clone()).collect();
            prop_assert!(b.records.iter().all(|r| keep.contains(&r.image_ref)));
            prop_assert_eq!(b.records.len(), scores.len() - (hi * scores.len() as f64 + 1e-9).floor() as usize);
        }
    }
}
