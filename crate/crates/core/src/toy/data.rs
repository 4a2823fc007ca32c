use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::class::ClassId;
use crate::error::{Error, Result};
use crate::io::{Dataset, Example};
use crate::rng::{self, normal_vec, Stream};
use crate::train_eval::GroupSpec;

/// A labeled toy dataset with its prompt vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyProblem {
    pub name: String,
    pub metaclass: String,
    pub class_names: Vec<String>,
    pub train: Dataset,
    pub test: Dataset,
    /// Group of every test item, when the problem defines groups.
    pub groups: Option<GroupSpec>,
}

fn sample(class: usize, centre: &[f32], spread: f32, i: usize, rng: &mut rng::Rng, tag: &str) -> Example {
    let z = normal_vec(rng, centre.len());
    Example {
        image_ref: format!("{tag}/{i:05}.npy"),
        class: ClassId::from_zero_based(class),
        image: Array1::from_iter(centre.iter().zip(z).map(|(c, z)| c + spread * z)),
    }
}

/// Three well separated 2-D Gaussian clusters named after birds.
pub fn three_class(per_class: usize, seed: u64) -> Result<ToyProblem> {
    if per_class == 0 {
        return Err(Error::invalid("need at least one example per class"));
    }
    let centres: Vec<[f32; 2]> = (0..3)
        .map(|k| {
            let a = std::f32::consts::TAU * k as f32 / 3.0;
            [2.0 * a.cos(), 2.0 * a.sin()]
        })
        .collect();
    let build = |split: &str, n: usize, index: u64| {
        let mut rng = rng::stream(seed, Stream::Data, index);
        let examples = (0..3 * n)
            .map(|i| sample(i % 3, &centres[i % 3], 0.35, i, &mut rng, split))
            .collect();
        Dataset::new(vec![2], 3, examples)
    };
    Ok(ToyProblem {
        name: "toy-three-class".into(),
        metaclass: "bird".into(),
        class_names: vec!["Northern Cardinal".into(), "Blue Jay".into(), "Yellow Warbler".into()],
        train: build("train", per_class, 0)?,
        test: build("test", per_class, 1)?,
        groups: None,
    })
}

/// Two-class `1×4×4` images: the central 2×2 patch carries the class, the
/// twelve border pixels carry a background that agrees with the class with
/// probability `correlation` in training and is balanced at test time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpuriousConfig {
    pub train_size: usize,
    pub test_per_group: usize,
    pub correlation: f64,
    pub fg_amplitude: f32,
    pub fg_noise: f32,
    pub bg_amplitude: f32,
    pub bg_noise: f32,
}

impl Default for SpuriousConfig {
    fn default() -> Self {
        SpuriousConfig {
            train_size: 1000,
            test_per_group: 500,
            correlation: 0.9,
            fg_amplitude: 0.5,
            fg_noise: 0.8,
            bg_amplitude: 1.5,
            bg_noise: 0.2,
        }
    }
}

const FOREGROUND: [usize; 4] = [5, 6, 9, 10];
const BIRDS: [&str; 2] = ["landbird", "waterbird"];
const PLACES: [&str; 2] = ["land", "water"];

/// Test groups whose background contradicts the class.
pub const COUNTERFACTUAL_GROUPS: [&str; 2] = ["landbird_water", "waterbird_land"];

fn bird_image(cfg: &SpuriousConfig, class: usize, place: usize, rng: &mut rng::Rng) -> Array1<f32> {
    let z = normal_vec(rng, 16);
    let sign = |k: usize| if k == 0 { 1.0 } else { -1.0 };
    Array1::from_iter((0..16).map(|p| {
        if FOREGROUND.contains(&p) {
            sign(class) * cfg.fg_amplitude + cfg.fg_noise * z[p]
        } else {
            sign(place) * cfg.bg_amplitude + cfg.bg_noise * z[p]
        }
    }))
}

pub fn spurious(cfg: &SpuriousConfig, seed: u64) -> Result<ToyProblem> {
    if !(0.0..=1.0).contains(&cfg.correlation) || cfg.train_size < 2 || cfg.test_per_group == 0 {
        return Err(Error::invalid(format!("unusable spurious-correlation config {cfg:?}")));
    }
    let mut rng = rng::stream(seed, Stream::Data, 0);
    let train = (0..cfg.train_size)
        .map(|i| {
            let class = i % 2;
            let place = if rng.random_bool(cfg.correlation) { class } else { 1 - class };
            Example {
                image_ref: format!("train/{i:05}.npy"),
                class: ClassId::from_zero_based(class),
                image: bird_image(cfg, class, place, &mut rng),
            }
        })
        .collect();
    let mut rng = rng::stream(seed, Stream::Data, 1);
    let mut test = Vec::new();
    let mut groups = GroupSpec::default();
    for (class, bird) in BIRDS.iter().enumerate() {
        for (place, habitat) in PLACES.iter().enumerate() {
            for _ in 0..cfg.test_per_group {
                let image_ref = format!("test/{:05}.npy", test.len());
                groups
                    .groups
                    .insert(image_ref.clone(), format!("{bird}_{habitat}"));
                test.push(Example {
                    image_ref,
                    class: ClassId::from_zero_based(class),
                    image: bird_image(cfg, class, place, &mut rng),
                });
            }
        }
    }
    Ok(ToyProblem {
        name: "toy-spurious".into(),
        metaclass: "bird".into(),
        class_names: BIRDS.iter().map(|s| s.to_string()).collect(),
        train: Dataset::new(vec![1, 4, 4], 2, train)?,
        test: Dataset::new(vec![1, 4, 4], 2, test)?,
        groups: Some(groups),
    })
}

/// Assigns a vector to the class with the closest mean; ties go to the
/// lower class.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestCentroid {
    centroids: Array2<f32>,
}

impl NearestCentroid {
    pub fn fit(data: &Dataset) -> Result<Self> {
        let counts = data.class_counts();
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::state(format!("class {} has no examples", c + 1)));
        }
        let mut centroids = Array2::<f32>::zeros((data.num_classes, data.dim()));
        for e in &data.examples {
            let mut row = centroids.row_mut(e.class.zero_based());
            row += &e.image;
        }
        for (mut row, n) in centroids.axis_iter_mut(Axis(0)).zip(counts) {
            row /= n as f32;
        }
        Ok(NearestCentroid { centroids })
    }

    pub fn assign(&self, x: ArrayView1<f32>) -> ClassId {
        let mut best = (0, f32::INFINITY);
        for (i, c) in self.centroids.axis_iter(Axis(0)).enumerate() {
            let d: f32 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        ClassId::from_zero_based(best.0)
    }

    /// Fraction of rows assigned to `class`.
    pub fn rate(&self, rows: &Array2<f32>, class: ClassId) -> f64 {
        let hits = rows.axis_iter(Axis(0)).filter(|r| self.assign(*r) == class).count();
        hits as f64 / rows.nrows().max(1) as f64
    }
}
