use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::class::ClassId;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shots {
    All,
    Count(usize),
}

impl std::str::FromStr for Shots {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Shots::All);
        }
        match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::invalid(format!("shots must be a positive integer or 'all', got {s:?}"))),
            Ok(n) => Ok(Shots::Count(n)),
        }
    }
}

fn members(classes: &[ClassId], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, c) in classes.iter().enumerate() {
        by_class[c.check(num_classes)?.zero_based()].push(i);
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::state(format!(
            "class {} has no images",
            ClassId::from_zero_based(empty)
        )));
    }
    Ok(by_class)
}

fn draw(pool: &[usize], amount: usize, seed: u64, class: usize) -> Vec<usize> {
    let mut rng = rng::stream(seed, Stream::Subset, class as u64);
    index::sample(&mut rng, pool.len(), amount.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

/// Per class, `min(shots, available)` items drawn without replacement.
/// Returns dataset positions in ascending order.
pub fn subsample_fewshot(classes: &[ClassId], num_classes: usize, shots: Shots, seed: u64) -> Result<Vec<usize>> {
    let by_class = members(classes, num_classes)?;
    let mut picked: Vec<usize> = match shots {
        Shots::All => (0..classes.len()).collect(),
        Shots::Count(0) => return Err(Error::invalid("shots must be at least 1")),
        Shots::Count(n) => by_class
            .iter()
            .enumerate()
            .flat_map(|(c, pool)| draw(pool, n, seed, c))
            .collect(),
    };
    picked.sort_unstable();
    Ok(picked)
}

/// Shape of a long-tailed split: classes in descending order of available
/// images and the count drawn for each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub imbalance_factor: f64,
    pub mean_count: f64,
    pub num_classes: usize,
    /// Class at each sorted position `k'`.
    pub order: Vec<ClassId>,
    /// Images kept at each sorted position.
    pub counts: Vec<usize>,
}

impl LongTailSpec {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Realized `max/min` ratio.
    pub fn realized_ratio(&self) -> f64 {
        let max = *self.counts.iter().max().unwrap_or(&1) as f64;
        let min = *self.counts.iter().min().unwrap_or(&1) as f64;
        max / min
    }
}

/// Target count at sorted position `k'`: `max(⌊n̄·ρ^(−k'/(N−1))⌋, 1)`.
fn longtail_count(mean: f64, rho: f64, position: usize, num_classes: usize) -> usize {
    let exponent = if num_classes > 1 {
        position as f64 / (num_classes - 1) as f64
    } else {
        0.0
    };
    // The epsilon keeps exact values such as 8·4^(−1/2) = 4 from flooring to 3.
    let raw = mean * rho.powf(-exponent);
    ((raw + 1e-9).floor() as usize).max(1)
}

/// Long-tailed subset with imbalance factor `rho`: classes are sorted by
/// available images (descending, ties by class id) and each keeps
/// `max(⌊n̄·ρ^(−k'/(N−1))⌋, 1)` images, capped at what it has.
pub fn make_longtail(classes: &[ClassId], num_classes: usize, rho: f64, seed: u64) -> Result<(Vec<usize>, LongTailSpec)> {
    if !(rho > 1.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("imbalance factor {rho} must exceed 1")));
    }
    if classes.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let by_class = members(classes, num_classes)?;
    let mean = classes.len() as f64 / num_classes as f64;
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|a, b| by_class[*b].len().cmp(&by_class[*a].len()).then(a.cmp(b)));

    let mut picked = Vec::new();
    let mut counts = Vec::with_capacity(num_classes);
    for (pos, &class) in order.iter().enumerate() {
        let target = longtail_count(mean, rho, pos, num_classes).min(by_class[class].len());
        picked.extend(draw(&by_class[class], target, seed, class));
        counts.push(target);
    }
    picked.sort_unstable();
    Ok((
        picked,
        LongTailSpec {
            imbalance_factor: rho,
            mean_count: mean,
            num_classes,
            order: order.into_iter().map(ClassId::from_zero_based).collect(),
            counts,
        },
    ))
}

/// Synthetic quota per class: the long-tail count at the mirrored sorted
/// position, so tail classes receive the most synthetic images.
pub fn synthetic_target_counts(spec: &LongTailSpec) -> Vec<(ClassId, usize)> {
    let n = spec.counts.len();
    spec.order
        .iter()
        .enumerate()
        .map(|(pos, &class)| (class, spec.counts[n - 1 - pos]))
        .collect()
}
