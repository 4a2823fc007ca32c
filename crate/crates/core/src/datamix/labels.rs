use crate::class::ClassId;
use crate::error::{Error, Result};

const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Probability vector over `N` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("label needs at least one class"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("label entries must be finite and nonnegative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::invalid(format!("label sums to {sum}, not 1")));
        }
        Ok(SoftLabel(probs))
    }

    pub fn one_hot(class: ClassId, num_classes: usize) -> Result<Self> {
        class.check(num_classes)?;
        let mut p = vec![0.0; num_classes];
        p[class.zero_based()] = 1.0;
        Ok(SoftLabel(p))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn weight(&self, class: ClassId) -> f64 {
        self.0[class.zero_based()]
    }

    /// Convex combination `λ·self + (1−λ)·other`.
    pub fn blend(&self, other: &SoftLabel, lambda: f64) -> Result<SoftLabel> {
        if self.0.len() != other.0.len() {
            return Err(Error::invalid("cannot blend labels of different widths"));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!("blend weight {lambda} outside [0, 1]")));
        }
        Ok(SoftLabel(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
                .collect(),
        ))
    }
}

/// Label of a translated image: weight `s^γ` on the target (prompt) class
/// and `1 − s^γ` on the reference class. Without a reference (full
/// generation) the label is one-hot on the target.
pub fn soft_label(
    target: ClassId,
    reference: Option<ClassId>,
    strength: f64,
    gamma: f64,
    num_classes: usize,
) -> Result<SoftLabel> {
    target.check(num_classes)?;
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::invalid(format!("strength {strength} outside [0, 1]")));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma {gamma} must be positive")));
    }
    let Some(reference) = reference else {
        return SoftLabel::one_hot(target, num_classes);
    };
    reference.check(num_classes)?;
    let w = strength.powf(gamma);
    let mut p = vec![0.0; num_classes];
    p[target.zero_based()] += w;
    p[reference.zero_based()] += 1.0 - w;
    Ok(SoftLabel(p))
}

/// `confidence·label + (1 − confidence)·uniform`.
pub fn smooth_label(label: &SoftLabel, confidence: f64) -> Result<SoftLabel> {
    if !(confidence > 0.0 && confidence <= 1.0) {
        return Err(Error::invalid(format!("confidence {confidence} outside (0, 1]")));
    }
    let n = label.0.len() as f64;
    let floor = (1.0 - confidence) / n;
    Ok(SoftLabel(label.0.iter().map(|p| confidence * p + floor).collect()))
}
