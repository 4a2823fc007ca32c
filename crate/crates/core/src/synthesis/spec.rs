use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Full reverse process from noise under the class prompt.
    Gen,
    /// Translation of a same-class reference.
    Aug,
    /// Translation of a reference from another class.
    Mix,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Gen => "gen",
            Strategy::Aug => "aug",
            Strategy::Mix => "mix",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gen" => Ok(Strategy::Gen),
            "aug" => Ok(Strategy::Aug),
            "mix" => Ok(Strategy::Mix),
            other => Err(Error::invalid(format!("unknown strategy {other:?} (expected gen, aug or mix)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationSpec {
    pub strategy: Strategy,
    /// Fine-tuned model with identifier prompts when set, base model with
    /// class names otherwise.
    pub personalized: bool,
    pub strengths: Vec<f64>,
    pub gamma: f64,
    pub multiplier: usize,
}

impl TranslationSpec {
    pub fn new(strategy: Strategy, personalized: bool) -> Self {
        TranslationSpec {
            strategy,
            personalized,
            strengths: vec![0.5, 0.7, 0.9],
            gamma: 0.5,
            multiplier: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strengths.is_empty() && self.strategy != Strategy::Gen {
            return Err(Error::invalid("at least one strength is required"));
        }
        if let Some(s) = self.strengths.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::invalid(format!("strength {s} outside [0, 1]")));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma {} must be positive", self.gamma)));
        }
        if self.multiplier == 0 {
            return Err(Error::invalid("multiplier must be at least 1"));
        }
        Ok(())
    }

    /// Display name such as `diff-mix` or `real-gen`.
    pub fn label(&self) -> String {
        let family = if self.personalized { "diff" } else { "real" };
        format!("{family}-{}", self.strategy)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint::of_json(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let s = TranslationSpec::new(Strategy::Mix, true);
        assert_eq!(s.strengths, vec![0.5, 0.7, 0.9]);
        assert_eq!((s.gamma, s.multiplier), (0.5, 5));
        assert_eq!(s.label(), "diff-mix");
        assert_eq!(TranslationSpec::new(Strategy::Gen, false).label(), "real-gen");
        s.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let mut s = TranslationSpec::new(Strategy::Aug, true);
        s.strengths = vec![0.5, 1.2];
        assert!(s.validate().is_err());
        s.strengths = vec![];
        assert!(s.validate().is_err());
        let mut g = TranslationSpec::new(Strategy::Gen, true);
        g.strengths = vec![];
        g.validate().unwrap();
        g.gamma = 0.0;
        assert!(g.validate().is_err());
        assert!("blend".parse::<Strategy>().is_err());
        assert_eq!("MIX".parse::<Strategy>().unwrap(), Strategy::Mix);
    }
}
