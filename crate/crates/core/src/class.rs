use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 1-based class index, as it appears in prompts, manifests and index files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(u32);

impl ClassId {
    pub fn new(index: u32) -> Result<Self> {
        if index == 0 {
            return Err(Error::invalid("class indices start at 1"));
        }
        Ok(ClassId(index))
    }

    /// Builds the id for a 0-based position in a label vector.
    pub fn from_zero_based(pos: usize) -> Self {
        ClassId(pos as u32 + 1)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn zero_based(self) -> usize {
        self.0 as usize - 1
    }

    pub fn check(self, num_classes: usize) -> Result<Self> {
        if self.0 == 0 || self.0 as usize > num_classes {
            return Err(Error::invalid(format!(
                "class index {} outside [1, {num_classes}]",
                self.0
            )));
        }
        Ok(self)
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
