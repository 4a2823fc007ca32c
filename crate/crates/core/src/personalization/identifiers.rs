use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::class::ClassId;
use crate::error::{Error, Result};
use crate::nn::{Param, Parameterized};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// `photo of a [V^i] [metaclass]`
    Identifier,
    /// `photo of a {class name}`
    Terminology,
}

/// One learnable condition vector per class identifier `[V^i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifierTable {
    metaclass: String,
    embeddings: Param,
    terminology_names: Option<Vec<String>>,
}

impl IdentifierTable {
    /// Every identifier starts at `init` (the metaclass embedding) plus a
    /// seeded Gaussian offset of scale `jitter`, so identifiers are distinct
    /// rare tokens from the first step.
    pub fn new(
        metaclass: &str,
        num_classes: usize,
        init: ArrayView1<f32>,
        jitter: f32,
        seed: u64,
        terminology_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("identifier table needs at least one class"));
        }
        if let Some(names) = &terminology_names {
            if names.len() != num_classes {
                return Err(Error::invalid(format!(
                    "{} class names for {num_classes} classes",
                    names.len()
                )));
            }
        }
        let mut rng = rng::stream(seed, Stream::Identifiers, 0);
        let normal = Normal::new(0.0f32, jitter.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
        let embeddings = Array2::from_shape_fn((num_classes, init.len()), |(_, c)| {
            init[c] + if jitter > 0.0 { normal.sample(&mut rng) } else { 0.0 }
        });
        Ok(IdentifierTable {
            metaclass: metaclass.to_string(),
            embeddings: Param::new(embeddings),
            terminology_names,
        })
    }

    pub fn from_parts(metaclass: &str, embeddings: Array2<f32>, terminology_names: Option<Vec<String>>) -> Result<Self> {
        if embeddings.nrows() == 0 {
            return Err(Error::invalid("identifier table needs at least one class"));
        }
        if terminology_names.as_ref().is_some_and(|n| n.len() != embeddings.nrows()) {
            return Err(Error::invalid("class name count does not match identifier count"));
        }
        Ok(IdentifierTable {
            metaclass: metaclass.to_string(),
            embeddings: Param::new(embeddings),
            terminology_names,
        })
    }

    pub fn metaclass(&self) -> &str {
        &self.metaclass
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.value.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.value.ncols()
    }

    pub fn terminology_names(&self) -> Option<&[String]> {
        self.terminology_names.as_deref()
    }

    pub fn embeddings(&self) -> &Param {
        &self.embeddings
    }

    pub fn embedding(&self, class: ClassId) -> ArrayView1<'_, f32> {
        self.embeddings.value.row(class.zero_based())
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.embeddings.trainable = trainable;
    }

    pub fn token(class: ClassId) -> String {
        format!("[V^{}]", class.get())
    }

    fn parse_token(token: &str) -> Option<u32> {
        token.strip_prefix("[V^")?.strip_suffix(']')?.parse().ok()
    }
}

impl Parameterized for IdentifierTable {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("identifiers".to_string(), &self.embeddings)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("identifiers".to_string(), &mut self.embeddings)]
    }
}

pub fn build_prompt(class: ClassId, mode: PromptMode, table: &IdentifierTable) -> Result<String> {
    class.check(table.num_classes())?;
    match mode {
        PromptMode::Identifier => Ok(format!(
            "photo of a {} {}",
            IdentifierTable::token(class),
            table.metaclass
        )),
        PromptMode::Terminology => {
            let names = table
                .terminology_names
                .as_ref()
                .ok_or_else(|| Error::state("terminology prompts need class names"))?;
            Ok(format!("photo of a {}", names[class.zero_based()]))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPrompt {
    pub cond: Array1<f32>,
    /// Identifier tokens present and their weight in `cond`, for routing
    /// gradients back to the table.
    pub identifiers: Vec<(ClassId, f32)>,
}

/// Maps a prompt to a condition vector. The empty prompt is the null
/// condition used for guidance.
pub trait PromptEncoder: Sync {
    fn dim(&self) -> usize;
    fn encode(&self, prompt: &str, table: Option<&IdentifierTable>) -> Result<EncodedPrompt>;
}

/// Frozen bag-of-words encoder: each word maps to a fixed pseudo-random
/// vector derived from its hash, identifier tokens read the table, and the
/// prompt embedding is the mean over content words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTextEncoder {
    pub dim: usize,
    pub salt: u64,
}

const STOPWORDS: &[&str] = &["photo", "of", "a", "an", "the"];

impl ToyTextEncoder {
    pub fn new(dim: usize) -> Self {
        ToyTextEncoder { dim, salt: 0 }
    }

    pub fn word(&self, word: &str) -> Array1<f32> {
        let mut h = Sha256::new();
        h.update(self.salt.to_le_bytes());
        h.update(word.to_lowercase().as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        Array1::from_shape_fn(self.dim, |_| normal.sample(&mut rng))
    }
}

impl PromptEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &str, table: Option<&IdentifierTable>) -> Result<EncodedPrompt> {
        let mut sum = Array1::<f32>::zeros(self.dim);
        let mut count = 0usize;
        let mut ids = Vec::new();
        for token in prompt.split_whitespace() {
            if STOPWORDS.contains(&token.to_lowercase().as_str()) {
                continue;
            }
            count += 1;
            match IdentifierTable::parse_token(token) {
                Some(i) => {
                    let table = table.ok_or_else(|| Error::state(format!("prompt uses {token} but no identifier table is loaded")))?;
                    let class = ClassId::new(i)?.check(table.num_classes())?;
                    if table.dim() != self.dim {
                        return Err(Error::invalid("identifier width differs from encoder width"));
                    }
                    sum += &table.embedding(class);
                    ids.push(class);
                }
                None => sum += &self.word(token),
            }
        }
        if count > 0 {
            sum /= count as f32;
        }
        let weight = if count > 0 { 1.0 / count as f32 } else { 0.0 };
        Ok(EncodedPrompt {
            cond: sum,
            identifiers: ids.into_iter().map(|c| (c, weight)).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(names: Option<Vec<String>>) -> IdentifierTable {
        IdentifierTable::new("bird", 3, Array1::zeros(4).view(), 0.0, 0, names).unwrap()
    }

    #[test]
    fn identifier_prompts() {
        let t = table(None);
        let p = build_prompt(ClassId::new(3).unwrap(), PromptMode::Identifier, &t).unwrap();
        assert_eq!(p, "photo of a [V^3] bird");
    }

    #[test]
    fn terminology_prompts() {
        let names = vec!["Pileated Woodpecker".to_string(), "Blue Jay".into(), "Wren".into()];
        let t = table(Some(names));
        let p = build_prompt(ClassId::new(1).unwrap(), PromptMode::Terminology, &t).unwrap();
        assert_eq!(p, "photo of a Pileated Woodpecker");
    }

    #[test]
    fn prompt_errors() {
        let t = table(None);
        assert!(ClassId::new(0).is_err());
        let four = ClassId::new(4).unwrap();
        assert!(matches!(
            build_prompt(four, PromptMode::Identifier, &t),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            build_prompt(ClassId::new(1).unwrap(), PromptMode::Terminology, &t),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn encoder_mixes_identifier_and_metaclass() {
        let enc = ToyTextEncoder::new(4);
        let mut t = table(None);
        t.embeddings.value.row_mut(1).fill(2.0);
        let e = enc.encode("photo of a [V^2] bird", Some(&t)).unwrap();
        let expected = (enc.word("bird") + Array1::from_elem(4, 2.0f32)) / 2.0;
        assert_eq!(e.cond, expected);
        assert_eq!(e.identifiers, vec![(ClassId::new(2).unwrap(), 0.5)]);
        assert_eq!(enc.encode("", None).unwrap().cond, Array1::<f32>::zeros(4));
        assert!(enc.encode("photo of a [V^2] bird", None).is_err());
        assert_eq!(enc.word("Bird"), enc.word("bird"));
    }
}
