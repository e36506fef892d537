use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

/// Name of the blank (concept-free) prompt.
pub const BLANK: &str = "∅";

/// Frozen token matrix standing in for a text encoder's output for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbedding {
    pub name: String,
    /// `tokens × d_in`
    pub tokens: Matrix,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl ConceptEmbedding {
    /// Deterministic pseudo-random tokens for `(name, seed)`, entries `N(0, scale²)`.
    pub fn generate(name: &str, seed: u64, tokens: usize, d_in: usize, scale: f64) -> Self {
        let mut rng = Rng::new(fnv1a(name.as_bytes()) ^ seed);
        Self {
            name: name.to_string(),
            tokens: rng.normal_matrix(tokens, d_in, scale),
        }
    }
}

/// Which prompt a denoiser call is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Blank,
    Concept(usize),
}

/// The blank prompt plus an ordered list of named concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    blank: ConceptEmbedding,
    concepts: Vec<ConceptEmbedding>,
}

impl ConceptBank {
    pub fn new(blank: ConceptEmbedding, concepts: Vec<ConceptEmbedding>) -> Result<Self> {
        let shape = blank.tokens.shape();
        for (i, c) in concepts.iter().enumerate() {
            if c.tokens.shape() != shape {
                return Err(crate::shape_err!(
                    "concept `{}` tokens {:?}, blank {:?}",
                    c.name,
                    c.tokens.shape(),
                    shape
                ));
            }
            if c.name == BLANK || concepts[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::InvalidArgument(alloc::format!(
                    "duplicate concept name `{}`",
                    c.name
                )));
            }
        }
        Ok(Self { blank, concepts })
    }

    /// Generates the blank prompt and every named concept from per-concept seeds.
    pub fn generate(
        names: &[(String, u64)],
        blank_seed: u64,
        tokens: usize,
        d_in: usize,
        scale: f64,
    ) -> Result<Self> {
        let blank = ConceptEmbedding::generate(BLANK, blank_seed, tokens, d_in, scale);
        let concepts = names
            .iter()
            .map(|(n, s)| ConceptEmbedding::generate(n, *s, tokens, d_in, scale))
            .collect();
        Self::new(blank, concepts)
    }

    pub fn blank(&self) -> &ConceptEmbedding {
        &self.blank
    }

    pub fn concepts(&self) -> &[ConceptEmbedding] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.concepts
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownConcept(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&ConceptEmbedding> {
        if name == BLANK {
            return Ok(&self.blank);
        }
        Ok(&self.concepts[self.index_of(name)?])
    }

    pub fn tokens(&self, cond: Condition) -> &Matrix {
        match cond {
            Condition::Blank => &self.blank.tokens,
            Condition::Concept(i) => &self.concepts[i].tokens,
        }
    }

    pub fn name(&self, cond: Condition) -> &str {
        match cond {
            Condition::Blank => BLANK,
            Condition::Concept(i) => &self.concepts[i].name,
        }
    }

    pub fn token_count(&self) -> usize {
        self.blank.tokens.rows()
    }

    pub fn d_in(&self) -> usize {
        self.blank.tokens.cols()
    }
}
