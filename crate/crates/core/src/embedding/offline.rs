use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};

const IDENTITY_WEIGHT: f64 = 0.3;
const BAG_WEIGHT: f64 = 0.7;

fn seeded_gaussian(domain: &str, seed: u64, text: &str, dimension: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    (0..dimension)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Lowercased alphanumeric tokens.
pub(crate) fn tokenize(statement: &str) -> Vec<String> {
    statement
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Deterministic stand-in for a language-model embedder.
///
/// Blends an exact-string component (a Gaussian seeded by the whole
/// statement) with a bag-of-tokens component (the mean of per-token seeded
/// Gaussians), each unit-normalized before the 0.3/0.7 blend. Statements that
/// share most tokens end up close; identical statements are identical.
pub fn offline_embed(statement: &str, seed: u64, dimension: usize) -> Result<EmbeddingVector> {
    if dimension < 8 {
        return Err(Error::Precondition(format!(
            "offline embedding dimension must be >= 8, got {dimension}"
        )));
    }
    let identity = unit(seeded_gaussian("identity", seed, statement, dimension));
    let tokens = tokenize(statement);
    let mut bag = vec![0.0; dimension];
    for tok in &tokens {
        for (b, g) in bag
            .iter_mut()
            .zip(seeded_gaussian("token", seed, tok, dimension))
        {
            *b += g;
        }
    }
    let bag = unit(bag);
    let blended = identity
        .iter()
        .zip(&bag)
        .map(|(i, b)| IDENTITY_WEIGHT * i + BAG_WEIGHT * b)
        .collect();
    EmbeddingVector::normalized(blended)
}

#[derive(Clone, Debug)]
pub struct OfflineEmbedder {
    seed: u64,
    dimension: usize,
    name: String,
}

impl OfflineEmbedder {
    pub fn new(seed: u64, dimension: usize) -> Result<Self> {
        if dimension < 8 {
            return Err(Error::Precondition(format!(
                "offline embedding dimension must be >= 8, got {dimension}"
            )));
        }
        Ok(OfflineEmbedder {
            seed,
            dimension,
            name: format!("offline-s{seed}-d{dimension}"),
        })
    }
}

impl EmbeddingProvider for OfflineEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, statements: &[String]) -> Result<Vec<EmbeddingVector>> {
        statements
            .iter()
            .map(|s| offline_embed(s, self.seed, self.dimension))
            .collect()
    }
}

/// Pure hash embedder: every distinct string maps to an unrelated random
/// unit vector. Used for the no-semantics ablation.
#[derive(Clone, Debug)]
pub struct RandomEmbedder {
    seed: u64,
    dimension: usize,
    name: String,
}

impl RandomEmbedder {
    pub fn new(seed: u64, dimension: usize) -> Self {
        RandomEmbedder {
            seed,
            dimension,
            name: format!("random-s{seed}-d{dimension}"),
        }
    }
}

impl EmbeddingProvider for RandomEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, statements: &[String]) -> Result<Vec<EmbeddingVector>> {
        statements
            .iter()
            .map(|s| EmbeddingVector::normalized(seeded_gaussian("random", self.seed, s, self.dimension)))
            .collect()
    }
}
