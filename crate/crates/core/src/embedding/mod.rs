//! Text embedding providers.
//!
//! Every provider returns unit-norm vectors. Downstream code only sees the
//! [`EmbeddingProvider`] trait, so the deterministic offline embedder used by
//! tests and benchmarks and the remote API client are interchangeable.

mod cache;
mod offline;
mod remote;

use std::collections::HashMap;
use std::sync::Mutex;

pub use cache::{statement_hash, CachedProvider, EmbeddingCache};
pub use offline::{offline_embed, OfflineEmbedder, RandomEmbedder};
pub use remote::{RemoteConfig, RemoteProvider};

use crate::error::{Error, Result};

/// A unit-norm embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalize `values` to unit length. Fails on non-finite or zero input.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding has non-finite components".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric("cannot normalize a zero embedding".into()));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(EmbeddingVector(values))
    }

    /// Widen an `f32` record and normalize it; the form every cached vector takes.
    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::normalized(values.iter().map(|&v| v as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}

pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier; scopes cache entries.
    fn name(&self) -> &str;

    fn dimension(&self) -> usize;

    /// Embed each statement. Callers go through [`embed_batch`], which
    /// validates input and removes duplicates first.
    fn embed(&self, statements: &[String]) -> Result<Vec<EmbeddingVector>>;
}

/// Embed `statements`, returning vectors aligned index-wise with the input.
pub fn embed_batch(
    provider: &dyn EmbeddingProvider,
    statements: &[String],
) -> Result<Vec<EmbeddingVector>> {
    if statements.is_empty() {
        return Err(Error::Precondition("embed_batch called with no statements".into()));
    }
    if let Some(i) = statements.iter().position(|s| s.is_empty()) {
        return Err(Error::Precondition(format!("statement {i} is empty")));
    }
    let mut unique: Vec<String> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let positions: Vec<usize> = statements
        .iter()
        .map(|s| {
            *slot.entry(s.as_str()).or_insert_with(|| {
                unique.push(s.clone());
                unique.len() - 1
            })
        })
        .collect();
    let vectors = provider.embed(&unique)?;
    if vectors.len() != unique.len() {
        return Err(Error::Integrity(format!(
            "provider `{}` returned {} vectors for {} statements",
            provider.name(),
            vectors.len(),
            unique.len()
        )));
    }
    for v in &vectors {
        if v.dimension() != provider.dimension() {
            return Err(Error::Integrity(format!(
                "provider `{}` declared dimension {} but produced {}",
                provider.name(),
                provider.dimension(),
                v.dimension()
            )));
        }
    }
    Ok(positions.into_iter().map(|i| vectors[i].clone()).collect())
}

/// Process-lifetime memo in front of a provider. Encoding a dataset touches
/// the same few hundred statements thousands of times.
pub struct MemoProvider<P> {
    inner: P,
    memo: Mutex<HashMap<String, EmbeddingVector>>,
}

impl<P: EmbeddingProvider> MemoProvider<P> {
    pub fn new(inner: P) -> Self {
        MemoProvider {
            inner,
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for MemoProvider<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, statements: &[String]) -> Result<Vec<EmbeddingVector>> {
        let missing: Vec<String> = {
            let memo = self.memo.lock().expect("memo poisoned");
            statements
                .iter()
                .filter(|s| !memo.contains_key(*s))
                .cloned()
                .collect()
        };
        if !missing.is_empty() {
            let fresh = self.inner.embed(&missing)?;
            let mut memo = self.memo.lock().expect("memo poisoned");
            for (s, v) in missing.into_iter().zip(fresh) {
                memo.entry(s).or_insert(v);
            }
        }
        let memo = self.memo.lock().expect("memo poisoned");
        Ok(statements.iter().map(|s| memo[s].clone()).collect())
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, statements: &[String]) -> Result<Vec<EmbeddingVector>> {
        (**self).embed(statements)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, statements: &[String]) -> Result<Vec<EmbeddingVector>> {
        (**self).embed(statements)
    }
}
