//! Subject-level train/validation/test splits.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn validate_fractions(fractions: [f64; 3]) -> Result<()> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    Ok(())
}

/// Shuffle the distinct subjects with `seed` and cut them by `fractions`.
/// Every split with a positive fraction receives at least one subject; all
/// rows of a subject land in the same split.
pub fn split_stratified(subject_ids: &[String], fractions: [f64; 3], seed: u64) -> Result<Split> {
    validate_fractions(fractions)?;
    let mut groups: IndexMap<&str, Vec<usize>> = IndexMap::new();
    for (i, s) in subject_ids.iter().enumerate() {
        groups.entry(s.as_str()).or_default().push(i);
    }
    let needed = fractions.iter().filter(|f| **f > 0.0).count();
    let n = groups.len();
    if n < needed {
        return Err(Error::Precondition(format!(
            "{n} subjects cannot fill {needed} non-empty splits"
        )));
    }
    let mut counts = [0usize; 3];
    for k in [1, 2] {
        if fractions[k] > 0.0 {
            counts[k] = ((fractions[k] * n as f64).round() as usize).max(1);
        }
    }
    counts[0] = n.saturating_sub(counts[1] + counts[2]);
    if fractions[0] > 0.0 && counts[0] == 0 {
        let donor = if counts[1] >= counts[2] { 1 } else { 2 };
        counts[donor] -= 1;
        counts[0] = 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = Split::default();
    for (pos, &g) in order.iter().enumerate() {
        let rows = &groups[g];
        let dst = if pos < counts[0] {
            &mut split.train
        } else if pos < counts[0] + counts[1] {
            &mut split.val
        } else {
            &mut split.test
        };
        dst.extend_from_slice(rows);
    }
    for v in [&mut split.train, &mut split.val, &mut split.test] {
        v.sort_unstable();
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn ids(subjects: usize, visits: usize) -> Vec<String> {
        (0..subjects * visits).map(|i| format!("s{}", i / visits)).collect()
    }

    fn subjects(ids: &[String], rows: &[usize]) -> HashSet<String> {
        rows.iter().map(|&r| ids[r].clone()).collect()
    }

    #[test]
    fn ten_subjects_split_8_1_1() {
        let ids = ids(10, 3);
        let s = split_stratified(&ids, [0.8, 0.1, 0.1], 4).unwrap();
        assert_eq!(subjects(&ids, &s.train).len(), 8);
        assert_eq!(subjects(&ids, &s.val).len(), 1);
        assert_eq!(subjects(&ids, &s.test).len(), 1);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 30);
    }

    #[test]
    fn no_subject_leakage() {
        let ids: Vec<String> = (0..57).map(|i| format!("p{}", (i * 7) % 19)).collect();
        let s = split_stratified(&ids, [0.8, 0.1, 0.1], 11).unwrap();
        let (a, b, c) = (subjects(&ids, &s.train), subjects(&ids, &s.val), subjects(&ids, &s.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!(a.len() + b.len() + c.len(), 19);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let ids = ids(40, 2);
        let a = split_stratified(&ids, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!(a, split_stratified(&ids, [0.8, 0.1, 0.1], 1).unwrap());
        assert_ne!(a, split_stratified(&ids, [0.8, 0.1, 0.1], 2).unwrap());
    }

    #[test]
    fn errors() {
        assert!(matches!(split_stratified(&ids(2, 1), [0.8, 0.1, 0.1], 0), Err(Error::Precondition(_))));
        assert!(matches!(split_stratified(&ids(5, 1), [0.8, 0.1, 0.2], 0), Err(Error::Validation(_))));
        assert!(split_stratified(&ids(3, 1), [0.8, 0.1, 0.1], 0).is_ok());
    }
}
