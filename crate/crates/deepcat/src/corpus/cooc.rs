//! Category co-occurrence counts and their cosine-normalized form.

use serde::{Deserialize, Serialize};

use super::{CorpusError, QueryRecord};
use crate::numerics::Tensor;

/// Symmetric |C|x|C| co-occurrence counts plus the cosine-normalized
/// matrix used as the training target for the category-category loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoocMatrix {
    pub num_categories: usize,
    /// counts[i*n + j]; diagonal holds per-category query counts
    pub counts: Vec<u64>,
    /// Ochiai form: counts[i][j] / sqrt(counts[i][i] * counts[j][j])
    pub normalized: Vec<f64>,
}

impl CoocMatrix {
    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.num_categories + j]
    }

    pub fn norm(&self, i: usize, j: usize) -> f64 {
        self.normalized[i * self.num_categories + j]
    }

    /// Normalized matrix as a tensor for loss construction.
    pub fn normalized_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.num_categories, self.num_categories],
            self.normalized.clone(),
        )
        .expect("normalized CM entries are finite")
    }
}

/// Count label co-occurrences over training queries: each unordered pair
/// (i, j), i != j, in a query's label set increments both mirror entries;
/// the diagonal counts queries containing each category.
pub fn build_category_cooccurrence(
    records: &[QueryRecord],
    num_categories: usize,
) -> Result<Vec<u64>, CorpusError> {
    let mut counts = vec![0u64; num_categories * num_categories];
    for r in records {
        if r.categories.is_empty() {
            return Err(CorpusError::EmptyCategories);
        }
        let cats: Vec<usize> = r.categories.iter().copied().collect();
        for (a, &i) in cats.iter().enumerate() {
            counts[i * num_categories + i] += 1;
            for &j in &cats[a + 1..] {
                counts[i * num_categories + j] += 1;
                counts[j * num_categories + i] += 1;
            }
        }
    }
    Ok(counts)
}

/// Cosine (Ochiai) normalization. Entries with a zero diagonal on either
/// side map to 0; diagonal entries with positive counts map to exactly 1.
pub fn cosine_normalize(counts: &[u64], num_categories: usize) -> Result<CoocMatrix, CorpusError> {
    let n = num_categories;
    assert_eq!(counts.len(), n * n, "counts must be |C|x|C|");
    for i in 0..n {
        for j in (i + 1)..n {
            if counts[i * n + j] != counts[j * n + i] {
                return Err(CorpusError::AsymmetricCounts(i, j));
            }
        }
    }
    let mut normalized = vec![0.0; n * n];
    for i in 0..n {
        let di = counts[i * n + i];
        if di == 0 {
            continue;
        }
        normalized[i * n + i] = 1.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let dj = counts[j * n + j];
            if dj == 0 {
                continue;
            }
            normalized[i * n + j] = counts[i * n + j] as f64 / ((di as f64) * (dj as f64)).sqrt();
        }
    }
    Ok(CoocMatrix {
        num_categories: n,
        counts: counts.to_vec(),
        normalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn rec(cats: &[usize]) -> QueryRecord {
        QueryRecord::new("q".into(), cats.iter().copied().collect(), 1).unwrap()
    }

    /// Direct-definition oracle: for every (i, j), i != j, count queries
    /// whose label set contains both.
    fn brute_force(records: &[QueryRecord], n: usize) -> Vec<u64> {
        let mut out = vec![0u64; n * n];
        for i in 0..n {
            for j in 0..n {
                let c = records
                    .iter()
                    .filter(|r| {
                        if i == j {
                            r.categories.contains(&i)
                        } else {
                            r.categories.contains(&i) && r.categories.contains(&j)
                        }
                    })
                    .count();
                out[i * n + j] = c as u64;
            }
        }
        out
    }

    #[test]
    fn single_pair_query() {
        let counts = build_category_cooccurrence(&[rec(&[0, 1])], 3).unwrap();
        assert_eq!(counts[0 * 3 + 1], 1);
        assert_eq!(counts[1 * 3 + 0], 1);
        assert_eq!(counts[0 * 3 + 0], 1);
        assert_eq!(counts[1 * 3 + 1], 1);
        assert_eq!(counts[2 * 3 + 2], 0);
    }

    #[test]
    fn hand_enumerated_counts() {
        // queries {a,b}, {a}, {a,b,c} with a=0, b=1, c=2
        let records = vec![rec(&[0, 1]), rec(&[0]), rec(&[0, 1, 2])];
        let counts = build_category_cooccurrence(&records, 3).unwrap();
        assert_eq!(counts[0], 3); // a,a
        assert_eq!(counts[1], 2); // a,b
        assert_eq!(counts[1 * 3 + 2], 1); // b,c
        assert_eq!(counts[0 * 3 + 2], 1); // a,c
        assert_eq!(counts, brute_force(&records, 3));
    }

    #[test]
    fn never_paired_stays_zero() {
        let counts = build_category_cooccurrence(&[rec(&[0]), rec(&[1])], 2).unwrap();
        assert_eq!(counts[0 * 2 + 1], 0);
    }

    #[test]
    fn normalize_hand_examples() {
        let cm = cosine_normalize(&[4, 2, 2, 1], 2).unwrap();
        assert_eq!(cm.normalized, vec![1.0, 1.0, 1.0, 1.0]);

        let cm = cosine_normalize(&[9, 3, 3, 4], 2).unwrap();
        assert_eq!(cm.norm(0, 1), 0.5);
        assert_eq!(cm.norm(0, 0), 1.0);

        let cm = cosine_normalize(&[5, 0, 0, 7], 2).unwrap();
        assert_eq!(cm.normalized, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_rejects_asymmetry() {
        assert!(cosine_normalize(&[1, 2, 3, 1], 2).is_err());
    }

    proptest! {
        /// Builder equals the brute-force oracle and normalized entries
        /// stay in [0, 1] on random corpora.
        #[test]
        fn matches_oracle_and_stays_bounded(
            label_sets in prop::collection::vec(
                prop::collection::btree_set(0usize..6, 1..4), 1..60)
        ) {
            let records: Vec<QueryRecord> = label_sets
                .into_iter()
                .map(|s| QueryRecord::new("q".into(), s, 1).unwrap())
                .collect();
            let counts = build_category_cooccurrence(&records, 6).unwrap();
            prop_assert_eq!(&counts, &brute_force(&records, 6));
            let cm = cosine_normalize(&counts, 6).unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    let v = cm.norm(i, j);
                    prop_assert!((0.0..=1.0).contains(&v));
                    prop_assert!((v - cm.norm(j, i)).abs() == 0.0);
                }
                if cm.count(i, i) > 0 {
                    prop_assert_eq!(cm.norm(i, i), 1.0);
                }
            }
        }
    }

    #[test]
    fn empty_label_set_rejected() {
        let mut r = rec(&[0]);
        r.categories = BTreeSet::new();
        assert!(build_category_cooccurrence(&[r], 2).is_err());
    }
}
