//! Synthetic imbalanced query corpus.
//!
//! Stands in for proprietary click logs: category popularity follows a
//! Zipf law, label sets are correlated through the L1 level of the
//! taxonomy, and query tokens are drawn from category-specific pools with
//! overlap across sibling categories.
//!
//! Categories overlap in two ways. Sibling leaves share their L1 parent's
//! token pool, and leaves of neighboring ids — which sit in different L1
//! groups — are paired so that each pair shares its four signature tokens:
//! leaf A emits the adjacent bigrams x·y / z·w while its partner B emits
//! x·w / z·y. The pair members therefore have identical single-token
//! marginals, like homonym compounds sold in two departments; only token
//! adjacency tells them apart.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::taxonomy::{L1Node, LeafNode, Taxonomy};
use super::{CorpusError, QueryRecord};
use crate::numerics::rng::rng_from_seed;

/// Token pool sizes per scope. Leaf pools are disjoint; sibling leaves
/// overlap through their shared L1 pool.
const COMMON_POOL: usize = 50;
const L1_POOL: usize = 8;
const LEAF_POOL: usize = 5;

/// Emission mixture per unit: a signature bigram (two adjacent tokens), a
/// leaf-distinctive single token, an L1-pool token, or a common token.
const P_SIG: f64 = 0.50;
const P_LEAF_SINGLE: f64 = 0.12;
const P_L1: f64 = 0.25;

/// Pareto exponent for query frequencies; chosen so that a 20k corpus
/// populates all three traffic buckets comfortably.
const FREQ_EXPONENT: f64 = 0.8;
const FREQ_CAP: u64 = 10_000;

/// Label-set size distribution (1..=4 labels).
const LABEL_COUNT_WEIGHTS: [f64; 4] = [0.55, 0.25, 0.12, 0.08];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_l1: usize,
    pub num_leaves: usize,
    pub vocab_size: usize,
    pub num_queries: usize,
    pub zipf_exponent: f64,
    /// probability that an extra label is drawn from the primary label's
    /// L1 siblings instead of uniformly
    pub correlation_strength: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_l1: 33,
            num_leaves: 200,
            vocab_size: 2000,
            num_queries: 20_000,
            zipf_exponent: 1.2,
            correlation_strength: 0.6,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<(), CorpusError> {
        if self.num_l1 == 0 || self.num_leaves == 0 || self.vocab_size == 0 || self.num_queries == 0 {
            return Err(CorpusError::InvalidConfig("all counts must be positive".into()));
        }
        if self.num_leaves < self.num_l1 {
            return Err(CorpusError::InvalidConfig(format!(
                "need at least one leaf per L1 group ({} leaves < {} groups)",
                self.num_leaves, self.num_l1
            )));
        }
        if self.zipf_exponent <= 0.0 {
            return Err(CorpusError::InvalidConfig("zipf_exponent must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.correlation_strength) {
            return Err(CorpusError::InvalidConfig(
                "correlation_strength must lie in [0, 1]".into(),
            ));
        }
        let needed = COMMON_POOL + self.num_l1 * L1_POOL + self.num_leaves * LEAF_POOL;
        if self.vocab_size < needed {
            return Err(CorpusError::VocabTooSmall {
                vocab_size: self.vocab_size,
                needed,
            });
        }
        Ok(())
    }
}

/// Deterministic pronounceable pseudo-word for a token or category index.
fn pseudo_word(mut n: usize) -> String {
    const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
    const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(ONSETS[n % ONSETS.len()]);
        n /= ONSETS.len();
        w.push_str(NUCLEI[n % NUCLEI.len()]);
        n /= NUCLEI.len();
    }
    w
}

struct TokenPools {
    common: Vec<usize>,
    per_l1: Vec<Vec<usize>>,
    per_leaf: Vec<Vec<usize>>,
    /// two signature bigrams per leaf, emitted as adjacent token pairs
    signatures: Vec<[(usize, usize); 2]>,
    /// leaf-pool offset where the leaf's distinctive single tokens start
    single_from: Vec<usize>,
}

fn allocate_pools(cfg: &GeneratorConfig) -> TokenPools {
    let mut next = 0usize;
    let mut take = |n: usize| {
        let slice: Vec<usize> = (next..next + n).collect();
        next += n;
        slice
    };
    let common = take(COMMON_POOL);
    let per_l1: Vec<Vec<usize>> = (0..cfg.num_l1).map(|_| take(L1_POOL)).collect();
    let per_leaf: Vec<Vec<usize>> = (0..cfg.num_leaves).map(|_| take(LEAF_POOL)).collect();

    // Pair neighboring leaf ids (different L1 parents, similar Zipf rank):
    // within a pair (a, b) the four signature tokens x, z (from a's pool)
    // and y, w (from b's pool) are shared, crossed so that only adjacency
    // distinguishes the two leaves. A leftover leaf builds both bigrams
    // from its own pool.
    let mut signatures = vec![[(0, 0); 2]; cfg.num_leaves];
    let mut single_from = vec![0usize; cfg.num_leaves];
    let ids: Vec<usize> = (0..cfg.num_leaves).collect();
    for pair in ids.chunks(2) {
        match *pair {
            [a, b] => {
                let (x, z) = (per_leaf[a][0], per_leaf[a][1]);
                let (y, w) = (per_leaf[b][0], per_leaf[b][1]);
                signatures[a] = [(x, y), (z, w)];
                signatures[b] = [(x, w), (z, y)];
                single_from[a] = 2;
                single_from[b] = 2;
            }
            [c] => {
                let p = &per_leaf[c];
                signatures[c] = [(p[0], p[2]), (p[1], p[3])];
                single_from[c] = 4;
            }
            _ => unreachable!("chunks(2)"),
        }
    }

    TokenPools {
        common,
        per_l1,
        per_leaf,
        signatures,
        single_from,
    }
}

/// Cumulative Zipf weights over leaf popularity ranks (rank = leaf id).
fn zipf_cumulative(n: usize, s: f64) -> Vec<f64> {
    let mut cum = Vec::with_capacity(n);
    let mut total = 0.0;
    for k in 1..=n {
        total += (k as f64).powf(-s);
        cum.push(total);
    }
    for v in cum.iter_mut() {
        *v /= total;
    }
    cum
}

fn sample_cumulative(cum: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    cum.partition_point(|&c| c < u).min(cum.len() - 1)
}

fn sample_label_count(rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &w) in LABEL_COUNT_WEIGHTS.iter().enumerate() {
        acc += w;
        if u < acc {
            return i + 1;
        }
    }
    LABEL_COUNT_WEIGHTS.len()
}

fn sample_frequency(rng: &mut ChaCha8Rng) -> u64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    (u.powf(-1.0 / FREQ_EXPONENT).floor() as u64).clamp(1, FREQ_CAP)
}

/// Sample the label set for one query: a Zipf-popular primary leaf plus
/// 0..=3 extras that share the primary's L1 parent with probability
/// `correlation_strength`.
fn sample_labels(
    cfg: &GeneratorConfig,
    leaves_by_l1: &[Vec<usize>],
    zipf_cum: &[f64],
    rng: &mut ChaCha8Rng,
) -> BTreeSet<usize> {
    let primary = sample_cumulative(zipf_cum, rng);
    let mut labels = BTreeSet::from([primary]);
    let want = sample_label_count(rng);
    let siblings = &leaves_by_l1[primary % cfg.num_l1];
    let mut attempts = 0;
    while labels.len() < want && attempts < 20 {
        attempts += 1;
        let correlated = rng.gen::<f64>() < cfg.correlation_strength && siblings.len() > 1;
        let cand = if correlated {
            siblings[rng.gen_range(0..siblings.len())]
        } else {
            rng.gen_range(0..cfg.num_leaves)
        };
        labels.insert(cand);
    }
    labels
}

fn sample_tokens(
    cfg: &GeneratorConfig,
    pools: &TokenPools,
    labels: &BTreeSet<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let labels: Vec<usize> = labels.iter().copied().collect();
    let target = rng.gen_range(2..=10usize);
    let mut tokens = Vec::with_capacity(target + 1);
    while tokens.len() < target {
        let leaf = labels[rng.gen_range(0..labels.len())];
        let u: f64 = rng.gen();
        if u < P_SIG && tokens.len() + 2 <= 10 {
            let (first, second) = pools.signatures[leaf][rng.gen_range(0..2)];
            tokens.push(first);
            tokens.push(second);
        } else if u < P_SIG + P_LEAF_SINGLE {
            let singles = &pools.per_leaf[leaf][pools.single_from[leaf]..];
            tokens.push(singles[rng.gen_range(0..singles.len())]);
        } else if u < P_SIG + P_LEAF_SINGLE + P_L1 {
            let pool = &pools.per_l1[leaf % cfg.num_l1];
            tokens.push(pool[rng.gen_range(0..pool.len())]);
        } else {
            tokens.push(pools.common[rng.gen_range(0..pools.common.len())]);
        }
    }
    tokens
}

/// Build the synthetic corpus and its taxonomy. Deterministic given the
/// config (including its seed).
pub fn generate_synthetic_corpus(
    cfg: &GeneratorConfig,
) -> Result<(Vec<QueryRecord>, Taxonomy), CorpusError> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);

    let taxonomy = Taxonomy {
        l1_nodes: (0..cfg.num_l1)
            .map(|i| L1Node {
                id: i,
                name: format!("dept{i:02}-{}", pseudo_word(1000 + i)),
            })
            .collect(),
        leaves: (0..cfg.num_leaves)
            .map(|i| LeafNode {
                id: i,
                name: format!("cat{i:03}-{}", pseudo_word(5000 + i)),
                parent: i % cfg.num_l1,
            })
            .collect(),
    };

    let mut leaves_by_l1 = vec![Vec::new(); cfg.num_l1];
    for leaf in 0..cfg.num_leaves {
        leaves_by_l1[leaf % cfg.num_l1].push(leaf);
    }

    let pools = allocate_pools(cfg);
    let zipf_cum = zipf_cumulative(cfg.num_leaves, cfg.zipf_exponent);

    let mut records = Vec::with_capacity(cfg.num_queries);
    for _ in 0..cfg.num_queries {
        let labels = sample_labels(cfg, &leaves_by_l1, &zipf_cum, &mut rng);
        let tokens = sample_tokens(cfg, &pools, &labels, &mut rng);
        let raw_text = tokens
            .iter()
            .map(|&t| pseudo_word(t))
            .collect::<Vec<_>>()
            .join(" ");
        let frequency = sample_frequency(&mut rng);
        records.push(QueryRecord::new(raw_text, labels, frequency)?);
    }
    Ok((records, taxonomy))
}
