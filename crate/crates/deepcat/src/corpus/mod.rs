//! Taxonomy, synthetic query corpus, vocabulary, traffic buckets, and the
//! category co-occurrence matrix.

mod cooc;
mod generate;
mod taxonomy;
mod vocab;

pub use cooc::{build_category_cooccurrence, cosine_normalize, CoocMatrix};
pub use generate::{generate_synthetic_corpus, GeneratorConfig};
pub use taxonomy::{L1Node, LeafNode, Taxonomy};
pub use vocab::{build_vocab, encode_query, tokenize, Vocabulary, PAD_ID, QUERY_LEN, UNK_ID};

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::rng::{derive_seed, rng_from_seed, stream};

pub const CORPUS_FORMAT: &str = "deepcat-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("invalid corpus header: {0}")]
    BadHeader(String),
    #[error("vocabulary of {vocab_size} tokens is too small for the requested category distinctness ({needed} needed)")]
    VocabTooSmall { vocab_size: usize, needed: usize },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("query frequency must be >= 1, got {0}")]
    InvalidFrequency(u64),
    #[error("bucket {0} holds {1} queries, need {2} for the stratified sample")]
    InsufficientBucket(Bucket, usize, usize),
    #[error("query {0:?} is empty after tokenization")]
    EmptyQuery(String),
    #[error("query has an empty category set")]
    EmptyCategories,
    #[error("co-occurrence counts are not symmetric at ({0}, {1})")]
    AsymmetricCounts(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corpus record is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Traffic bucket by observed query frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Tail,
    Torso,
    Head,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Tail, Bucket::Torso, Bucket::Head];

    /// frequency 1 -> tail; 2..=100 -> torso; >100 -> head.
    pub fn from_frequency(freq: u64) -> Result<Bucket, CorpusError> {
        match freq {
            0 => Err(CorpusError::InvalidFrequency(freq)),
            1 => Ok(Bucket::Tail),
            2..=100 => Ok(Bucket::Torso),
            _ => Ok(Bucket::Head),
        }
    }
}

impl std::fmt::Display for Bucket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Bucket::Tail => "tail",
            Bucket::Torso => "torso",
            Bucket::Head => "head",
        };
        f.write_str(s)
    }
}

/// A query with its supervision labels and traffic statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub raw_text: String,
    /// leaf category ids; never empty
    pub categories: BTreeSet<usize>,
    pub frequency: u64,
    #[serde(skip)]
    pub bucket: Option<Bucket>,
}

impl QueryRecord {
    pub fn new(raw_text: String, categories: BTreeSet<usize>, frequency: u64) -> Result<Self, CorpusError> {
        if categories.is_empty() {
            return Err(CorpusError::EmptyCategories);
        }
        let bucket = Bucket::from_frequency(frequency)?;
        Ok(QueryRecord {
            raw_text,
            categories,
            frequency,
            bucket: Some(bucket),
        })
    }

    pub fn bucket(&self) -> Bucket {
        // invariant: set at construction / load
        self.bucket.expect("bucket assigned")
    }
}

/// Assign a traffic bucket to every query from its frequency.
pub fn assign_buckets(records: &mut [QueryRecord]) -> Result<(), CorpusError> {
    for r in records.iter_mut() {
        r.bucket = Some(Bucket::from_frequency(r.frequency)?);
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    /// resolved generator config echo, when generated synthetically
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

/// Write a corpus as JSON lines behind a versioned header line.
pub fn write_corpus<W: Write>(
    mut w: W,
    records: &[QueryRecord],
    config_echo: Option<serde_json::Value>,
) -> Result<(), CorpusError> {
    let header = CorpusHeader {
        format: CORPUS_FORMAT.to_string(),
        version: CORPUS_VERSION,
        config: config_echo,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Read a corpus written by [`write_corpus`], re-deriving buckets.
pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<QueryRecord>, CorpusError> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CorpusError::BadHeader("empty file".into()))??;
    let header: CorpusHeader = serde_json::from_str(&header_line)?;
    if header.format != CORPUS_FORMAT {
        return Err(CorpusError::BadHeader(format!(
            "expected format {CORPUS_FORMAT}, got {}",
            header.format
        )));
    }
    if header.version != CORPUS_VERSION {
        return Err(CorpusError::BadHeader(format!(
            "unsupported corpus version {}",
            header.version
        )));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: QueryRecord = serde_json::from_str(&line)?;
        if rec.categories.is_empty() {
            return Err(CorpusError::EmptyCategories);
        }
        rec.bucket = Some(Bucket::from_frequency(rec.frequency)?);
        records.push(rec);
    }
    Ok(records)
}

/// Draw `per_bucket` queries uniformly without replacement from each traffic
/// bucket. Returns `(test, train)`; sampled queries are removed from the
/// training portion. Deterministic given `seed`.
pub fn stratified_test_sample(
    records: &[QueryRecord],
    per_bucket: usize,
    seed: u64,
) -> Result<(Vec<QueryRecord>, Vec<QueryRecord>), CorpusError> {
    let mut rng = rng_from_seed(seed);
    let mut chosen = vec![false; records.len()];
    let mut test = Vec::with_capacity(per_bucket * Bucket::ALL.len());
    for bucket in Bucket::ALL {
        let mut idx: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].bucket() == bucket)
            .collect();
        if idx.len() < per_bucket {
            return Err(CorpusError::InsufficientBucket(bucket, idx.len(), per_bucket));
        }
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(per_bucket) {
            chosen[i] = true;
        }
    }
    let mut train = Vec::with_capacity(records.len() - test.capacity());
    for (i, r) in records.iter().enumerate() {
        if chosen[i] {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((test, train))
}

/// How a corpus is carved into train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// test queries drawn per traffic bucket
    pub test_per_bucket: usize,
    /// fraction of the remaining pool held out for validation
    pub valid_frac: f64,
    /// vocabulary frequency floor, applied to the train split
    pub min_freq: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_per_bucket: 200,
            valid_frac: 0.25,
            min_freq: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<QueryRecord>,
    pub valid: Vec<QueryRecord>,
    pub test: Vec<QueryRecord>,
}

/// Stratified test sample first, then a seeded validation carve-out of the
/// remaining pool. Deterministic given `seed`.
pub fn split_corpus(
    records: &[QueryRecord],
    seed: u64,
    cfg: &SplitConfig,
) -> Result<Splits, CorpusError> {
    if !(0.0..1.0).contains(&cfg.valid_frac) {
        return Err(CorpusError::InvalidConfig(
            "valid_frac must lie in [0, 1)".into(),
        ));
    }
    let (test, mut pool) =
        stratified_test_sample(records, cfg.test_per_bucket, derive_seed(seed, stream::SPLIT))?;
    let mut rng = rng_from_seed(derive_seed(seed, stream::VALID));
    pool.shuffle(&mut rng);
    let n_valid = ((pool.len() as f64 * cfg.valid_frac) as usize).max(1);
    if n_valid >= pool.len() {
        return Err(CorpusError::InvalidConfig(format!(
            "validation carve-out of {n_valid} leaves no training data"
        )));
    }
    let valid = pool.split_off(pool.len() - n_valid);
    Ok(Splits {
        train: pool,
        valid,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(text: &str, cats: &[usize], freq: u64) -> QueryRecord {
        QueryRecord::new(text.into(), cats.iter().copied().collect(), freq).unwrap()
    }

    #[test]
    fn split_corpus_is_disjoint_and_deterministic() {
        let records: Vec<QueryRecord> = (0..300)
            .map(|i| {
                let freq = match i % 3 {
                    0 => 1,
                    1 => 50,
                    _ => 500,
                };
                rec(&format!("query {i}"), &[i % 7], freq)
            })
            .collect();
        let cfg = SplitConfig {
            test_per_bucket: 20,
            valid_frac: 0.25,
            min_freq: 1,
        };
        let a = split_corpus(&records, 9, &cfg).unwrap();
        let b = split_corpus(&records, 9, &cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.valid, b.valid);
        assert_eq!(a.test, b.test);
        assert_eq!(a.test.len(), 60);
        assert_eq!(a.train.len() + a.valid.len(), 240);
        assert_eq!(a.valid.len(), 60); // 25% of the 240-query pool
        let texts = |rs: &[QueryRecord]| {
            rs.iter().map(|r| r.raw_text.clone()).collect::<BTreeSet<_>>()
        };
        let (tr, va, te) = (texts(&a.train), texts(&a.valid), texts(&a.test));
        assert!(tr.is_disjoint(&va));
        assert!(tr.is_disjoint(&te));
        assert!(va.is_disjoint(&te));

        let c = split_corpus(&records, 10, &cfg).unwrap();
        assert_ne!(texts(&c.test), te);
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(Bucket::from_frequency(1).unwrap(), Bucket::Tail);
        assert_eq!(Bucket::from_frequency(2).unwrap(), Bucket::Torso);
        assert_eq!(Bucket::from_frequency(100).unwrap(), Bucket::Torso);
        assert_eq!(Bucket::from_frequency(101).unwrap(), Bucket::Head);
        assert!(Bucket::from_frequency(0).is_err());
    }

    #[test]
    fn buckets_partition_the_corpus() {
        let records: Vec<QueryRecord> = (1..200u64).map(|f| rec("q", &[0], f)).collect();
        let mut counts = std::collections::HashMap::new();
        for r in &records {
            *counts.entry(r.bucket()).or_insert(0usize) += 1;
        }
        let total: usize = counts.values().sum();
        assert_eq!(total, records.len());
    }

    #[test]
    fn corpus_round_trip() {
        let records = vec![rec("motion activated kitchen faucet", &[1, 4], 3), rec("drill", &[0], 1)];
        let mut buf = Vec::new();
        write_corpus(&mut buf, &records, None).unwrap();
        let back = read_corpus(&buf[..]).unwrap();
        assert_eq!(back, records);
        assert_eq!(back[0].bucket(), Bucket::Torso);
    }

    #[test]
    fn corpus_rejects_wrong_header() {
        let back = read_corpus(&b"{\"format\":\"other\",\"version\":1}\n"[..]);
        assert!(matches!(back, Err(CorpusError::BadHeader(_))));
    }

    #[test]
    fn stratified_sample_counts_and_determinism() {
        let mut records = Vec::new();
        for i in 0..30u64 {
            records.push(rec(&format!("t{i}"), &[0], 1));
            records.push(rec(&format!("m{i}"), &[0], 50));
            records.push(rec(&format!("h{i}"), &[0], 500));
        }
        let (test, train) = stratified_test_sample(&records, 10, 9).unwrap();
        assert_eq!(test.len(), 30);
        assert_eq!(train.len(), 60);
        for bucket in Bucket::ALL {
            assert_eq!(test.iter().filter(|r| r.bucket() == bucket).count(), 10);
        }
        let (test2, _) = stratified_test_sample(&records, 10, 9).unwrap();
        assert_eq!(test, test2);
        // disjoint: nothing sampled remains in train
        for t in &test {
            assert!(!train.contains(t));
        }
    }

    #[test]
    fn stratified_sample_names_thin_bucket() {
        let records = vec![rec("only tail", &[0], 1)];
        let err = stratified_test_sample(&records, 1, 0).unwrap_err();
        match err {
            CorpusError::InsufficientBucket(b, have, want) => {
                assert_eq!(b, Bucket::Torso);
                assert_eq!((have, want), (0, 1));
            }
            other => panic!("unexpected error {other}"),
        }
    }
}
