//! Vocabulary with reserved PAD/UNK ids and fixed-length query encoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::taxonomy::hex_digest;
use super::{CorpusError, QueryRecord};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
/// Queries are truncated / padded to this many tokens.
pub const QUERY_LEN: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    /// index = token id; slots 0 and 1 hold the PAD and UNK markers
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, usize>,
    pub min_freq: u64,
}

impl Vocabulary {
    fn from_tokens(id_to_token: Vec<String>, min_freq: u64) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
            min_freq,
        }
    }

    /// Rebuild the reverse map after deserialization.
    pub fn rebuild_index(&mut self) {
        self.token_to_id = self
            .id_to_token
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() <= 2
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    /// Stable content hash, used to bind checkpoints to a vocabulary.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.min_freq.to_le_bytes());
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update([0]);
        }
        hex_digest(h)
    }
}

/// Lowercase and split on whitespace and punctuation.
pub fn tokenize(raw: &str) -> Vec<String> {
    raw.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Count token frequencies over the corpus and keep every token seen at
/// least `min_freq` times. Ordering is by descending frequency, then token,
/// so the result is deterministic.
pub fn build_vocab(records: &[QueryRecord], min_freq: u64) -> Result<Vocabulary, CorpusError> {
    if records.is_empty() {
        return Err(CorpusError::InvalidConfig("empty corpus".into()));
    }
    let mut freq: HashMap<String, u64> = HashMap::new();
    for r in records {
        for t in tokenize(&r.raw_text) {
            *freq.entry(t).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, u64)> = freq.into_iter().filter(|&(_, f)| f >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
    id_to_token.extend(kept.into_iter().map(|(t, _)| t));
    Ok(Vocabulary::from_tokens(id_to_token, min_freq))
}

/// Encode a raw query to exactly [`QUERY_LEN`] token ids: truncate past ten
/// tokens, right-pad with PAD. A query that tokenizes to nothing is an
/// error.
pub fn encode_query(raw_text: &str, vocab: &Vocabulary) -> Result<Vec<usize>, CorpusError> {
    let tokens = tokenize(raw_text);
    if tokens.is_empty() {
        return Err(CorpusError::EmptyQuery(raw_text.to_string()));
    }
    let mut ids: Vec<usize> = tokens.iter().take(QUERY_LEN).map(|t| vocab.id_of(t)).collect();
    ids.resize(QUERY_LEN, PAD_ID);
    Ok(ids)
}
