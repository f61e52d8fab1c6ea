//! Two-level product taxonomy: L1 groups over leaf categories.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CorpusError;

pub const TAXONOMY_FORMAT: &str = "deepcat-taxonomy";
pub const TAXONOMY_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct L1Node {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeafNode {
    pub id: usize,
    pub name: String,
    /// id of the L1 parent group
    pub parent: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Taxonomy {
    pub l1_nodes: Vec<L1Node>,
    pub leaves: Vec<LeafNode>,
}

/// On-disk wrapper carrying format and version markers.
#[derive(Debug, Serialize, Deserialize)]
struct TaxonomyFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    taxonomy: Taxonomy,
}

impl Taxonomy {
    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn num_l1(&self) -> usize {
        self.l1_nodes.len()
    }

    pub fn parent_of(&self, leaf: usize) -> Option<usize> {
        self.leaves.get(leaf).map(|l| l.parent)
    }

    pub fn leaf_name(&self, leaf: usize) -> Option<&str> {
        self.leaves.get(leaf).map(|l| l.name.as_str())
    }

    /// Check id density and parent links.
    pub fn validate(&self) -> Result<(), CorpusError> {
        for (i, n) in self.l1_nodes.iter().enumerate() {
            if n.id != i {
                return Err(CorpusError::InvalidTaxonomy(format!(
                    "L1 ids must be dense, found {} at position {i}",
                    n.id
                )));
            }
        }
        for (i, l) in self.leaves.iter().enumerate() {
            if l.id != i {
                return Err(CorpusError::InvalidTaxonomy(format!(
                    "leaf ids must be dense, found {} at position {i}",
                    l.id
                )));
            }
            if l.parent >= self.l1_nodes.len() {
                return Err(CorpusError::InvalidTaxonomy(format!(
                    "leaf {} points at unknown L1 parent {}",
                    l.id, l.parent
                )));
            }
        }
        Ok(())
    }

    /// Stable content hash, used to bind checkpoints to a taxonomy.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.l1_nodes {
            h.update(n.id.to_le_bytes());
            h.update(n.name.as_bytes());
            h.update([0]);
        }
        for l in &self.leaves {
            h.update(l.id.to_le_bytes());
            h.update(l.parent.to_le_bytes());
            h.update(l.name.as_bytes());
            h.update([0]);
        }
        hex_digest(h)
    }

    pub fn to_json(&self) -> Result<String, CorpusError> {
        let file = TaxonomyFile {
            format: TAXONOMY_FORMAT.to_string(),
            version: TAXONOMY_VERSION,
            taxonomy: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self, CorpusError> {
        let file: TaxonomyFile = serde_json::from_str(s)?;
        if file.format != TAXONOMY_FORMAT {
            return Err(CorpusError::BadHeader(format!(
                "expected format {TAXONOMY_FORMAT}, got {}",
                file.format
            )));
        }
        if file.version != TAXONOMY_VERSION {
            return Err(CorpusError::BadHeader(format!(
                "unsupported taxonomy version {}",
                file.version
            )));
        }
        file.taxonomy.validate()?;
        Ok(file.taxonomy)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
