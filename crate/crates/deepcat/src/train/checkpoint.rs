//! JSON checkpoints. f64 values survive the round trip bit-exactly, so a
//! saved and reloaded model scores queries identically.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::corpus::{SplitConfig, Vocabulary};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::rng::rng_from_seed;
use crate::numerics::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub train_cfg: TrainConfig,
    pub model_cfg: ModelConfig,
    /// how the corpus was split; evaluation re-derives the same splits
    pub split: SplitConfig,
    pub vocab_hash: String,
    pub taxonomy_hash: String,
    pub best_epoch: usize,
    pub valid_micro_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// On-disk checkpoint: metadata, the vocabulary (so prediction needs no
/// other artifact), and every parameter tensor by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub vocab: Vocabulary,
    tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, meta: CheckpointMeta, vocab: &Vocabulary) -> Self {
        let tensors = params
            .named()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            meta,
            vocab: vocab.clone(),
            tensors,
        }
    }

    /// Reassemble the parameter struct from the named tensor list.
    pub fn params(&self) -> Result<ModelParams, TrainError> {
        // start from a throwaway initialization to get the right topology,
        // then overwrite every tensor by name
        let mut rng = rng_from_seed(0);
        let mut params = ModelParams::init(&self.meta.model_cfg, &mut rng)?;
        let mut remaining = self.tensors.len();
        for (name, slot) in params.named_mut() {
            let stored = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| TrainError::BadCheckpoint(format!("missing tensor {name}")))?;
            if stored.shape != slot.shape() {
                return Err(TrainError::BadCheckpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    stored.shape,
                    slot.shape()
                )));
            }
            *slot = std::sync::Arc::new(Tensor::new(stored.shape.clone(), stored.data.clone())?);
            remaining -= 1;
        }
        if remaining != 0 {
            return Err(TrainError::BadCheckpoint(format!(
                "{remaining} unknown tensors in checkpoint"
            )));
        }
        Ok(params)
    }

    /// Guard against evaluating with the wrong vocabulary or taxonomy.
    pub fn verify_hashes(&self, vocab_hash: &str, taxonomy_hash: &str) -> Result<(), TrainError> {
        if self.meta.vocab_hash != vocab_hash {
            return Err(TrainError::HashMismatch { field: "vocabulary" });
        }
        if self.meta.taxonomy_hash != taxonomy_hash {
            return Err(TrainError::HashMismatch { field: "taxonomy" });
        }
        Ok(())
    }
}

/// Serialize to `path` atomically (temp file + rename), so a crash never
/// leaves a truncated checkpoint behind.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), TrainError> {
    let json = serde_json::to_string(checkpoint)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, json)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let json = fs::read_to_string(path)?;
    let mut ckpt: Checkpoint = serde_json::from_str(&json)?;
    if ckpt.meta.version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            got: ckpt.meta.version,
        });
    }
    ckpt.vocab.rebuild_index();
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, QueryRecord};
    use crate::loss::LossConfig;
    use crate::model::Ablation;
    use std::collections::BTreeSet;

    fn fixture() -> (ModelParams, CheckpointMeta, Vocabulary) {
        let records: Vec<QueryRecord> = (0..6)
            .map(|i| {
                QueryRecord::new(
                    format!("tok{i} shared"),
                    BTreeSet::from([i % 3]),
                    1 + i as u64,
                )
                .unwrap()
            })
            .collect();
        let vocab = build_vocab(&records, 1).unwrap();
        let mut model_cfg = ModelConfig::tiny();
        model_cfg.vocab_size = vocab.len();
        model_cfg.num_categories = 3;
        let mut rng = rng_from_seed(42);
        let params = ModelParams::init(&model_cfg, &mut rng).unwrap();
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            train_cfg: TrainConfig {
                learning_rate: 0.001,
                batch_size: 64,
                dropout: 0.5,
                epochs: 20,
                seed: 42,
                loss_cfg: LossConfig::default(),
                ablation: Ablation::Joint,
            },
            model_cfg,
            split: SplitConfig::default(),
            vocab_hash: vocab.hash(),
            taxonomy_hash: "tax-hash".into(),
            best_epoch: 1,
            valid_micro_f1: 0.5,
        };
        (params, meta, vocab)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (params, meta, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ckpt = Checkpoint::new(&params, meta, &vocab);
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let reparams = loaded.params().unwrap();
        for ((na, ta), (nb, tb)) in params.named().iter().zip(reparams.named().iter()) {
            assert_eq!(na, nb);
            assert!(ta.bit_eq(tb), "{na} not bit-identical after round trip");
        }
        assert_eq!(loaded.meta, ckpt.meta);
        assert_eq!(loaded.vocab.id_of("shared"), vocab.id_of("shared"));
    }

    #[test]
    fn hash_mismatch_is_detected() {
        let (params, meta, vocab) = fixture();
        let ckpt = Checkpoint::new(&params, meta, &vocab);
        assert!(ckpt.verify_hashes(&vocab.hash(), "tax-hash").is_ok());
        assert!(matches!(
            ckpt.verify_hashes("other", "tax-hash"),
            Err(TrainError::HashMismatch { field: "vocabulary" })
        ));
        assert!(matches!(
            ckpt.verify_hashes(&vocab.hash(), "other"),
            Err(TrainError::HashMismatch { field: "taxonomy" })
        ));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (params, mut meta, vocab) = fixture();
        meta.version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&path, &Checkpoint::new(&params, meta, &vocab)).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::VersionMismatch { expected: 1, got: 99 })
        ));
    }

    #[test]
    fn truncated_file_fails_cleanly() {
        let (params, meta, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&path, &Checkpoint::new(&params, meta, &vocab)).unwrap();
        let full = fs::read_to_string(&path).unwrap();
        fs::write(&path, &full[..full.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TrainError::Json(_))));
    }
}
