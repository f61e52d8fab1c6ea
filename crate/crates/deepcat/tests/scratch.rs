//! Temporary experiment driver; deleted before delivery.

use deepcat::cli::pipeline::{train_pipeline, ModelDims};
use deepcat::corpus::{generate_synthetic_corpus, split_corpus, GeneratorConfig, SplitConfig};
use deepcat::loss::LossConfig;
use deepcat::model::Ablation;
use deepcat::train::TrainConfig;

#[test]
#[ignore]
fn grid_trajectories() {
    for seed in 0..5u64 {
        let gen_cfg = GeneratorConfig {
            seed,
            ..GeneratorConfig::default()
        };
        let (records, taxonomy) = generate_synthetic_corpus(&gen_cfg).unwrap();
        let split_cfg = SplitConfig::default();
        let splits = split_corpus(&records, seed, &split_cfg).unwrap();
        for ablation in [Ablation::WordOnly, Ablation::Joint, Ablation::JointPlusCm] {
            let train_cfg = TrainConfig {
                learning_rate: 0.005,
                batch_size: 32,
                dropout: 0.1,
                epochs: 16,
                seed,
                loss_cfg: LossConfig::default(),
                ablation,
            };
            let dims = ModelDims {
                emb_dim: 40,
                d_model: 40,
            };
            let out = train_pipeline(&splits, &taxonomy, &train_cfg, split_cfg.min_freq, dims)
                .unwrap();
            for log in &out.fit.log {
                println!(
                    "{} {} {} {:.6} {:.6} {:.6}",
                    seed,
                    ablation.label(),
                    log.epoch,
                    log.train_loss,
                    log.valid_micro_f1,
                    log.valid_macro_f1
                );
            }
        }
    }
}
