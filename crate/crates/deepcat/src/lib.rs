//! DeepCAT: joint word-category representations for mapping e-commerce
//! search queries to product-taxonomy categories.
//!
//! The crate bundles a deterministic differentiable tensor core, a
//! synthetic imbalanced corpus generator, the DeepCAT network and its
//! losses, an Adam training loop with ablation gating, the full ranked /
//! set-based evaluation protocol, and a TF-IDF one-vs-rest baseline.

pub mod baseline;
pub mod cli;
pub mod corpus;
pub mod eval;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod train;
