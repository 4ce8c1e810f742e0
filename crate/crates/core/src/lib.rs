//! Pseudo-label refinement for self-supervised speaker verification.
//!
//! The crate covers the whole loop at desk scale: a synthetic speaker world,
//! a small manually differentiated encoder, self-distillation pre-training,
//! k-means + agglomerative pseudo-labelling, margin-softmax fine-tuning with
//! a loss gate and label correction, and the verification and clustering
//! metrics used to grade each stage.

pub mod clustering;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod features;
pub mod io;
pub mod lossgate;
pub mod losses;
pub mod pipeline;
pub mod rng;
pub mod simulator;
pub mod trainer;

pub use embedding::{
    cosine_similarity, l2_normalize, EmbeddingMatrix, Matrix, PseudoLabelMap, Trial, TrialList,
    UtteranceId,
};
pub use error::{Error, Result};
pub use features::FeatureSet;
