//! Synthetic speaker worlds: speaker, channel and noise factors, plus view
//! perturbation and label corruption.

mod corrupt;
mod views;
mod world;

pub use corrupt::{corrupt_labels, CorruptedLabels};
pub use views::{make_views, Augmentation, ViewConfig, ViewSet};
pub use world::{
    generate_dataset, generate_eval, generate_world, EvalSet, GeneratedDataset, GroundTruth, SpeakerWorld,
    WorldConfig,
};
