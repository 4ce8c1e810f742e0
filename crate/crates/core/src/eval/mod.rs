//! Verification scoring and the metric suite.

mod partition;
mod scoring;
mod verification;

pub use partition::{ari, nmi, Nmi, NmiNormalizer};
pub use scoring::{extract_frame_embeddings, score_trials, window, window_offsets, FrameEmbeddings};
pub use verification::{eer, min_dcf, DcfParams, DcfResult, EerResult, ScoredTrials};
