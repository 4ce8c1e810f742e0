//! Small layered encoder with an attentive pooling head, trained by manual
//! backpropagation.

mod checkpoint;
mod contrastive;
mod distill;
mod finetune;
mod network;
mod optim;

pub use checkpoint::{
    checkpoint_digest, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC,
};
pub use contrastive::{contrastive_epoch, ContrastiveState, Positives};
pub use distill::{distill_epoch, DistillConfig, DistillState};
pub use finetune::{embed_all, train_epoch, EpochReport, FineTuneState, LossRecord};
pub use network::{
    AttentivePoolingHead, DenseLayer, ForwardCache, LayeredEncoder, NetGrad, ParamBlocks, SpeakerNet,
};
pub use optim::{
    apply_update, backward_step, layer_rates, layer_weight_distance, lmft_switch, AnchorSnapshot, LayerRates,
    Optimizer, OptimizerKind, TrainConfig,
};
