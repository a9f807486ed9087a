//! Composite objective, pair-encoder pretraining and the adapter training loop.

mod config;
mod losses;
mod pair;
mod trainer;

pub use config::{TrainConfig, TrainMode};
pub use losses::{
    adv_losses, clip_alignment_from_embedding, clip_alignment_loss, hinge_d, hinge_g, l2_loss,
    perceptual_from_features, rec_loss, total_loss, Discriminator, LossBreakdown, LossWeights,
};
pub use pair::{
    contrastive_loss, pretrain_pair_encoder, prompt_similarity, retrieval_accuracy, PairEncoder, PairEncoderMeta,
    PairPretrainConfig, Tokenizer, RETRIEVAL_GATE, UNK,
};
pub use trainer::{
    check_uniplex, checkpoint_discriminator, checkpoint_train_config, generator_pass, train_loop, train_step,
    BatchTensors, CheckpointMeta, GeneratorPass, Optimizers, Sampler, TrainItem, TrainOutcome, FINAL, LAST_GOOD,
    LOSS_LOG,
};
