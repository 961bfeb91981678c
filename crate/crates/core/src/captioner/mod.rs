//! Unpaired caption generation: conv encoder, LSTM decoder, LSTM sentence
//! discriminator, and the concept-reward / unrecognised-object objective.

mod model;
mod objective;
mod train;

pub use model::{
    decode_invocations, CaptionerConfig, Captioner, DecodeMode, Discriminator, DiscriminatorConfig, ImageFeature,
    TokenSequence, CAPTIONER_KIND, DISCRIMINATOR_KIND,
};
pub use objective::{
    concept_reward, returns_to_go, sequence_terms, token_loss, uno_loss, ImageConcepts, RewardWeights,
};
pub use train::{
    caption_images, discriminator_step, frame_sentence, pretrain_decoder, probe_reward, train_unpaired, Baseline,
    UnpairedData, UnpairedOutcome, UnpairedTraining,
};
