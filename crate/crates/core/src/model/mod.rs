//! Decoder-only transformer, harmonizers, LoRA, training and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod layer;
pub mod optim;
pub mod serialize;
pub mod stack;
pub mod tokenizer;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, BOS, BYTE_VOCAB, EOS, PAD};
pub use layer::{Harmonizer, LoraFactors, Slot, SlotKind, SlotRef, TransformerLayer};
pub use optim::AdamW;
pub use stack::{
    forward_on_tape, generate_greedy, logits, Embeddings, ModelStack, Network, NetworkMut, ParamRole, TrainFilter,
};
pub use train::{batch_nll, nll_loss, sequence_nll, shift, train_step};
