//! Conversion between networks and checkpoint containers.

use crate::error::{CheckpointError, Result};
use crate::numerics::Tensor2D;

use super::checkpoint::Checkpoint;
use super::config::ModelConfig;
use super::layer::{Harmonizer, LoraFactors, Slot, SlotRef, TransformerLayer, LAYER_TENSORS};
use super::stack::{slot_param_name, Embeddings, ModelStack, Network, EMBEDDING_TENSORS};

pub const MODEL_KIND: &str = "model";

pub fn write_config(ck: &mut Checkpoint, cfg: &ModelConfig) {
    ck.set("config.n_layers", cfg.n_layers);
    ck.set("config.d_model", cfg.d_model);
    ck.set("config.n_heads", cfg.n_heads);
    ck.set("config.d_ffn", cfg.d_ffn);
    ck.set("config.context_len", cfg.context_len);
    ck.set("config.vocab_size", cfg.vocab_size);
}

pub fn read_config(ck: &Checkpoint) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        n_layers: ck.parse("config.n_layers")?,
        d_model: ck.parse("config.d_model")?,
        n_heads: ck.parse("config.n_heads")?,
        d_ffn: ck.parse("config.d_ffn")?,
        context_len: ck.parse("config.context_len")?,
        vocab_size: ck.parse("config.vocab_size")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn slot_key(i: usize) -> String {
    format!("slot.{i}")
}

/// Serialise any network: config, per-slot kind and every named tensor.
pub fn network_to_checkpoint<N: Network + ?Sized>(net: &N, kind: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(kind);
    write_config(&mut ck, net.config());
    for i in 0..net.n_slots() {
        let k = match net.slot(i) {
            SlotRef::Layer(_) => "layer",
            SlotRef::Harmonizer(_) => "harmonizer",
        };
        ck.set(&slot_key(i), k);
    }
    for (name, t) in net.named_tensors() {
        ck.push(name, t.clone());
    }
    ck
}

fn take(ck: &Checkpoint, name: &str, shape: (usize, usize)) -> Result<Tensor2D> {
    let t = ck.tensor(name)?;
    if t.shape() != shape {
        return Err(CheckpointError::Metadata(format!(
            "tensor `{name}` has shape {:?}, expected {shape:?}",
            t.shape()
        ))
        .into());
    }
    Ok(t.clone())
}

fn read_lora(ck: &Checkpoint, i: usize, which: &str, d: usize) -> Result<Option<LoraFactors>> {
    let a_name = slot_param_name(i, &format!("{which}.a"));
    if !ck.has_tensor(&a_name) {
        return Ok(None);
    }
    let r = ck.tensor(&a_name)?.cols();
    Ok(Some(LoraFactors {
        a: take(ck, &a_name, (d, r))?,
        b: take(ck, &slot_param_name(i, &format!("{which}.b")), (r, d))?,
    }))
}

/// Rebuild a model stack, checking every tensor shape against the config.
pub fn stack_from_checkpoint(ck: &Checkpoint) -> Result<ModelStack> {
    let cfg = read_config(ck)?;
    let (d, f, v, c) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size, cfg.context_len);
    let embed = Embeddings {
        tok: take(ck, EMBEDDING_TENSORS[0], (v, d))?,
        pos: take(ck, EMBEDDING_TENSORS[1], (c, d))?,
        lnf_gain: take(ck, EMBEDDING_TENSORS[2], (1, d))?,
        lnf_bias: take(ck, EMBEDDING_TENSORS[3], (1, d))?,
    };
    let mut slots = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let slot = match ck.get(&slot_key(i))? {
            "layer" => {
                let shapes = [
                    (d, d),
                    (d, d),
                    (d, d),
                    (d, d),
                    (d, f),
                    (f, d),
                    (1, d),
                    (1, d),
                    (1, d),
                    (1, d),
                ];
                let mut ts = Vec::with_capacity(10);
                for (n, s) in LAYER_TENSORS.iter().zip(shapes) {
                    ts.push(take(ck, &slot_param_name(i, n), s)?);
                }
                let mut it = ts.into_iter();
                let mut next = || it.next().expect("ten tensors");
                Slot::Layer(TransformerLayer {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                    w_o: next(),
                    w_in: next(),
                    w_out: next(),
                    ln1_gain: next(),
                    ln1_bias: next(),
                    ln2_gain: next(),
                    ln2_bias: next(),
                    lora_q: read_lora(ck, i, "lora_q", d)?,
                    lora_v: read_lora(ck, i, "lora_v", d)?,
                })
            }
            "harmonizer" => {
                let down = slot_param_name(i, "harmonizer.w_down");
                let r = ck.tensor(&down)?.cols();
                Slot::Harmonizer(Harmonizer {
                    w_down: take(ck, &down, (d, r))?,
                    w_up: take(ck, &slot_param_name(i, "harmonizer.w_up"), (r, d))?,
                })
            }
            other => {
                return Err(CheckpointError::Metadata(format!("slot {i} has unknown kind `{other}`")).into());
            }
        };
        slots.push(slot);
    }
    Ok(ModelStack {
        config: cfg,
        embed,
        slots,
    })
}

impl ModelStack {
    pub fn to_checkpoint(&self) -> Checkpoint {
        network_to_checkpoint(self, MODEL_KIND)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(MODEL_KIND)?;
        stack_from_checkpoint(ck)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// CRC-32 of the serialised model; identifies the source of emulators.
    pub fn fingerprint(&self) -> Result<u32> {
        self.to_checkpoint().fingerprint()
    }
}
