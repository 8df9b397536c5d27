//! The model stack, network composition and the forward pass.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::{GradTape, RngStream, Tensor2D, Var};

use super::config::ModelConfig;
use super::layer::{gaussian, Harmonizer, Slot, SlotKind, SlotRef, TransformerLayer, INIT_STD};

/// Token and position tables plus the final norm. The output head reuses
/// the token table.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub tok: Tensor2D,
    pub pos: Tensor2D,
    pub lnf_gain: Tensor2D,
    pub lnf_bias: Tensor2D,
}

pub const EMBEDDING_TENSORS: [&str; 4] = ["tok_emb", "pos_emb", "ln_f.gain", "ln_f.bias"];

impl Embeddings {
    pub fn init(config: &ModelConfig, rng: &mut RngStream) -> Self {
        Self {
            tok: gaussian(config.vocab_size, config.d_model, INIT_STD, rng),
            pos: gaussian(config.context_len, config.d_model, INIT_STD, rng),
            lnf_gain: Tensor2D::filled(1, config.d_model, 1.0),
            lnf_bias: Tensor2D::zeros(1, config.d_model),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor2D> {
        match name {
            "tok_emb" => Some(&self.tok),
            "pos_emb" => Some(&self.pos),
            "ln_f.gain" => Some(&self.lnf_gain),
            "ln_f.bias" => Some(&self.lnf_bias),
            _ => None,
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        match name {
            "tok_emb" => Some(&mut self.tok),
            "pos_emb" => Some(&mut self.pos),
            "ln_f.gain" => Some(&mut self.lnf_gain),
            "ln_f.bias" => Some(&mut self.lnf_bias),
            _ => None,
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor2D); 4] {
        [
            ("tok_emb", &self.tok),
            ("pos_emb", &self.pos),
            ("ln_f.gain", &self.lnf_gain),
            ("ln_f.bias", &self.lnf_bias),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// What a parameter belongs to, for trainability filtering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    Layer,
    Harmonizer,
    Lora,
}

/// Which parameters a training step may update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrainFilter {
    All,
    Harmonizers,
    /// Base tensors of transformer blocks at these slot indices.
    Layers(BTreeSet<usize>),
    /// LoRA factors wherever attached.
    Lora,
    None,
}

impl TrainFilter {
    pub fn selects(&self, slot: Option<usize>, role: ParamRole) -> bool {
        match self {
            TrainFilter::All => true,
            TrainFilter::Harmonizers => role == ParamRole::Harmonizer,
            TrainFilter::Layers(set) => role == ParamRole::Layer && slot.is_some_and(|s| set.contains(&s)),
            TrainFilter::Lora => role == ParamRole::Lora,
            TrainFilter::None => false,
        }
    }
}

/// Full parameter name for a slot tensor.
pub fn slot_param_name(slot: usize, tensor: &str) -> String {
    format!("layers.{slot}.{tensor}")
}

/// Split `layers.{i}.{rest}` into `(i, rest)`.
pub fn parse_slot_param(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("layers.")?;
    let (idx, tensor) = rest.split_once('.')?;
    Some((idx.parse().ok()?, tensor))
}

fn role_of(tensor: &str) -> ParamRole {
    if tensor.starts_with("harmonizer.") {
        ParamRole::Harmonizer
    } else if tensor.starts_with("lora_") {
        ParamRole::Lora
    } else {
        ParamRole::Layer
    }
}

/// Anything that can be run as a language model: embeddings plus an ordered
/// sequence of slots.
pub trait Network {
    fn config(&self) -> &ModelConfig;
    fn embeddings(&self) -> &Embeddings;
    fn n_slots(&self) -> usize;
    fn slot(&self, i: usize) -> SlotRef<'_>;

    /// `(name, tensor)` for every parameter, in storage order.
    fn named_tensors(&self) -> Vec<(String, &Tensor2D)> {
        let mut out: Vec<(String, &Tensor2D)> = self
            .embeddings()
            .tensors()
            .iter()
            .map(|(n, t)| (n.to_string(), *t))
            .collect();
        for i in 0..self.n_slots() {
            for (n, t) in self.slot(i).tensors() {
                out.push((slot_param_name(i, n), t));
            }
        }
        out
    }

    fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Networks whose parameters can be updated by name.
pub trait NetworkMut: Network {
    /// `None` when the name is unknown or the parameter is not writable
    /// through this network.
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor2D>;
}

/// Ordered stack of `n` slots between embeddings and a tied output head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelStack {
    pub config: ModelConfig,
    pub embed: Embeddings,
    pub slots: Vec<Slot>,
}

impl ModelStack {
    /// Random initialisation from stream `(seed, 1)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, 1);
        let embed = Embeddings::init(&config, &mut rng);
        let slots = (0..config.n_layers)
            .map(|_| Slot::Layer(TransformerLayer::init(&config, &mut rng)))
            .collect();
        Ok(Self { config, embed, slots })
    }

    pub fn slot_kind(&self, i: usize) -> SlotKind {
        self.slots[i].kind()
    }

    pub fn layer(&self, i: usize) -> Option<&TransformerLayer> {
        match &self.slots[i] {
            Slot::Layer(l) => Some(l),
            Slot::Harmonizer(_) => None,
        }
    }

    pub fn layer_mut(&mut self, i: usize) -> Option<&mut TransformerLayer> {
        match &mut self.slots[i] {
            Slot::Layer(l) => Some(l),
            Slot::Harmonizer(_) => None,
        }
    }

    pub fn replace_with_harmonizer(&mut self, i: usize, h: Harmonizer) {
        self.slots[i] = Slot::Harmonizer(h);
    }

    /// Forward pass returning logits for every position of every sequence.
    pub fn logits(&self, seqs: &[Vec<usize>]) -> Result<Tensor2D> {
        logits(self, seqs)
    }
}

impl Network for ModelStack {
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn embeddings(&self) -> &Embeddings {
        &self.embed
    }
    fn n_slots(&self) -> usize {
        self.slots.len()
    }
    fn slot(&self, i: usize) -> SlotRef<'_> {
        self.slots[i].as_ref()
    }
}

impl NetworkMut for ModelStack {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        if let Some((i, tensor)) = parse_slot_param(name) {
            return self.slots.get_mut(i)?.tensor_mut(tensor);
        }
        self.embed.tensor_mut(name)
    }
}

/// Register `tensor` on the tape as a parameter when the filter selects it.
fn bind(
    tape: &mut GradTape,
    filter: &TrainFilter,
    slot: Option<usize>,
    role: ParamRole,
    name: String,
    tensor: &Tensor2D,
) -> Result<Var> {
    if filter.selects(slot, role) {
        tape.param(name, tensor.clone())
    } else {
        Ok(tape.constant(tensor.clone()))
    }
}

/// Record the forward pass of `net` on `tape`, returning the logits node
/// (`B·T × vocab`). All sequences must share one length.
pub fn forward_on_tape<N: Network + ?Sized>(
    tape: &mut GradTape,
    net: &N,
    seqs: &[Vec<usize>],
    filter: &TrainFilter,
) -> Result<Var> {
    let cfg = net.config();
    let t = seqs.first().map_or(0, Vec::len);
    if t == 0 {
        return Err(Error::invalid("forward needs at least one non-empty sequence"));
    }
    if seqs.iter().any(|s| s.len() != t) {
        return Err(Error::invalid("sequences in a batch must share one length"));
    }
    if t > cfg.context_len {
        return Err(Error::invalid(format!(
            "sequence length {t} exceeds context length {}",
            cfg.context_len
        )));
    }
    let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::invalid(format!(
            "token id {bad} is outside the vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..t).collect();

    let emb = net.embeddings();
    let tok = bind(tape, filter, None, ParamRole::Embedding, "tok_emb".into(), &emb.tok)?;
    let pos = bind(tape, filter, None, ParamRole::Embedding, "pos_emb".into(), &emb.pos)?;
    let te = tape.gather(tok, &ids)?;
    let pe = tape.gather(pos, &positions)?;
    let mut x = tape.add(te, pe)?;

    for i in 0..net.n_slots() {
        let slot = net.slot(i);
        let mut p = |tensor: &str| -> Result<Var> {
            let value = slot
                .tensor(tensor)
                .ok_or_else(|| Error::invalid(format!("slot {i} has no tensor {tensor}")))?;
            bind(
                tape,
                filter,
                Some(i),
                role_of(tensor),
                slot_param_name(i, tensor),
                value,
            )
        };
        match slot {
            SlotRef::Layer(layer) => {
                let g1 = p("ln1.gain")?;
                let b1 = p("ln1.bias")?;
                let mut wq = p("attn.w_q")?;
                let wk = p("attn.w_k")?;
                let mut wv = p("attn.w_v")?;
                let wo = p("attn.w_o")?;
                let g2 = p("ln2.gain")?;
                let b2 = p("ln2.bias")?;
                let w_in = p("ffn.w_in")?;
                let w_out = p("ffn.w_out")?;
                let lora_q = match layer.lora_q {
                    Some(_) => Some((p("lora_q.a")?, p("lora_q.b")?)),
                    None => None,
                };
                let lora_v = match layer.lora_v {
                    Some(_) => Some((p("lora_v.a")?, p("lora_v.b")?)),
                    None => None,
                };
                if let Some((a, b)) = lora_q {
                    let delta = tape.matmul(a, b)?;
                    wq = tape.add(wq, delta)?;
                }
                if let Some((a, b)) = lora_v {
                    let delta = tape.matmul(a, b)?;
                    wv = tape.add(wv, delta)?;
                }
                let h = tape.layer_norm(x, g1, b1)?;
                let q = tape.matmul(h, wq)?;
                let k = tape.matmul(h, wk)?;
                let v = tape.matmul(h, wv)?;
                let att = tape.causal_attention(q, k, v, cfg.n_heads, t)?;
                let o = tape.matmul(att, wo)?;
                x = tape.add(x, o)?;
                let h = tape.layer_norm(x, g2, b2)?;
                let u = tape.matmul(h, w_in)?;
                let u = tape.gelu(u);
                let f = tape.matmul(u, w_out)?;
                x = tape.add(x, f)?;
            }
            SlotRef::Harmonizer(_) => {
                let down = p("harmonizer.w_down")?;
                let up = p("harmonizer.w_up")?;
                let z = tape.matmul(x, down)?;
                let z = tape.relu(z);
                let y = tape.matmul(z, up)?;
                x = tape.add(x, y)?;
            }
        }
    }
    let g = bind(
        tape,
        filter,
        None,
        ParamRole::Embedding,
        "ln_f.gain".into(),
        &emb.lnf_gain,
    )?;
    let b = bind(
        tape,
        filter,
        None,
        ParamRole::Embedding,
        "ln_f.bias".into(),
        &emb.lnf_bias,
    )?;
    let h = tape.layer_norm(x, g, b)?;
    tape.matmul_nt(h, tok)
}

/// Inference-only forward pass.
pub fn logits<N: Network + ?Sized>(net: &N, seqs: &[Vec<usize>]) -> Result<Tensor2D> {
    let mut tape = GradTape::new();
    let out = forward_on_tape(&mut tape, net, seqs, &TrainFilter::None)?;
    Ok(tape.value(out).clone())
}

/// Greedy continuation of `prompt` for `n` tokens.
pub fn generate_greedy<N: Network + ?Sized>(net: &N, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
    let ctx = net.config().context_len;
    let mut ids = prompt.to_vec();
    for _ in 0..n {
        let start = ids.len().saturating_sub(ctx);
        let window = ids[start..].to_vec();
        let l = logits(net, std::slice::from_ref(&window))?;
        let last = l.row(window.len() - 1);
        let next = last
            .iter()
            .enumerate()
            .fold(0, |best, (i, &x)| if x > last[best] { i } else { best });
        ids.push(next);
    }
    Ok(ids)
}
