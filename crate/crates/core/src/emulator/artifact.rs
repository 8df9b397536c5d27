//! Emulator and returned-adapter artifacts, and plug-in.

use std::path::Path;

use crate::config::TuneMode;
use crate::error::{CheckpointError, Error, Result};
use crate::layerreplace::ImportanceArtifact;
use crate::model::layer::{LoraFactors, Slot, SlotRef, TransformerLayer, LAYER_TENSORS};
use crate::model::serialize::{network_to_checkpoint, stack_from_checkpoint};
use crate::model::stack::{parse_slot_param, slot_param_name, Embeddings};
use crate::model::{Checkpoint, ModelConfig, ModelStack, Network, NetworkMut};
use crate::numerics::{RngStream, Tensor2D};

use super::{src_compress, EmulatorPlan};

pub const EMULATOR_KIND: &str = "emulator";
pub const ADAPTER_KIND: &str = "adapter_return";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmulatorSlotKind {
    /// Original layer, trainable by the data owner.
    Adapter,
    /// Trained harmonizer, frozen.
    Harmonizer,
    /// Attention-compressed original layer, frozen.
    Compressed,
}

impl EmulatorSlotKind {
    fn as_str(self) -> &'static str {
        match self {
            EmulatorSlotKind::Adapter => "adapter",
            EmulatorSlotKind::Harmonizer => "harmonizer",
            EmulatorSlotKind::Compressed => "compressed",
        }
    }

    fn parse(s: &str) -> Result<Self, CheckpointError> {
        match s {
            "adapter" => Ok(EmulatorSlotKind::Adapter),
            "harmonizer" => Ok(EmulatorSlotKind::Harmonizer),
            "compressed" => Ok(EmulatorSlotKind::Compressed),
            _ => Err(CheckpointError::Metadata(format!("unknown emulator slot kind `{s}`"))),
        }
    }
}

/// The network shipped to the data owner. Only adapter slots are writable.
#[derive(Clone, Debug, PartialEq)]
pub struct EmulatorArtifact {
    pub stack: ModelStack,
    pub kinds: Vec<EmulatorSlotKind>,
    pub plan: EmulatorPlan,
    pub source_fingerprint: u32,
}

/// Build the emulator for `plan` from the model and its importance artifact.
pub fn assemble_emulator(
    model: &ModelStack,
    importance: &ImportanceArtifact,
    plan: &EmulatorPlan,
) -> Result<EmulatorArtifact> {
    let fp = model.fingerprint()?;
    if fp != importance.source_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: importance.source_fingerprint,
            found: fp,
        });
    }
    let n = model.slots.len();
    if plan.n_layers() != n || plan.groups != importance.table.groups || importance.harmonizers.len() != n {
        return Err(Error::invalid(
            "plan, importance artifact and model disagree on the layer grouping",
        ));
    }
    let mut stack = model.clone();
    let mut kinds = Vec::with_capacity(n);
    for i in 0..n {
        let kind = if plan.phi_adapter.contains(&i) {
            EmulatorSlotKind::Adapter
        } else if plan.phi_harmonizer.contains(&i) {
            EmulatorSlotKind::Harmonizer
        } else {
            EmulatorSlotKind::Compressed
        };
        match kind {
            EmulatorSlotKind::Adapter => {}
            EmulatorSlotKind::Harmonizer => stack.replace_with_harmonizer(i, importance.harmonizers[i].clone()),
            EmulatorSlotKind::Compressed => {
                let layer = model
                    .layer(i)
                    .ok_or_else(|| Error::invalid(format!("model slot {i} is not a transformer layer")))?;
                stack.slots[i] = Slot::Layer(src_compress(layer, plan.beta)?);
            }
        }
        kinds.push(kind);
    }
    Ok(EmulatorArtifact {
        stack,
        kinds,
        plan: plan.clone(),
        source_fingerprint: fp,
    })
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn split(s: &str) -> Result<Vec<usize>, CheckpointError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.parse()
                .map_err(|_| CheckpointError::Metadata(format!("bad index list `{s}`")))
        })
        .collect()
}

impl EmulatorArtifact {
    pub fn count(&self, kind: EmulatorSlotKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }

    /// Parameters the emulator carries, with each compressed attention
    /// projection counted at its rank-`r` factored size `r·(rows+cols)`.
    /// Compressed layers are stored dense, so this is smaller than the
    /// number of stored values.
    pub fn param_count(&self) -> Result<usize> {
        let mut total = self.stack.embed.param_count();
        for (i, kind) in self.kinds.iter().enumerate() {
            total += match (kind, &self.stack.slots[i]) {
                (EmulatorSlotKind::Compressed, Slot::Layer(l)) if self.plan.beta > 0.0 => {
                    let r = super::retained_rank(self.plan.beta, l.w_q.rows().min(l.w_q.cols()))?;
                    let attn = [&l.w_q, &l.w_k, &l.w_v, &l.w_o];
                    l.param_count() - attn.iter().map(|t| t.len()).sum::<usize>()
                        + attn.iter().map(|t| r * (t.rows() + t.cols())).sum::<usize>()
                }
                (_, slot) => slot.param_count(),
            };
        }
        Ok(total)
    }

    /// Attach rank-`r` LoRA factors to every adapter layer.
    pub fn attach_lora(&mut self, r: usize, rng: &mut RngStream) -> Result<()> {
        for &i in &self.plan.phi_adapter {
            self.stack
                .layer_mut(i)
                .ok_or_else(|| Error::invalid(format!("adapter slot {i} is not a layer")))?
                .attach_lora(r, rng)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = network_to_checkpoint(&self.stack, EMULATOR_KIND);
        for (i, k) in self.kinds.iter().enumerate() {
            ck.set(&format!("emulator.slot.{i}"), k.as_str());
        }
        let p = &self.plan;
        ck.set("plan.n_adapter", p.n_adapter);
        ck.set("plan.alpha", p.alpha);
        ck.set("plan.beta", p.beta);
        ck.set(
            "plan.groups",
            p.groups
                .iter()
                .map(|g| format!("{}..{}", g.start, g.end))
                .collect::<Vec<_>>()
                .join(","),
        );
        ck.set("plan.k", p.k);
        ck.set("plan.kappa", join(&p.kappa));
        ck.set("plan.phi_adapter", join(&p.phi_adapter));
        ck.set("plan.phi_harmonizer", join(&p.phi_harmonizer));
        ck.set("plan.phi_emulator", join(&p.phi_emulator));
        ck.set("source_fingerprint", format!("{:08x}", self.source_fingerprint));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(EMULATOR_KIND)?;
        let stack = stack_from_checkpoint(ck)?;
        let n = stack.slots.len();
        let kinds = (0..n)
            .map(|i| EmulatorSlotKind::parse(ck.get(&format!("emulator.slot.{i}"))?))
            .collect::<Result<Vec<_>, _>>()?;
        let groups = ck
            .get("plan.groups")?
            .split(',')
            .map(|g| {
                let (a, b) = g
                    .split_once("..")
                    .ok_or_else(|| CheckpointError::Metadata(format!("bad group `{g}`")))?;
                let p = |x: &str| {
                    x.parse::<usize>()
                        .map_err(|_| CheckpointError::Metadata(format!("bad group `{g}`")))
                };
                Ok(p(a)?..p(b)?)
            })
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        let plan = EmulatorPlan {
            n_adapter: ck.parse("plan.n_adapter")?,
            alpha: ck.parse("plan.alpha")?,
            beta: ck.parse("plan.beta")?,
            groups,
            k: ck.parse("plan.k")?,
            kappa: split(ck.get("plan.kappa")?)?,
            phi_adapter: split(ck.get("plan.phi_adapter")?)?,
            phi_harmonizer: split(ck.get("plan.phi_harmonizer")?)?,
            phi_emulator: split(ck.get("plan.phi_emulator")?)?,
        };
        let source_fingerprint = u32::from_str_radix(ck.get("source_fingerprint")?, 16)
            .map_err(|_| CheckpointError::Metadata("bad source fingerprint".into()))?;
        for (i, k) in kinds.iter().enumerate() {
            let consistent = match k {
                EmulatorSlotKind::Adapter => plan.phi_adapter.contains(&i),
                EmulatorSlotKind::Harmonizer => plan.phi_harmonizer.contains(&i),
                EmulatorSlotKind::Compressed => plan.phi_emulator.contains(&i) && !plan.phi_harmonizer.contains(&i),
            };
            let slot_ok = matches!(
                (k, stack.slot_kind(i)),
                (EmulatorSlotKind::Harmonizer, crate::model::SlotKind::Harmonizer)
                    | (
                        EmulatorSlotKind::Adapter | EmulatorSlotKind::Compressed,
                        crate::model::SlotKind::Layer
                    )
            );
            if !consistent || !slot_ok {
                return Err(CheckpointError::Metadata(format!("slot {i} disagrees with the plan")).into());
            }
        }
        Ok(Self {
            stack,
            kinds,
            plan,
            source_fingerprint,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Network for EmulatorArtifact {
    fn config(&self) -> &ModelConfig {
        &self.stack.config
    }
    fn embeddings(&self) -> &Embeddings {
        &self.stack.embed
    }
    fn n_slots(&self) -> usize {
        self.stack.slots.len()
    }
    fn slot(&self, i: usize) -> SlotRef<'_> {
        self.stack.slots[i].as_ref()
    }
}

impl NetworkMut for EmulatorArtifact {
    /// Adapter-slot tensors only; anything frozen yields `None`.
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        let (i, tensor) = parse_slot_param(name)?;
        if self.kinds.get(i) != Some(&EmulatorSlotKind::Adapter) {
            return None;
        }
        self.stack.slots[i].tensor_mut(tensor)
    }
}

/// Tuned weights for one adapter slot.
#[derive(Clone, Debug, PartialEq)]
pub enum AdapterWeights {
    Full(TransformerLayer),
    Lora { q: LoraFactors, v: LoraFactors },
}

/// What the data owner sends back: adapter-slot weights only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterReturn {
    pub mode: TuneMode,
    pub entries: Vec<(usize, AdapterWeights)>,
    pub source_fingerprint: u32,
}

impl AdapterReturn {
    /// Extract the adapter slots of a (tuned) emulator.
    pub fn from_emulator(emu: &EmulatorArtifact, mode: TuneMode) -> Result<Self> {
        let mut entries = Vec::with_capacity(emu.plan.phi_adapter.len());
        for &i in &emu.plan.phi_adapter {
            let layer = emu
                .stack
                .layer(i)
                .ok_or_else(|| Error::invalid(format!("adapter slot {i} is not a layer")))?;
            let w = match mode {
                TuneMode::Full => {
                    if layer.has_lora() {
                        return Err(Error::invalid("full-mode return from LoRA-wrapped adapters"));
                    }
                    AdapterWeights::Full(layer.clone())
                }
                TuneMode::Lora => match (&layer.lora_q, &layer.lora_v) {
                    (Some(q), Some(v)) => AdapterWeights::Lora {
                        q: q.clone(),
                        v: v.clone(),
                    },
                    _ => return Err(Error::invalid(format!("adapter slot {i} carries no LoRA factors"))),
                },
            };
            entries.push((i, w));
        }
        Ok(Self {
            mode,
            entries,
            source_fingerprint: emu.source_fingerprint,
        })
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|(i, _)| *i).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(ADAPTER_KIND);
        ck.set("mode", self.mode);
        ck.set("adapter_indices", join(&self.indices()));
        ck.set("source_fingerprint", format!("{:08x}", self.source_fingerprint));
        for (i, w) in &self.entries {
            match w {
                AdapterWeights::Full(layer) => {
                    for (n, t) in layer.base_tensors() {
                        ck.push(slot_param_name(*i, n), t.clone());
                    }
                }
                AdapterWeights::Lora { q, v } => {
                    ck.push(slot_param_name(*i, "lora_q.a"), q.a.clone());
                    ck.push(slot_param_name(*i, "lora_q.b"), q.b.clone());
                    ck.push(slot_param_name(*i, "lora_v.a"), v.a.clone());
                    ck.push(slot_param_name(*i, "lora_v.b"), v.b.clone());
                }
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ADAPTER_KIND)?;
        let mode: TuneMode = ck
            .get("mode")?
            .parse()
            .map_err(|_| CheckpointError::Metadata("bad adapter mode".into()))?;
        let indices = split(ck.get("adapter_indices")?)?;
        let t = |i: usize, n: &str| -> Result<Tensor2D> { Ok(ck.tensor(&slot_param_name(i, n))?.clone()) };
        let mut entries = Vec::with_capacity(indices.len());
        for i in indices {
            let w = match mode {
                TuneMode::Full => {
                    let mut it = LAYER_TENSORS.iter();
                    let mut next = || t(i, it.next().expect("ten names"));
                    AdapterWeights::Full(TransformerLayer {
                        w_q: next()?,
                        w_k: next()?,
                        w_v: next()?,
                        w_o: next()?,
                        w_in: next()?,
                        w_out: next()?,
                        ln1_gain: next()?,
                        ln1_bias: next()?,
                        ln2_gain: next()?,
                        ln2_bias: next()?,
                        lora_q: None,
                        lora_v: None,
                    })
                }
                TuneMode::Lora => AdapterWeights::Lora {
                    q: LoraFactors {
                        a: t(i, "lora_q.a")?,
                        b: t(i, "lora_q.b")?,
                    },
                    v: LoraFactors {
                        a: t(i, "lora_v.a")?,
                        b: t(i, "lora_v.b")?,
                    },
                },
            };
            entries.push((i, w));
        }
        let expected: usize = entries
            .iter()
            .map(|(_, w)| match w {
                AdapterWeights::Full(_) => LAYER_TENSORS.len(),
                AdapterWeights::Lora { .. } => 4,
            })
            .sum();
        if ck.tensors.len() != expected {
            return Err(CheckpointError::Metadata("adapter return carries unexpected tensors".into()).into());
        }
        let source_fingerprint = u32::from_str_radix(ck.get("source_fingerprint")?, 16)
            .map_err(|_| CheckpointError::Metadata("bad source fingerprint".into()))?;
        Ok(Self {
            mode,
            entries,
            source_fingerprint,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn same_shape(a: &Tensor2D, b: &Tensor2D, what: &str, i: usize) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "returned {what} for layer {i} has shape {:?}, expected {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Insert returned adapter weights into the full model. Every other layer
/// stays exactly as in `model`.
pub fn plug_in(model: &ModelStack, returned: &AdapterReturn, plan: &EmulatorPlan) -> Result<ModelStack> {
    if returned.indices() != plan.phi_adapter {
        return Err(Error::invalid(format!(
            "returned adapter indices {:?} differ from the plan's {:?}",
            returned.indices(),
            plan.phi_adapter
        )));
    }
    let mut out = model.clone();
    for (i, w) in &returned.entries {
        let orig = model
            .layer(*i)
            .ok_or_else(|| Error::invalid(format!("model slot {i} is not a transformer layer")))?;
        let layer = match w {
            AdapterWeights::Full(l) => {
                for ((name, a), (_, b)) in l.base_tensors().zip(orig.base_tensors()) {
                    same_shape(a, b, name, *i)?;
                }
                l.clone()
            }
            AdapterWeights::Lora { q, v } => {
                let d = orig.w_q.rows();
                for f in [q, v] {
                    let r = f.a.cols();
                    same_shape(&f.a, &Tensor2D::zeros(d, r), "lora factor", *i)?;
                    same_shape(&f.b, &Tensor2D::zeros(r, d), "lora factor", *i)?;
                }
                let mut l = orig.clone();
                l.lora_q = Some(q.clone());
                l.lora_v = Some(v.clone());
                l.merged()
            }
        };
        out.slots[*i] = Slot::Layer(layer);
    }
    Ok(out)
}
