//! Candidate networks composed by reference from a model and harmonizers.

use crate::error::{Error, Result};
use crate::model::layer::{Harmonizer, SlotRef};
use crate::model::stack::{parse_slot_param, Embeddings, ModelStack, Network, NetworkMut};
use crate::model::ModelConfig;
use crate::numerics::Tensor2D;

/// Read-only candidate: slot `i` is the model's slot when kept, otherwise
/// harmonizer `i`.
#[derive(Clone, Copy, Debug)]
pub struct Candidate<'a> {
    model: &'a ModelStack,
    harmonizers: &'a [Harmonizer],
    keep: &'a [bool],
}

/// Candidate whose harmonizers (and only those) are writable.
#[derive(Debug)]
pub struct CandidateMut<'a> {
    model: &'a ModelStack,
    harmonizers: &'a mut [Harmonizer],
    keep: &'a [bool],
}

fn check(model: &ModelStack, harmonizers: &[Harmonizer], keep: &[bool]) -> Result<()> {
    let n = model.slots.len();
    if harmonizers.len() != n || keep.len() != n {
        return Err(Error::invalid(format!(
            "candidate needs {n} harmonizers and keep flags, got {} and {}",
            harmonizers.len(),
            keep.len()
        )));
    }
    let d = model.config.d_model;
    for (i, h) in harmonizers.iter().enumerate() {
        if h.w_down.rows() != d || h.w_up.cols() != d || h.w_down.cols() != h.w_up.rows() {
            return Err(Error::invalid(format!(
                "harmonizer {i} has shapes {:?}/{:?}, incompatible with width {d}",
                h.w_down.shape(),
                h.w_up.shape()
            )));
        }
    }
    Ok(())
}

pub fn compose_candidate<'a>(
    model: &'a ModelStack,
    harmonizers: &'a [Harmonizer],
    keep: &'a [bool],
) -> Result<Candidate<'a>> {
    check(model, harmonizers, keep)?;
    Ok(Candidate {
        model,
        harmonizers,
        keep,
    })
}

pub fn compose_candidate_mut<'a>(
    model: &'a ModelStack,
    harmonizers: &'a mut [Harmonizer],
    keep: &'a [bool],
) -> Result<CandidateMut<'a>> {
    check(model, harmonizers, keep)?;
    Ok(CandidateMut {
        model,
        harmonizers,
        keep,
    })
}

fn slot<'a>(model: &'a ModelStack, harmonizers: &'a [Harmonizer], keep: &[bool], i: usize) -> SlotRef<'a> {
    if keep[i] {
        model.slots[i].as_ref()
    } else {
        SlotRef::Harmonizer(&harmonizers[i])
    }
}

impl Network for Candidate<'_> {
    fn config(&self) -> &ModelConfig {
        &self.model.config
    }
    fn embeddings(&self) -> &Embeddings {
        &self.model.embed
    }
    fn n_slots(&self) -> usize {
        self.keep.len()
    }
    fn slot(&self, i: usize) -> SlotRef<'_> {
        slot(self.model, self.harmonizers, self.keep, i)
    }
}

impl Network for CandidateMut<'_> {
    fn config(&self) -> &ModelConfig {
        &self.model.config
    }
    fn embeddings(&self) -> &Embeddings {
        &self.model.embed
    }
    fn n_slots(&self) -> usize {
        self.keep.len()
    }
    fn slot(&self, i: usize) -> SlotRef<'_> {
        slot(self.model, self.harmonizers, self.keep, i)
    }
}

impl NetworkMut for CandidateMut<'_> {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        let (i, tensor) = parse_slot_param(name)?;
        if i >= self.keep.len() || self.keep[i] {
            return None;
        }
        self.harmonizers[i].tensor_mut(tensor)
    }
}
