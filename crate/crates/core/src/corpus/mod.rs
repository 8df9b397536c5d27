//! Byte corpora, contiguous train/val/eval splits and batch sampling.

pub mod synth;

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::tokenizer;
use crate::numerics::RngStream;

/// One corpus cut into three disjoint, contiguous byte ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub source: Option<PathBuf>,
    bytes: Vec<u8>,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub eval: Range<usize>,
}

impl CorpusSplit {
    /// Split `bytes` as `[train | val | eval]`, with `val_fraction` and
    /// `eval_fraction` of the length (floored) at the end.
    pub fn new(bytes: Vec<u8>, val_fraction: f64, eval_fraction: f64) -> Result<Self> {
        let ok = |f: f64| (0.0..1.0).contains(&f);
        if !ok(val_fraction) || !ok(eval_fraction) || val_fraction + eval_fraction >= 1.0 {
            return Err(Error::invalid(format!(
                "split fractions val {val_fraction} and eval {eval_fraction} must be in [0,1) and sum below 1"
            )));
        }
        let n = bytes.len();
        let n_eval = (n as f64 * eval_fraction).floor() as usize;
        let n_val = (n as f64 * val_fraction).floor() as usize;
        let train_end = n - n_eval - n_val;
        if train_end == 0 {
            return Err(Error::invalid("corpus too small: training split is empty"));
        }
        Ok(Self {
            source: None,
            bytes,
            train: 0..train_end,
            val: train_end..train_end + n_val,
            eval: train_end + n_val..n,
        })
    }

    pub fn load(path: impl AsRef<Path>, val_fraction: f64, eval_fraction: f64) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() {
            return Err(Error::invalid(format!("corpus {} is empty", path.display())));
        }
        let mut s = Self::new(bytes, val_fraction, eval_fraction)?;
        s.source = Some(path.to_path_buf());
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn train_bytes(&self) -> &[u8] {
        &self.bytes[self.train.clone()]
    }

    pub fn val_bytes(&self) -> &[u8] {
        &self.bytes[self.val.clone()]
    }

    pub fn eval_bytes(&self) -> &[u8] {
        &self.bytes[self.eval.clone()]
    }
}

/// Random fixed-length windows over one tokenised split.
#[derive(Clone, Debug)]
pub struct WindowSampler {
    ids: Vec<usize>,
    len: usize,
}

impl WindowSampler {
    /// Windows of `len` ids (inputs plus one shifted target).
    pub fn new(text: &[u8], len: usize) -> Result<Self> {
        let ids = tokenizer::encode(text);
        if len < 2 || ids.len() < len {
            return Err(Error::invalid(format!(
                "split of {} tokens cannot supply windows of length {len}",
                ids.len()
            )));
        }
        Ok(Self { ids, len })
    }

    pub fn window(&self, start: usize) -> Vec<usize> {
        self.ids[start..start + self.len].to_vec()
    }

    pub fn n_starts(&self) -> usize {
        self.ids.len() - self.len + 1
    }

    pub fn batch(&self, size: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
        (0..size).map(|_| self.window(rng.below(self.n_starts()))).collect()
    }
}
