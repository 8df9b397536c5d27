//! The two-party tuning exchange, its evaluation and parameter sweeps.

mod pipeline;
mod roles;

pub use pipeline::{
    compute_baseline, full_finetune, pretrain_model, read_sweep_csv, run_estimation_from_config, run_pipeline,
    run_sweep, tune_params, Baseline, SweepGrid, SweepRow, TuneParams, SWEEP_HEADER,
};
pub use roles::{
    audit_roles, data_finetune, owner_plug_in, owner_prepare, DataContext, DataOutcome, OwnerContext, Workspace,
    ADAPTER_FILE, EMULATOR_FILE,
};

use crate::error::{Error, Result};
use crate::model::{nll_loss, shift, tokenizer, Network};

/// Evaluation windows (each at most `context_len` ids, at least two).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSet {
    pub windows: Vec<Vec<usize>>,
}

impl EvalSet {
    /// Overlapping windows over one text (stride half the context).
    pub fn from_text(text: &[u8], context_len: usize) -> Result<Self> {
        Self::from_documents(&[text], context_len)
    }

    pub fn from_documents(docs: &[&[u8]], context_len: usize) -> Result<Self> {
        let windows: Vec<Vec<usize>> = docs
            .iter()
            .flat_map(|d| tokenizer::tokenize(d, context_len))
            .filter(|w| w.len() >= 2)
            .collect();
        if windows.is_empty() {
            return Err(Error::invalid(
                "evaluation split has no window with a prediction target",
            ));
        }
        Ok(Self { windows })
    }

    /// Keep at most `max` windows, evenly spaced (0 keeps all).
    pub fn limited(mut self, max: usize) -> Self {
        if max > 0 && self.windows.len() > max {
            let n = self.windows.len();
            self.windows = (0..max).map(|k| self.windows[k * n / max].clone()).collect();
        }
        self
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

const EVAL_BATCH: usize = 8;

/// Mean next-token NLL of every window, in window order.
pub fn window_losses<N: Network + ?Sized>(net: &N, set: &EvalSet) -> Result<Vec<f64>> {
    let mut out = vec![0.0; set.windows.len()];
    let mut k = 0;
    while k < set.windows.len() {
        let len = set.windows[k].len();
        let mut end = k + 1;
        while end < set.windows.len() && end - k < EVAL_BATCH && set.windows[end].len() == len {
            end += 1;
        }
        let (inputs, targets) = shift(&set.windows[k..end])?;
        let logits = crate::model::logits(net, &inputs)?;
        let t = len - 1;
        for (j, o) in out[k..end].iter_mut().enumerate() {
            *o = nll_loss(&logits.row_range(j * t, (j + 1) * t), &targets[j * t..(j + 1) * t])?;
        }
        k = end;
    }
    Ok(out)
}

/// `exp` of the mean over windows of each window's mean NLL.
pub fn evaluate_perplexity<N: Network + ?Sized>(net: &N, set: &EvalSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    let losses = window_losses(net, set)?;
    let ppl = (losses.iter().sum::<f64>() / losses.len() as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::NonFinite("perplexity"));
    }
    Ok(ppl)
}

/// Five perplexities of one run plus the derived gap and condition flags.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub zs: f64,
    pub ft: f64,
    pub emulator_zs: f64,
    pub emulator_ft: f64,
    pub plug_in: f64,
    /// `emulator_ft - plug_in`; positive when the plugged model is better.
    pub delta: f64,
    pub conditions: [bool; 3],
}

impl MetricsReport {
    pub fn new(zs: f64, ft: f64, emulator_zs: f64, emulator_ft: f64, plug_in: f64, tol: f64) -> Self {
        let mut r = Self {
            zs,
            ft,
            emulator_zs,
            emulator_ft,
            plug_in,
            delta: emulator_ft - plug_in,
            conditions: [false; 3],
        };
        r.conditions = check_conditions(&r, tol).0;
        r
    }

    pub fn verdict(&self) -> bool {
        self.conditions.iter().all(|&c| c)
    }
}

/// (1) plug-in beats zero-shot, (2) plug-in beats the tuned emulator,
/// (3) plug-in within `tol` of full fine-tuning. All in perplexity.
pub fn check_conditions(r: &MetricsReport, tol: f64) -> ([bool; 3], bool) {
    let c = [
        r.plug_in < r.zs,
        r.plug_in < r.emulator_ft,
        r.plug_in <= r.ft * (1.0 + tol),
    ];
    (c, c.iter().all(|&x| x))
}
