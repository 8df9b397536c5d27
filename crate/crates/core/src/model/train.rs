//! Next-token loss and a single optimiser step.

use crate::error::{Error, Result};
use crate::numerics::{softmax_nll, GradTape, Tensor2D};

use super::optim::AdamW;
use super::stack::{forward_on_tape, logits, Network, NetworkMut, TrainFilter};

/// Mean of `-log softmax(logits)[target]` over rows.
pub fn nll_loss(logits: &Tensor2D, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "nll_loss",
            left: logits.shape(),
            right: (targets.len(), 1),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::invalid(format!(
            "target {t} is outside {} classes",
            logits.cols()
        )));
    }
    Ok(softmax_nll(logits, targets).0)
}

/// Split equal-length sequences into model inputs and shifted targets.
pub fn shift(batch: &[Vec<usize>]) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let len = batch.first().map_or(0, Vec::len);
    if len < 2 {
        return Err(Error::invalid("training sequences need at least two tokens"));
    }
    if batch.iter().any(|s| s.len() != len) {
        return Err(Error::invalid("sequences in a batch must share one length"));
    }
    let inputs = batch.iter().map(|s| s[..len - 1].to_vec()).collect();
    let targets = batch.iter().flat_map(|s| s[1..].iter().copied()).collect();
    Ok((inputs, targets))
}

/// Mean next-token NLL of one sequence.
pub fn sequence_nll<N: Network + ?Sized>(net: &N, seq: &[usize]) -> Result<f64> {
    let (inputs, targets) = shift(std::slice::from_ref(&seq.to_vec()))?;
    nll_loss(&logits(net, &inputs)?, &targets)
}

/// Mean next-token NLL of a batch of equal-length sequences.
pub fn batch_nll<N: Network + ?Sized>(net: &N, batch: &[Vec<usize>]) -> Result<f64> {
    let (inputs, targets) = shift(batch)?;
    nll_loss(&logits(net, &inputs)?, &targets)
}

/// One AdamW step on the parameters selected by `filter`. Returns the loss
/// before the update.
pub fn train_step<N: NetworkMut + ?Sized>(
    net: &mut N,
    batch: &[Vec<usize>],
    filter: &TrainFilter,
    opt: &mut AdamW,
    lr: f64,
) -> Result<f64> {
    let (inputs, targets) = shift(batch)?;
    let mut tape = GradTape::new();
    let out = forward_on_tape(&mut tape, &*net, &inputs, filter)?;
    if tape.param_names().next().is_none() {
        return Err(Error::invalid(format!(
            "trainable filter {filter:?} selects no parameters"
        )));
    }
    let loss_var = tape.cross_entropy(out, &targets)?;
    let loss = tape.value(loss_var).get(0, 0);
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grads = tape.backward(loss_var)?;
    drop(tape);
    if grads.values().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let scale = opt.clip_scale(&grads);
    for (name, g) in &grads {
        let p = net
            .param_mut(name)
            .ok_or_else(|| Error::ContractViolation(format!("parameter `{name}` is not writable")))?;
        opt.update(name, p, g, scale, lr);
    }
    Ok(loss)
}
