//! Per-layer importance estimation by sampled layer replacement.
//!
//! Candidates keep half of each layer group and route the other half through
//! harmonizers. Harmonizers learn by gradient descent on candidate losses;
//! importance scores move by mean-centred exponential-loss rewards.

mod candidate;
mod estimate;

pub use candidate::{compose_candidate, compose_candidate_mut, Candidate, CandidateMut};
pub use estimate::{
    dl_step, rl_step, run_estimation, write_log_csv, EstimationResult, EstimationSchedule, HarmonizerSet,
    ImportanceArtifact, LogRow, RlOutcome, StepKind, IMPORTANCE_KIND,
};

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, uniform, RngStream};

/// `n` layers cut into `n_groups` contiguous runs; the first `n % n_groups`
/// runs take one extra layer.
pub fn contiguous_groups(n: usize, n_groups: usize) -> Result<Vec<Range<usize>>> {
    if n_groups == 0 || n_groups > n {
        return Err(Error::invalid(format!("cannot cut {n} layers into {n_groups} groups")));
    }
    let base = n / n_groups;
    let extra = n % n_groups;
    let mut out = Vec::with_capacity(n_groups);
    let mut start = 0;
    for g in 0..n_groups {
        let len = base + usize::from(g < extra);
        out.push(start..start + len);
        start += len;
    }
    Ok(out)
}

/// Importance scores with their grouping.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceTable {
    pub scores: Vec<f64>,
    pub groups: Vec<Range<usize>>,
    pub step_count: u64,
}

impl ImportanceTable {
    pub fn new(n: usize, n_groups: usize) -> Result<Self> {
        Ok(Self {
            scores: vec![0.0; n],
            groups: contiguous_groups(n, n_groups)?,
            step_count: 0,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    pub fn group_of(&self, i: usize) -> usize {
        self.groups
            .iter()
            .position(|g| g.contains(&i))
            .expect("index inside some group")
    }
}

/// One sampled candidate: probabilities, keep mask and the stream it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSample {
    pub probs: Vec<f64>,
    pub keep: Vec<bool>,
    pub stream_id: u64,
}

impl CandidateSample {
    pub fn draw(table: &ImportanceTable, rng: &mut RngStream) -> Result<Self> {
        let probs = sample_probs(table, rng)?;
        let keep = select_keep_set(&probs, &table.groups);
        Ok(Self {
            probs,
            keep,
            stream_id: rng.stream_id(),
        })
    }

    pub fn kept(&self) -> impl Iterator<Item = usize> + '_ {
        self.keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i)
    }
}

/// `p_i ~ U(0, σ(s_i))`, one draw per layer in index order.
pub fn sample_probs(table: &ImportanceTable, rng: &mut RngStream) -> Result<Vec<f64>> {
    if let Some(i) = table.scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("importance score {i} is not finite")));
    }
    table.scores.iter().map(|&s| uniform(rng, 0.0, sigmoid(s))).collect()
}

/// Keep the top `⌊|g|/2⌋` of each group by probability (ties to the lower
/// index); everything else is replaced.
pub fn select_keep_set(probs: &[f64], groups: &[Range<usize>]) -> Vec<bool> {
    let mut keep = vec![false; probs.len()];
    for g in groups {
        let mut idx: Vec<usize> = g.clone().collect();
        idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        for &i in idx.iter().take(g.len() / 2) {
            keep[i] = true;
        }
    }
    keep
}

/// `r_j = e^{-L_j} - mean_t e^{-L_t}` over finite losses; `None` marks an
/// excluded candidate. Returns `None` overall when fewer than two remain.
pub fn rewards(losses: &[f64]) -> Option<Vec<Option<f64>>> {
    let finite: Vec<f64> = losses.iter().filter(|l| l.is_finite()).map(|l| (-l).exp()).collect();
    if finite.len() < 2 {
        return None;
    }
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    Some(
        losses
            .iter()
            .map(|l| l.is_finite().then(|| (-l).exp() - mean))
            .collect(),
    )
}

/// Apply one candidate's reward: `s_i += r·σ(s_i)(1-σ(s_i))` for kept `i`.
pub fn apply_reward(scores: &mut [f64], keep: &[bool], reward: f64) {
    for (s, &k) in scores.iter_mut().zip(keep) {
        if k {
            let p = sigmoid(*s);
            *s += reward * p * (1.0 - p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_are_balanced_runs() {
        assert_eq!(contiguous_groups(16, 4).unwrap(), vec![0..4, 4..8, 8..12, 12..16]);
        assert_eq!(contiguous_groups(10, 4).unwrap(), vec![0..3, 3..6, 6..8, 8..10]);
        assert!(contiguous_groups(3, 4).is_err());
        assert!(contiguous_groups(3, 0).is_err());
    }

    #[test]
    fn keep_set_examples() {
        let groups = vec![0..4, 4..8];
        let keep = select_keep_set(&[0.9, 0.1, 0.5, 0.7, 0.3, 0.3, 0.3, 0.3], &groups);
        assert_eq!(keep, vec![true, false, false, true, true, true, false, false]);
    }

    #[test]
    fn saturated_scores_give_tiny_probs() {
        let mut t = ImportanceTable::new(4, 2).unwrap();
        t.scores = vec![-30.0; 4];
        let mut rng = RngStream::new(0, 0);
        for _ in 0..100 {
            assert!(sample_probs(&t, &mut rng).unwrap().iter().all(|&p| p < 1e-13));
        }
        assert_eq!(rng.counter(), 400);
        t.scores[0] = f64::NAN;
        assert!(sample_probs(&t, &mut rng).is_err());
    }

    #[test]
    fn reward_examples() {
        let r = rewards(&[2f64.ln(), 4f64.ln()]).unwrap();
        assert!((r[0].unwrap() - 0.125).abs() < 1e-15);
        assert!((r[1].unwrap() + 0.125).abs() < 1e-15);
        let r = rewards(&[1.0, f64::NAN, 2.0]).unwrap();
        assert!(r[1].is_none());
        assert!((r[0].unwrap() + r[2].unwrap()).abs() < 1e-15);
        assert!(rewards(&[1.0, f64::INFINITY]).is_none());
    }

    #[test]
    fn score_update_examples() {
        let mut s = vec![0.0, 2.0, 2.0];
        apply_reward(&mut s, &[true, false, false], 0.5);
        assert_eq!(s[0], 0.125);
        apply_reward(&mut s, &[false, true, false], -0.1);
        // σ(2)(1-σ(2)) = 0.104993585403506...
        assert!((s[1] - 1.989_500_641_459_649_4).abs() < 1e-12, "{}", s[1]);
        assert_eq!(s[2], 2.0);
    }
}
