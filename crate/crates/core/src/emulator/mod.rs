//! Emulator construction: plan selection from importance scores, selective
//! rank compression of attention weights, assembly and plug-in.

mod artifact;

pub use artifact::{
    assemble_emulator, plug_in, AdapterReturn, AdapterWeights, EmulatorArtifact, EmulatorSlotKind, ADAPTER_KIND,
    EMULATOR_KIND,
};

use std::ops::Range;

use crate::error::{Error, Result};
use crate::layerreplace::ImportanceTable;
use crate::model::layer::TransformerLayer;
use crate::numerics::rank_r_approx;

/// `max(1, ⌈(1-β)·dim⌉)`.
pub fn retained_rank(beta: f64, dim: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta {beta} outside [0, 1]")));
    }
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    Ok((((1.0 - beta) * dim as f64).ceil() as usize).clamp(1, dim))
}

/// Replace the four attention projections by their best rank-`r`
/// approximations; everything else is copied. `β = 0` returns the layer
/// unchanged.
pub fn src_compress(layer: &TransformerLayer, beta: f64) -> Result<TransformerLayer> {
    let r = retained_rank(beta, layer.w_q.rows().min(layer.w_q.cols()))?;
    let mut out = layer.clone();
    if beta == 0.0 {
        return Ok(out);
    }
    out.w_q = rank_r_approx(&layer.w_q, r)?;
    out.w_k = rank_r_approx(&layer.w_k, r)?;
    out.w_v = rank_r_approx(&layer.w_v, r)?;
    out.w_o = rank_r_approx(&layer.w_o, r)?;
    Ok(out)
}

/// Which layers become adapters, harmonizers or compressed emulator layers.
#[derive(Clone, Debug, PartialEq)]
pub struct EmulatorPlan {
    pub n_adapter: usize,
    pub alpha: f64,
    pub beta: f64,
    pub groups: Vec<Range<usize>>,
    /// Adapter layers per group.
    pub k: usize,
    /// Harmonizer quota per group.
    pub kappa: Vec<usize>,
    pub phi_adapter: Vec<usize>,
    pub phi_harmonizer: Vec<usize>,
    pub phi_emulator: Vec<usize>,
}

impl EmulatorPlan {
    pub fn n_layers(&self) -> usize {
        self.groups.last().map_or(0, |g| g.end)
    }

    /// Emulator layers that keep (compressed) original weights.
    pub fn phi_compressed(&self) -> Vec<usize> {
        self.phi_emulator
            .iter()
            .copied()
            .filter(|i| !self.phi_harmonizer.contains(i))
            .collect()
    }
}

/// `⌊x + 1/2⌋`.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Per group: the `k = N_a / N_g` highest-scoring layers become adapters and
/// the `κ = round(|g|·α)` lowest-scoring of the rest become harmonizers.
/// Ties go to the lower index in both selections.
pub fn build_plan(table: &ImportanceTable, n_adapter: usize, alpha: f64, beta: f64) -> Result<EmulatorPlan> {
    let n_groups = table.groups.len();
    if n_groups == 0 || !n_adapter.is_multiple_of(n_groups) {
        return Err(Error::invalid(format!(
            "n_adapter {n_adapter} must be a multiple of the {n_groups} groups"
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    retained_rank(beta, 1)?;
    if let Some(i) = table.scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("importance score {i} is not finite")));
    }
    let k = n_adapter / n_groups;
    let s = &table.scores;
    let mut kappa = Vec::with_capacity(n_groups);
    let mut phi_adapter = Vec::new();
    let mut phi_harmonizer = Vec::new();
    for (j, g) in table.groups.iter().enumerate() {
        let size = g.len();
        let kap = round_half_up(size as f64 * alpha);
        if k + kap > size {
            return Err(Error::QuotaViolation {
                group: j,
                k,
                kappa: kap,
                size,
            });
        }
        let mut desc: Vec<usize> = g.clone().collect();
        desc.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let adapters = &desc[..k];
        let mut rest: Vec<usize> = desc[k..].to_vec();
        rest.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
        phi_adapter.extend_from_slice(adapters);
        phi_harmonizer.extend_from_slice(&rest[..kap]);
        kappa.push(kap);
    }
    phi_adapter.sort_unstable();
    phi_harmonizer.sort_unstable();
    let phi_emulator = (0..table.n_layers()).filter(|i| !phi_adapter.contains(i)).collect();
    Ok(EmulatorPlan {
        n_adapter,
        alpha,
        beta,
        groups: table.groups.clone(),
        k,
        kappa,
        phi_adapter,
        phi_harmonizer,
        phi_emulator,
    })
}
