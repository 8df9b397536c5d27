//! Transformer blocks, harmonizers and LoRA factors.

use crate::error::{Error, Result};
use crate::numerics::{product, RngStream, Tensor2D};

use super::config::ModelConfig;

pub const INIT_STD: f64 = 0.02;
pub const LORA_INIT_STD: f64 = 0.02;

/// Names of the ten tensors of a transformer block, in storage order.
pub const LAYER_TENSORS: [&str; 10] = [
    "attn.w_q",
    "attn.w_k",
    "attn.w_v",
    "attn.w_o",
    "ffn.w_in",
    "ffn.w_out",
    "ln1.gain",
    "ln1.bias",
    "ln2.gain",
    "ln2.bias",
];

/// Attention projections subject to rank compression.
pub const MHSA_TENSORS: [&str; 4] = ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"];

pub(crate) fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| std * rng.normal())
}

/// Low-rank update `a·b` added to a frozen projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    pub a: Tensor2D,
    pub b: Tensor2D,
}

impl LoraFactors {
    pub fn delta(&self) -> Tensor2D {
        product(&self.a, false, &self.b, false)
    }
}

/// Pre-norm block: `x + MHSA(LN₁ x)` then `x + FFN(LN₂ x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer {
    pub w_q: Tensor2D,
    pub w_k: Tensor2D,
    pub w_v: Tensor2D,
    pub w_o: Tensor2D,
    pub w_in: Tensor2D,
    pub w_out: Tensor2D,
    pub ln1_gain: Tensor2D,
    pub ln1_bias: Tensor2D,
    pub ln2_gain: Tensor2D,
    pub ln2_bias: Tensor2D,
    pub lora_q: Option<LoraFactors>,
    pub lora_v: Option<LoraFactors>,
}

impl TransformerLayer {
    pub fn init(config: &ModelConfig, rng: &mut RngStream) -> Self {
        let d = config.d_model;
        let f = config.d_ffn;
        let resid = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        Self {
            w_q: gaussian(d, d, INIT_STD, rng),
            w_k: gaussian(d, d, INIT_STD, rng),
            w_v: gaussian(d, d, INIT_STD, rng),
            w_o: gaussian(d, d, resid, rng),
            w_in: gaussian(d, f, INIT_STD, rng),
            w_out: gaussian(f, d, resid, rng),
            ln1_gain: Tensor2D::filled(1, d, 1.0),
            ln1_bias: Tensor2D::zeros(1, d),
            ln2_gain: Tensor2D::filled(1, d, 1.0),
            ln2_bias: Tensor2D::zeros(1, d),
            lora_q: None,
            lora_v: None,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor2D> {
        Some(match name {
            "attn.w_q" => &self.w_q,
            "attn.w_k" => &self.w_k,
            "attn.w_v" => &self.w_v,
            "attn.w_o" => &self.w_o,
            "ffn.w_in" => &self.w_in,
            "ffn.w_out" => &self.w_out,
            "ln1.gain" => &self.ln1_gain,
            "ln1.bias" => &self.ln1_bias,
            "ln2.gain" => &self.ln2_gain,
            "ln2.bias" => &self.ln2_bias,
            "lora_q.a" => &self.lora_q.as_ref()?.a,
            "lora_q.b" => &self.lora_q.as_ref()?.b,
            "lora_v.a" => &self.lora_v.as_ref()?.a,
            "lora_v.b" => &self.lora_v.as_ref()?.b,
            _ => return None,
        })
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        Some(match name {
            "attn.w_q" => &mut self.w_q,
            "attn.w_k" => &mut self.w_k,
            "attn.w_v" => &mut self.w_v,
            "attn.w_o" => &mut self.w_o,
            "ffn.w_in" => &mut self.w_in,
            "ffn.w_out" => &mut self.w_out,
            "ln1.gain" => &mut self.ln1_gain,
            "ln1.bias" => &mut self.ln1_bias,
            "ln2.gain" => &mut self.ln2_gain,
            "ln2.bias" => &mut self.ln2_bias,
            "lora_q.a" => &mut self.lora_q.as_mut()?.a,
            "lora_q.b" => &mut self.lora_q.as_mut()?.b,
            "lora_v.a" => &mut self.lora_v.as_mut()?.a,
            "lora_v.b" => &mut self.lora_v.as_mut()?.b,
            _ => return None,
        })
    }

    /// The ten base tensors, in storage order.
    pub fn base_tensors(&self) -> impl Iterator<Item = (&'static str, &Tensor2D)> {
        LAYER_TENSORS
            .iter()
            .map(move |n| (*n, self.tensor(n).expect("base tensor")))
    }

    /// LoRA factors currently attached, if any.
    pub fn lora_tensors(&self) -> Vec<(&'static str, &Tensor2D)> {
        let mut out = Vec::new();
        if let Some(l) = &self.lora_q {
            out.push(("lora_q.a", &l.a));
            out.push(("lora_q.b", &l.b));
        }
        if let Some(l) = &self.lora_v {
            out.push(("lora_v.a", &l.a));
            out.push(("lora_v.b", &l.b));
        }
        out
    }

    pub fn has_lora(&self) -> bool {
        self.lora_q.is_some() || self.lora_v.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.base_tensors().map(|(_, t)| t.len()).sum::<usize>()
            + self.lora_tensors().iter().map(|(_, t)| t.len()).sum::<usize>()
    }

    /// Attach rank-`r` adapters to the query and value projections:
    /// `a` Gaussian, `b` zero, so the block's function is unchanged.
    pub fn attach_lora(&mut self, r: usize, rng: &mut RngStream) -> Result<()> {
        let d = self.w_q.rows();
        if self.has_lora() {
            return Err(Error::invalid("LoRA factors are already attached to this layer"));
        }
        if r == 0 || r > d {
            return Err(Error::invalid(format!("LoRA rank {r} outside 1..={d}")));
        }
        let mut make = || LoraFactors {
            a: gaussian(d, r, LORA_INIT_STD, rng),
            b: Tensor2D::zeros(r, d),
        };
        self.lora_q = Some(make());
        self.lora_v = Some(make());
        Ok(())
    }

    /// Fold attached LoRA deltas into the base projections.
    pub fn merged(&self) -> TransformerLayer {
        let mut out = self.clone();
        if let Some(l) = out.lora_q.take() {
            out.w_q.add_assign(&l.delta());
        }
        if let Some(l) = out.lora_v.take() {
            out.w_v.add_assign(&l.delta());
        }
        out
    }
}

/// Low-rank residual replacement block: `x + ReLU(x·w_down)·w_up`.
#[derive(Clone, Debug, PartialEq)]
pub struct Harmonizer {
    pub w_down: Tensor2D,
    pub w_up: Tensor2D,
}

pub const HARMONIZER_TENSORS: [&str; 2] = ["harmonizer.w_down", "harmonizer.w_up"];

impl Harmonizer {
    /// Fan-in scaled down-projection, zero up-projection (identity map).
    pub fn init(d_model: usize, rank: usize, rng: &mut RngStream) -> Self {
        Self {
            w_down: gaussian(d_model, rank, 1.0 / (d_model as f64).sqrt(), rng),
            w_up: Tensor2D::zeros(rank, d_model),
        }
    }

    pub fn rank(&self) -> usize {
        self.w_down.cols()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor2D> {
        match name {
            "harmonizer.w_down" => Some(&self.w_down),
            "harmonizer.w_up" => Some(&self.w_up),
            _ => None,
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        match name {
            "harmonizer.w_down" => Some(&mut self.w_down),
            "harmonizer.w_up" => Some(&mut self.w_up),
            _ => None,
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor2D); 2] {
        [
            (HARMONIZER_TENSORS[0], &self.w_down),
            (HARMONIZER_TENSORS[1], &self.w_up),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.w_down.len() + self.w_up.len()
    }
}

/// Content of one position in the layer stack.
#[derive(Clone, Debug, PartialEq)]
pub enum Slot {
    Layer(TransformerLayer),
    Harmonizer(Harmonizer),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Layer,
    Harmonizer,
}

impl Slot {
    pub fn kind(&self) -> SlotKind {
        match self {
            Slot::Layer(_) => SlotKind::Layer,
            Slot::Harmonizer(_) => SlotKind::Harmonizer,
        }
    }

    pub fn as_ref(&self) -> SlotRef<'_> {
        match self {
            Slot::Layer(l) => SlotRef::Layer(l),
            Slot::Harmonizer(h) => SlotRef::Harmonizer(h),
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        match self {
            Slot::Layer(l) => l.tensor_mut(name),
            Slot::Harmonizer(h) => h.tensor_mut(name),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Slot::Layer(l) => l.param_count(),
            Slot::Harmonizer(h) => h.param_count(),
        }
    }
}

/// Borrowed slot, used to compose candidate networks without copying.
#[derive(Clone, Copy, Debug)]
pub enum SlotRef<'a> {
    Layer(&'a TransformerLayer),
    Harmonizer(&'a Harmonizer),
}

impl<'a> SlotRef<'a> {
    pub fn tensor(&self, name: &str) -> Option<&'a Tensor2D> {
        match *self {
            SlotRef::Layer(l) => l.tensor(name),
            SlotRef::Harmonizer(h) => h.tensor(name),
        }
    }

    /// `(name, tensor)` pairs in storage order, LoRA factors last.
    pub fn tensors(&self) -> Vec<(&'static str, &'a Tensor2D)> {
        match *self {
            SlotRef::Layer(l) => {
                let mut v: Vec<_> = l.base_tensors().collect();
                v.extend(l.lora_tensors());
                v
            }
            SlotRef::Harmonizer(h) => h.tensors().to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lora_parameter_count_for_four_layers() {
        let cfg = ModelConfig::default();
        let mut rng = RngStream::new(0, 0);
        let mut total = 0;
        for _ in 0..4 {
            let mut layer = TransformerLayer::init(&cfg, &mut rng);
            layer.attach_lora(4, &mut rng).unwrap();
            total += layer.lora_tensors().iter().map(|(_, t)| t.len()).sum::<usize>();
        }
        assert_eq!(total, 4 * 2 * (64 * 4 + 4 * 64));
        assert_eq!(total, 4096);
    }

    #[test]
    fn double_attachment_is_rejected() {
        let cfg = ModelConfig::default();
        let mut rng = RngStream::new(0, 0);
        let mut layer = TransformerLayer::init(&cfg, &mut rng);
        layer.attach_lora(4, &mut rng).unwrap();
        assert!(layer.attach_lora(4, &mut rng).is_err());
        let mut fresh = TransformerLayer::init(&cfg, &mut rng);
        assert!(fresh.attach_lora(0, &mut rng).is_err());
        assert!(fresh.attach_lora(65, &mut rng).is_err());
    }

    #[test]
    fn fresh_lora_merge_is_a_no_op() {
        let cfg = ModelConfig::default();
        let mut rng = RngStream::new(1, 0);
        let base = TransformerLayer::init(&cfg, &mut rng);
        let mut adapted = base.clone();
        adapted.attach_lora(4, &mut rng).unwrap();
        assert_eq!(adapted.merged(), base);
    }
}
