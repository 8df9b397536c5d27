#![allow(dead_code)]

use offsite::model::{batch_nll, ModelStack, Network, NetworkMut, TrainFilter};
use offsite::numerics::{GradTape, RngStream, Tensor2D};

pub fn small_config(n_layers: usize) -> offsite::model::ModelConfig {
    offsite::model::ModelConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        context_len: 16,
        vocab_size: offsite::model::BYTE_VOCAB,
    }
}

pub fn random_batch(b: usize, t: usize, vocab: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    (0..b).map(|_| (0..t).map(|_| rng.below(vocab)).collect()).collect()
}

pub fn bits(t: &Tensor2D) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

pub fn snapshot<N: Network + ?Sized>(net: &N) -> Vec<(String, Vec<u64>)> {
    net.named_tensors().into_iter().map(|(n, t)| (n, bits(t))).collect()
}

/// Analytic gradients of the batch NLL for every parameter.
pub fn analytic_grads(net: &ModelStack, batch: &[Vec<usize>]) -> std::collections::BTreeMap<String, Tensor2D> {
    let (inputs, targets) = offsite::model::shift(batch).unwrap();
    let mut tape = GradTape::new();
    let out = offsite::model::forward_on_tape(&mut tape, net, &inputs, &TrainFilter::All).unwrap();
    let loss = tape.cross_entropy(out, &targets).unwrap();
    tape.backward(loss).unwrap()
}

/// Worst norm-relative disagreement between central differences and the
/// analytic gradient, over `per_tensor` sampled entries of each tensor
/// (always including the entry with the largest analytic magnitude).
pub fn fd_report(
    net: &ModelStack,
    batch: &[Vec<usize>],
    per_tensor: usize,
    h: f64,
    rng: &mut RngStream,
) -> Vec<(String, f64)> {
    let grads = analytic_grads(net, batch);
    let mut out = Vec::new();
    for (name, g) in &grads {
        let mut idx: Vec<usize> = (0..per_tensor.min(g.len())).map(|_| rng.below(g.len())).collect();
        let top = (0..g.len())
            .max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs()))
            .unwrap();
        idx.push(top);
        let mut diff = 0.0;
        let mut norm_fd = 0.0;
        let mut norm_an = 0.0;
        for &e in &idx {
            let mut plus = net.clone();
            plus.param_mut(name).unwrap().data_mut()[e] += h;
            let mut minus = net.clone();
            minus.param_mut(name).unwrap().data_mut()[e] -= h;
            let fd = (batch_nll(&plus, batch).unwrap() - batch_nll(&minus, batch).unwrap()) / (2.0 * h);
            let an = g.data()[e];
            diff += (fd - an) * (fd - an);
            norm_fd += fd * fd;
            norm_an += an * an;
        }
        let denom = norm_fd.sqrt().max(norm_an.sqrt()).max(1e-12);
        out.push((name.clone(), diff.sqrt() / denom));
    }
    out
}

/// A two-slot model exercising every parameter class: a LoRA-wrapped layer
/// followed by `second` (a plain layer or a harmonizer), with non-zero
/// up-projections so all factors receive gradient.
pub fn gradcheck_model(harmonizer_second: bool, seed: u64) -> ModelStack {
    let cfg = offsite::model::ModelConfig {
        n_layers: 2,
        ..offsite::model::ModelConfig::default()
    };
    let mut m = ModelStack::init(cfg, seed).unwrap();
    let mut rng = RngStream::new(seed, 99);
    m.layer_mut(0).unwrap().attach_lora(4, &mut rng).unwrap();
    if let Some(l) = m.layer_mut(0) {
        for f in [l.lora_q.as_mut().unwrap(), l.lora_v.as_mut().unwrap()] {
            f.b = Tensor2D::from_fn(f.b.rows(), f.b.cols(), |_, _| 0.05 * rng.normal());
        }
        l.ln1_gain = Tensor2D::from_fn(1, l.ln1_gain.cols(), |_, _| 1.0 + 0.1 * rng.normal());
        l.ln2_bias = Tensor2D::from_fn(1, l.ln2_bias.cols(), |_, _| 0.1 * rng.normal());
    }
    if harmonizer_second {
        let mut h = offsite::model::Harmonizer::init(cfg.d_model, 16, &mut rng);
        h.w_up = Tensor2D::from_fn(16, cfg.d_model, |_, _| 0.1 * rng.normal());
        m.replace_with_harmonizer(1, h);
    }
    m
}

/// Logits of a model with no blocks: LN_f(tok + pos)·tok_embᵀ.
pub fn embeddings_only_oracle(m: &ModelStack, seq: &[usize]) -> Tensor2D {
    let e = &m.embed;
    let d = m.config.d_model;
    let mut out = Tensor2D::zeros(seq.len(), m.config.vocab_size);
    for (t, &id) in seq.iter().enumerate() {
        let x: Vec<f64> = (0..d).map(|j| e.tok.get(id, j) + e.pos.get(t, j)).collect();
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        let h: Vec<f64> = (0..d)
            .map(|j| (x[j] - mean) * inv * e.lnf_gain.get(0, j) + e.lnf_bias.get(0, j))
            .collect();
        for v in 0..m.config.vocab_size {
            out.set(t, v, (0..d).map(|j| h[j] * e.tok.get(v, j)).sum());
        }
    }
    out
}

pub const TOY_TEXT: &[u8] = b"the quick brown fox jumps over the lazy dog. a lazy cat naps in the sun. ";

/// A small model fitted briefly to a repeating sentence pair.
pub fn trained_small_model(n_layers: usize, steps: usize, seed: u64) -> ModelStack {
    let mut m = ModelStack::init(small_config(n_layers), seed).unwrap();
    let text: Vec<u8> = TOY_TEXT.iter().cycle().take(4000).copied().collect();
    let sampler = offsite::corpus::WindowSampler::new(&text, 16).unwrap();
    let mut opt = offsite::model::AdamW::default();
    let mut rng = RngStream::new(seed, 99);
    for _ in 0..steps {
        let batch = sampler.batch(4, &mut rng);
        offsite::model::train_step(&mut m, &batch, &TrainFilter::All, &mut opt, 3e-3).unwrap();
    }
    m
}

/// Importance artifact with the given scores, contiguous groups and
/// non-trivial harmonizers.
pub fn importance_for(m: &ModelStack, scores: &[f64], n_groups: usize) -> offsite::layerreplace::ImportanceArtifact {
    let mut table = offsite::layerreplace::ImportanceTable::new(scores.len(), n_groups).unwrap();
    table.scores = scores.to_vec();
    let mut rng = RngStream::new(77, 0);
    let harmonizers = (0..scores.len())
        .map(|_| {
            let mut h = offsite::model::Harmonizer::init(m.config.d_model, 4, &mut rng);
            h.w_up = Tensor2D::from_fn(4, m.config.d_model, |_, _| 0.05 * rng.normal());
            h
        })
        .collect();
    offsite::layerreplace::ImportanceArtifact {
        table,
        harmonizers,
        source_fingerprint: m.fingerprint().unwrap(),
    }
}
