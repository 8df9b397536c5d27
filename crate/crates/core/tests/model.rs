mod common;

use std::collections::BTreeSet;

use common::*;
use offsite::model::{
    batch_nll, logits, train_step, AdamW, Checkpoint, Harmonizer, ModelConfig, ModelStack, Slot, TrainFilter,
};
use offsite::numerics::{RngStream, Tensor2D};
use offsite::CheckpointError;

#[test]
fn identity_harmonizers_reduce_to_embeddings_and_head() {
    let mut m = ModelStack::init(small_config(3), 4).unwrap();
    let mut rng = RngStream::new(4, 7);
    for i in 0..3 {
        m.replace_with_harmonizer(i, Harmonizer::init(16, 4, &mut rng));
    }
    let seq: Vec<usize> = (0..10).map(|_| rng.below(259)).collect();
    let got = logits(&m, &[seq.clone()]).unwrap();
    let want = embeddings_only_oracle(&m, &seq);
    assert!(got.max_abs_diff(&want) < 1e-10, "diff {}", got.max_abs_diff(&want));
}

#[test]
fn zeroed_output_layer_is_identity_and_harmonizer_swap_is_neutral() {
    let mut m = ModelStack::init(small_config(3), 5).unwrap();
    let l = m.layer_mut(1).unwrap();
    l.w_o = Tensor2D::zeros(16, 16);
    l.w_out = Tensor2D::zeros(32, 16);
    let seq = vec![vec![256, 1, 2, 3, 200, 100]];
    let before = logits(&m, &seq).unwrap();
    let mut rng = RngStream::new(0, 0);
    m.replace_with_harmonizer(1, Harmonizer::init(16, 4, &mut rng));
    let after = logits(&m, &seq).unwrap();
    assert_eq!(bits(&before), bits(&after));
}

#[test]
fn causal_masking_holds_for_random_pairs() {
    let m = ModelStack::init(small_config(2), 6).unwrap();
    let mut rng = RngStream::new(6, 1);
    for _ in 0..50 {
        let len = 2 + rng.below(15);
        let seq: Vec<usize> = (0..len).map(|_| rng.below(259)).collect();
        let pos = 1 + rng.below(len - 1);
        let mut other = seq.clone();
        other[pos] = (other[pos] + 1 + rng.below(258)) % 259;
        let a = logits(&m, &[seq]).unwrap();
        let b = logits(&m, &[other]).unwrap();
        for t in 0..pos {
            let ra: Vec<u64> = a.row(t).iter().map(|x| x.to_bits()).collect();
            let rb: Vec<u64> = b.row(t).iter().map(|x| x.to_bits()).collect();
            assert_eq!(ra, rb, "position {t} saw token {pos}");
        }
        assert_ne!(a.row(pos), b.row(pos));
    }
}

#[test]
fn batch_rows_are_independent() {
    let m = ModelStack::init(small_config(2), 7).unwrap();
    let mut rng = RngStream::new(7, 0);
    let batch = random_batch(3, 9, 259, &mut rng);
    let joint = logits(&m, &batch).unwrap();
    let permuted = vec![batch[2].clone(), batch[0].clone(), batch[1].clone()];
    let pj = logits(&m, &permuted).unwrap();
    for (k, src) in [(0usize, 1usize), (1, 2), (2, 0)] {
        let alone = logits(&m, &[batch[k].clone()]).unwrap();
        assert!(joint.row_range(k * 9, k * 9 + 9).max_abs_diff(&alone) < 1e-12);
        assert!(pj.row_range(src * 9, src * 9 + 9).max_abs_diff(&alone) < 1e-12);
    }
}

#[test]
fn forward_rejects_bad_input() {
    let m = ModelStack::init(small_config(1), 0).unwrap();
    assert!(logits(&m, &[vec![259]]).is_err());
    assert!(logits(&m, &[vec![1; 17]]).is_err());
    assert!(logits(&m, &[vec![1, 2], vec![1]]).is_err());
}

#[test]
fn filter_isolation_over_100_steps() {
    let mut m = ModelStack::init(small_config(4), 8).unwrap();
    let mut rng = RngStream::new(8, 0);
    m.replace_with_harmonizer(2, Harmonizer::init(16, 4, &mut rng));
    m.layer_mut(0).unwrap().attach_lora(2, &mut rng).unwrap();
    let filters = [
        TrainFilter::Harmonizers,
        TrainFilter::Layers(BTreeSet::from([1, 3])),
        TrainFilter::Lora,
    ];
    for filter in filters {
        let mut net = m.clone();
        let before = snapshot(&net);
        let mut opt = AdamW::default();
        for _ in 0..100 {
            let batch = random_batch(2, 8, 259, &mut rng);
            train_step(&mut net, &batch, &filter, &mut opt, 1e-2).unwrap();
        }
        let after = snapshot(&net);
        let mut changed = 0;
        for ((name, b), (_, a)) in before.iter().zip(&after) {
            let role_selected = match &filter {
                TrainFilter::Harmonizers => name.contains("harmonizer"),
                TrainFilter::Layers(s) => {
                    !name.contains("lora") && s.iter().any(|i| name.starts_with(&format!("layers.{i}.")))
                }
                TrainFilter::Lora => name.contains("lora"),
                _ => unreachable!(),
            };
            if role_selected {
                changed += (a != b) as usize;
            } else {
                assert_eq!(a, b, "{name} moved under {filter:?}");
            }
        }
        assert!(changed > 0, "{filter:?} trained nothing");
    }
}

#[test]
fn empty_selection_and_zero_lr() {
    let mut m = ModelStack::init(small_config(2), 9).unwrap();
    let mut opt = AdamW::default();
    let batch = vec![vec![256, 1, 2, 3, 4]];
    assert!(train_step(&mut m, &batch, &TrainFilter::None, &mut opt, 1e-3).is_err());
    assert!(train_step(&mut m, &batch, &TrainFilter::Harmonizers, &mut opt, 1e-3).is_err());
    let before = snapshot(&m);
    let loss = train_step(&mut m, &batch, &TrainFilter::All, &mut opt, 0.0).unwrap();
    assert_eq!(before, snapshot(&m));
    assert_eq!(loss.to_bits(), batch_nll(&m, &batch).unwrap().to_bits());
}

#[test]
fn lora_fresh_and_merged_forward() {
    let mut m = ModelStack::init(small_config(2), 10).unwrap();
    let seq = vec![vec![256, 5, 6, 7, 8, 9]];
    let plain = logits(&m, &seq).unwrap();
    let mut rng = RngStream::new(10, 3);
    m.layer_mut(1).unwrap().attach_lora(4, &mut rng).unwrap();
    assert_eq!(bits(&plain), bits(&logits(&m, &seq).unwrap()));
    let l = m.layer_mut(1).unwrap();
    for f in [l.lora_q.as_mut().unwrap(), l.lora_v.as_mut().unwrap()] {
        f.b = Tensor2D::from_fn(4, 16, |_, _| 0.1 * rng.normal());
    }
    let adapted = logits(&m, &seq).unwrap();
    let mut merged = m.clone();
    merged.slots[1] = Slot::Layer(m.layer(1).unwrap().merged());
    assert!(adapted.max_abs_diff(&logits(&merged, &seq).unwrap()) < 1e-12);
    assert!(adapted.max_abs_diff(&plain) > 1e-6);
}

#[test]
fn two_layer_model_gradients_match_finite_differences() {
    let mut rng = RngStream::new(12, 0);
    for harmonizer in [false, true] {
        let m = gradcheck_model(harmonizer, 12);
        let batch = random_batch(2, 6, 259, &mut rng);
        for (name, err) in fd_report(&m, &batch, 6, 1e-5, &mut rng) {
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}

#[test]
fn default_checkpoint_lists_every_tensor() {
    let m = ModelStack::init(ModelConfig::default(), 0).unwrap();
    let ck = m.to_checkpoint();
    assert_eq!(ck.tensors.len(), 16 * 10 + 4);
    for i in 0..16 {
        for t in offsite::model::layer::LAYER_TENSORS {
            assert!(ck.has_tensor(&format!("layers.{i}.{t}")));
        }
    }
    for t in ["tok_emb", "pos_emb", "ln_f.gain", "ln_f.bias"] {
        assert!(ck.has_tensor(t));
    }
}

#[test]
fn model_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = ModelStack::init(small_config(3), 13).unwrap();
    let mut rng = RngStream::new(13, 0);
    m.replace_with_harmonizer(1, Harmonizer::init(16, 4, &mut rng));
    m.layer_mut(2).unwrap().attach_lora(3, &mut rng).unwrap();
    let a = dir.path().join("a.sotc");
    let b = dir.path().join("b.sotc");
    m.save(&a).unwrap();
    let back = ModelStack::load(&a).unwrap();
    assert_eq!(back, m);
    back.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(back.fingerprint().unwrap(), m.fingerprint().unwrap());
}

#[test]
fn damaged_model_files_report_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.sotc");
    ModelStack::init(small_config(1), 0).unwrap().save(&p).unwrap();
    let good = std::fs::read(&p).unwrap();
    let mut bad = good.clone();
    let mid = good.len() - 100;
    bad[mid] ^= 0x40;
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(CheckpointError::ChecksumMismatch { .. })
    ));
    assert!(matches!(
        Checkpoint::from_bytes(&good[..good.len() / 2]),
        Err(CheckpointError::Truncated { .. })
    ));
    let mut v2 = good.clone();
    v2[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&v2),
        Err(CheckpointError::UnsupportedVersion { found: 2, .. })
    ));
    let mut wrong_kind = Checkpoint::from_bytes(&good).unwrap();
    wrong_kind.set("kind", "emulator");
    assert!(ModelStack::from_checkpoint(&wrong_kind).is_err());
}

#[test]
fn same_seed_same_bytes() {
    let a = ModelStack::init(small_config(2), 21)
        .unwrap()
        .to_checkpoint()
        .to_bytes()
        .unwrap();
    let b = ModelStack::init(small_config(2), 21)
        .unwrap()
        .to_checkpoint()
        .to_bytes()
        .unwrap();
    let c = ModelStack::init(small_config(2), 22)
        .unwrap()
        .to_checkpoint()
        .to_bytes()
        .unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
