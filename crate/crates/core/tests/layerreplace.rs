mod common;

use common::*;
use offsite::corpus::WindowSampler;
use offsite::layerreplace::*;
use offsite::model::{batch_nll, logits, Harmonizer, ModelStack};
use offsite::numerics::{sigmoid, RngStream, Tensor2D};
use proptest::prelude::*;

fn identity_set(n: usize, d: usize) -> HarmonizerSet {
    HarmonizerSet::init(n, d, 4, 0)
}

#[test]
fn equal_scores_give_quarter_means() {
    let t = ImportanceTable::new(8, 2).unwrap();
    let mut rng = RngStream::new(1, 0);
    let mut sums = [0.0; 8];
    for _ in 0..20_000 {
        for (s, p) in sums.iter_mut().zip(sample_probs(&t, &mut rng).unwrap()) {
            assert!((0.0..0.5).contains(&p));
            *s += p;
        }
    }
    for s in sums {
        assert!((s / 20_000.0 - 0.25).abs() < 0.01);
    }
}

#[test]
fn higher_score_scales_expected_probability() {
    let mut t = ImportanceTable::new(2, 1).unwrap();
    t.scores = vec![0.0, 2.0];
    let mut rng = RngStream::new(2, 0);
    let (mut a, mut b) = (0.0, 0.0);
    for _ in 0..50_000 {
        let p = sample_probs(&t, &mut rng).unwrap();
        a += p[0];
        b += p[1];
    }
    // σ(2)/σ(0) = 2/(1+e^-2)
    let oracle = 2.0 / (1.0 + (-2.0f64).exp());
    assert!((b / a - oracle).abs() < 0.05, "{} vs {oracle}", b / a);
    assert!((oracle - 1.7616).abs() < 1e-4);
}

#[test]
fn equal_scores_keep_each_layer_half_the_time() {
    let t = ImportanceTable::new(16, 4).unwrap();
    let mut rng = RngStream::new(3, 0);
    let mut kept = [0usize; 16];
    for _ in 0..1000 {
        let s = CandidateSample::draw(&t, &mut rng).unwrap();
        for i in s.kept() {
            kept[i] += 1;
        }
    }
    for k in kept {
        assert!((k as f64 / 1000.0 - 0.5).abs() < 0.05, "{k}");
    }
}

#[test]
fn candidate_composition() {
    let m = ModelStack::init(small_config(4), 1).unwrap();
    let hs = identity_set(4, 16);
    let seq = vec![vec![256, 10, 20, 30, 40, 50]];
    let all = vec![true; 4];
    let full = compose_candidate(&m, &hs.harmonizers, &all).unwrap();
    assert_eq!(bits(&logits(&full, &seq).unwrap()), bits(&m.logits(&seq).unwrap()));
    let none = vec![false; 4];
    let empty = compose_candidate(&m, &hs.harmonizers, &none).unwrap();
    let oracle = embeddings_only_oracle(&m, &seq[0]);
    assert!(logits(&empty, &seq).unwrap().max_abs_diff(&oracle) < 1e-10);
    let k1 = vec![true, false, true, false];
    let k2 = vec![false, true, false, true];
    let l1 = batch_nll(&compose_candidate(&m, &hs.harmonizers, &k1).unwrap(), &seq).unwrap();
    let l2 = batch_nll(&compose_candidate(&m, &hs.harmonizers, &k2).unwrap(), &seq).unwrap();
    assert_ne!(l1, l2);
    let mut bad = hs.harmonizers.clone();
    bad[2] = Harmonizer::init(8, 4, &mut RngStream::new(0, 0));
    assert!(compose_candidate(&m, &bad, &k1).is_err());
    assert!(compose_candidate(&m, &hs.harmonizers[..3], &k1).is_err());
}

#[test]
fn dl_step_touches_only_replaced_harmonizers() {
    let m = ModelStack::init(small_config(4), 2).unwrap();
    let t = ImportanceTable::new(4, 2).unwrap();
    let mut rng = RngStream::new(2, 5);
    let batch = random_batch(2, 9, 259, &mut rng);
    let model_before = snapshot(&m);

    let mut hs = identity_set(4, 16);
    let before = hs.harmonizers.clone();
    dl_step(&m, &mut hs, &t, &batch, &mut RngStream::new(9, 9), 0.0).unwrap();
    assert_eq!(hs.harmonizers, before);

    let (sample, _) = dl_step(&m, &mut hs, &t, &batch, &mut RngStream::new(9, 9), 1e-2).unwrap();
    for i in 0..4 {
        if sample.keep[i] {
            assert_eq!(hs.harmonizers[i], before[i], "kept layer {i} harmonizer moved");
        } else {
            assert_ne!(
                hs.harmonizers[i].w_up, before[i].w_up,
                "replaced layer {i} harmonizer idle"
            );
        }
    }
    assert_eq!(snapshot(&m), model_before);
}

#[test]
fn harmonizer_training_curve_descends() {
    let m = ModelStack::init(small_config(4), 3).unwrap();
    let text: Vec<u8> = b"the cat sat on the mat. ".iter().cycle().take(600).copied().collect();
    let sampler = WindowSampler::new(&text, 13).unwrap();
    let t = ImportanceTable::new(4, 2).unwrap();
    let mut hs = identity_set(4, 16);
    let mut rng = RngStream::new(3, 1);
    let mut brng = RngStream::new(3, 2);
    let losses: Vec<f64> = (0..200)
        .map(|_| {
            let batch = sampler.batch(4, &mut brng);
            dl_step(&m, &mut hs, &t, &batch, &mut rng, 1e-2).unwrap().1
        })
        .collect();
    let means: Vec<f64> = losses.chunks(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    assert!(means.windows(2).filter(|p| p[1] < p[0]).count() >= 8, "{means:?}");
    assert!(means[9] < means[0], "{means:?}");
}

#[test]
fn rl_step_examples() {
    let m = ModelStack::init(small_config(4), 4).unwrap();
    let hs = identity_set(4, 16);
    let mut t = ImportanceTable::new(4, 2).unwrap();
    let mut rng = RngStream::new(4, 0);
    let val = random_batch(2, 9, 259, &mut rng);
    let mut rngs = vec![RngStream::new(4, 10), RngStream::new(4, 11), RngStream::new(4, 12)];
    let hs_before = hs.clone();
    let out = rl_step(&m, &hs, &mut t, &val, &mut rngs).unwrap();
    assert_eq!(hs, hs_before);
    let r = out.rewards.clone().unwrap();
    assert!(r.iter().map(|x| x.unwrap()).sum::<f64>().abs() < 1e-12);
    // Replay: recompute the scores from the outcome.
    let mut s = vec![0.0; 4];
    for (sample, reward) in out.samples.iter().zip(&r) {
        apply_reward(&mut s, &sample.keep, reward.unwrap());
    }
    assert_eq!(s, t.scores);
    assert_eq!(t.step_count, 1);
    let mut dup = vec![RngStream::new(4, 10), RngStream::new(4, 10)];
    assert!(rl_step(&m, &hs, &mut t, &val, &mut dup).is_err());
    assert!(rl_step(&m, &hs, &mut t, &val, &mut rngs[..1]).is_err());
}

#[test]
fn no_op_schedule_and_determinism() {
    let m = ModelStack::init(small_config(4), 5).unwrap();
    let text: Vec<u8> = (0..3000u32).map(|i| b"abcdefgh "[(i * 7 % 9) as usize]).collect();
    let train = WindowSampler::new(&text[..2000], 9).unwrap();
    let val = WindowSampler::new(&text[2000..], 9).unwrap();
    let mut sched = EstimationSchedule {
        total_steps: 0,
        rl_interval: 5,
        n_candidates: 3,
        n_groups: 2,
        lr: 1e-2,
        batch_size: 2,
        harmonizer_rank: 4,
        grad_clip: Some(1.0),
        seed: 7,
    };
    let r = run_estimation(&m, &train, &val, &sched).unwrap();
    assert!(r.table.scores.iter().all(|&s| s == 0.0));
    assert!(r
        .harmonizers
        .harmonizers
        .iter()
        .all(|h| h.w_up == Tensor2D::zeros(4, 16)));

    sched.total_steps = 30;
    let before = snapshot(&m);
    let a = run_estimation(&m, &train, &val, &sched).unwrap();
    let b = run_estimation(&m, &train, &val, &sched).unwrap();
    assert_eq!(snapshot(&m), before);
    assert_eq!(a, b);
    assert_eq!(a.table.step_count, 6);
    assert!(a.table.scores.iter().any(|&s| s != 0.0));
    assert_eq!(a.log.iter().filter(|r| r.kind == StepKind::Rl).count(), 6);

    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("log.csv");
    write_log_csv(&csv_path, &a.log).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains(",rl,")).count(), 6);
    assert_eq!(text.lines().count(), 1 + 36);

    let art = ImportanceArtifact::new(&a, &m).unwrap();
    let p1 = dir.path().join("i1.sotc");
    let p2 = dir.path().join("i2.sotc");
    art.save(&p1).unwrap();
    let back = ImportanceArtifact::load(&p1).unwrap();
    assert_eq!(back, art);
    back.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rewards_sum_to_zero(losses in prop::collection::vec(0.0f64..20.0, 2..=5usize)) {
        let r = rewards(&losses).unwrap();
        let sum: f64 = r.iter().map(|x| x.unwrap()).sum();
        prop_assert!(sum.abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn updates_are_local_and_bounded(
        scores in prop::collection::vec(-5.0f64..5.0, 8),
        losses in prop::collection::vec(0.0f64..8.0, 3),
        seed in any::<u64>(),
    ) {
        let mut t = ImportanceTable::new(8, 2).unwrap();
        t.scores = scores.clone();
        let mut rng = RngStream::new(seed, 0);
        let samples: Vec<CandidateSample> =
            (0..3).map(|_| CandidateSample::draw(&t, &mut rng).unwrap()).collect();
        for s in &samples {
            for g in &t.groups {
                prop_assert_eq!(g.clone().filter(|&i| s.keep[i]).count(), g.len() / 2);
            }
        }
        let r = rewards(&losses).unwrap();
        let mut s = scores.clone();
        for (sample, reward) in samples.iter().zip(&r) {
            let before = s.clone();
            apply_reward(&mut s, &sample.keep, reward.unwrap());
            for i in 0..8 {
                let d = (s[i] - before[i]).abs();
                prop_assert!(d <= reward.unwrap().abs() / 4.0 + 1e-15);
                if !sample.keep[i] {
                    prop_assert_eq!(s[i], before[i]);
                }
            }
        }
        let touched: Vec<bool> = (0..8)
            .map(|i| samples.iter().zip(&r).any(|(sm, rw)| sm.keep[i] && rw.unwrap() != 0.0))
            .collect();
        for i in 0..8 {
            prop_assert_eq!(s[i] != scores[i], touched[i]);
        }
    }

    #[test]
    fn sampling_is_monotone_in_score(lo in -3.0f64..3.0, gap in 0.3f64..2.0) {
        let mut t = ImportanceTable::new(2, 1).unwrap();
        t.scores = vec![lo, lo + gap];
        let mut rng = RngStream::new(lo.to_bits(), 1);
        let (mut a, mut b) = (0.0, 0.0);
        for _ in 0..4000 {
            let p = sample_probs(&t, &mut rng).unwrap();
            a += p[0];
            b += p[1];
        }
        prop_assert!((a / 4000.0 - sigmoid(lo) / 2.0).abs() < 0.025);
        prop_assert!((b / 4000.0 - sigmoid(lo + gap) / 2.0).abs() < 0.025);
        prop_assert!(sigmoid(lo + gap) > sigmoid(lo));
    }
}
