mod common;

use std::path::Path;

use common::*;
use offsite::config::{RunConfig, TuneMode};
use offsite::corpus::synth::{generate, Domain};
use offsite::corpus::CorpusSplit;
use offsite::emulator::{AdapterReturn, EmulatorArtifact};
use offsite::layerreplace::ImportanceArtifact;
use offsite::model::tokenizer::encode;
use offsite::model::{sequence_nll, ModelStack, NetworkMut, TrainFilter};
use offsite::numerics::{RngStream, Tensor2D};
use offsite::protocol::*;
use offsite::Error;

fn small_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_text(
        "n_layers = 4\nd_model = 16\nn_heads = 2\nd_ffn = 32\ncontext_len = 16\nseq_len = 15\n\
         harmonizer_rank = 4\nn_groups = 2\nn_adapter = 2\nest_total_steps = 20\nrl_interval = 5\n\
         tune_steps = 30\nlora_rank = 2\npretrain_steps = 40\nsweep_alphas = 0,0.5\nsweep_betas = 0.5\n\
         sweep_seeds = 1,2\neval_max_windows = 20\n",
    )
    .unwrap();
    c
}

struct Fixture {
    c: RunConfig,
    model: ModelStack,
    pretrain: CorpusSplit,
    downstream: CorpusSplit,
    eval: EvalSet,
}

fn fixture() -> Fixture {
    let c = small_run_config();
    let pretrain = CorpusSplit::new(generate(Domain::Encyclopedia, 20_000, 0), 0.1, 0.1).unwrap();
    let downstream = CorpusSplit::new(generate(Domain::Procedure, 6_000, 0), 0.0, 0.2).unwrap();
    let (model, _) = pretrain_model(&c, &pretrain).unwrap();
    let eval = EvalSet::from_text(downstream.eval_bytes(), c.context_len)
        .unwrap()
        .limited(c.eval_max_windows);
    Fixture {
        c,
        model,
        pretrain,
        downstream,
        eval,
    }
}

fn importance(f: &Fixture) -> ImportanceArtifact {
    let est = run_estimation_from_config(&f.c, &f.model, &f.pretrain).unwrap();
    ImportanceArtifact::new(&est, &f.model).unwrap()
}

#[test]
fn uniform_model_has_vocabulary_perplexity() {
    let mut m = ModelStack::init(small_config(2), 1).unwrap();
    m.embed.tok = Tensor2D::zeros(259, 16);
    let eval = EvalSet::from_text(b"some text to score, long enough for two windows", 16).unwrap();
    let ppl = evaluate_perplexity(&m, &eval).unwrap();
    assert!((ppl - 259.0).abs() < 1e-9, "{ppl}");
}

#[test]
fn perplexity_is_a_window_mean() {
    let m = ModelStack::init(small_config(2), 2).unwrap();
    let text = b"abcdefghijklmnopqrstuvwxyz0123";
    let eval = EvalSet::from_text(text, 16).unwrap();
    // 31 ids with stride 8: [0,16) [8,24) [16,31).
    let ids = encode(text);
    let manual = vec![ids[0..16].to_vec(), ids[8..24].to_vec(), ids[16..31].to_vec()];
    assert_eq!(eval.windows, manual);
    let nll: Vec<f64> = manual.iter().map(|w| sequence_nll(&m, w).unwrap()).collect();
    let oracle = (nll.iter().sum::<f64>() / 3.0).exp();
    let ppl = evaluate_perplexity(&m, &eval).unwrap();
    assert!((ppl - oracle).abs() < 1e-10 * oracle, "{ppl} vs {oracle}");
    let losses = window_losses(&m, &eval).unwrap();
    assert!((ppl.ln() - losses.iter().sum::<f64>() / 3.0).abs() < 1e-12);

    let doubled = EvalSet::from_documents(&[text, text], 16).unwrap();
    assert!((evaluate_perplexity(&m, &doubled).unwrap() - ppl).abs() < 1e-12);
    assert!(evaluate_perplexity(&m, &EvalSet { windows: vec![] }).is_err());
    assert_eq!(eval.clone().limited(2).len(), 2);
    assert_eq!(eval.clone().limited(0), eval);
}

#[test]
fn frozen_slots_reject_updates() {
    let m = ModelStack::init(small_config(4), 3).unwrap();
    let imp = importance_for(&m, &[0.4, 0.1, 0.3, 0.2], 2);
    let plan = offsite::emulator::build_plan(&imp.table, 2, 0.25, 0.5).unwrap();
    let mut emu = offsite::emulator::assemble_emulator(&m, &imp, &plan).unwrap();
    assert!(emu.param_mut("layers.1.attn.w_q").is_none());
    assert!(emu.param_mut("layers.0.attn.w_q").is_some());
    assert!(emu.param_mut("tok_emb").is_none());
    let batch = random_batch(2, 8, 259, &mut RngStream::new(3, 0));
    let mut opt = offsite::model::AdamW::default();
    let r = offsite::model::train_step(&mut emu, &batch, &TrainFilter::All, &mut opt, 1e-3);
    assert!(matches!(r, Err(Error::ContractViolation(_))), "{r:?}");
}

fn run_roles(f: &Fixture, imp: &ImportanceArtifact, dir: &Path, c: &RunConfig) -> (DataOutcome, ModelStack, f64) {
    let ws = Workspace::create(dir).unwrap();
    let owner = OwnerContext::install(&ws, &f.model, imp).unwrap();
    let data = DataContext::install(&ws, f.downstream.train_bytes()).unwrap();
    audit_roles(&ws).unwrap();
    owner_prepare(&owner, &ws.exchange_dir(), c.n_adapter, c.alpha, c.beta).unwrap();
    audit_roles(&ws).unwrap();
    let out = data_finetune(&data, &ws.exchange_dir(), &tune_params(c), &f.eval).unwrap();
    audit_roles(&ws).unwrap();
    let (plugged, ppl) = owner_plug_in(&owner, &ws.exchange_dir(), c.n_adapter, c.alpha, c.beta, &f.eval).unwrap();
    (out, plugged, ppl)
}

#[test]
fn exchange_end_to_end() {
    let f = fixture();
    let imp = importance(&f);
    let dir = tempfile::tempdir().unwrap();
    let zs = evaluate_perplexity(&f.model, &f.eval).unwrap();

    // No tuning: the returned adapter is what was shipped and plug-in is ZS.
    let mut c = f.c.clone();
    c.tune_steps = 0;
    let (out, plugged, ppl) = run_roles(&f, &imp, &dir.path().join("zero"), &c);
    assert_eq!(ppl, zs);
    assert_eq!(snapshot(&plugged), snapshot(&f.model));
    let shipped = EmulatorArtifact::load(dir.path().join("zero/exchange").join(EMULATOR_FILE)).unwrap();
    assert_eq!(
        AdapterReturn::load(&out.return_path).unwrap(),
        AdapterReturn::from_emulator(&shipped, TuneMode::Full).unwrap()
    );

    for mode in [TuneMode::Full, TuneMode::Lora] {
        let mut c = f.c.clone();
        c.tune_mode = mode;
        let sub = dir.path().join(mode.to_string());
        let (out, plugged, ppl) = run_roles(&f, &imp, &sub, &c);
        assert!(out.emulator_ft < out.emulator_zs, "{mode}: {out:?}");
        // Plugged checkpoint re-evaluated directly.
        let p = sub.join("plugged.sotc");
        plugged.save(&p).unwrap();
        let direct = evaluate_perplexity(&ModelStack::load(&p).unwrap(), &f.eval).unwrap();
        assert!((direct - ppl).abs() < 1e-12);
        let emu = EmulatorArtifact::load(sub.join("exchange").join(EMULATOR_FILE)).unwrap();
        for &i in &emu.plan.phi_emulator {
            assert_eq!(plugged.slots[i], f.model.slots[i]);
        }
        let model_size = std::fs::metadata(sub.join("owner/model.sotc")).unwrap().len();
        let emu_size = std::fs::metadata(sub.join("exchange").join(EMULATOR_FILE))
            .unwrap()
            .len();
        assert!(emu_size < model_size);
    }
}

#[test]
fn audit_catches_leaks() {
    let f = fixture();
    let imp = importance_for(&f.model, &[0.4, 0.1, 0.3, 0.2], 2);
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::create(dir.path()).unwrap();
    let owner = OwnerContext::install(&ws, &f.model, &imp).unwrap();
    DataContext::install(&ws, f.downstream.train_bytes()).unwrap();
    audit_roles(&ws).unwrap();

    std::fs::copy(&owner.model_path, ws.data_dir().join("copy.bin")).unwrap();
    assert!(matches!(audit_roles(&ws), Err(Error::ContractViolation(_))));
    std::fs::remove_file(ws.data_dir().join("copy.bin")).unwrap();

    std::fs::copy(&owner.model_path, ws.exchange_dir().join(EMULATOR_FILE)).unwrap();
    assert!(matches!(audit_roles(&ws), Err(Error::ContractViolation(_))));
    std::fs::remove_file(ws.exchange_dir().join(EMULATOR_FILE)).unwrap();

    std::fs::write(ws.owner_dir().join("downstream_train.txt"), b"private").unwrap();
    assert!(matches!(audit_roles(&ws), Err(Error::ContractViolation(_))));
}

#[test]
fn returned_adapter_from_another_model_is_rejected() {
    let f = fixture();
    let imp = importance_for(&f.model, &[0.4, 0.1, 0.3, 0.2], 2);
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::create(dir.path()).unwrap();
    let owner = OwnerContext::install(&ws, &f.model, &imp).unwrap();
    let other = ModelStack::init(small_config(4), 99).unwrap();
    let other_imp = importance_for(&other, &[0.4, 0.1, 0.3, 0.2], 2);
    let plan = offsite::emulator::build_plan(&other_imp.table, 2, 0.25, 0.5).unwrap();
    let emu = offsite::emulator::assemble_emulator(&other, &other_imp, &plan).unwrap();
    AdapterReturn::from_emulator(&emu, TuneMode::Full)
        .unwrap()
        .save(ws.exchange_dir().join(ADAPTER_FILE))
        .unwrap();
    let r = owner_plug_in(&owner, &ws.exchange_dir(), 2, 0.25, 0.5, &f.eval);
    assert!(matches!(r, Err(Error::FingerprintMismatch { .. })));
}

#[test]
fn sweep_csv_resume_and_parity() {
    let f = fixture();
    let grid = SweepGrid::from_config(&f.c);
    assert_eq!(
        grid.cells(),
        vec![(0.0, 0.5, 1), (0.0, 0.5, 2), (0.5, 0.5, 1), (0.5, 0.5, 2)]
    );
    let dir = tempfile::tempdir().unwrap();
    let csv_a = dir.path().join("a.csv");
    let rows = run_sweep(
        &f.c,
        &grid,
        &f.model,
        &f.pretrain,
        &f.downstream,
        &csv_a,
        &dir.path().join("wa"),
    )
    .unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.status == "ok"));
    assert_eq!(read_sweep_csv(&csv_a).unwrap(), rows);
    let text = std::fs::read_to_string(&csv_a).unwrap();
    assert_eq!(text.lines().next().unwrap(), SWEEP_HEADER.join(","));

    // Same seeds, fresh run: identical bytes.
    let csv_b = dir.path().join("b.csv");
    run_sweep(
        &f.c,
        &grid,
        &f.model,
        &f.pretrain,
        &f.downstream,
        &csv_b,
        &dir.path().join("wb"),
    )
    .unwrap();
    assert_eq!(std::fs::read(&csv_a).unwrap(), std::fs::read(&csv_b).unwrap());

    // Resume: a truncated CSV is completed to the same file.
    let kept: Vec<&str> = text.lines().take(3).collect();
    std::fs::write(&csv_b, kept.join("\n") + "\n").unwrap();
    run_sweep(
        &f.c,
        &grid,
        &f.model,
        &f.pretrain,
        &f.downstream,
        &csv_b,
        &dir.path().join("wc"),
    )
    .unwrap();
    assert_eq!(std::fs::read(&csv_a).unwrap(), std::fs::read(&csv_b).unwrap());

    // A 1x1 grid matches a single pipeline run.
    let mut c = f.c.clone();
    c.alpha = 0.5;
    c.beta = 0.5;
    c.seed = 2;
    let one = SweepGrid {
        alphas: vec![0.5],
        betas: vec![0.5],
        seeds: vec![2],
    };
    let single = run_sweep(
        &c,
        &one,
        &f.model,
        &f.pretrain,
        &f.downstream,
        &dir.path().join("one.csv"),
        &dir.path().join("wd"),
    )
    .unwrap();
    let est = run_estimation_from_config(&c, &f.model, &f.pretrain).unwrap();
    let art = ImportanceArtifact::new(&est, &f.model).unwrap();
    let base = compute_baseline(&c, &f.model, f.downstream.train_bytes(), &f.eval).unwrap();
    let direct = run_pipeline(
        &c,
        &dir.path().join("we"),
        &f.model,
        &art,
        f.downstream.train_bytes(),
        &f.eval,
        base,
    )
    .unwrap();
    assert_eq!(single[0].report.as_ref().unwrap(), &direct);
    assert_eq!(&rows[3], &single[0]);
}

#[test]
fn failed_cells_are_recorded_and_retried() {
    let f = fixture();
    let grid = SweepGrid {
        alphas: vec![0.0, 1.0],
        betas: vec![0.5],
        seeds: vec![1],
    };
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    let rows = run_sweep(&f.c, &grid, &f.model, &f.pretrain, &f.downstream, &csv, dir.path()).unwrap();
    assert_eq!(rows[0].status, "ok");
    assert!(rows[1].status.starts_with("error"), "{}", rows[1].status);
    assert!(rows[1].report.is_none());
    assert_eq!(read_sweep_csv(&csv).unwrap(), rows);
}
