//! Pretraining, baselines, one full exchange and grid sweeps.

use std::collections::HashMap;
use std::path::Path;

use crate::config::{RunConfig, TuneMode};
use crate::corpus::{CorpusSplit, WindowSampler};
use crate::error::{Error, Result};
use crate::layerreplace::{run_estimation, EstimationResult, EstimationSchedule, ImportanceArtifact};
use crate::model::{train_step, AdamW, ModelStack, TrainFilter};
use crate::numerics::RngStream;

use super::roles::{audit_roles, data_finetune, owner_plug_in, owner_prepare, DataContext, OwnerContext, Workspace};
use super::{evaluate_perplexity, EvalSet, MetricsReport};

const STREAM_PRETRAIN_BATCHES: u64 = 10;
pub(crate) const STREAM_TUNE_BATCHES: u64 = 20;
pub(crate) const STREAM_LORA_INIT: u64 = 21;

/// Downstream tuning settings shared by the data owner and the full
/// fine-tuning reference.
#[derive(Clone, Debug, PartialEq)]
pub struct TuneParams {
    pub steps: usize,
    pub lr: f64,
    pub mode: TuneMode,
    pub lora_rank: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

pub fn tune_params(c: &RunConfig) -> TuneParams {
    TuneParams {
        steps: c.tune_steps,
        lr: match c.tune_mode {
            TuneMode::Full => c.tune_lr,
            TuneMode::Lora => c.lora_lr,
        },
        mode: c.tune_mode,
        lora_rank: c.lora_rank,
        batch_size: c.batch_size,
        seq_len: c.seq_len,
        grad_clip: (c.grad_clip > 0.0).then_some(c.grad_clip),
        seed: c.seed,
    }
}

/// Linear warm-up over the first tenth (at most 100 steps), then cosine
/// decay to a tenth of the peak.
fn pretrain_lr(step: usize, total: usize, peak: f64) -> f64 {
    let warm = (total / 10).clamp(1, 100);
    if step < warm {
        return peak * (step + 1) as f64 / warm as f64;
    }
    let t = (step - warm) as f64 / (total - warm).max(1) as f64;
    peak * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Train a fresh model on the corpus's training split. Returns the model
/// and the per-step losses.
pub fn pretrain_model(c: &RunConfig, corpus: &CorpusSplit) -> Result<(ModelStack, Vec<f64>)> {
    c.validate()?;
    let mut model = ModelStack::init(c.model_config(), c.seed)?;
    let sampler = WindowSampler::new(corpus.train_bytes(), c.seq_len + 1)?;
    let mut rng = RngStream::new(c.seed, STREAM_PRETRAIN_BATCHES);
    let mut opt = AdamW::default().with_clip((c.grad_clip > 0.0).then_some(c.grad_clip));
    let mut losses = Vec::with_capacity(c.pretrain_steps);
    for step in 0..c.pretrain_steps {
        let batch = sampler.batch(c.batch_size, &mut rng);
        let lr = pretrain_lr(step, c.pretrain_steps, c.pretrain_lr);
        losses.push(train_step(&mut model, &batch, &TrainFilter::All, &mut opt, lr)?);
        if (step + 1) % 100 == 0 {
            log::info!("pretrain step {}: loss {:.4}", step + 1, losses[step]);
        }
    }
    Ok((model, losses))
}

/// Importance estimation on the pretraining corpus's train/val splits.
pub fn run_estimation_from_config(c: &RunConfig, model: &ModelStack, corpus: &CorpusSplit) -> Result<EstimationResult> {
    c.validate()?;
    let train = WindowSampler::new(corpus.train_bytes(), c.seq_len + 1)?;
    let val = WindowSampler::new(corpus.val_bytes(), c.seq_len + 1)?;
    run_estimation(model, &train, &val, &EstimationSchedule::from_config(c))
}

/// Reference full fine-tuning: every parameter, same batches and learning
/// rate as the data owner's full-adapter tuning.
pub fn full_finetune(model: &ModelStack, train_text: &[u8], p: &TuneParams) -> Result<ModelStack> {
    let sampler = WindowSampler::new(train_text, p.seq_len + 1)?;
    let mut rng = RngStream::new(p.seed, STREAM_TUNE_BATCHES);
    let mut opt = AdamW::default().with_clip(p.grad_clip);
    let mut m = model.clone();
    for _ in 0..p.steps {
        let batch = sampler.batch(p.batch_size, &mut rng);
        train_step(&mut m, &batch, &TrainFilter::All, &mut opt, p.lr)?;
    }
    Ok(m)
}

/// Zero-shot and fully fine-tuned perplexity of the original model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Baseline {
    pub zs: f64,
    pub ft: f64,
}

pub fn compute_baseline(c: &RunConfig, model: &ModelStack, train_text: &[u8], eval: &EvalSet) -> Result<Baseline> {
    let p = TuneParams {
        mode: TuneMode::Full,
        lr: c.tune_lr,
        ..tune_params(c)
    };
    let zs = evaluate_perplexity(model, eval)?;
    let ft = evaluate_perplexity(&full_finetune(model, train_text, &p)?, eval)?;
    Ok(Baseline { zs, ft })
}

/// One owner → data → owner exchange inside `workdir`, with role audits
/// after every hand-over.
pub fn run_pipeline(
    c: &RunConfig,
    workdir: &Path,
    model: &ModelStack,
    importance: &ImportanceArtifact,
    train_text: &[u8],
    eval: &EvalSet,
    baseline: Baseline,
) -> Result<MetricsReport> {
    c.validate()?;
    let ws = Workspace::create(workdir)?;
    let owner = OwnerContext::install(&ws, model, importance)?;
    let data = DataContext::install(&ws, train_text)?;
    audit_roles(&ws)?;
    owner_prepare(&owner, &ws.exchange_dir(), c.n_adapter, c.alpha, c.beta)?;
    audit_roles(&ws)?;
    let out = data_finetune(&data, &ws.exchange_dir(), &tune_params(c), eval)?;
    audit_roles(&ws)?;
    let (_, plug) = owner_plug_in(&owner, &ws.exchange_dir(), c.n_adapter, c.alpha, c.beta, eval)?;
    Ok(MetricsReport::new(
        baseline.zs,
        baseline.ft,
        out.emulator_zs,
        out.emulator_ft,
        plug,
        c.tolerance,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            alphas: c.sweep_alphas.0.clone(),
            betas: c.sweep_betas.0.clone(),
            seeds: c.sweep_seeds.0.clone(),
        }
    }

    /// Cells in `(alpha, beta, seed)` order.
    pub fn cells(&self) -> Vec<(f64, f64, u64)> {
        let mut out = Vec::new();
        for &a in &self.alphas {
            for &b in &self.betas {
                for &s in &self.seeds {
                    out.push((a, b, s));
                }
            }
        }
        out
    }
}

/// One grid cell: its coordinates and either a report or a failure note.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub status: String,
}

pub const SWEEP_HEADER: [&str; 13] = [
    "alpha",
    "beta",
    "seed",
    "zs",
    "ft",
    "emulator_zs",
    "emulator_ft",
    "plug_in",
    "delta",
    "cond1",
    "cond2",
    "cond3",
    "status",
];

impl SweepRow {
    fn same_cell(&self, a: f64, b: f64, s: u64) -> bool {
        self.alpha.to_bits() == a.to_bits() && self.beta.to_bits() == b.to_bits() && self.seed == s
    }

    pub fn record(&self) -> Vec<String> {
        let mut v = vec![self.alpha.to_string(), self.beta.to_string(), self.seed.to_string()];
        match &self.report {
            Some(r) => {
                for x in [r.zs, r.ft, r.emulator_zs, r.emulator_ft, r.plug_in, r.delta] {
                    v.push(x.to_string());
                }
                v.extend(r.conditions.iter().map(bool::to_string));
            }
            None => v.extend(std::iter::repeat_n(String::new(), 9)),
        }
        v.push(self.status.clone());
        v
    }

    pub fn parse(rec: &csv::StringRecord) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed sweep row {rec:?}"));
        if rec.len() != SWEEP_HEADER.len() {
            return Err(bad());
        }
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad());
        let b = |i: usize| rec[i].parse::<bool>().map_err(|_| bad());
        let status = rec[12].to_string();
        let report = if status == "ok" {
            Some(MetricsReport {
                zs: f(3)?,
                ft: f(4)?,
                emulator_zs: f(5)?,
                emulator_ft: f(6)?,
                plug_in: f(7)?,
                delta: f(8)?,
                conditions: [b(9)?, b(10)?, b(11)?],
            })
        } else {
            None
        };
        Ok(Self {
            alpha: f(0)?,
            beta: f(1)?,
            seed: rec[2].parse().map_err(|_| bad())?,
            report,
            status,
        })
    }
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records().map(|rec| SweepRow::parse(&rec?)).collect()
}

fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let tmp = path.with_extension("csv.partial");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        w.write_record(SWEEP_HEADER)?;
        for r in rows {
            w.write_record(r.record())?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Run every cell of the grid, reusing completed cells already in `csv`.
/// Estimation and the baseline are computed once per seed. Failed cells
/// are recorded with their error and retried on the next call.
pub fn run_sweep(
    c: &RunConfig,
    grid: &SweepGrid,
    model: &ModelStack,
    pretrain: &CorpusSplit,
    downstream: &CorpusSplit,
    csv_path: &Path,
    work_root: &Path,
) -> Result<Vec<SweepRow>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    let previous = if csv_path.exists() {
        read_sweep_csv(csv_path)?
    } else {
        Vec::new()
    };
    let eval = EvalSet::from_text(downstream.eval_bytes(), c.context_len)?.limited(c.eval_max_windows);
    let mut per_seed: HashMap<u64, (ImportanceArtifact, Baseline)> = HashMap::new();
    let mut rows: Vec<SweepRow> = Vec::with_capacity(cells.len());
    for &(alpha, beta, seed) in &cells {
        if let Some(done) = previous
            .iter()
            .find(|r| r.same_cell(alpha, beta, seed) && r.status == "ok")
        {
            rows.push(done.clone());
            continue;
        }
        let mut cell_cfg = c.clone();
        cell_cfg.alpha = alpha;
        cell_cfg.beta = beta;
        cell_cfg.seed = seed;
        let outcome = (|| -> Result<MetricsReport> {
            if !per_seed.contains_key(&seed) {
                let est = run_estimation_from_config(&cell_cfg, model, pretrain)?;
                let art = ImportanceArtifact::new(&est, model)?;
                let base = compute_baseline(&cell_cfg, model, downstream.train_bytes(), &eval)?;
                per_seed.insert(seed, (art, base));
            }
            let (art, base) = &per_seed[&seed];
            let dir = work_root.join(format!("a{alpha}_b{beta}_s{seed}"));
            run_pipeline(&cell_cfg, &dir, model, art, downstream.train_bytes(), &eval, *base)
        })();
        let row = match outcome {
            Ok(r) => SweepRow {
                alpha,
                beta,
                seed,
                report: Some(r),
                status: "ok".into(),
            },
            Err(e) => {
                log::warn!("sweep cell alpha={alpha} beta={beta} seed={seed} failed: {e}");
                SweepRow {
                    alpha,
                    beta,
                    seed,
                    report: None,
                    status: format!("error: {e}"),
                }
            }
        };
        rows.push(row);
        let mut snapshot = rows.clone();
        for &(a, b, s) in &cells[rows.len()..] {
            if let Some(p) = previous.iter().find(|r| r.same_cell(a, b, s) && r.status == "ok") {
                snapshot.push(p.clone());
            }
        }
        write_sweep_csv(csv_path, &snapshot)?;
    }
    write_sweep_csv(csv_path, &rows)?;
    Ok(rows)
}
