//! Alternating harmonizer training and importance updates.

use std::path::Path;

use crate::config::RunConfig;
use crate::corpus::WindowSampler;
use crate::error::{CheckpointError, Error, Result};
use crate::model::layer::Harmonizer;
use crate::model::{batch_nll, train_step, AdamW, Checkpoint, ModelStack, TrainFilter};
use crate::numerics::{RngStream, Tensor2D};

use super::{apply_reward, compose_candidate, compose_candidate_mut, rewards, CandidateSample, ImportanceTable};

pub const IMPORTANCE_KIND: &str = "importance";

/// Stream ids derived from the run seed.
const STREAM_HARMONIZER_INIT: u64 = 2;
const STREAM_DL_SAMPLING: u64 = 3;
const STREAM_TRAIN_BATCHES: u64 = 4;
const STREAM_VAL_BATCHES: u64 = 5;
const STREAM_RL_BASE: u64 = 1 << 20;

/// One harmonizer per layer plus their shared optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct HarmonizerSet {
    pub harmonizers: Vec<Harmonizer>,
    pub opt: AdamW,
}

impl HarmonizerSet {
    pub fn init(n: usize, d_model: usize, rank: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, STREAM_HARMONIZER_INIT);
        Self {
            harmonizers: (0..n).map(|_| Harmonizer::init(d_model, rank, &mut rng)).collect(),
            opt: AdamW::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimationSchedule {
    pub total_steps: usize,
    pub rl_interval: usize,
    pub n_candidates: usize,
    pub n_groups: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub harmonizer_rank: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl EstimationSchedule {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            total_steps: c.est_total_steps,
            rl_interval: c.rl_interval,
            n_candidates: c.n_candidates,
            n_groups: c.n_groups,
            lr: c.est_lr,
            batch_size: c.batch_size,
            harmonizer_rank: c.harmonizer_rank,
            grad_clip: (c.grad_clip > 0.0).then_some(c.grad_clip),
            seed: c.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Dl,
    Rl,
}

/// One line of the estimation log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub kind: StepKind,
    /// Training loss of the sampled candidate (harmonizer steps only).
    pub loss: Option<f64>,
    pub candidate_losses: Vec<f64>,
    /// Empty when the update was skipped.
    pub rewards: Vec<Option<f64>>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlOutcome {
    pub samples: Vec<CandidateSample>,
    pub losses: Vec<f64>,
    /// `None` when fewer than two candidates had finite loss.
    pub rewards: Option<Vec<Option<f64>>>,
}

/// Sample one candidate and take one optimiser step on its harmonizers.
pub fn dl_step(
    model: &ModelStack,
    hs: &mut HarmonizerSet,
    table: &ImportanceTable,
    batch: &[Vec<usize>],
    rng: &mut RngStream,
    lr: f64,
) -> Result<(CandidateSample, f64)> {
    let sample = CandidateSample::draw(table, rng)?;
    let HarmonizerSet { harmonizers, opt } = hs;
    let mut cand = compose_candidate_mut(model, harmonizers, &sample.keep)?;
    let loss = train_step(&mut cand, batch, &TrainFilter::Harmonizers, opt, lr)?;
    Ok((sample, loss))
}

/// Evaluate one candidate per stream on a shared batch and update scores
/// with each candidate's reward in stream order.
pub fn rl_step(
    model: &ModelStack,
    hs: &HarmonizerSet,
    table: &mut ImportanceTable,
    val_batch: &[Vec<usize>],
    rngs: &mut [RngStream],
) -> Result<RlOutcome> {
    if rngs.len() < 2 {
        return Err(Error::invalid("an importance update needs at least two candidates"));
    }
    for (a, ra) in rngs.iter().enumerate() {
        if rngs[..a]
            .iter()
            .any(|rb| rb.seed() == ra.seed() && rb.stream_id() == ra.stream_id())
        {
            return Err(Error::invalid("candidate streams must be distinct"));
        }
    }
    let mut samples = Vec::with_capacity(rngs.len());
    let mut losses = Vec::with_capacity(rngs.len());
    for rng in rngs.iter_mut() {
        let sample = CandidateSample::draw(table, rng)?;
        let cand = compose_candidate(model, &hs.harmonizers, &sample.keep)?;
        let loss = match batch_nll(&cand, val_batch) {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        samples.push(sample);
        losses.push(loss);
    }
    let r = rewards(&losses);
    match &r {
        Some(r) => {
            for (sample, reward) in samples.iter().zip(r) {
                if let Some(reward) = reward {
                    apply_reward(&mut table.scores, &sample.keep, *reward);
                }
            }
            table.step_count += 1;
        }
        None => log::warn!("importance update skipped: fewer than two finite candidate losses"),
    }
    Ok(RlOutcome {
        samples,
        losses,
        rewards: r,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimationResult {
    pub table: ImportanceTable,
    pub harmonizers: HarmonizerSet,
    pub log: Vec<LogRow>,
}

/// `total_steps` harmonizer steps with an importance update after every
/// `rl_interval` of them. The model is only read.
pub fn run_estimation(
    model: &ModelStack,
    train: &WindowSampler,
    val: &WindowSampler,
    sched: &EstimationSchedule,
) -> Result<EstimationResult> {
    if sched.rl_interval == 0 || sched.n_candidates < 2 || sched.batch_size == 0 {
        return Err(Error::invalid(format!("invalid estimation schedule {sched:?}")));
    }
    let n = model.slots.len();
    let mut table = ImportanceTable::new(n, sched.n_groups)?;
    let mut hs = HarmonizerSet::init(n, model.config.d_model, sched.harmonizer_rank, sched.seed);
    hs.opt.clip_norm = sched.grad_clip;
    let mut dl_rng = RngStream::new(sched.seed, STREAM_DL_SAMPLING);
    let mut train_rng = RngStream::new(sched.seed, STREAM_TRAIN_BATCHES);
    let mut val_rng = RngStream::new(sched.seed, STREAM_VAL_BATCHES);
    let mut log = Vec::new();
    let mut rl_count = 0u64;
    for step in 1..=sched.total_steps {
        let batch = train.batch(sched.batch_size, &mut train_rng);
        let (_, loss) = dl_step(model, &mut hs, &table, &batch, &mut dl_rng, sched.lr)?;
        log.push(LogRow {
            step,
            kind: StepKind::Dl,
            loss: Some(loss),
            candidate_losses: Vec::new(),
            rewards: Vec::new(),
            scores: Vec::new(),
        });
        if step % sched.rl_interval == 0 {
            let val_batch = val.batch(sched.batch_size, &mut val_rng);
            let base = STREAM_RL_BASE + rl_count * sched.n_candidates as u64;
            let mut rngs: Vec<RngStream> = (0..sched.n_candidates as u64)
                .map(|j| RngStream::new(sched.seed, base + j))
                .collect();
            let out = rl_step(model, &hs, &mut table, &val_batch, &mut rngs)?;
            rl_count += 1;
            log.push(LogRow {
                step,
                kind: StepKind::Rl,
                loss: None,
                candidate_losses: out.losses,
                rewards: out.rewards.unwrap_or_default(),
                scores: table.scores.clone(),
            });
            log::debug!("step {step}: scores {:?}", table.scores);
        }
    }
    Ok(EstimationResult {
        table,
        harmonizers: hs,
        log,
    })
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(";")
}

/// CSV log: `step,kind,loss,candidate_losses,rewards,scores`, lists `;`-joined.
pub fn write_log_csv(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "kind", "loss", "candidate_losses", "rewards", "scores"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            match r.kind {
                StepKind::Dl => "dl".into(),
                StepKind::Rl => "rl".into(),
            },
            r.loss.map(|l| l.to_string()).unwrap_or_default(),
            join(&r.candidate_losses, f64::to_string),
            join(&r.rewards, |x| {
                x.map(|v| v.to_string()).unwrap_or_else(|| "excluded".into())
            }),
            join(&r.scores, f64::to_string),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Scores, grouping and trained harmonizers, tied to the source model.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceArtifact {
    pub table: ImportanceTable,
    pub harmonizers: Vec<Harmonizer>,
    pub source_fingerprint: u32,
}

fn format_groups(groups: &[std::ops::Range<usize>]) -> String {
    groups
        .iter()
        .map(|g| format!("{}..{}", g.start, g.end))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_groups(s: &str) -> Result<Vec<std::ops::Range<usize>>, CheckpointError> {
    let bad = || CheckpointError::Metadata(format!("bad group list `{s}`"));
    s.split(',')
        .map(|g| {
            let (a, b) = g.split_once("..").ok_or_else(bad)?;
            Ok(a.parse().map_err(|_| bad())?..b.parse().map_err(|_| bad())?)
        })
        .collect()
}

impl ImportanceArtifact {
    pub fn new(result: &EstimationResult, source: &ModelStack) -> Result<Self> {
        Ok(Self {
            table: result.table.clone(),
            harmonizers: result.harmonizers.harmonizers.clone(),
            source_fingerprint: source.fingerprint()?,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(IMPORTANCE_KIND);
        ck.set("n_layers", self.table.n_layers());
        ck.set("groups", format_groups(&self.table.groups));
        ck.set("step_count", self.table.step_count);
        ck.set("source_fingerprint", format!("{:08x}", self.source_fingerprint));
        ck.push(
            "scores",
            Tensor2D::from_vec(1, self.table.n_layers(), self.table.scores.clone()),
        );
        for (i, h) in self.harmonizers.iter().enumerate() {
            ck.push(format!("harmonizers.{i}.w_down"), h.w_down.clone());
            ck.push(format!("harmonizers.{i}.w_up"), h.w_up.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(IMPORTANCE_KIND)?;
        let n: usize = ck.parse("n_layers")?;
        let groups = parse_groups(ck.get("groups")?)?;
        let covered: Vec<usize> = groups.iter().flat_map(|g| g.clone()).collect();
        if covered != (0..n).collect::<Vec<_>>() {
            return Err(CheckpointError::Metadata("groups do not partition the layers".into()).into());
        }
        let scores = ck.tensor("scores")?;
        if scores.shape() != (1, n) {
            return Err(CheckpointError::Metadata("scores tensor has the wrong shape".into()).into());
        }
        let fp = u32::from_str_radix(ck.get("source_fingerprint")?, 16)
            .map_err(|_| CheckpointError::Metadata("bad source fingerprint".into()))?;
        let harmonizers = (0..n)
            .map(|i| {
                Ok(Harmonizer {
                    w_down: ck.tensor(&format!("harmonizers.{i}.w_down"))?.clone(),
                    w_up: ck.tensor(&format!("harmonizers.{i}.w_up"))?.clone(),
                })
            })
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        Ok(Self {
            table: ImportanceTable {
                scores: scores.data().to_vec(),
                groups,
                step_count: ck.parse("step_count")?,
            },
            harmonizers,
            source_fingerprint: fp,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
