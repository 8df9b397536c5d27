//! Role-separated directories and the three exchange steps.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::TuneMode;
use crate::corpus::WindowSampler;
use crate::emulator::{
    assemble_emulator, build_plan, plug_in, AdapterReturn, EmulatorArtifact, EmulatorPlan, EmulatorSlotKind,
};
use crate::error::{Error, Result};
use crate::layerreplace::ImportanceArtifact;
use crate::model::checkpoint::peek_kind;
use crate::model::{train_step, AdamW, ModelStack, Network, TrainFilter};
use crate::numerics::RngStream;

use super::pipeline::{TuneParams, STREAM_LORA_INIT, STREAM_TUNE_BATCHES};
use super::{evaluate_perplexity, EvalSet};

pub const EMULATOR_FILE: &str = "emulator.sotc";
pub const ADAPTER_FILE: &str = "adapter_return.sotc";
const MODEL_FILE: &str = "model.sotc";
const IMPORTANCE_FILE: &str = "importance.sotc";
const DOWNSTREAM_FILE: &str = "downstream_train.txt";

/// `owner/`, `data/` and `exchange/` under one root.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let ws = Self { root: root.into() };
        for d in [ws.owner_dir(), ws.data_dir(), ws.exchange_dir()] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(ws)
    }

    pub fn owner_dir(&self) -> PathBuf {
        self.root.join("owner")
    }
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn exchange_dir(&self) -> PathBuf {
        self.root.join("exchange")
    }
}

/// What the model owner holds: the model and its importance artifact.
#[derive(Clone, Debug)]
pub struct OwnerContext {
    pub model_path: PathBuf,
    pub importance_path: PathBuf,
}

impl OwnerContext {
    pub fn install(ws: &Workspace, model: &ModelStack, importance: &ImportanceArtifact) -> Result<Self> {
        let ctx = Self {
            model_path: ws.owner_dir().join(MODEL_FILE),
            importance_path: ws.owner_dir().join(IMPORTANCE_FILE),
        };
        model.save(&ctx.model_path)?;
        importance.save(&ctx.importance_path)?;
        Ok(ctx)
    }

    fn plan(&self, importance: &ImportanceArtifact, n_adapter: usize, alpha: f64, beta: f64) -> Result<EmulatorPlan> {
        build_plan(&importance.table, n_adapter, alpha, beta)
    }
}

/// What the data owner holds: its private training text.
#[derive(Clone, Debug)]
pub struct DataContext {
    pub corpus_path: PathBuf,
}

impl DataContext {
    pub fn install(ws: &Workspace, train_text: &[u8]) -> Result<Self> {
        let corpus_path = ws.data_dir().join(DOWNSTREAM_FILE);
        fs::write(&corpus_path, train_text).map_err(|e| Error::io(&corpus_path, e))?;
        Ok(Self { corpus_path })
    }
}

/// Build the emulator for `(n_adapter, alpha, beta)` and place it in the
/// exchange directory.
pub fn owner_prepare(
    owner: &OwnerContext,
    exchange: &Path,
    n_adapter: usize,
    alpha: f64,
    beta: f64,
) -> Result<PathBuf> {
    let model = ModelStack::load(&owner.model_path)?;
    let importance = ImportanceArtifact::load(&owner.importance_path)?;
    let plan = owner.plan(&importance, n_adapter, alpha, beta)?;
    let emu = assemble_emulator(&model, &importance, &plan)?;
    let path = exchange.join(EMULATOR_FILE);
    emu.save(&path)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataOutcome {
    pub emulator_zs: f64,
    pub emulator_ft: f64,
    pub losses: Vec<f64>,
    pub return_path: PathBuf,
}

/// CRC over every tensor the data owner must not change.
fn frozen_digest(emu: &EmulatorArtifact, mode: TuneMode) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for (name, t) in emu.named_tensors() {
        let frozen = match crate::model::stack::parse_slot_param(&name) {
            Some((i, tensor)) => {
                emu.kinds[i] != EmulatorSlotKind::Adapter || (mode == TuneMode::Lora && !tensor.starts_with("lora_"))
            }
            None => true,
        };
        if frozen {
            h.update(name.as_bytes());
            for x in t.data() {
                h.update(&x.to_le_bytes());
            }
        }
    }
    h.finalize()
}

/// Tune the emulator's adapter slots on the private corpus, write the
/// returned adapter and report emulator perplexities before and after.
pub fn data_finetune(data: &DataContext, exchange: &Path, params: &TuneParams, eval: &EvalSet) -> Result<DataOutcome> {
    let mut emu = EmulatorArtifact::load(exchange.join(EMULATOR_FILE))?;
    let text = fs::read(&data.corpus_path).map_err(|e| Error::io(&data.corpus_path, e))?;
    let sampler = WindowSampler::new(&text, params.seq_len + 1)?;
    let emulator_zs = evaluate_perplexity(&emu, eval)?;
    let filter = match params.mode {
        TuneMode::Full => TrainFilter::Layers(emu.plan.phi_adapter.iter().copied().collect()),
        TuneMode::Lora => {
            let mut rng = RngStream::new(params.seed, STREAM_LORA_INIT);
            emu.attach_lora(params.lora_rank, &mut rng)?;
            TrainFilter::Lora
        }
    };
    let before = frozen_digest(&emu, params.mode);
    let mut opt = AdamW::default().with_clip(params.grad_clip);
    let mut rng = RngStream::new(params.seed, STREAM_TUNE_BATCHES);
    let mut losses = Vec::with_capacity(params.steps);
    for _ in 0..params.steps {
        let batch = sampler.batch(params.batch_size, &mut rng);
        losses.push(train_step(&mut emu, &batch, &filter, &mut opt, params.lr)?);
    }
    if frozen_digest(&emu, params.mode) != before {
        return Err(Error::ContractViolation(
            "frozen emulator slots changed during tuning".into(),
        ));
    }
    let emulator_ft = evaluate_perplexity(&emu, eval)?;
    let ret = AdapterReturn::from_emulator(&emu, params.mode)?;
    let return_path = exchange.join(ADAPTER_FILE);
    ret.save(&return_path)?;
    Ok(DataOutcome {
        emulator_zs,
        emulator_ft,
        losses,
        return_path,
    })
}

/// Plug the returned adapter into the full model and evaluate it.
pub fn owner_plug_in(
    owner: &OwnerContext,
    exchange: &Path,
    n_adapter: usize,
    alpha: f64,
    beta: f64,
    eval: &EvalSet,
) -> Result<(ModelStack, f64)> {
    let model = ModelStack::load(&owner.model_path)?;
    let importance = ImportanceArtifact::load(&owner.importance_path)?;
    let ret = AdapterReturn::load(exchange.join(ADAPTER_FILE))?;
    let fp = model.fingerprint()?;
    if ret.source_fingerprint != fp {
        return Err(Error::FingerprintMismatch {
            expected: fp,
            found: ret.source_fingerprint,
        });
    }
    let plan = owner.plan(&importance, n_adapter, alpha, beta)?;
    let plugged = plug_in(&model, &ret, &plan)?;
    let ppl = evaluate_perplexity(&plugged, eval)?;
    Ok((plugged, ppl))
}

fn files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        out.push(e.path());
    }
    out.sort();
    Ok(out)
}

/// Check the directory layout against the role boundary: the data side
/// never sees owner artifacts, the owner never sees the private corpus,
/// and only the two permitted files sit in the exchange.
pub fn audit_roles(ws: &Workspace) -> Result<()> {
    let violation = |m: String| Err(Error::ContractViolation(m));
    for p in files(&ws.data_dir())? {
        if let Some(kind) = peek_kind(&p) {
            return violation(format!("data side holds a `{kind}` artifact at {}", p.display()));
        }
    }
    for p in files(&ws.exchange_dir())? {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let kind = peek_kind(&p);
        let ok = matches!(
            (name, kind.as_deref()),
            (EMULATOR_FILE, Some(crate::emulator::EMULATOR_KIND)) | (ADAPTER_FILE, Some(crate::emulator::ADAPTER_KIND))
        );
        if !ok {
            return violation(format!("unexpected exchange entry {}", p.display()));
        }
    }
    for p in files(&ws.owner_dir())? {
        let kind = peek_kind(&p);
        if !matches!(
            kind.as_deref(),
            Some(crate::model::serialize::MODEL_KIND | crate::layerreplace::IMPORTANCE_KIND)
        ) {
            return violation(format!("owner side holds a non-owner file {}", p.display()));
        }
    }
    Ok(())
}
