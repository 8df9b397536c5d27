//! Subcommands of the `offsite` tool. `run` parses arguments, executes one
//! stage and maps failures to exit codes.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};

use offsite::config::RunConfig;
use offsite::corpus::synth::{generate, Domain};
use offsite::corpus::CorpusSplit;
use offsite::emulator::{assemble_emulator, build_plan, EmulatorArtifact, EmulatorPlan, EmulatorSlotKind};
use offsite::layerreplace::{write_log_csv, ImportanceArtifact};
use offsite::model::ModelStack;
use offsite::protocol::{
    compute_baseline, data_finetune, evaluate_perplexity, owner_plug_in, pretrain_model, read_sweep_csv,
    run_estimation_from_config, run_sweep, tune_params, DataContext, EvalSet, MetricsReport, OwnerContext, SweepGrid,
    SweepRow, EMULATOR_FILE, SWEEP_HEADER,
};
use offsite::{CheckpointError, Error};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ARTIFACT: i32 = 3;
pub const EXIT_CONTRACT: i32 = 4;

pub const MODEL_FILE: &str = "model.sotc";
pub const IMPORTANCE_FILE: &str = "importance.sotc";
pub const PLAN_FILE: &str = "plan.txt";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const ESTIMATION_LOG: &str = "estimation_log.csv";
pub const FINETUNE_METRICS: &str = "finetune_metrics.csv";
pub const FINETUNE_LOG: &str = "finetune_log.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::QuotaViolation { .. } => EXIT_CONFIG,
        Error::Checkpoint(_) | Error::FingerprintMismatch { .. } | Error::Io { .. } | Error::Csv(_) => EXIT_ARTIFACT,
        Error::ContractViolation(_) => EXIT_CONTRACT,
        _ => EXIT_OTHER,
    }
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

pub fn command() -> Command {
    let mut root = Command::new("offsite")
        .about("Offsite tuning with importance-guided emulators")
        .subcommand_required(true)
        .args_override_self(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("PATH")
                .help("key = value config file"),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .global(true)
                .value_name("DIR")
                .default_value(".")
                .help("output directory"),
        );
    for (key, help) in RunConfig::FIELDS {
        root = root.arg(
            Arg::new(*key)
                .long(flag_name(key))
                .global(true)
                .value_name("VALUE")
                .help(*help),
        );
    }
    let path = |id: &'static str, help: &'static str| Arg::new(id).long(id).value_name("PATH").help(help);
    let sub = |name: &'static str| Command::new(name).args_override_self(true);
    root.subcommand(sub("pretrain").about("Train the base model on the pretraining corpus"))
        .subcommand(
            sub("estimate")
                .about("Estimate layer importance and train harmonizers")
                .arg(path("model", "model checkpoint (default OUT/model.sotc)")),
        )
        .subcommand(
            sub("emit-emulator")
                .about("Build the emulator for (n_adapter, alpha, beta)")
                .arg(path("model", "model checkpoint (default OUT/model.sotc)"))
                .arg(path("importance", "importance artifact (default OUT/importance.sotc)")),
        )
        .subcommand(
            sub("finetune")
                .about("Tune the emulator's adapter on the downstream corpus")
                .arg(path("exchange", "directory holding emulator.sotc (default OUT)")),
        )
        .subcommand(
            sub("plugin-eval")
                .about("Plug the returned adapter into the model and report all metrics")
                .arg(path("model", "model checkpoint (default OUT/model.sotc)"))
                .arg(path("importance", "importance artifact (default OUT/importance.sotc)"))
                .arg(path("exchange", "directory holding adapter_return.sotc (default OUT)"))
                .arg(path(
                    "metrics",
                    "emulator metrics from finetune (default OUT/finetune_metrics.csv)",
                )),
        )
        .subcommand(sub("sweep").about("Run the alpha x beta x seed grid").arg(path(
            "model",
            "pretrained model; pretrains into OUT/model.sotc when absent",
        )))
        .subcommand(
            sub("make-corpus")
                .about("Write a synthetic corpus")
                .arg(
                    Arg::new("domain")
                        .long("domain")
                        .required(true)
                        .value_parser(["encyclopedia", "procedure"]),
                )
                .arg(
                    Arg::new("bytes")
                        .long("bytes")
                        .required(true)
                        .value_parser(clap::value_parser!(usize)),
                )
                .arg(Arg::new("file").long("file").required(true).value_name("PATH")),
        )
}

/// Defaults, then the config file, then flags. Not validated.
pub fn merge_config(m: &ArgMatches) -> Result<RunConfig, Error> {
    let mut c = match m.get_one::<String>("config") {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for (key, _) in RunConfig::FIELDS {
        if let Some(v) = m.get_one::<String>(key) {
            c.set(key, v)?;
        }
    }
    Ok(c)
}

pub fn resolve_config(m: &ArgMatches) -> Result<RunConfig, Error> {
    let c = merge_config(m)?;
    c.validate()?;
    Ok(c)
}

/// Parse and execute; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    match execute(&matches) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Ctx<'a> {
    c: RunConfig,
    out: PathBuf,
    sub: &'a ArgMatches,
}

impl Ctx<'_> {
    fn path_or(&self, id: &str, default: &str) -> PathBuf {
        match self.sub.get_one::<String>(id) {
            Some(p) => PathBuf::from(p),
            None => self.out.join(default),
        }
    }

    fn dir_or_out(&self, id: &str) -> PathBuf {
        self.sub
            .get_one::<String>(id)
            .map_or_else(|| self.out.clone(), PathBuf::from)
    }

    fn pretrain_corpus(&self) -> Result<CorpusSplit, Error> {
        if self.c.pretrain_path.is_empty() {
            return Err(Error::InvalidArgument("pretrain_path is not set".into()));
        }
        CorpusSplit::load(
            &self.c.pretrain_path,
            self.c.val_split_fraction,
            self.c.eval_split_fraction,
        )
    }

    fn downstream_corpus(&self) -> Result<CorpusSplit, Error> {
        if self.c.downstream_path.is_empty() {
            return Err(Error::InvalidArgument("downstream_path is not set".into()));
        }
        CorpusSplit::load(&self.c.downstream_path, 0.0, self.c.eval_split_fraction)
    }

    fn eval_set(&self, text: &[u8]) -> Result<EvalSet, Error> {
        Ok(EvalSet::from_text(text, self.c.context_len)?.limited(self.c.eval_max_windows))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn ensure_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn execute(m: &ArgMatches) -> Result<i32, Error> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let out = PathBuf::from(m.get_one::<String>("out").expect("has default"));
    if name == "make-corpus" {
        return make_corpus(m, sub);
    }
    let ctx = Ctx {
        c: resolve_config(m)?,
        out,
        sub,
    };
    ensure_dir(&ctx.out)?;
    match name {
        "pretrain" => pretrain(&ctx),
        "estimate" => estimate(&ctx),
        "emit-emulator" => emit_emulator(&ctx),
        "finetune" => finetune(&ctx),
        "plugin-eval" => plugin_eval(&ctx),
        "sweep" => sweep(&ctx),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn make_corpus(m: &ArgMatches, sub: &ArgMatches) -> Result<i32, Error> {
    let c = resolve_config(m)?;
    let domain = match sub.get_one::<String>("domain").map(String::as_str) {
        Some("encyclopedia") => Domain::Encyclopedia,
        _ => Domain::Procedure,
    };
    let n = *sub.get_one::<usize>("bytes").expect("required");
    let path = PathBuf::from(sub.get_one::<String>("file").expect("required"));
    let bytes = generate(domain, n, c.seed);
    fs::write(&path, &bytes).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    println!("wrote {} bytes to {}", bytes.len(), path.display());
    Ok(EXIT_OK)
}

fn pretrain(ctx: &Ctx) -> Result<i32, Error> {
    let corpus = ctx.pretrain_corpus()?;
    let eval = ctx.eval_set(corpus.eval_bytes())?;
    let init = ModelStack::init(ctx.c.model_config(), ctx.c.seed)?;
    let before = evaluate_perplexity(&init, &eval)?;
    let (model, losses) = pretrain_model(&ctx.c, &corpus)?;
    let after = evaluate_perplexity(&model, &eval)?;
    model.save(ctx.out.join(MODEL_FILE))?;
    let mut log = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(log, "{},{l}", i + 1);
    }
    write_text(&ctx.out.join(PRETRAIN_LOG), &log)?;
    println!("pretrained {} steps", losses.len());
    println!("eval perplexity: initial {before:.4}, final {after:.4}");
    println!("wrote {}", ctx.out.join(MODEL_FILE).display());
    Ok(EXIT_OK)
}

fn estimate(ctx: &Ctx) -> Result<i32, Error> {
    let model = ModelStack::load(ctx.path_or("model", MODEL_FILE))?;
    let corpus = ctx.pretrain_corpus()?;
    let result = run_estimation_from_config(&ctx.c, &model, &corpus)?;
    let art = ImportanceArtifact::new(&result, &model)?;
    art.save(ctx.out.join(IMPORTANCE_FILE))?;
    write_log_csv(ctx.out.join(ESTIMATION_LOG), &result.log)?;
    println!("importance after {} updates:", art.table.step_count);
    for (j, g) in art.table.groups.iter().enumerate() {
        let scores: Vec<String> = g.clone().map(|i| format!("{i}:{:+.4}", art.table.scores[i])).collect();
        println!("  group {j}: {}", scores.join("  "));
    }
    println!("wrote {}", ctx.out.join(IMPORTANCE_FILE).display());
    Ok(EXIT_OK)
}

/// Slot table of an emulator with the importance score of each layer.
pub fn plan_summary(emu: &EmulatorArtifact, scores: &[f64]) -> String {
    let p: &EmulatorPlan = &emu.plan;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "plan: n_adapter={} alpha={} beta={} k={} kappa={:?}",
        p.n_adapter, p.alpha, p.beta, p.k, p.kappa
    );
    let _ = writeln!(s, "slot  group  score     kind");
    for (i, kind) in emu.kinds.iter().enumerate() {
        let g = p.groups.iter().position(|g| g.contains(&i)).unwrap_or(0);
        let name = match kind {
            EmulatorSlotKind::Adapter => "adapter",
            EmulatorSlotKind::Harmonizer => "harmonizer",
            EmulatorSlotKind::Compressed => "compressed",
        };
        let _ = writeln!(s, "{i:>4}  {g:>5}  {:+.4}  {name}", scores[i]);
    }
    let _ = writeln!(
        s,
        "adapters {}, harmonizers {}, compressed {}",
        emu.count(EmulatorSlotKind::Adapter),
        emu.count(EmulatorSlotKind::Harmonizer),
        emu.count(EmulatorSlotKind::Compressed)
    );
    s
}

fn emit_emulator(ctx: &Ctx) -> Result<i32, Error> {
    let model = ModelStack::load(ctx.path_or("model", MODEL_FILE))?;
    let importance = ImportanceArtifact::load(ctx.path_or("importance", IMPORTANCE_FILE))?;
    let plan = build_plan(&importance.table, ctx.c.n_adapter, ctx.c.alpha, ctx.c.beta)?;
    let emu = assemble_emulator(&model, &importance, &plan)?;
    emu.save(ctx.out.join(EMULATOR_FILE))?;
    let summary = plan_summary(&emu, &importance.table.scores);
    write_text(&ctx.out.join(PLAN_FILE), &summary)?;
    print!("{summary}");
    println!("wrote {}", ctx.out.join(EMULATOR_FILE).display());
    Ok(EXIT_OK)
}

fn finetune(ctx: &Ctx) -> Result<i32, Error> {
    let exchange = ctx.dir_or_out("exchange");
    let corpus = ctx.downstream_corpus()?;
    let eval = ctx.eval_set(corpus.eval_bytes())?;
    // The data owner trains on its own copy of the training split.
    let data_dir = ctx.out.join("data");
    ensure_dir(&data_dir)?;
    let corpus_path = data_dir.join("downstream_train.txt");
    fs::write(&corpus_path, corpus.train_bytes()).map_err(|e| Error::Io {
        path: corpus_path.clone(),
        source: e,
    })?;
    let outcome = data_finetune(&DataContext { corpus_path }, &exchange, &tune_params(&ctx.c), &eval)?;
    write_text(
        &ctx.out.join(FINETUNE_METRICS),
        &format!(
            "emulator_zs,emulator_ft\n{},{}\n",
            outcome.emulator_zs, outcome.emulator_ft
        ),
    )?;
    let mut log = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        let _ = writeln!(log, "{},{l}", i + 1);
    }
    write_text(&ctx.out.join(FINETUNE_LOG), &log)?;
    println!("emulator zero-shot perplexity {:.4}", outcome.emulator_zs);
    println!("emulator fine-tuned perplexity {:.4}", outcome.emulator_ft);
    println!("wrote {}", outcome.return_path.display());
    Ok(EXIT_OK)
}

/// Read the two numbers written by `finetune`.
pub fn read_finetune_metrics(path: &Path) -> Result<(f64, f64), Error> {
    let mut r = csv::Reader::from_path(path)?;
    let rec = r
        .records()
        .next()
        .ok_or_else(|| Error::Checkpoint(CheckpointError::Metadata(format!("{} has no data row", path.display()))))??;
    let f = |i: usize| {
        rec.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| {
            Error::Checkpoint(CheckpointError::Metadata(format!(
                "bad metrics row in {}",
                path.display()
            )))
        })
    };
    Ok((f(0)?, f(1)?))
}

fn plugin_eval(ctx: &Ctx) -> Result<i32, Error> {
    let owner = OwnerContext {
        model_path: ctx.path_or("model", MODEL_FILE),
        importance_path: ctx.path_or("importance", IMPORTANCE_FILE),
    };
    let exchange = ctx.dir_or_out("exchange");
    let (emulator_zs, emulator_ft) = read_finetune_metrics(&ctx.path_or("metrics", FINETUNE_METRICS))?;
    let corpus = ctx.downstream_corpus()?;
    let eval = ctx.eval_set(corpus.eval_bytes())?;
    let c = &ctx.c;
    let (_, plug) = owner_plug_in(&owner, &exchange, c.n_adapter, c.alpha, c.beta, &eval)?;
    let model = ModelStack::load(&owner.model_path)?;
    let base = compute_baseline(c, &model, corpus.train_bytes(), &eval)?;
    let report = MetricsReport::new(base.zs, base.ft, emulator_zs, emulator_ft, plug, c.tolerance);
    print!("{}", report_table(&report));
    let row = SweepRow {
        alpha: c.alpha,
        beta: c.beta,
        seed: c.seed,
        report: Some(report.clone()),
        status: "ok".into(),
    };
    let path = ctx.out.join(REPORT_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(SWEEP_HEADER)?;
    w.write_record(row.record())?;
    w.flush().map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    println!("{}", row.record().join(","));
    Ok(EXIT_OK)
}

pub fn report_table(r: &MetricsReport) -> String {
    let mut s = String::new();
    for (name, v) in [
        ("zero-shot", r.zs),
        ("fine-tuned", r.ft),
        ("emulator zero-shot", r.emulator_zs),
        ("emulator fine-tuned", r.emulator_ft),
        ("plug-in", r.plug_in),
        ("delta", r.delta),
    ] {
        let _ = writeln!(s, "{name:<20} {v:>10.4}");
    }
    let labels = [
        "plug-in < zero-shot",
        "plug-in < emulator fine-tuned",
        "plug-in ~ fine-tuned",
    ];
    for (l, ok) in labels.iter().zip(r.conditions) {
        let _ = writeln!(s, "{l:<30} {}", if ok { "yes" } else { "no" });
    }
    let _ = writeln!(s, "verdict: {}", if r.verdict() { "pass" } else { "fail" });
    s
}

/// Read a single-row report written by `plugin-eval`.
pub fn read_report(path: &Path) -> Result<MetricsReport, Error> {
    read_sweep_csv(path)?
        .into_iter()
        .next()
        .and_then(|r| r.report)
        .ok_or_else(|| {
            Error::Checkpoint(CheckpointError::Metadata(format!(
                "{} has no report row",
                path.display()
            )))
        })
}

fn sweep(ctx: &Ctx) -> Result<i32, Error> {
    let pretrain = ctx.pretrain_corpus()?;
    let downstream = ctx.downstream_corpus()?;
    let model = match ctx.sub.get_one::<String>("model") {
        Some(p) => ModelStack::load(p)?,
        None => {
            let (m, _) = pretrain_model(&ctx.c, &pretrain)?;
            m.save(ctx.out.join(MODEL_FILE))?;
            m
        }
    };
    let grid = SweepGrid::from_config(&ctx.c);
    let csv_path = ctx.out.join(SWEEP_FILE);
    let rows = run_sweep(
        &ctx.c,
        &grid,
        &model,
        &pretrain,
        &downstream,
        &csv_path,
        &ctx.out.join("sweep_work"),
    )?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    println!("{} cells, {failed} failed; wrote {}", rows.len(), csv_path.display());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_OTHER })
}
