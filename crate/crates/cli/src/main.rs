//! `prodapt` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use prodapt_core::bench::{bench, BenchInputs, BenchOptions};
use prodapt_core::checkpoint::{self, Header};
use prodapt_core::config::Settings;
use prodapt_core::corpus::{self, labels_in_order, tokenize, CorpusRecord};
use prodapt_core::cv::{derive_seed, run_cv, CvError, CvOptions, CvReport, System};
use prodapt_core::error::{EngineError, TrainError};
use prodapt_core::fused::{assemble_from_manifest, FusedModel, LossMap, Manifest};
use prodapt_core::gpt2::Backbone;
use prodapt_core::svm::{fit_texts, LinearOvrModel, SvmConfig};
use prodapt_core::synth::{gen_synthetic, random_sources, LengthRange, SynthConfig};
use prodapt_core::training::{train_branch, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "prodapt", version, about = "Native language identification with per-L1 adapter branches")]
struct Cli {
    /// Global random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Flat key = value file overriding model, adapter, training and SVM settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-source corpus.
    GenSynth(GenSynthArgs),
    /// Train one branch per label (and optionally the SVM baseline).
    Train(TrainArgs),
    /// Write a bundle manifest binding a backbone to branch files.
    Assemble(AssembleArgs),
    /// Classify documents with an assembled bundle.
    Classify(ClassifyArgs),
    /// k-fold cross-validation.
    EvalCv(EvalCvArgs),
    /// Storage, parameter and latency benchmark.
    Bench(BenchArgs),
    /// Show what a checkpoint, SVM model or manifest holds.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    sources: usize,
    #[arg(long, default_value_t = 200)]
    docs_per_source: usize,
    /// Dirichlet concentration of the transition rows.
    #[arg(long, default_value_t = 0.3)]
    concentration: f64,
    #[arg(long, default_value_t = 60)]
    min_len: usize,
    #[arg(long, default_value_t = 120)]
    max_len: usize,
    /// Minimum pairwise total-variation distance between sources.
    #[arg(long, default_value_t = 0.3)]
    distinct_floor: f64,
    /// Also write the source definitions as JSON.
    #[arg(long)]
    sources_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Existing backbone checkpoint; a fresh one is initialized from the seed otherwise.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Train only these labels (comma separated).
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    /// Train branches concurrently.
    #[arg(long)]
    concurrent: bool,
    /// Also train the unigram SVM on the whole corpus.
    #[arg(long)]
    svm: bool,
}

#[derive(Args, Debug)]
struct AssembleArgs {
    #[arg(long)]
    backbone: PathBuf,
    /// `LABEL=PATH`; repeatable. Labels are read from the files when omitted.
    #[arg(long = "branch")]
    branches: Vec<String>,
    /// Add every `*.best` branch file found in this directory, sorted by name.
    #[arg(long)]
    from_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Fused,
    Sequential,
    Reload,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// A single document.
    #[arg(long, conflicts_with = "corpus")]
    text: Option<String>,
    /// Line-delimited corpus; gold labels are used for accuracy when present.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Fused)]
    mode: Mode,
    /// Write one JSON record per document here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SystemArg {
    Prodapt,
    Svm,
    Both,
}

#[derive(Args, Debug)]
struct EvalCvArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = SystemArg::Both)]
    system: SystemArg,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Write fold, prediction and summary records here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Documents taken from the start of the corpus.
    #[arg(long, default_value_t = 4)]
    docs: usize,
    #[arg(long)]
    svm: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    repetitions: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Checkpoint, SVM model or manifest. Without a path, prints the
    /// analytic accounting for the active configuration.
    path: Option<PathBuf>,
}

/// Bad flags, bad config file or contradictory arguments.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric_train = |e: &TrainError| matches!(e, TrainError::NonFinite { .. });
    let numeric_engine = |e: &EngineError| matches!(e, EngineError::NonFinite { .. });
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            if numeric_train(e) {
                return 3;
            }
        }
        if let Some(e) = cause.downcast_ref::<EngineError>() {
            if numeric_engine(e) {
                return 3;
            }
        }
        if let Some(e) = cause.downcast_ref::<CvError>() {
            match e {
                CvError::Train(t) if numeric_train(t) => return 3,
                CvError::Engine(x) if numeric_engine(x) => return 3,
                _ => {}
            }
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let settings = match &cli.config {
        Some(p) => Settings::load(p).map_err(|e| {
            let chain: Vec<String> = anyhow::Error::from(e).chain().map(ToString::to_string).collect();
            usage(format!("config {}: {}", p.display(), chain.join(": ")))
        })?,
        None => Settings::default(),
    };
    let ctx = Ctx {
        seed: cli.seed,
        settings,
    };
    match cli.command {
        Command::GenSynth(a) => gen_synth(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Assemble(a) => assemble(a),
        Command::Classify(a) => classify(a),
        Command::EvalCv(a) => eval_cv(&ctx, a),
        Command::Bench(a) => run_bench(a),
        Command::Inspect(a) => inspect(&ctx, a),
    }
}

struct Ctx {
    seed: u64,
    settings: Settings,
}

impl Ctx {
    fn train_config(&self, label_index: usize) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.settings.train.seed ^ self.seed, usize::MAX, label_index),
            ..self.settings.train.clone()
        }
    }

    fn svm_config(&self) -> SvmConfig {
        SvmConfig {
            seed: self.seed,
            ..self.settings.svm.clone()
        }
    }

    fn backbone(&self, path: Option<&Path>) -> Result<Backbone> {
        match path {
            Some(p) => {
                let b = checkpoint::load_backbone(p).with_context(|| format!("loading backbone {}", p.display()))?;
                if b.config() != &self.settings.model {
                    eprintln!(
                        "note: backbone {} uses [{}]; the model section of the config is ignored",
                        p.display(),
                        b.config()
                    );
                }
                Ok(b)
            }
            None => Ok(Backbone::init(self.settings.model, self.seed)?),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let ing = corpus::ingest(path, None).with_context(|| format!("reading corpus {}", path.display()))?;
    for r in &ing.rejects {
        eprintln!("{}:{}: rejected: {}", path.display(), r.line, r.reason);
    }
    Ok(ing.records)
}

fn gen_synth(ctx: &Ctx, a: GenSynthArgs) -> Result<()> {
    if a.min_len == 0 || a.min_len > a.max_len {
        return Err(usage("need 0 < --min-len <= --max-len"));
    }
    let cfg = SynthConfig {
        sources: a.sources,
        docs_per_source: a.docs_per_source,
        concentration: a.concentration,
        length: LengthRange {
            min: a.min_len,
            max: a.max_len,
        },
        distinct_floor: a.distinct_floor,
        ..SynthConfig::default()
    };
    let sources = random_sources(&cfg, ctx.seed)?;
    let records = gen_synthetic(&sources, cfg.docs_per_source, cfg.distinct_floor, ctx.seed.wrapping_add(1))?;
    corpus::write_corpus(&a.out, &records)?;
    if let Some(p) = &a.sources_out {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &sources)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    println!(
        "wrote {} records ({} sources x {}) to {}",
        records.len(),
        sources.len(),
        cfg.docs_per_source,
        a.out.display()
    );
    Ok(())
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let records = load_corpus(&a.corpus)?;
    let all_labels = labels_in_order(&records);
    let labels: Vec<String> = if a.labels.is_empty() {
        all_labels.clone()
    } else {
        for l in &a.labels {
            if !all_labels.contains(l) {
                return Err(usage(format!("label {l:?} does not occur in the corpus")));
            }
        }
        a.labels.clone()
    };
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let backbone = ctx.backbone(a.backbone.as_deref())?;
    let backbone_path = match &a.backbone {
        Some(p) => p.clone(),
        None => {
            let p = a.out_dir.join("backbone.pdpt");
            checkpoint::save_backbone(&backbone, &p)?;
            p
        }
    };
    let adapter = ctx.settings.adapter;
    let job = |label: &String| -> Result<(String, f32, usize, bool)> {
        let li = all_labels.iter().position(|l| l == label).expect("label checked");
        let docs: Vec<_> = records
            .iter()
            .filter(|r| &r.label == label)
            .map(|r| tokenize(&r.text))
            .collect();
        let t0 = Instant::now();
        let (branch, report) = train_branch(&backbone, &docs, label, adapter, &ctx.train_config(li))
            .with_context(|| format!("training branch {label:?}"))?;
        let path = a.out_dir.join(format!("{label}.best"));
        branch.save(&path)?;
        let mut w = create(&a.out_dir.join(format!("{label}.train.jsonl")))?;
        report.write_jsonl(&mut w)?;
        w.flush()?;
        eprintln!(
            "{label}: {} epochs, best val loss {:.4} at epoch {} ({:.1}s)",
            report.epochs.len(),
            report.best_val_loss,
            report.best_epoch,
            t0.elapsed().as_secs_f64()
        );
        Ok((label.clone(), report.best_val_loss, report.best_epoch, report.stopped_early))
    };
    let results: Vec<_> = if a.concurrent {
        labels.par_iter().map(job).collect::<Result<_>>()?
    } else {
        labels.iter().map(job).collect::<Result<_>>()?
    };
    println!("backbone: {}", backbone_path.display());
    println!("{:<12} {:>14} {:>10} {:>8}", "label", "best val loss", "best epoch", "early");
    for (label, loss, epoch, early) in results {
        println!("{label:<12} {loss:>14.4} {epoch:>10} {early:>8}");
    }
    if a.svm {
        let pairs: Vec<(&str, &str)> = records.iter().map(|r| (r.text.as_str(), r.label.as_str())).collect();
        let model = fit_texts(&pairs, &ctx.svm_config())?;
        let p = a.out_dir.join("svm.pdpt");
        model.save(&p)?;
        println!("svm: {} ({} features)", p.display(), model.dim());
    }
    Ok(())
}

/// `target` relative to `base` when it lies below it.
fn assemble(a: AssembleArgs) -> Result<()> {
    let backbone = checkpoint::load_backbone(&a.backbone)
        .with_context(|| format!("loading backbone {}", a.backbone.display()))?;
    let mut entries: Vec<(String, PathBuf)> = Vec::new();
    for spec in &a.branches {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (Some(l.to_string()), PathBuf::from(p)),
            None => (None, PathBuf::from(spec)),
        };
        let b = checkpoint::load_branch(&path, &backbone).with_context(|| format!("loading {}", path.display()))?;
        let label = label.unwrap_or_else(|| b.label().to_string());
        if label != b.label() {
            return Err(usage(format!(
                "{} holds branch {:?}, not {label:?}",
                path.display(),
                b.label()
            )));
        }
        entries.push((label, path));
    }
    if let Some(dir) = &a.from_dir {
        let mut found: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "best"))
            .collect();
        found.sort();
        for p in found {
            let b = checkpoint::load_branch(&p, &backbone).with_context(|| format!("loading {}", p.display()))?;
            entries.push((b.label().to_string(), p));
        }
    }
    if entries.is_empty() {
        return Err(usage("no branches given; use --branch or --from-dir"));
    }
    let manifest_dir = a
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(manifest_dir)?;
    let manifest = Manifest::build(&a.backbone, &entries)?.relative_to(manifest_dir);
    manifest.write(&a.out)?;
    let model = assemble_from_manifest(&a.out)?;
    println!(
        "bundle {} : {} branches [{}], binding {}",
        a.out.display(),
        model.len(),
        model.labels().join(", "),
        &model.binding_checksum()[..16]
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct ClassifyRecord<'a> {
    id: &'a str,
    gold: Option<&'a str>,
    predicted: &'a str,
    tie: bool,
    margin: f32,
    losses: &'a LossMap,
    seconds: f64,
}

fn classify(a: ClassifyArgs) -> Result<()> {
    let model = assemble_from_manifest(&a.bundle)?;
    let docs: Vec<CorpusRecord> = match (&a.text, &a.corpus) {
        (Some(t), None) => vec![CorpusRecord {
            id: "text".into(),
            text: t.clone(),
            label: String::new(),
            prompt: None,
            proficiency: None,
        }],
        (None, Some(p)) => load_corpus(p)?,
        _ => return Err(usage("give exactly one of --text or --corpus")),
    };
    let mut out = a.out.as_deref().map(create).transpose()?;
    let mut correct = 0usize;
    let mut scored = 0usize;
    for d in &docs {
        let tokens = tokenize(&d.text);
        let t0 = Instant::now();
        let losses = match a.mode {
            Mode::Fused => model.fused_losses(&tokens)?,
            Mode::Sequential => model.sequential_losses(&tokens, false)?,
            Mode::Reload => model.sequential_losses(&tokens, true)?,
        };
        let r = model.decide(losses, t0.elapsed());
        let gold = (!d.label.is_empty()).then_some(d.label.as_str());
        if let Some(g) = gold {
            scored += 1;
            correct += usize::from(g == r.predicted);
        }
        println!(
            "{}\t{}{}\tmargin {:.4}",
            d.id,
            r.predicted,
            if r.tie { " (tie)" } else { "" },
            r.margin
        );
        if let Some(w) = out.as_mut() {
            serde_json::to_writer(
                &mut *w,
                &ClassifyRecord {
                    id: &d.id,
                    gold,
                    predicted: &r.predicted,
                    tie: r.tie,
                    margin: r.margin,
                    losses: &r.losses,
                    seconds: r.elapsed.as_secs_f64(),
                },
            )?;
            w.write_all(b"\n")?;
        }
    }
    if let Some(mut w) = out {
        w.flush()?;
    }
    if scored > 0 && model.labels().len() > 1 {
        println!(
            "accuracy {correct}/{scored} = {:.1}%",
            100.0 * correct as f64 / scored as f64
        );
    }
    Ok(())
}

fn eval_cv(ctx: &Ctx, a: EvalCvArgs) -> Result<()> {
    let records = load_corpus(&a.corpus)?;
    let backbone = Arc::new(ctx.backbone(a.backbone.as_deref())?);
    let systems: &[System] = match a.system {
        SystemArg::Prodapt => &[System::Prodapt],
        SystemArg::Svm => &[System::Svm],
        SystemArg::Both => &[System::Prodapt, System::Svm],
    };
    let options = CvOptions {
        k: a.k,
        seed: ctx.seed,
        train: ctx.settings.train.clone(),
        adapter: ctx.settings.adapter,
        svm: ctx.svm_config(),
    };
    let mut reports: Vec<CvReport> = Vec::new();
    for &system in systems {
        let t0 = Instant::now();
        let report = run_cv(&records, &backbone, system, &options, &mut |f| {
            eprintln!(
                "{system} fold {}: {}/{} correct ({:.1}s elapsed)",
                f.fold,
                f.correct,
                f.test_records,
                t0.elapsed().as_secs_f64()
            );
        })?;
        println!("{system} ({}-fold)", report.k);
        print!("{}", report.table());
        reports.push(report);
    }
    println!("{:<10} {:>10}", "system", "accuracy");
    for r in &reports {
        println!("{:<10} {:>9.1}%", r.system.to_string(), 100.0 * r.mean_accuracy);
    }
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        for r in &reports {
            r.write_jsonl(&mut w)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<()> {
    if a.repetitions == 0 {
        return Err(usage("--repetitions must be at least 1"));
    }
    let model: FusedModel = assemble_from_manifest(&a.bundle)?;
    let manifest = Manifest::read(&a.bundle)?;
    let base = a.bundle.parent().unwrap_or(Path::new("."));
    let backbone_path = if manifest.backbone.path.is_relative() {
        base.join(&manifest.backbone.path)
    } else {
        manifest.backbone.path.clone()
    };
    let texts: Vec<String> = load_corpus(&a.corpus)?
        .into_iter()
        .take(a.docs)
        .map(|r| r.text)
        .collect();
    if texts.is_empty() {
        return Err(usage("--docs must be at least 1"));
    }
    let svm = match &a.svm {
        Some(p) => Some((LinearOvrModel::load(p)?, p.clone())),
        None => None,
    };
    let report = bench(
        &BenchInputs {
            model: &model,
            backbone_path: &backbone_path,
            svm: svm.as_ref().map(|(m, p)| (m, p.clone())),
            texts: &texts,
        },
        &BenchOptions {
            warmup: a.warmup,
            repetitions: a.repetitions,
        },
    )?;
    print!("{}", report.table());
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        report.write_jsonl(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn inspect(ctx: &Ctx, a: InspectArgs) -> Result<()> {
    let Some(path) = a.path else {
        let m = &ctx.settings.model;
        let per_branch = ctx.settings.adapter.branch_parameters(m)?;
        let backbone = m.backbone_parameters();
        println!("model      [{m}]");
        println!("adapter    {} / reduction {}", ctx.settings.adapter.architecture, ctx.settings.adapter.reduction_factor);
        println!("backbone   {backbone} parameters");
        println!("branch     {per_branch} parameters ({:.4} of backbone)", per_branch as f64 / backbone as f64);
        return Ok(());
    };
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(&checkpoint::MAGIC) {
        let c = checkpoint::decode(&bytes)?;
        let params: usize = c.tensors.iter().map(|(_, t)| t.numel()).sum();
        println!("file       {} ({} bytes)", path.display(), bytes.len());
        match &c.header {
            Header::Backbone(m) => {
                println!("payload    backbone");
                println!("model      [{m}]");
            }
            Header::Branch {
                model,
                label,
                adapter,
                metadata,
            } => {
                println!("payload    branch {label:?}");
                println!("model      [{model}]");
                println!(
                    "adapter    {} / reduction {} / {:?}",
                    adapter.architecture, adapter.reduction_factor, adapter.nonlinearity
                );
                println!(
                    "trained    {} epochs, best val loss {}",
                    metadata.trained_epochs,
                    metadata
                        .best_val_loss
                        .map_or("-".to_string(), |v| format!("{v:.4}"))
                );
            }
            Header::Svm(h) => {
                println!("payload    svm");
                println!("labels     {}", h.labels.join(", "));
                println!("features   {} (min_df {})", h.vocabulary.len(), h.min_df);
                println!("training   lambda {} epochs {} seed {}", h.lambda, h.epochs, h.seed);
            }
        }
        println!("tensors    {} holding {params} parameters", c.tensors.len());
        for (name, t) in &c.tensors {
            println!("  {name:<28} {:?}", t.shape());
        }
        return Ok(());
    }
    let model = assemble_from_manifest(&path)?;
    let manifest = Manifest::read(&path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let size = |p: &Path| -> Result<u64> {
        let p = if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        Ok(fs::metadata(&p).with_context(|| format!("stat {}", p.display()))?.len())
    };
    let bb_bytes = size(&manifest.backbone.path)?;
    let mut branch_bytes = 0;
    for (_, e) in &manifest.branches {
        branch_bytes += size(&e.path)?;
    }
    let bb_params = model.backbone().count_parameters().total;
    let br_params: usize = model.slots().iter().map(|s| s.branch.count_parameters().total).sum();
    let n = model.len() as u64;
    println!("bundle     {} ({} branches: {})", path.display(), n, model.labels().join(", "));
    println!("binding    {}", model.binding_checksum());
    println!("backbone   {bb_bytes} bytes, {bb_params} parameters");
    println!("branches   {branch_bytes} bytes, {br_params} parameters");
    println!(
        "full       {} bytes for {n} full model copies; branch/full storage {:.4}, parameters {:.4}",
        bb_bytes * n,
        branch_bytes as f64 / (bb_bytes * n) as f64,
        br_params as f64 / (bb_params as u64 * n) as f64
    );
    Ok(())
}
