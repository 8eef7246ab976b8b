//! `pathground`: corpus generation, training, evaluation and inference.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod config;
mod overlay;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use pathground::ablation::run_ablation;
use pathground::eval::{
    evaluate, evaluate_model, read_predictions, write_predictions, write_report, EvalReport, ReportFormat,
};
use pathground::knowledge::{expand_corpus, Glossary, KnowledgeProvider, RemoteConfig, RemoteProvider};
use pathground::model::{images_to_tensor, AblationMode, Ctx};
use pathground::synth::{
    corpus_stats, generate_corpus, load_corpus, CorpusManifest, TermBank, IMAGE_STRIDE, TERM_BANK_FILE,
};
use pathground::train::{load_model, train, TrainOptions};
use pathground::{Device, GroundingSample, Split};
use toml::Value;

use config::{parse_override, read_config_file, resolve, Resolved};

#[derive(Parser)]
#[command(name = "pathground", version, about = "Knowledge-enhanced visual grounding for pathology crops")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus.
    GenData(GenDataArgs),
    /// Fill the knowledge field of a corpus from a glossary or endpoint.
    Expand(ExpandArgs),
    /// Train a model on the train split.
    Train(TrainArgs),
    /// Score a checkpoint or a predictions file.
    Eval(EvalArgs),
    /// Ground one expression in one image.
    Infer(InferArgs),
    /// Corpus statistics.
    Stats(StatsArgs),
    /// Train and score every knowledge pathway over several seeds.
    Ablation(AblationArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_n: Option<usize>,
    #[arg(long)]
    test_n: Option<usize>,
    #[arg(long)]
    image_size: Option<u32>,
    #[arg(long)]
    decoy_fraction: Option<f64>,
    /// Term bank JSON; the built-in bank otherwise.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct ExpandArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    glossary: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    /// Write the expanded annotations here instead of in place.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-expand records that already carry knowledge.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    ConcatText,
    Branch,
    BranchKfm,
}

impl From<ModeArg> for AblationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::None => AblationMode::None,
            ModeArg::ConcatText => AblationMode::ConcatText,
            ModeArg::Branch => AblationMode::Branch,
            ModeArg::BranchKfm => AblationMode::BranchKfm,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["checkpoint", "predictions"])))]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// JSONL predictions, one per ground-truth box.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Output directory; defaults next to the checkpoint or predictions.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    expression: String,
    /// Knowledge text, used as given.
    #[arg(long)]
    knowledge: Option<String>,
    #[arg(long)]
    glossary: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    /// Write a copy of the image with the predicted box drawn.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    top_k: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
    #[arg(long, value_enum, value_delimiter = ',')]
    modes: Vec<ModeArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<pathground::Error> for Failure {
    fn from(e: pathground::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Expand(a) => expand(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Stats(a) => stats(a),
        Command::Ablation(a) => ablation(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Resolves the run configuration. `flags` are the dedicated command-line
/// options, applied after any `--set` overrides.
fn resolve_config(args: &ConfigArgs, flags: Vec<(&str, Option<Value>)>) -> CliResult<Resolved> {
    let file = args
        .config
        .as_deref()
        .map(read_config_file)
        .transpose()
        .map_err(|e| usage(format!("{e:#}")))?;
    let mut all = Vec::new();
    for s in &args.set {
        all.push(parse_override(s).map_err(|e| usage(e.to_string()))?);
    }
    for (k, v) in flags {
        if let Some(v) = v {
            all.push((k.to_string(), v));
        }
    }
    resolve(file.as_ref(), &all).map_err(|e| usage(format!("{e:#}")))
}

fn int<T: Into<i64>>(v: Option<T>) -> Option<Value> {
    v.map(|v| Value::Integer(v.into()))
}

fn uint(v: Option<usize>) -> Option<Value> {
    v.map(|v| Value::Integer(v as i64))
}

fn u64v(v: Option<u64>) -> Option<Value> {
    v.map(|v| Value::Integer(v as i64))
}

fn float(v: Option<f64>) -> Option<Value> {
    v.map(Value::Float)
}

fn path_value(v: Option<&PathBuf>) -> Option<Value> {
    v.map(|p| Value::String(p.display().to_string()))
}

fn mode_value(m: Option<ModeArg>) -> Option<Value> {
    m.map(|m| Value::String(AblationMode::from(m).as_str().to_string()))
}

fn data_dir(r: &Resolved) -> CliResult<PathBuf> {
    r.config
        .data
        .dir
        .clone()
        .ok_or_else(|| usage("no corpus given: pass --data DIR or set data.dir"))
}

fn gen_data(a: GenDataArgs) -> CliResult {
    if let Some(size) = a.image_size {
        if size == 0 || size % IMAGE_STRIDE != 0 {
            let lo = (size / IMAGE_STRIDE).max(2) * IMAGE_STRIDE;
            return Err(usage(format!(
                "--image-size {size} is not a multiple of {IMAGE_STRIDE}; use e.g. {lo} or {}",
                lo + IMAGE_STRIDE
            )));
        }
    }
    let r = resolve_config(
        &a.cfg,
        vec![
            ("data.seed", u64v(a.seed)),
            ("data.train_n", uint(a.train_n)),
            ("data.test_n", uint(a.test_n)),
            ("data.image_size", int(a.image_size)),
            ("data.decoy_fraction", float(a.decoy_fraction)),
        ],
    )?;
    let d = &r.config.data;
    let manifest = CorpusManifest::new(d.seed, d.train_n, d.test_n, d.image_size, d.decoy_fraction);
    manifest.validate().map_err(|e| usage(e.to_string()))?;
    let bank = match &a.bank {
        Some(p) => TermBank::load(p)?,
        None => TermBank::default(),
    };
    r.write(&a.out)?;
    let records = generate_corpus(&a.out, &manifest, &bank)?;
    println!("wrote {} samples to {}", records.len(), a.out.display());
    Ok(())
}

/// Glossary file, then endpoint (flag, config or environment), then the
/// corpus term bank.
fn corpus_provider(r: &Resolved, corpus: &Path) -> CliResult<KnowledgeProvider> {
    let k = &r.config.knowledge;
    if let Some(g) = &k.glossary {
        return Ok(KnowledgeProvider::Glossary(Glossary::load(g)?));
    }
    if let Some(remote) = k.remote() {
        return Ok(KnowledgeProvider::Remote(RemoteProvider::new(remote)?));
    }
    let bank = corpus.join(TERM_BANK_FILE);
    if bank.is_file() {
        return Ok(KnowledgeProvider::Glossary(Glossary::from_bank(&TermBank::load(&bank)?)));
    }
    Err(usage(
        "no knowledge source: pass --glossary or --endpoint, or keep the corpus term_bank.json",
    ))
}

fn expand(a: ExpandArgs) -> CliResult {
    let r = resolve_config(
        &a.cfg,
        vec![
            ("data.dir", path_value(Some(&a.data))),
            ("knowledge.glossary", path_value(a.glossary.as_ref())),
            ("knowledge.endpoint", a.endpoint.clone().map(Value::String)),
        ],
    )?;
    let provider = corpus_provider(&r, &a.data)?;
    let summary = expand_corpus(&provider, &a.data, a.out.as_deref(), a.force)?;
    println!("expanded {} records, kept {}", summary.expanded, summary.skipped);
    Ok(())
}

/// Loads a corpus; when `mode` needs knowledge and some records lack it,
/// they are expanded in memory with the configured provider.
fn load_for_mode(r: &Resolved, dir: &Path, mode: AblationMode) -> CliResult<Vec<GroundingSample>> {
    let mut corpus = load_corpus(dir)?;
    if mode.requires_knowledge() && corpus.iter().any(|s| s.knowledge.is_none()) {
        let provider = corpus_provider(r, dir)?;
        tracing::info!("expanding missing knowledge in memory");
        for s in corpus.iter_mut().filter(|s| s.knowledge.is_none()) {
            s.knowledge = Some(provider.expand(&s.expression)?.text);
        }
    }
    Ok(corpus)
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let r = resolve_config(
        &a.cfg,
        vec![
            ("data.dir", path_value(a.data.as_ref())),
            ("model.ablation_mode", mode_value(a.mode)),
            ("train.epochs", uint(a.epochs)),
            ("train.seed", u64v(a.seed)),
            ("train.learning_rate", float(a.lr)),
            ("train.batch_size", uint(a.batch_size)),
        ],
    )?;
    let dir = data_dir(&r)?;
    r.write(&a.out)?;
    let corpus = load_for_mode(&r, &dir, r.config.model.ablation_mode)?;
    let mut opts = TrainOptions::new(&a.out);
    opts.resume = a.resume.clone();
    opts.eval = r.config.eval;
    let outcome = train(&corpus, &r.config.model, &r.config.train, &opts)?;
    if let Some(last) = outcome.log.records.last() {
        println!(
            "epoch {}: loss {:.6} (l1 {:.6}, iou {:.6})",
            last.epoch, last.mean_total, last.mean_l1, last.mean_iou
        );
    }
    if let Some(p) = &outcome.log.final_checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn print_report(report: &EvalReport, out: &Path) -> CliResult {
    write_report(report, &out.join("report.json"), ReportFormat::Json)?;
    write_report(report, &out.join("report.md"), ReportFormat::Markdown)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let r = resolve_config(&a.cfg, vec![("data.dir", path_value(a.data.as_ref()))])?;
    let dir = data_dir(&r)?;
    let split = Split::from(a.split);
    let out = match (&a.out, &a.checkpoint, &a.predictions) {
        (Some(o), _, _) => o.clone(),
        (None, Some(c), _) => parent(c).join(format!("eval-{split}")),
        (None, None, Some(p)) => parent(p).to_path_buf(),
        (None, None, None) => unreachable!("clap requires a source"),
    };
    r.write(&out)?;
    if let Some(ckpt) = &a.checkpoint {
        let model = load_model(ckpt, &Device::Cpu)?;
        let mode = model.config().ablation_mode;
        let samples: Vec<GroundingSample> =
            load_for_mode(&r, &dir, mode)?.into_iter().filter(|s| s.split == split).collect();
        if samples.is_empty() {
            return Err(Failure::Runtime(anyhow::anyhow!("{split} split of {} is empty", dir.display())));
        }
        let (report, preds) = evaluate_model(&model, &samples, &r.config.eval, a.batch_size)?;
        write_predictions(&out.join("predictions.jsonl"), &preds)?;
        print_report(&report, &out)
    } else {
        let path = a.predictions.as_ref().expect("clap requires a source");
        let samples: Vec<GroundingSample> = load_corpus(&dir)?.into_iter().filter(|s| s.split == split).collect();
        let preds = read_predictions(path)?;
        let report = evaluate(&preds, &samples, &r.config.eval)?;
        print_report(&report, &out)
    }
}

fn parent(p: &Path) -> &Path {
    p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn infer(a: InferArgs) -> CliResult {
    if a.expression.trim().is_empty() {
        return Err(usage("--expression must not be empty"));
    }
    let model = load_model(&a.checkpoint, &Device::Cpu)?;
    let mode = model.config().ablation_mode;
    let knowledge = if let Some(k) = &a.knowledge {
        Some(k.clone())
    } else if let Some(g) = &a.glossary {
        Some(Glossary::load(g)?.expand(&a.expression).text)
    } else if let Some(e) = &a.endpoint {
        let mut cfg = RemoteConfig::new(e.clone());
        cfg.token = RemoteConfig::from_env().and_then(|c| c.token);
        Some(RemoteProvider::new(cfg)?.expand(&a.expression)?.text)
    } else {
        None
    };
    if knowledge.is_none() && mode.requires_knowledge() {
        return Err(usage(format!(
            "a model trained in mode {mode} needs knowledge: pass --knowledge, --glossary or --endpoint"
        )));
    }
    let image = image::open(&a.image)
        .with_context(|| format!("reading {}", a.image.display()))?
        .to_rgb8();
    let tensor = images_to_tensor(&[&image], model.device())?;
    let out = model.forward_batch(&tensor, &[a.expression.as_str()], &[knowledge.as_deref()], &mut Ctx::eval())?;
    let bbox = out.to_boxes()?.remove(0);
    println!("{}", serde_json::to_string(&bbox).context("serializing box")?);
    if let Some(path) = &a.overlay {
        overlay::draw_box(&image, &bbox)
            .save(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn stats(a: StatsArgs) -> CliResult {
    let corpus = load_corpus(&a.data)?;
    let s = corpus_stats(&corpus, a.top_k);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&s).context("serializing stats")?);
    } else {
        print!("{}", s.to_markdown());
    }
    Ok(())
}

fn ablation(a: AblationArgs) -> CliResult {
    let r = resolve_config(
        &a.cfg,
        vec![("data.dir", path_value(a.data.as_ref())), ("train.epochs", uint(a.epochs))],
    )?;
    let dir = data_dir(&r)?;
    let modes: Vec<AblationMode> = if a.modes.is_empty() {
        AblationMode::ALL.to_vec()
    } else {
        a.modes.iter().map(|&m| m.into()).collect()
    };
    if a.seeds.is_empty() {
        return Err(usage("--seeds must list at least one seed"));
    }
    r.write(&a.out)?;
    let corpus = load_for_mode(&r, &dir, AblationMode::BranchKfm)?;
    let summary = run_ablation(
        &corpus,
        &r.config.model,
        &r.config.train,
        &r.config.eval,
        &modes,
        &a.seeds,
        &a.out,
    )?;
    print!("{}", summary.to_markdown());
    if let Some(ok) = summary.ordering_holds(5.0) {
        println!("\nordering branch_kfm >= branch >= none (margin 5): {}", if ok { "holds" } else { "violated" });
    }
    Ok(())
}
