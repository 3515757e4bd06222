use std::fs;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use groundforge::analysis::{self, ImageStats};
use groundforge::backend::{conformance, Backend, BackendError, FaultInjector, MockBackend, Role};
use groundforge::boxes::TextBoxPool;
use groundforge::eval::{join_samples, pointing_accuracy, GroundTruthLine, HeatmapLine};
use groundforge::gradcheck::{run_gradcheck, DEFAULT_STEP, DEFAULT_TOLERANCE};
use groundforge::pipeline::{
    fill_embeddings, run_caption_pipeline, run_layout_selection, subsample, Dataset, LayoutOptions,
    LayoutStrategy, PhraseMode, PipelineConfig, Purity,
};
use groundforge::{Error, Paradigm};
use serde::de::DeserializeOwned;
use serde_json::json;

const EXIT_CONFIG: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_VALIDATION: u8 = 4;

#[derive(Parser)]
#[command(
    name = "groundforge",
    version,
    about = "Synthetic grounding data and evaluation kernels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the synthesis pipeline and write records plus a manifest.
    Synth(SynthArgs),
    /// Reduce per-image text-box pools for layout-conditioned generation.
    SelectBoxes(SelectArgs),
    /// Draw random subsets of a synthesized dataset.
    Subsample(SubsampleArgs),
    /// Pointing-game accuracy of heatmaps against ground-truth boxes.
    Eval(EvalArgs),
    /// Diversity, overlap and similarity of synthetic versus real text.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of the analytic loss gradients.
    Gradcheck(GradcheckArgs),
    /// Run the protocol conformance suite against the configured backends.
    Conformance(ConformanceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PurityArg {
    Lower,
    Higher,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParadigmArg {
    Caption,
    Recaption,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhrasesArg {
    Short,
    Long,
    Both,
    Comma,
    Period,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    All,
    Random,
    Text,
    Iou,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    paradigm: Option<ParadigmArg>,
    #[arg(long, value_enum)]
    purity: Option<PurityArg>,
    #[arg(long, value_enum)]
    phrases: Option<PhrasesArg>,
    /// Output directory, overriding the config.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Number of placeholder inputs, overriding the config.
    #[arg(long)]
    synthetic_inputs: Option<usize>,
    /// Abort with a backend failure after this many backend calls.
    #[arg(long, hide = true)]
    fail_after_calls: Option<u64>,
}

#[derive(clap::Args)]
struct SelectArgs {
    /// JSONL of pools: {"image_id", "items": [{"phrase", "box"}], "embeddings"?}.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 10)]
    cap: usize,
    #[arg(long, default_value_t = 0.5)]
    iou_threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pipeline config whose embed endpoint fills missing embeddings; the
    /// seeded mock is used otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SubsampleArgs {
    /// Dataset directory holding records.jsonl and manifest.json.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// JSONL of {"sample_id", "heatmap", "image_h", "image_w"}.
    #[arg(long)]
    records: PathBuf,
    /// JSONL of {"sample_id", "boxes"}.
    #[arg(long)]
    gt: PathBuf,
    /// Directory for pointing.json and pointing.csv.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    /// Synthetic text: a dataset directory, a records.jsonl, or a JSONL of
    /// {"image_id", "text"}.
    #[arg(long)]
    records: PathBuf,
    /// Real text as JSONL of {"image_id", "text"}.
    #[arg(long)]
    real: PathBuf,
    #[arg(long, default_value = "analysis")]
    output: PathBuf,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Pipeline config whose embed endpoint is used; the seeded mock otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(clap::Args)]
struct ConformanceArgs {
    /// Pipeline config naming the endpoints to check; the mock otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::SelectBoxes(a) => select_boxes(a),
        Command::Subsample(a) => run_subsample(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Conformance(a) => run_conformance(a),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(err) = err.chain().find_map(|e| e.downcast_ref::<Error>()) else {
        return 1;
    };
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Backend(b) => match b {
            BackendError::Unsupported(_) => EXIT_CONFIG,
            BackendError::Malformed { .. }
            | BackendError::BlobCorrupt { .. }
            | BackendError::InvalidRequest(_) => EXIT_VALIDATION,
            _ => EXIT_BACKEND,
        },
        Error::Io { .. } => 1,
        _ => EXIT_VALIDATION,
    }
}

fn load_config(path: &Path) -> anyhow::Result<PipelineConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg: PipelineConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    // Relative paths in the config are resolved against its directory.
    let base = path.parent().unwrap_or(Path::new("."));
    let rebase = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    rebase(&mut cfg.output_dir);
    for p in [
        &mut cfg.inputs,
        &mut cfg.cache_dir,
        &mut cfg.examples_path,
        &mut cfg.concept_corpus,
        &mut cfg.lexicon_path,
    ]
    .into_iter()
    .flatten()
    {
        rebase(p);
    }
    Ok(cfg)
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("JSON values serialize")
    );
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                anyhow::Error::new(Error::Validation(format!(
                    "{} line {}: {e}",
                    path.display(),
                    i + 1
                )))
            })
        })
        .collect()
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn synth(args: SynthArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(p) = args.paradigm {
        cfg.paradigm = match p {
            ParadigmArg::Caption => Paradigm::Caption,
            ParadigmArg::Recaption => Paradigm::Recaption,
        };
    }
    if let Some(p) = args.purity {
        cfg.purity = match p {
            PurityArg::Lower => Purity::LowerImage2text,
            PurityArg::Higher => Purity::HigherConcept2text,
        };
    }
    if let Some(p) = args.phrases {
        cfg.phrase_mode = match p {
            PhrasesArg::Short => PhraseMode::LlmShort,
            PhrasesArg::Long => PhraseMode::LlmLong,
            PhrasesArg::Both => PhraseMode::Both,
            PhrasesArg::Comma => PhraseMode::Comma,
            PhrasesArg::Period => PhraseMode::Period,
        };
    }
    if let Some(out) = args.output {
        cfg.output_dir = out;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(n) = args.synthetic_inputs {
        cfg.synthetic_inputs = Some(n);
        cfg.inputs = None;
    }
    cfg.validate()?;
    let router = cfg.build_backends()?;
    let outcome = match args.fail_after_calls {
        Some(budget) => run_caption_pipeline(&cfg, &FaultInjector::new(router, budget))?,
        None => run_caption_pipeline(&cfg, &router)?,
    };
    print_json(&json!({
        "digest": outcome.digest(),
        "output_dir": outcome.output_dir,
        "stats": outcome.stats,
    }));
    Ok(ExitCode::SUCCESS)
}

fn embed_backend(config: Option<&Path>, seed: u64) -> anyhow::Result<Arc<dyn Backend>> {
    match config {
        Some(path) => {
            let cfg = load_config(path)?;
            Ok(Arc::new(cfg.build_backends()?))
        }
        None => Ok(Arc::new(MockBackend::new(seed))),
    }
}

fn select_boxes(args: SelectArgs) -> anyhow::Result<ExitCode> {
    let mut pools: Vec<TextBoxPool> = read_jsonl(&args.input)?;
    let strategy = match args.strategy {
        StrategyArg::All => LayoutStrategy::All,
        StrategyArg::Random => LayoutStrategy::Random,
        StrategyArg::Text => LayoutStrategy::Text,
        StrategyArg::Iou => LayoutStrategy::Iou,
    };
    if strategy == LayoutStrategy::Text {
        let backend = embed_backend(args.config.as_deref(), args.seed)?;
        fill_embeddings(&mut pools, backend.as_ref())?;
    }
    let options = LayoutOptions {
        strategy,
        cap: args.cap,
        iou_threshold: args.iou_threshold,
        seed: args.seed,
    };
    let (selected, stats) = run_layout_selection(&pools, &options)?;
    let mut out = String::new();
    for pool in &selected {
        out.push_str(&groundforge::canonical::to_canonical_string(pool));
        out.push('\n');
    }
    write_file(&args.output, &out)?;
    print_json(&json!({ "strategy": strategy, "stats": stats }));
    Ok(ExitCode::SUCCESS)
}

fn run_subsample(args: SubsampleArgs) -> anyhow::Result<ExitCode> {
    let dataset = Dataset::load(&args.dataset)?;
    let subsets = subsample(&dataset, args.fraction, args.repeats, args.seed)?;
    let mut summary = Vec::new();
    for (i, subset) in subsets.iter().enumerate() {
        let dir = args.output.join(format!("repeat-{i:02}"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        subset.save(&dir)?;
        summary.push(json!({
            "dir": dir,
            "records": subset.len(),
            "digest": subset.manifest.digest(),
        }));
    }
    print_json(&json!({ "parent": dataset.manifest.digest(), "subsets": summary }));
    Ok(ExitCode::SUCCESS)
}

fn eval(args: EvalArgs) -> anyhow::Result<ExitCode> {
    let heatmaps: Vec<HeatmapLine> = read_jsonl(&args.records)?;
    let gt: Vec<GroundTruthLine> = read_jsonl(&args.gt)?;
    let report = pointing_accuracy(&join_samples(heatmaps, gt)?)?;
    if let Some(dir) = &args.output {
        write_file(
            &dir.join("pointing.json"),
            &serde_json::to_string_pretty(&report)?,
        )?;
        write_file(&dir.join("pointing.csv"), &report.to_csv())?;
    }
    print_json(&json!({
        "accuracy": report.accuracy,
        "hits": report.hits,
        "total": report.total,
    }));
    Ok(ExitCode::SUCCESS)
}

#[derive(serde::Deserialize)]
struct TextLine {
    image_id: String,
    text: String,
}

/// Synthetic `(image_id, text)` pairs from a dataset or a plain text corpus.
fn load_synthetic_text(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let records_path = if path.is_dir() {
        path.join(groundforge::pipeline::RECORDS_FILE)
    } else {
        path.to_path_buf()
    };
    let values: Vec<serde_json::Value> = read_jsonl(&records_path)?;
    values
        .into_iter()
        .map(|v| {
            if v.get("phrase").is_some() {
                let rec: groundforge::GroundingRecord = serde_json::from_value(v)
                    .map_err(|e| Error::Validation(format!("record: {e}")))?;
                Ok((
                    rec.phrase.image_id().to_string(),
                    rec.phrase.text().to_string(),
                ))
            } else {
                let line: TextLine = serde_json::from_value(v)
                    .map_err(|e| Error::Validation(format!("text line: {e}")))?;
                Ok((line.image_id, line.text))
            }
        })
        .collect()
}

fn analyze(args: AnalyzeArgs) -> anyhow::Result<ExitCode> {
    let synthetic = load_synthetic_text(&args.records)?;
    let real: Vec<TextLine> = read_jsonl(&args.real)?;
    let groups =
        analysis::group_by_image(synthetic, real.into_iter().map(|l| (l.image_id, l.text)));
    if groups.is_empty() {
        bail!(Error::Validation(
            "no image has both synthetic and real text".into()
        ));
    }
    let backend = embed_backend(args.config.as_deref(), args.seed)?;
    let stats = analysis::analyze_groups(&groups, backend.as_ref())?;
    let out = &args.output;
    write_file(
        &out.join("ttr.csv"),
        &analysis::stats_csv(&stats, &["synthetic_ttr", "real_ttr"]),
    )?;
    write_file(
        &out.join("overlap.csv"),
        &analysis::stats_csv(&stats, &["overlap"]),
    )?;
    write_file(
        &out.join("similarity.csv"),
        &analysis::stats_csv(&stats, &["similarity"]),
    )?;
    let hist = |name: &str, lo: f64, hi: f64, f: fn(&ImageStats) -> f64| -> anyhow::Result<()> {
        let values: Vec<f64> = stats.iter().map(f).collect();
        let counts = analysis::histogram(&values, lo, hi, args.bins)?;
        write_file(&out.join(name), &analysis::histogram_csv(&counts, lo, hi))
    };
    hist("synthetic_ttr_hist.csv", 0.0, 1.0, |s| s.synthetic_ttr)?;
    hist("real_ttr_hist.csv", 0.0, 1.0, |s| s.real_ttr)?;
    hist("overlap_hist.csv", 0.0, 1.0, |s| s.overlap)?;
    hist("similarity_hist.csv", -1.0, 1.0, |s| s.similarity)?;
    let mean = |f: fn(&ImageStats) -> f64| stats.iter().map(f).sum::<f64>() / stats.len() as f64;
    print_json(&json!({
        "images": stats.len(),
        "mean_synthetic_ttr": mean(|s| s.synthetic_ttr),
        "mean_real_ttr": mean(|s| s.real_ttr),
        "mean_overlap": mean(|s| s.overlap),
        "mean_similarity": mean(|s| s.similarity),
        "output_dir": out,
    }));
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let report = run_gradcheck(args.trials, args.seed, args.step, args.tolerance)?;
    print_json(&serde_json::to_value(&report)?);
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VALIDATION)
    })
}

fn run_conformance(args: ConformanceArgs) -> anyhow::Result<ExitCode> {
    let backend: Arc<dyn Backend> = match &args.config {
        Some(path) => {
            let cfg = load_config(path)?;
            for role in Role::ALL {
                if !cfg.endpoints.contains_key(&role) {
                    tracing::warn!(%role, "no endpoint configured, checking the mock for this role");
                }
            }
            Arc::new(cfg.build_backends()?)
        }
        None => Arc::new(MockBackend::new(args.seed)),
    };
    let violations = conformance::check(backend.as_ref());
    let listed: Vec<_> = violations
        .iter()
        .map(|v| json!({ "request": v.request, "message": v.message }))
        .collect();
    print_json(&json!({ "violations": listed }));
    Ok(if violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VALIDATION)
    })
}
