//! The `hmgie` command line.
//!
//! [`run`] takes the arguments, the environment and output streams
//! explicitly so it can be driven in-process. Exit codes: `0` success,
//! `2` runtime failure, `64` invalid usage or configuration.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{BackendSource, ConfigError, ConfigLayer, RunConfig};
use crate::core::scoring::MetricsSummary;
use crate::forge::{list_images, DetectorPrompt, Forge};
use crate::image::ImageInput;
use crate::pipeline::{read_dataset, BatchOutcome, EvaluationReport, Evaluator};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "hmgie", version, about = "Hierarchical image-caption consistency evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Increase log detail (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct SharedArgs {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Call live models and store every reply as a fixture in DIR.
    #[arg(long, global = true, value_name = "DIR", conflicts_with = "replay")]
    pub record: Option<PathBuf>,
    /// Answer every model call from fixtures in DIR; no network access.
    #[arg(long, global = true, value_name = "DIR")]
    pub replay: Option<PathBuf>,
    /// Directory of prompt template overrides (`<name>.txt`).
    #[arg(long, global = true, value_name = "DIR")]
    pub templates_dir: Option<PathBuf>,
    /// Persistent response cache for live runs.
    #[arg(long, global = true, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, global = true, value_name = "L")]
    pub max_level: Option<u32>,
    #[arg(long, global = true, value_name = "R")]
    pub weight_ratio: Option<f64>,
    #[arg(long, global = true, value_name = "N")]
    pub max_per_level: Option<usize>,
    /// Items or images processed concurrently.
    #[arg(long, global = true, value_name = "N")]
    pub parallelism: Option<usize>,
    /// Model id for every role not configured otherwise.
    #[arg(long, global = true, value_name = "ID")]
    pub model: Option<String>,
    /// Chat-completions endpoint for every role not configured otherwise.
    #[arg(long, global = true, value_name = "URL")]
    pub endpoint: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score an image-caption pair or a JSONL dataset of pairs.
    Evaluate(EvaluateArgs),
    /// Build a labelled dataset of clean and perturbed captions.
    Forge(ForgeArgs),
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "PATH", requires = "caption", conflicts_with = "dataset")]
    pub image: Option<PathBuf>,
    #[arg(long, value_name = "TEXT", requires = "image")]
    pub caption: Option<String>,
    /// JSONL file with `image_path`, `caption` and optional `id`, `label`, `granularity`.
    #[arg(long, value_name = "FILE")]
    pub dataset: Option<PathBuf>,
    /// Print JSON instead of the text summary.
    #[arg(long)]
    pub json: bool,
    /// Write reports into DIR.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Break dataset metrics down by granularity level.
    #[arg(long)]
    pub per_granularity: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DetectorArg {
    Direct,
    Cot,
}

#[derive(Debug, Args)]
pub struct ForgeArgs {
    /// Directory of images.
    #[arg(long, value_name = "DIR")]
    pub images: PathBuf,
    /// Output JSONL file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, value_name = "N")]
    pub max_iter: Option<u32>,
    /// Also emit perturbations the detector caught.
    #[arg(long)]
    pub include_undetected: bool,
    #[arg(long, value_enum)]
    pub detector: Option<DetectorArg>,
    /// Caption ensemble model id; repeat for several.
    #[arg(long = "captioner", value_name = "ID")]
    pub captioners: Vec<String>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(format!("configuration error: {e}"))
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, env: &[(String, String)], stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(stderr, "{text}")
            } else {
                write!(stdout, "{text}")
            };
            return code;
        }
    };
    run_cli(cli, env, stdout, stderr)
}

pub fn run_cli(cli: Cli, env: &[(String, String)], stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        Command::Evaluate(args) => evaluate(&cli.shared, args, env, stdout),
        Command::Forge(args) => forge(&cli.shared, args, env, stdout),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_RUNTIME
        }
    }
}

/// Merges defaults, the config file, the environment and flags.
pub fn resolve_config(
    shared: &SharedArgs,
    extra: ConfigLayer,
    env: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let env_layer = ConfigLayer::from_env(env.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let config_path = shared.config.clone().or_else(|| {
        env.iter()
            .find(|(k, _)| k == "HMGIE_CONFIG")
            .map(|(_, v)| PathBuf::from(v))
    });
    let file_layer = match &config_path {
        Some(path) => ConfigLayer::from_file(path)?,
        None => ConfigLayer::default(),
    };
    let mut flags = extra;
    flags.templates_dir = shared.templates_dir.clone();
    flags.cache_dir = shared.cache_dir.clone();
    flags.max_level = shared.max_level;
    flags.weight_ratio = shared.weight_ratio;
    flags.max_per_level = shared.max_per_level;
    flags.parallelism = shared.parallelism;
    flags.backend.model = shared.model.clone();
    flags.backend.endpoint = shared.endpoint.clone();
    file_layer.overlay(env_layer).overlay(flags).resolve()
}

fn source(shared: &SharedArgs) -> Result<BackendSource, Failure> {
    match (&shared.record, &shared.replay) {
        (Some(_), Some(_)) => Err(Failure::Usage("--record and --replay are exclusive".into())),
        (Some(dir), None) => Ok(BackendSource::Record(dir.clone())),
        (None, Some(dir)) => {
            if !dir.is_dir() {
                return Err(Failure::Usage(format!(
                    "replay directory {} does not exist",
                    dir.display()
                )));
            }
            Ok(BackendSource::Replay(dir.clone()))
        }
        (None, None) => Ok(BackendSource::Live),
    }
}

fn evaluate(
    shared: &SharedArgs,
    args: &EvaluateArgs,
    env: &[(String, String)],
    stdout: &mut dyn Write,
) -> Result<i32, Failure> {
    if args.dataset.is_none() && args.image.is_none() {
        return Err(Failure::Usage(
            "evaluate needs either --image with --caption, or --dataset".into(),
        ));
    }
    let config = resolve_config(shared, ConfigLayer::default(), env)?;
    let source = source(shared)?;
    let templates = config.templates()?;
    let bindings = config.pipeline_bindings(&source)?;
    let evaluator = Evaluator::new(bindings, config.pipeline.clone())
        .map_err(|e| Failure::Usage(e.to_string()))?
        .with_templates(templates);

    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    }

    if let Some(dataset) = &args.dataset {
        let file = fs::File::open(dataset).map_err(|e| runtime(format!("{}: {e}", dataset.display())))?;
        let items = read_dataset(BufReader::new(file)).map_err(|e| runtime(format!("{}: {e}", dataset.display())))?;
        let base = dataset.parent().unwrap_or(Path::new("."));
        let outcome = evaluator.evaluate_batch(&items, base, config.parallelism, args.per_granularity);
        if let Some(out) = &args.out {
            write_batch(out, &outcome).map_err(runtime)?;
        }
        if args.json {
            write_json(stdout, &BatchSummary::from(&outcome)).map_err(runtime)?;
        } else {
            print_batch(stdout, &outcome).map_err(runtime)?;
        }
        let failed = outcome.failures().count();
        return Ok(if failed > 0 { EXIT_RUNTIME } else { EXIT_OK });
    }

    let (image, caption) = match (&args.image, &args.caption) {
        (Some(i), Some(c)) => (i, c),
        _ => return Err(Failure::Usage("--image and --caption must be given together".into())),
    };
    let input = ImageInput::load(image).map_err(runtime)?;
    let report = evaluator.evaluate_pair(&input, caption).map_err(runtime)?;
    if let Some(out) = &args.out {
        write_file(&out.join("report.json"), &report).map_err(runtime)?;
    }
    if args.json {
        write_json(stdout, &report).map_err(runtime)?;
    } else {
        print_report(stdout, &report).map_err(runtime)?;
    }
    Ok(EXIT_OK)
}

fn forge(
    shared: &SharedArgs,
    args: &ForgeArgs,
    env: &[(String, String)],
    stdout: &mut dyn Write,
) -> Result<i32, Failure> {
    let extra = ConfigLayer {
        max_iter: args.max_iter,
        include_undetected: args.include_undetected.then_some(true),
        detector_prompt: args.detector.map(|d| match d {
            DetectorArg::Direct => DetectorPrompt::Direct,
            DetectorArg::Cot => DetectorPrompt::ChainOfThought,
        }),
        captioners: (!args.captioners.is_empty()).then(|| args.captioners.clone()),
        ..ConfigLayer::default()
    };
    let config = resolve_config(shared, extra, env)?;
    let source = source(shared)?;
    let templates = config.templates()?;
    let bindings = config.forge_bindings(&source)?;
    let forge = Forge::new(bindings, config.forge.clone())
        .map_err(|e| Failure::Usage(e.to_string()))?
        .with_templates(templates);

    let dir = fs::canonicalize(&args.images).map_err(|e| runtime(format!("{}: {e}", args.images.display())))?;
    let images = list_images(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
    }
    let file = fs::File::create(&args.out).map_err(|e| runtime(format!("{}: {e}", args.out.display())))?;
    let mut writer = BufWriter::new(file);
    let summary = forge.build_dataset(&images, &mut writer).map_err(runtime)?;
    writer.flush().map_err(runtime)?;

    let mut report = || -> io::Result<()> {
        writeln!(stdout, "images: {}", summary.images)?;
        writeln!(stdout, "lines: {}", summary.lines)?;
        for (g, counts) in &summary.per_granularity {
            writeln!(
                stdout,
                "G{g}: clean {} adversarial {} undetected-omitted {}",
                counts.clean, counts.adversarial, counts.undetected_omitted
            )?;
        }
        for skipped in &summary.skipped {
            writeln!(stdout, "skipped: {skipped}")?;
        }
        Ok(())
    };
    report().map_err(runtime)?;
    if summary.images > 0 && summary.lines == 0 {
        return Err(Failure::Runtime("no dataset lines were produced".into()));
    }
    Ok(EXIT_OK)
}

fn write_json(out: &mut dyn Write, value: &impl Serialize) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)
}

fn write_file(path: &Path, value: &impl Serialize) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)
}

/// Keeps ids usable as file names.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn write_batch(out: &Path, outcome: &BatchOutcome) -> io::Result<()> {
    let reports = out.join("reports");
    fs::create_dir_all(&reports)?;
    for item in &outcome.items {
        if let Some(report) = &item.report {
            write_file(&reports.join(format!("{}.json", file_stem(&item.id))), report)?;
        }
    }
    write_file(&out.join("summary.json"), &BatchSummary::from(outcome))
}

#[derive(Serialize)]
struct ItemSummary<'a> {
    id: &'a str,
    label: Option<u8>,
    granularity: Option<u8>,
    decision: Option<u8>,
    h_acc: Option<f64>,
    h_comp: Option<f64>,
    realized_depth: Option<u32>,
    error: Option<&'a str>,
}

#[derive(Serialize)]
struct BatchSummary<'a> {
    items: Vec<ItemSummary<'a>>,
    metrics: Option<&'a MetricsSummary>,
    note: Option<&'a str>,
}

impl<'a> From<&'a BatchOutcome> for BatchSummary<'a> {
    fn from(outcome: &'a BatchOutcome) -> Self {
        BatchSummary {
            items: outcome
                .items
                .iter()
                .map(|i| ItemSummary {
                    id: &i.id,
                    label: i.label,
                    granularity: i.granularity,
                    decision: i.report.as_ref().map(|r| r.decision.as_bit()),
                    h_acc: i.report.as_ref().map(|r| r.h_acc),
                    h_comp: i.report.as_ref().map(|r| r.h_comp),
                    realized_depth: i.report.as_ref().map(|r| r.realized_depth),
                    error: i.error.as_deref(),
                })
                .collect(),
            metrics: outcome.metrics.as_ref(),
            note: outcome.note.as_deref(),
        }
    }
}

fn print_report(out: &mut dyn Write, report: &EvaluationReport) -> io::Result<()> {
    writeln!(out, "decision: {}", report.decision.as_str())?;
    writeln!(out, "H_acc: {:.6}", report.h_acc)?;
    writeln!(out, "H_comp: {:.6}", report.h_comp)?;
    writeln!(out, "depth: {}", report.realized_depth)?;
    let stop = serde_json::to_value(report.stop_reason).ok();
    if let Some(serde_json::Value::String(s)) = stop {
        writeln!(out, "stop: {s}")?;
    }
    for level in &report.per_level {
        writeln!(
            out,
            "level {}: {} questions, weighted correct {:.3}",
            level.level, level.count, level.correct_weighted_sum
        )?;
    }
    if !report.explanation.is_empty() {
        writeln!(out, "explanation: {}", report.explanation.trim())?;
    }
    for d in &report.diagnostics {
        match d.level {
            Some(l) => writeln!(out, "warning [{} L{l}]: {}", d.stage, d.message)?,
            None => writeln!(out, "warning [{}]: {}", d.stage, d.message)?,
        }
    }
    Ok(())
}

fn rate(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", x * 100.0)).unwrap_or_else(|| "n/a".into())
}

fn print_metrics(out: &mut dyn Write, name: &str, m: &MetricsSummary) -> io::Result<()> {
    let c = &m.confusion;
    writeln!(
        out,
        "{name}: TPR {} FPR {} precision {} F1 {} (tp {} fp {} tn {} fn {})",
        rate(m.tpr),
        rate(m.fpr),
        rate(m.precision),
        rate(m.f1),
        c.tp,
        c.fp,
        c.tn,
        c.fn_
    )
}

fn print_batch(out: &mut dyn Write, outcome: &BatchOutcome) -> io::Result<()> {
    for item in &outcome.items {
        match (&item.report, &item.error) {
            (Some(r), _) => writeln!(
                out,
                "{}: {} H_acc {:.6} H_comp {:.6} depth {}",
                item.id,
                r.decision.as_str(),
                r.h_acc,
                r.h_comp,
                r.realized_depth
            )?,
            (None, Some(e)) => writeln!(out, "{}: error: {e}", item.id)?,
            (None, None) => writeln!(out, "{}: no result", item.id)?,
        }
    }
    if let Some(m) = &outcome.metrics {
        print_metrics(out, "overall", m)?;
        if let Some(groups) = &m.per_granularity {
            for (g, gm) in groups {
                print_metrics(out, &format!("G{g}"), gm)?;
            }
        }
    }
    if let Some(note) = &outcome.note {
        writeln!(out, "note: {note}")?;
    }
    Ok(())
}
