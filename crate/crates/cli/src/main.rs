//! Command-line surface: single decode, batch eval, contrast-weight sweep,
//! prompt-variant checking, and fixture generation.
//!
//! Exit codes: 0 success, 2 usage/config errors, 3 backend/runtime errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qcd_core::backend::{HttpBackend, LogitEndpointConfig, NextTokenProvider, TableLm};
use qcd_core::decoder::{
    decode, decode_greedy, detokenize, write_trace, DecodeMode, DecodeSession,
};
use qcd_core::dist::{CombineSpace, QcdConfig};
use qcd_core::embedding::{
    check_variant, EmbeddingProvider, FixtureEmbeddings, HttpEmbeddings, DEFAULT_GATE_THRESHOLD,
};
use qcd_core::evalkit::{
    decode_task, emit_report, load_stopwords, load_tasks_with_stopwords, run_eval, CellSpec,
    EvalMatrix, EvalOptions, ReportFormat, TaskInstance,
};
use qcd_core::fixtures::{write_fixtures, DEFAULT_FIXTURE_SEED};
use qcd_core::prompt::{build_sequence, InstructionTemplate, TemplateName};
use qcd_core::Error as CoreError;

const AUTH_TOKEN_ENV: &str = "QCD_AUTH_TOKEN";

const EXIT_CONFIG: u8 = 2;
const EXIT_BACKEND: u8 = 3;

#[derive(Parser)]
#[command(name = "qcd", version, about = "Query-contrastive decoding engine and eval harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode one input and print the generated text.
    Decode(DecodeArgs),
    /// Evaluate a task file over a configuration matrix.
    Eval(EvalArgs),
    /// Sweep the contrast weight over a task file.
    Sweep(SweepArgs),
    /// Score a hint-prompt variant against the canonical prompt.
    PromptsCheck(PromptsCheckArgs),
    /// Regenerate the bundled fixture files.
    GenFixtures(GenFixturesArgs),
}

/// Contrast handling: combine in log space (default), combine on raw
/// probabilities, or skip the contrast entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Log,
    Prob,
    Base,
}

impl ModeArg {
    fn decode_mode(self) -> DecodeMode {
        match self {
            ModeArg::Base => DecodeMode::Base,
            _ => DecodeMode::Qcd,
        }
    }

    fn space(self) -> CombineSpace {
        match self {
            ModeArg::Prob => CombineSpace::Prob,
            _ => CombineSpace::Log,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn is_on(self) -> bool {
        matches!(self, OnOff::On)
    }
}

#[derive(Args)]
struct CommonArgs {
    /// Config file with `key = value` lines using these same field names;
    /// explicit flags win over file values.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Backend URI: `table:<path>` or `http:<url>`.
    #[arg(long)]
    backend: Option<String>,

    /// Contrast amplification weight (default 0.5).
    #[arg(long)]
    alpha: Option<f64>,

    /// log | prob | base (default log).
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,

    /// Default 0.7.
    #[arg(long)]
    temperature: Option<f64>,

    /// Default 0.9.
    #[arg(long)]
    top_p: Option<f64>,

    /// Append the canonical hint to the instruction (default off).
    #[arg(long, value_enum)]
    hint: Option<OnOff>,

    /// Instruction template name: CB-Ins, CoT-Ins, TD-Ins, TD-Ins++, HI
    /// (default TD-Ins).
    #[arg(long)]
    instruction: Option<String>,

    /// Master seed; all randomness derives from it (default 0).
    #[arg(long)]
    seed: Option<u64>,

    /// Default 64.
    #[arg(long)]
    max_tokens: Option<usize>,

    /// Argmax decoding instead of seeded sampling.
    #[arg(long)]
    greedy: bool,

    /// Value for the attribute placeholder of task-rewrite templates
    /// (default "attribute").
    #[arg(long)]
    rewrite_attribute: Option<String>,

    /// Stopword list file; defaults to the built-in list.
    #[arg(long)]
    stopwords: Option<PathBuf>,
}

/// Values read from a `--config` file; any subset of the flag fields.
#[derive(Debug, Default)]
struct FileConfig {
    backend: Option<String>,
    alpha: Option<f64>,
    mode: Option<ModeArg>,
    temperature: Option<f64>,
    top_p: Option<f64>,
    hint: Option<OnOff>,
    instruction: Option<String>,
    seed: Option<u64>,
    max_tokens: Option<usize>,
    greedy: Option<bool>,
    rewrite_attribute: Option<String>,
    stopwords: Option<PathBuf>,
    task_file: Option<PathBuf>,
    trace_out: Option<PathBuf>,
}

fn load_file_config(path: &Path) -> Result<FileConfig, Failure> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("config file {}: {e}", path.display())))?;
    let mut cfg = FileConfig::default();
    for (lineno, raw) in content.lines().enumerate() {
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |msg: String| {
            Failure::config(format!("config file {} line {}: {msg}", path.display(), lineno + 1))
        };
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| bad("expected key = value".into()))?;
        let (key, value) = (key.trim(), value.trim());
        let parse_num = |what: &str| -> Result<f64, Failure> {
            value.parse().map_err(|_| bad(format!("bad {what} {value:?}")))
        };
        match key {
            "backend" => cfg.backend = Some(value.to_string()),
            "alpha" => cfg.alpha = Some(parse_num("alpha")?),
            "mode" => {
                cfg.mode = Some(match value {
                    "log" => ModeArg::Log,
                    "prob" => ModeArg::Prob,
                    "base" => ModeArg::Base,
                    other => return Err(bad(format!("bad mode {other:?}"))),
                })
            }
            "temperature" => cfg.temperature = Some(parse_num("temperature")?),
            "top_p" => cfg.top_p = Some(parse_num("top_p")?),
            "hint" => {
                cfg.hint = Some(match value {
                    "on" => OnOff::On,
                    "off" => OnOff::Off,
                    other => return Err(bad(format!("bad hint {other:?}"))),
                })
            }
            "instruction" => cfg.instruction = Some(value.to_string()),
            "seed" => cfg.seed = Some(parse_num("seed")? as u64),
            "max_tokens" => cfg.max_tokens = Some(parse_num("max_tokens")? as usize),
            "greedy" => {
                cfg.greedy = Some(match value {
                    "true" => true,
                    "false" => false,
                    other => return Err(bad(format!("bad greedy {other:?}"))),
                })
            }
            "rewrite_attribute" => cfg.rewrite_attribute = Some(value.to_string()),
            "stopwords" => cfg.stopwords = Some(PathBuf::from(value)),
            "task_file" => cfg.task_file = Some(PathBuf::from(value)),
            "trace_out" => cfg.trace_out = Some(PathBuf::from(value)),
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    Ok(cfg)
}

/// Fully resolved run configuration: flags over file values over defaults.
struct Common {
    backend: String,
    alpha: f64,
    mode: ModeArg,
    temperature: f64,
    top_p: f64,
    hint: bool,
    instruction: TemplateName,
    seed: u64,
    max_tokens: usize,
    greedy: bool,
    rewrite_attribute: String,
    stopwords: Option<PathBuf>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<(Common, FileConfig), Failure> {
        let file = match &self.config {
            Some(path) => load_file_config(path)?,
            None => FileConfig::default(),
        };
        let backend = self
            .backend
            .clone()
            .or_else(|| file.backend.clone())
            .ok_or_else(|| Failure::config("missing --backend (or a backend= config entry)"))?;
        let instruction_name = self
            .instruction
            .clone()
            .or_else(|| file.instruction.clone())
            .unwrap_or_else(|| "TD-Ins".to_string());
        let common = Common {
            backend,
            alpha: self.alpha.or(file.alpha).unwrap_or(0.5),
            mode: self.mode.or(file.mode).unwrap_or(ModeArg::Log),
            temperature: self.temperature.or(file.temperature).unwrap_or(0.7),
            top_p: self.top_p.or(file.top_p).unwrap_or(0.9),
            hint: self.hint.or(file.hint).unwrap_or(OnOff::Off).is_on(),
            instruction: parse_instruction(&instruction_name)?,
            seed: self.seed.or(file.seed).unwrap_or(0),
            max_tokens: self.max_tokens.or(file.max_tokens).unwrap_or(64),
            greedy: self.greedy || file.greedy.unwrap_or(false),
            rewrite_attribute: self
                .rewrite_attribute
                .clone()
                .or_else(|| file.rewrite_attribute.clone())
                .unwrap_or_else(|| "attribute".to_string()),
            stopwords: self.stopwords.clone().or_else(|| file.stopwords.clone()),
        };
        Ok((common, file))
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Context pair as `ref|text`; repeatable.
    #[arg(long = "pair")]
    pairs: Vec<String>,

    #[arg(long)]
    query: Option<String>,

    /// Read pairs and query from a single task-file record instead.
    #[arg(long)]
    input: Option<PathBuf>,

    /// Write the per-step trace here.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Task file; may instead come from the config file's task_file entry.
    #[arg(long)]
    tasks: Option<PathBuf>,

    /// Comma-separated modes to evaluate (base, qcd).
    #[arg(long, default_value = "base,qcd")]
    modes: String,

    /// Comma-separated contrast weights for the qcd cells.
    #[arg(long, default_value = "0.5")]
    alphas: String,

    /// Comma-separated hint settings (on, off).
    #[arg(long, default_value = "off")]
    hints: String,

    /// Comma-separated instruction template names.
    #[arg(long, default_value = "TD-Ins")]
    instructions: String,

    /// Baseline cell label for the delta column; defaults to the first cell.
    #[arg(long)]
    baseline: Option<String>,

    /// Write the machine-readable lines report here.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Write one trace file per (cell, task) here.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Task file; may instead come from the config file's task_file entry.
    #[arg(long)]
    tasks: Option<PathBuf>,

    /// Comma-separated contrast weights to sweep.
    #[arg(long, default_value = "0.25,0.5,0.75,1.0")]
    alpha_list: String,

    /// Write the machine-readable lines report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PromptsCheckArgs {
    /// Variant text to score.
    #[arg(long)]
    variant: String,

    #[arg(long, default_value_t = DEFAULT_GATE_THRESHOLD)]
    threshold: f64,

    /// Embedding source: a fixtures file path or `http:<url>`.
    #[arg(long)]
    embeddings: String,
}

#[derive(Args)]
struct GenFixturesArgs {
    #[arg(long, default_value_t = DEFAULT_FIXTURE_SEED)]
    seed: u64,

    #[arg(long)]
    out_dir: PathBuf,
}

/// A failure bucketed into its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::Backend(_)
            | CoreError::BackendExhausted { .. }
            | CoreError::ProtocolMismatch { .. }
            | CoreError::DecodeStep { .. }
            | CoreError::UnknownToken { .. }
            | CoreError::Embedding(_)
            | CoreError::Sink(_) => EXIT_BACKEND,
            _ => EXIT_CONFIG,
        };
        Self { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Decode(args) => cmd_decode(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::PromptsCheck(args) => cmd_prompts_check(args),
        Command::GenFixtures(args) => cmd_gen_fixtures(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_backend(uri: &str) -> Result<Box<dyn NextTokenProvider>, Failure> {
    if let Some(path) = uri.strip_prefix("table:") {
        let lm = TableLm::load(path).map_err(|e| Failure::config(format!("backend {path}: {e}")))?;
        Ok(Box::new(lm))
    } else if let Some(url) = uri.strip_prefix("http:") {
        let mut config = LogitEndpointConfig::new(format!("http:{url}"));
        config.auth_token = std::env::var(AUTH_TOKEN_ENV).ok();
        let backend = HttpBackend::connect(config).map_err(Failure::from)?;
        Ok(Box::new(backend))
    } else {
        Err(Failure::config(format!(
            "backend URI must start with table: or http:, got {uri:?}"
        )))
    }
}

fn parse_instruction(name: &str) -> Result<TemplateName, Failure> {
    name.parse::<TemplateName>().map_err(Failure::from)
}

fn stopwords_for(common: &Common) -> Result<std::collections::BTreeSet<String>, Failure> {
    match &common.stopwords {
        Some(path) => load_stopwords(path)
            .map_err(|e| Failure::config(format!("stopwords {}: {e}", path.display()))),
        None => Ok(qcd_core::evalkit::default_stopwords()),
    }
}

fn load_task_file(path: &Path, common: &Common) -> Result<Vec<TaskInstance>, Failure> {
    let stopwords = stopwords_for(common)?;
    load_tasks_with_stopwords(path, &stopwords)
        .map_err(|e| Failure::config(format!("task file {}: {e}", path.display())))
}

fn qcd_config(common: &Common) -> QcdConfig {
    QcdConfig {
        alpha: common.alpha,
        space: common.mode.space(),
        temperature: common.temperature,
        top_p: common.top_p,
    }
}

fn eval_options(common: &Common) -> EvalOptions {
    EvalOptions {
        space: common.mode.space(),
        temperature: common.temperature,
        top_p: common.top_p,
        seed: common.seed,
        max_tokens: common.max_tokens,
        greedy: true,
        rewrite_attribute: common.rewrite_attribute.clone(),
    }
}

fn cmd_decode(args: DecodeArgs) -> Result<(), Failure> {
    let (common, file) = args.common.resolve()?;
    let (pairs, query) = decode_inputs(&args, &common)?;
    let instruction = InstructionTemplate::builtin(common.instruction)
        .with_attribute(&common.rewrite_attribute);
    let seq = build_sequence(&instruction, &pairs, &query, common.hint)?;

    let provider = load_backend(&common.backend)?;
    let session = DecodeSession::new(
        provider.as_ref(),
        seq,
        qcd_config(&common),
        common.mode.decode_mode(),
        common.seed,
    )?
    .with_max_tokens(common.max_tokens);

    let trace = if common.greedy {
        decode_greedy(&session)?
    } else {
        decode(&session)?
    };
    if let Some(path) = args.trace_out.clone().or(file.trace_out) {
        std::fs::write(&path, write_trace(&trace, provider.vocabulary()))
            .map_err(|e| Failure::config(format!("trace file {}: {e}", path.display())))?;
    }
    println!("{}", detokenize(&trace, provider.vocabulary()));
    Ok(())
}

fn decode_inputs(
    args: &DecodeArgs,
    common: &Common,
) -> Result<(Vec<(String, String)>, String), Failure> {
    if let Some(path) = &args.input {
        let stopwords = stopwords_for(common)?;
        let tasks = load_tasks_with_stopwords(path, &stopwords)
            .map_err(|e| Failure::config(format!("input file {}: {e}", path.display())))?;
        let task = tasks
            .into_iter()
            .next()
            .ok_or_else(|| Failure::config(format!("input file {} is empty", path.display())))?;
        return Ok((task.context_pairs, task.query));
    }
    if args.pairs.is_empty() {
        return Err(Failure::config("provide --pair ref|text at least once, or --input"));
    }
    let query = args
        .query
        .clone()
        .ok_or_else(|| Failure::config("provide --query, or --input"))?;
    let pairs = args
        .pairs
        .iter()
        .map(|p| {
            p.split_once('|')
                .map(|(r, t)| (r.to_string(), t.to_string()))
                .ok_or_else(|| Failure::config(format!("bad --pair {p:?}, expected ref|text")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((pairs, query))
}

fn parse_list<T, E: std::fmt::Display>(
    raw: &str,
    what: &str,
    parse: impl Fn(&str) -> Result<T, E>,
) -> Result<Vec<T>, Failure> {
    let items: Vec<&str> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(Failure::config(format!("empty {what} list")));
    }
    items
        .into_iter()
        .map(|s| parse(s).map_err(|e| Failure::config(format!("bad {what} {s:?}: {e}"))))
        .collect()
}

fn build_matrix(args: &EvalArgs) -> Result<EvalMatrix, Failure> {
    let modes = parse_list(&args.modes, "mode", |s| match s {
        "base" | "qcd" => Ok(s.to_string()),
        other => Err(format!("unknown mode {other:?}")),
    })?;
    let include_base = modes.iter().any(|m| m == "base");
    let include_qcd = modes.iter().any(|m| m == "qcd");
    let alphas = if include_qcd {
        parse_list(&args.alphas, "alpha", str::parse::<f64>)?
    } else {
        Vec::new()
    };
    let hints = parse_list(&args.hints, "hint", |s| match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected on or off, got {other:?}")),
    })?;
    let instructions = parse_list(&args.instructions, "instruction", |s| {
        s.parse::<TemplateName>().map_err(|e| e.to_string())
    })?;
    Ok(EvalMatrix { include_base, alphas, hints, instructions })
}

fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn write_cell_traces(
    dir: &Path,
    tasks: &[TaskInstance],
    provider: &dyn NextTokenProvider,
    cells: &[CellSpec],
    opts: &EvalOptions,
) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::config(format!("trace dir {}: {e}", dir.display())))?;
    for cell in cells {
        let snapshot = qcd_core::evalkit::ConfigSnapshot {
            mode: cell.mode,
            alpha: cell.alpha,
            hint: cell.hint,
            instruction: cell.instruction,
            seed: opts.seed,
        };
        let label = sanitize_label(&snapshot.label());
        for task in tasks {
            let trace = match decode_task(task, provider, cell, opts) {
                Ok(trace) => write_trace(&trace, provider.vocabulary()),
                Err(e) => format!("failed: {e}\n"),
            };
            let path = dir.join(format!("{label}__{}.trace", sanitize_label(&task.id)));
            std::fs::write(&path, trace)
                .map_err(|e| Failure::config(format!("trace file {}: {e}", path.display())))?;
        }
    }
    Ok(())
}

fn emit_eval_reports(
    reports: &[qcd_core::evalkit::EvalReport],
    baseline: Option<&str>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let default_label = reports
        .first()
        .and_then(|r| r.config.as_ref())
        .map(|c| c.label());
    let baseline = baseline.map(str::to_string).or(default_label);
    let table = emit_report(reports, ReportFormat::Table, baseline.as_deref())?;
    print!("{table}");
    if let Some(path) = out {
        let lines = emit_report(reports, ReportFormat::Lines, baseline.as_deref())?;
        std::fs::write(path, lines)
            .map_err(|e| Failure::config(format!("report file {}: {e}", path.display())))?;
    }
    Ok(())
}

fn required_tasks(
    flag: &Option<PathBuf>,
    file: &FileConfig,
) -> Result<PathBuf, Failure> {
    flag.clone()
        .or_else(|| file.task_file.clone())
        .ok_or_else(|| Failure::config("missing --tasks (or a task_file= config entry)"))
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let (common, file) = args.common.resolve()?;
    let tasks_path = required_tasks(&args.tasks, &file)?;
    let tasks = load_task_file(&tasks_path, &common)?;
    let matrix = build_matrix(&args)?;
    if matrix.is_empty() {
        return Err(Failure::config("evaluation matrix is empty"));
    }
    let provider = load_backend(&common.backend)?;
    let opts = eval_options(&common);
    let reports = run_eval(&tasks, provider.as_ref(), &matrix, &opts)?;
    emit_eval_reports(&reports, args.baseline.as_deref(), args.out.as_deref())?;
    if let Some(dir) = &args.trace_dir {
        write_cell_traces(dir, &tasks, provider.as_ref(), &matrix.cells(), &opts)?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Failure> {
    let (common, file) = args.common.resolve()?;
    let tasks_path = required_tasks(&args.tasks, &file)?;
    let tasks = load_task_file(&tasks_path, &common)?;
    let alphas = parse_list(&args.alpha_list, "alpha", str::parse::<f64>)?;
    let matrix = EvalMatrix {
        include_base: false,
        alphas,
        hints: vec![common.hint],
        instructions: vec![common.instruction],
    };
    let provider = load_backend(&common.backend)?;
    let opts = eval_options(&common);
    let reports = run_eval(&tasks, provider.as_ref(), &matrix, &opts)?;
    // Sweep rows stand on their own; no delta baseline.
    let table = emit_report(&reports, ReportFormat::Table, None)?;
    print!("{table}");
    if let Some(path) = &args.out {
        let lines = emit_report(&reports, ReportFormat::Lines, None)?;
        std::fs::write(path, lines)
            .map_err(|e| Failure::config(format!("report file {}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_prompts_check(args: PromptsCheckArgs) -> Result<(), Failure> {
    let provider: Box<dyn EmbeddingProvider> = if args.embeddings.starts_with("http:") {
        let mut client = HttpEmbeddings::new(args.embeddings.clone());
        if let Ok(token) = std::env::var(AUTH_TOKEN_ENV) {
            client = client.with_auth_token(token);
        }
        Box::new(client)
    } else {
        Box::new(
            FixtureEmbeddings::load(&args.embeddings)
                .map_err(|e| Failure::config(format!("embeddings {}: {e}", args.embeddings)))?,
        )
    };
    let report = check_variant(&args.variant, provider.as_ref(), args.threshold)?;
    println!("variant: {}", report.variant_text);
    println!("similarity: {:.3}", report.similarity);
    println!("threshold: {:.3}", args.threshold);
    println!("result: {}", if report.passes_gate { "PASS" } else { "FAIL" });
    Ok(())
}

fn cmd_gen_fixtures(args: GenFixturesArgs) -> Result<(), Failure> {
    let written = write_fixtures(args.seed, &args.out_dir)
        .map_err(|e| Failure::config(format!("out dir {}: {e}", args.out_dir.display())))?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}
