//! Synthetic task format, the two-dimension accuracy metric, the
//! compliance-failure error count, and the batch evaluation runner.
//!
//! Tasks live in line-oriented files of tab-separated `key=value` fields;
//! see `docs/formats.md`. Predictions are extracted from decoded text by
//! lexicon keyword matching, and a task counts as correct only when both
//! the object and the attribute match the ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::backend::NextTokenProvider;
use crate::decoder::{
    decode, decode_greedy, detokenize, DecodeMode, DecodeSession, DecodeTrace,
};
use crate::dist::{CombineSpace, QcdConfig};
use crate::error::{Error, Result};
use crate::prompt::{
    build_sequence, instruction_token_length, InstructionTemplate, TemplateName,
    WhitespaceCounter,
};

/// Words ignored when deriving context keyword sets from pair texts. The
/// same list ships as `fixtures/stopwords.txt`.
pub const DEFAULT_STOPWORDS: [&str; 15] = [
    "a", "an", "the", "of", "in", "on", "at", "with", "and", "or", "to", "is", "are", "this",
    "that",
];

/// One synthetic task: context pairs, a query, and the ground truth along
/// both scored dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub id: String,
    pub context_pairs: Vec<(String, String)>,
    pub query: String,
    pub truth_object: String,
    pub truth_attribute: String,
    pub object_lexicon: Vec<String>,
    pub attribute_lexicon: Vec<String>,
    /// Non-stopword pair-text words that belong to the object lexicon.
    pub context_objects: BTreeSet<String>,
    /// Non-stopword pair-text words that belong to the attribute lexicon.
    pub context_attributes: BTreeSet<String>,
    pub shot: usize,
}

/// Object/attribute keywords extracted from one decoded text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub task_id: String,
    pub object: String,
    pub attribute: String,
    pub raw_text: String,
}

pub fn load_stopwords(path: impl AsRef<Path>) -> Result<BTreeSet<String>> {
    let content = std::fs::read_to_string(path)?;
    Ok(content
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect())
}

pub fn default_stopwords() -> BTreeSet<String> {
    DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect()
}

/// Loads a task file using the built-in stopword list.
pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<TaskInstance>> {
    load_tasks_with_stopwords(path, &default_stopwords())
}

pub fn load_tasks_with_stopwords(
    path: impl AsRef<Path>,
    stopwords: &BTreeSet<String>,
) -> Result<Vec<TaskInstance>> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path)?;
    let tasks = parse_tasks(&content, stopwords)?;
    if tasks.is_empty() {
        log::warn!("task file {} contains no records", path.display());
    }
    Ok(tasks)
}

pub fn parse_tasks(content: &str, stopwords: &BTreeSet<String>) -> Result<Vec<TaskInstance>> {
    let mut tasks = Vec::new();
    let mut index = 0usize;
    for raw in content.lines() {
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        index += 1;
        tasks.push(parse_task_record(raw, index, stopwords)?);
    }
    Ok(tasks)
}

fn parse_task_record(
    raw: &str,
    index: usize,
    stopwords: &BTreeSet<String>,
) -> Result<TaskInstance> {
    let err = |message: String| Error::TaskRecord { index, message };
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for part in raw.split('\t') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| err(format!("malformed field {part:?}")))?;
        if fields.insert(key, value).is_some() {
            return Err(err(format!("duplicate field {key:?}")));
        }
    }
    const REQUIRED: [&str; 8] = [
        "id",
        "shot",
        "pairs",
        "query",
        "truth_object",
        "truth_attribute",
        "object_lexicon",
        "attribute_lexicon",
    ];
    for key in REQUIRED {
        if !fields.contains_key(key) {
            return Err(err(format!("missing field {key:?}")));
        }
    }
    for key in fields.keys() {
        if !REQUIRED.contains(key) {
            return Err(err(format!("unknown field {key:?}")));
        }
    }

    let shot: usize = fields["shot"]
        .parse()
        .map_err(|_| err(format!("bad shot count {:?}", fields["shot"])))?;
    let mut context_pairs = Vec::new();
    for pair in fields["pairs"].split(";;") {
        let (image_ref, text) = pair
            .split_once('|')
            .ok_or_else(|| err(format!("bad pair {pair:?}, expected ref|text")))?;
        if image_ref.is_empty() || text.is_empty() {
            return Err(err(format!("empty ref or text in pair {pair:?}")));
        }
        context_pairs.push((image_ref.to_string(), text.to_string()));
    }
    if context_pairs.len() != shot {
        return Err(err(format!(
            "shot={} but {} pairs given",
            shot,
            context_pairs.len()
        )));
    }
    let lexicon = |key: &str| -> Vec<String> {
        fields[key]
            .split_whitespace()
            .map(str::to_lowercase)
            .collect()
    };
    let object_lexicon = lexicon("object_lexicon");
    let attribute_lexicon = lexicon("attribute_lexicon");
    if object_lexicon.is_empty() || attribute_lexicon.is_empty() {
        return Err(err("lexicons must be non-empty".into()));
    }
    let truth_object = fields["truth_object"].to_lowercase();
    let truth_attribute = fields["truth_attribute"].to_lowercase();
    let query = fields["query"].to_string();
    if query.is_empty() || truth_object.is_empty() || truth_attribute.is_empty() {
        return Err(err("query and truth fields must be non-empty".into()));
    }

    let context_words: Vec<String> = context_pairs
        .iter()
        .flat_map(|(_, text)| text.split_whitespace())
        .map(str::to_lowercase)
        .filter(|w| !stopwords.contains(w))
        .collect();
    let in_lexicon = |lex: &[String]| -> BTreeSet<String> {
        context_words
            .iter()
            .filter(|w| lex.contains(w))
            .cloned()
            .collect()
    };

    Ok(TaskInstance {
        id: fields["id"].to_string(),
        context_objects: in_lexicon(&object_lexicon),
        context_attributes: in_lexicon(&attribute_lexicon),
        context_pairs,
        query,
        truth_object,
        truth_attribute,
        object_lexicon,
        attribute_lexicon,
        shot,
    })
}

/// First raw-text word found in each lexicon becomes the prediction for
/// that dimension; no match leaves the dimension empty.
pub fn extract_prediction(task: &TaskInstance, raw_text: &str) -> Prediction {
    let words: Vec<String> = raw_text.split_whitespace().map(str::to_lowercase).collect();
    let first_in = |lex: &[String]| -> String {
        words
            .iter()
            .find(|w| lex.contains(w))
            .cloned()
            .unwrap_or_default()
    };
    Prediction {
        task_id: task.id.clone(),
        object: first_in(&task.object_lexicon),
        attribute: first_in(&task.attribute_lexicon),
        raw_text: raw_text.to_string(),
    }
}

/// Cell coordinates recorded into every report.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigSnapshot {
    pub mode: DecodeMode,
    pub alpha: f64,
    pub hint: bool,
    pub instruction: TemplateName,
    pub seed: u64,
}

impl ConfigSnapshot {
    /// Stable cell label used in reports and for baseline lookup.
    pub fn label(&self) -> String {
        let mode = match self.mode {
            DecodeMode::Base => "base".to_string(),
            DecodeMode::Qcd => format!("qcd@{:.2}", self.alpha),
        };
        let hint = if self.hint { "on" } else { "off" };
        format!("{mode}|hint={hint}|{}", self.instruction)
    }
}

/// Scored results for one configuration cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config: Option<ConfigSnapshot>,
    /// (task id, both-dimensions-correct) in task order.
    pub per_task: Vec<(String, bool)>,
    pub accuracy: f64,
    pub error_count: usize,
    pub predictions: Vec<Prediction>,
    /// Per-task decode failures, recorded rather than aborting the run.
    pub failures: Vec<(String, String)>,
}

fn prediction_map(predictions: &[Prediction]) -> BTreeMap<&str, &Prediction> {
    predictions.iter().map(|p| (p.task_id.as_str(), p)).collect()
}

fn is_correct(task: &TaskInstance, pred: &Prediction) -> bool {
    pred.object == task.truth_object && pred.attribute == task.truth_attribute
}

/// Accuracy over both dimensions plus the compliance error count.
pub fn score_accuracy(tasks: &[TaskInstance], predictions: &[Prediction]) -> Result<EvalReport> {
    let by_id = prediction_map(predictions);
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut correct = 0usize;
    for task in tasks {
        let pred = by_id
            .get(task.id.as_str())
            .ok_or_else(|| Error::MissingPrediction(task.id.clone()))?;
        let ok = is_correct(task, pred);
        correct += ok as usize;
        per_task.push((task.id.clone(), ok));
    }
    let accuracy = if tasks.is_empty() {
        0.0
    } else {
        correct as f64 / tasks.len() as f64
    };
    Ok(EvalReport {
        config: None,
        per_task,
        accuracy,
        error_count: count_compliance_errors(tasks, predictions),
        predictions: predictions.to_vec(),
        failures: Vec::new(),
    })
}

/// Counts predictions that are right along one dimension while copying the
/// other from the input context: (1) the attribute matches the truth and
/// the object appears among the context objects, or (2) the object matches
/// the truth and the attribute appears among the context attributes. A
/// prediction satisfying both conditions counts once.
pub fn count_compliance_errors(tasks: &[TaskInstance], predictions: &[Prediction]) -> usize {
    let by_id = prediction_map(predictions);
    tasks
        .iter()
        .filter(|task| {
            let Some(pred) = by_id.get(task.id.as_str()) else {
                return false;
            };
            let cond1 = pred.attribute == task.truth_attribute
                && task.context_objects.contains(&pred.object);
            let cond2 = pred.object == task.truth_object
                && task.context_attributes.contains(&pred.attribute);
            cond1 || cond2
        })
        .count()
}

/// One decoding configuration to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub mode: DecodeMode,
    /// Contrast weight; zero for base cells.
    pub alpha: f64,
    pub hint: bool,
    pub instruction: TemplateName,
}

/// Evaluation grid over modes, contrast weights, hint settings, and
/// instructions.
#[derive(Debug, Clone)]
pub struct EvalMatrix {
    pub include_base: bool,
    pub alphas: Vec<f64>,
    pub hints: Vec<bool>,
    pub instructions: Vec<TemplateName>,
}

impl EvalMatrix {
    pub fn cells(&self) -> Vec<CellSpec> {
        let mut cells = Vec::new();
        for &instruction in &self.instructions {
            for &hint in &self.hints {
                if self.include_base {
                    cells.push(CellSpec {
                        mode: DecodeMode::Base,
                        alpha: 0.0,
                        hint,
                        instruction,
                    });
                }
                for &alpha in &self.alphas {
                    cells.push(CellSpec { mode: DecodeMode::Qcd, alpha, hint, instruction });
                }
            }
        }
        cells
    }

    pub fn is_empty(&self) -> bool {
        self.cells().is_empty()
    }
}

/// Run-wide settings shared by every cell.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub space: CombineSpace,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub max_tokens: usize,
    /// Greedy decoding keeps cells exactly reproducible; sampling draws
    /// from the per-step seed stream instead.
    pub greedy: bool,
    /// Fills the attribute placeholder of task-rewrite templates.
    pub rewrite_attribute: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            space: CombineSpace::Log,
            temperature: 0.7,
            top_p: 0.9,
            seed: 0,
            max_tokens: crate::decoder::DEFAULT_MAX_TOKENS,
            greedy: true,
            rewrite_attribute: "attribute".to_string(),
        }
    }
}

/// Decodes one task under one cell configuration.
pub fn decode_task(
    task: &TaskInstance,
    provider: &dyn NextTokenProvider,
    cell: &CellSpec,
    opts: &EvalOptions,
) -> Result<DecodeTrace> {
    let mut template = InstructionTemplate::builtin(cell.instruction);
    if template.requires_task_rewrite {
        template = template.with_attribute(&opts.rewrite_attribute);
    }
    let seq = build_sequence(&template, &task.context_pairs, &task.query, cell.hint)?;
    let cfg = QcdConfig {
        alpha: cell.alpha,
        space: opts.space,
        temperature: opts.temperature,
        top_p: opts.top_p,
    };
    let session = DecodeSession::new(provider, seq, cfg, cell.mode, opts.seed)?
        .with_max_tokens(opts.max_tokens);
    if opts.greedy {
        decode_greedy(&session)
    } else {
        decode(&session)
    }
}

/// Evaluates every matrix cell over every task. Cells are independent;
/// provider failures mark the affected task incorrect instead of aborting.
/// Results come back in deterministic (cell, task) order.
pub fn run_eval(
    tasks: &[TaskInstance],
    provider: &dyn NextTokenProvider,
    matrix: &EvalMatrix,
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    let cells = matrix.cells();
    if cells.is_empty() {
        return Err(Error::InvalidConfig("evaluation matrix is empty".into()));
    }
    let vocab = provider.vocabulary();
    let mut reports = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut predictions = Vec::with_capacity(tasks.len());
        let mut failures = Vec::new();
        for task in tasks {
            match decode_task(task, provider, cell, opts) {
                Ok(trace) => {
                    let text = detokenize(&trace, vocab);
                    predictions.push(extract_prediction(task, &text));
                }
                Err(e) => {
                    failures.push((task.id.clone(), e.to_string()));
                    predictions.push(extract_prediction(task, ""));
                }
            }
        }
        let mut report = score_accuracy(tasks, &predictions)?;
        report.config = Some(ConfigSnapshot {
            mode: cell.mode,
            alpha: cell.alpha,
            hint: cell.hint,
            instruction: cell.instruction,
            seed: opts.seed,
        });
        report.failures = failures;
        reports.push(report);
    }
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Lines,
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

/// Renders reports either as a fixed-width table or as machine-readable
/// lines. The delta column compares accuracies against the named baseline
/// cell; rows without a baseline (or the baseline itself) show `-`.
pub fn emit_report(
    reports: &[EvalReport],
    format: ReportFormat,
    baseline: Option<&str>,
) -> Result<String> {
    let labels: Vec<String> = reports
        .iter()
        .map(|r| {
            r.config
                .as_ref()
                .map(|c| c.label())
                .unwrap_or_else(|| "unlabeled".to_string())
        })
        .collect();
    let baseline_acc = match baseline {
        Some(name) => {
            let idx = labels
                .iter()
                .position(|l| l == name)
                .ok_or_else(|| Error::UnknownBaseline(name.to_string()))?;
            Some((name.to_string(), reports[idx].accuracy))
        }
        None => None,
    };
    let delta_for = |label: &str, accuracy: f64| -> String {
        match &baseline_acc {
            Some((base_label, base_acc)) if label != base_label => fmt3(accuracy - base_acc),
            _ => "-".to_string(),
        }
    };
    let counter = WhitespaceCounter;
    let ins_len = |r: &EvalReport| -> usize {
        r.config
            .as_ref()
            .map(|c| {
                instruction_token_length(&InstructionTemplate::builtin(c.instruction), &counter)
            })
            .unwrap_or(0)
    };

    let mut out = String::new();
    match format {
        ReportFormat::Table => {
            let width = labels.iter().map(|l| l.len()).max().unwrap_or(4).max(4);
            out.push_str(&format!(
                "{:<width$}  {:>6}  {:>7}  {:>4}  {:>7}  {:>4}\n",
                "cell", "acc", "delta", "len", "errors", "n"
            ));
            for (report, label) in reports.iter().zip(&labels) {
                out.push_str(&format!(
                    "{:<width$}  {:>6}  {:>7}  {:>4}  {:>7}  {:>4}\n",
                    label,
                    fmt3(report.accuracy),
                    delta_for(label, report.accuracy),
                    ins_len(report),
                    report.error_count,
                    report.per_task.len(),
                ));
            }
        }
        ReportFormat::Lines => {
            for (report, label) in reports.iter().zip(&labels) {
                let cfg = report.config.as_ref();
                let mode = match cfg.map(|c| c.mode) {
                    Some(DecodeMode::Base) => "base",
                    Some(DecodeMode::Qcd) => "qcd",
                    None => "unknown",
                };
                out.push_str(&format!(
                    "report\tcell={label}\tmode={mode}\talpha={}\thint={}\tinstruction={}\tseed={}\tn={}\taccuracy={}\terrors={}\tlen={}\tdelta={}\n",
                    fmt3(cfg.map(|c| c.alpha).unwrap_or(0.0)),
                    cfg.map(|c| if c.hint { "on" } else { "off" }).unwrap_or("off"),
                    cfg.map(|c| c.instruction.to_string()).unwrap_or_default(),
                    cfg.map(|c| c.seed).unwrap_or(0),
                    report.per_task.len(),
                    fmt3(report.accuracy),
                    report.error_count,
                    ins_len(report),
                    delta_for(label, report.accuracy),
                ));
                for ((task_id, ok), pred) in report.per_task.iter().zip(&report.predictions) {
                    out.push_str(&format!(
                        "task\tcell={label}\tid={task_id}\tcorrect={}\tobject={}\tattribute={}\n",
                        if *ok { "yes" } else { "no" },
                        pred.object,
                        pred.attribute,
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// One `report` line read back from the lines format, with its task lines.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportLine {
    pub cell: String,
    pub mode: String,
    pub alpha: f64,
    pub hint: bool,
    pub instruction: String,
    pub seed: u64,
    pub n: usize,
    pub accuracy: f64,
    pub errors: usize,
    pub len: usize,
    pub delta: Option<f64>,
    pub tasks: Vec<(String, bool, String, String)>,
}

/// Parses the lines format back into values; the inverse of
/// [`emit_report`] with [`ReportFormat::Lines`].
pub fn parse_report_lines(text: &str) -> Result<Vec<ReportLine>> {
    let mut out: Vec<ReportLine> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut parts = raw.split('\t');
        let kind = parts.next().unwrap_or_default();
        let mut fields = BTreeMap::new();
        for part in parts {
            let (k, v) = part.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("malformed field {part:?}"),
            })?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |key: &str| -> Result<String> {
            fields.get(key).cloned().ok_or_else(|| Error::Parse {
                line,
                message: format!("missing field {key:?}"),
            })
        };
        let parse_num = |key: &str| -> Result<f64> {
            get(key)?.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad number in field {key:?}"),
            })
        };
        match kind {
            "report" => {
                let delta_raw = get("delta")?;
                out.push(ReportLine {
                    cell: get("cell")?,
                    mode: get("mode")?,
                    alpha: parse_num("alpha")?,
                    hint: get("hint")? == "on",
                    instruction: get("instruction")?,
                    seed: parse_num("seed")? as u64,
                    n: parse_num("n")? as usize,
                    accuracy: parse_num("accuracy")?,
                    errors: parse_num("errors")? as usize,
                    len: parse_num("len")? as usize,
                    delta: if delta_raw == "-" {
                        None
                    } else {
                        Some(delta_raw.parse().map_err(|_| Error::Parse {
                            line,
                            message: "bad delta".into(),
                        })?)
                    },
                    tasks: Vec::new(),
                });
            }
            "task" => {
                let report = out.last_mut().ok_or_else(|| Error::Parse {
                    line,
                    message: "task line before any report line".into(),
                })?;
                report.tasks.push((
                    get("id")?,
                    get("correct")? == "yes",
                    get("object")?,
                    get("attribute")?,
                ));
            }
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown record kind {other:?}"),
                })
            }
        }
    }
    Ok(out)
}
