//! The dual-stream autoregressive loop: one context with the query, one
//! with it removed, a contrastive combination per step, and a full trace of
//! every distribution seen along the way.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backend::NextTokenProvider;
use crate::dist::{
    apply_temperature, apply_top_p, qcd_combine, sample_greedy, softmax, QcdConfig,
    TokenDistribution, Vocabulary,
};
use crate::error::{Error, Result};
use crate::prompt::{drop_query, render, MultimodalSequence};

pub const DEFAULT_MAX_TOKENS: usize = 64;

/// How many entries of each distribution a trace line keeps.
const TRACE_TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Contrast the full-input distribution against the query-omitted one.
    Qcd,
    /// Plain decoding from the full input; the sub context is never queried.
    Base,
}

/// One decoding run over a provider. The query-omitted sequence is always
/// derived internally from the full sequence, never caller-supplied.
pub struct DecodeSession<'a> {
    provider: &'a dyn NextTokenProvider,
    seq_full: MultimodalSequence,
    seq_sub: MultimodalSequence,
    pub cfg: QcdConfig,
    pub mode: DecodeMode,
    pub seed: u64,
    pub max_tokens: usize,
}

impl<'a> DecodeSession<'a> {
    pub fn new(
        provider: &'a dyn NextTokenProvider,
        seq_full: MultimodalSequence,
        cfg: QcdConfig,
        mode: DecodeMode,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let seq_sub = drop_query(&seq_full)?;
        Ok(Self {
            provider,
            seq_full,
            seq_sub,
            cfg,
            mode,
            seed,
            max_tokens: DEFAULT_MAX_TOKENS,
        })
    }

    pub fn with_max_tokens(mut self, max_tokens: usize) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn full_sequence(&self) -> &MultimodalSequence {
        &self.seq_full
    }

    pub fn sub_sequence(&self) -> &MultimodalSequence {
        &self.seq_sub
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Full-input distribution after temperature, before combination.
    pub p_full: TokenDistribution,
    /// Query-omitted distribution; absent in base mode.
    pub p_sub: Option<TokenDistribution>,
    /// The distribution actually sampled from (post nucleus truncation).
    pub p_qcd: TokenDistribution,
    pub chosen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub records: Vec<StepRecord>,
    /// Generated token strings, one per record, EOS included.
    pub output: Vec<String>,
    pub stop_reason: StopReason,
}

fn step_error(step: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::DecodeStep { step, source: Box::new(e) }
}

fn run_decode(
    session: &DecodeSession<'_>,
    mut pick: impl FnMut(&TokenDistribution, usize) -> usize,
) -> Result<DecodeTrace> {
    if session.max_tokens == 0 {
        return Err(Error::InvalidConfig("max_tokens must be > 0".into()));
    }
    let provider = session.provider;
    let vocab = provider.vocabulary();
    let ctx_full = render(&session.seq_full);
    let ctx_sub = render(&session.seq_sub);

    let mut prefix: Vec<String> = Vec::new();
    let mut records = Vec::new();
    let mut output = Vec::new();
    let mut stop_reason = StopReason::MaxTokens;

    for step in 0..session.max_tokens {
        let fail = step_error(step);
        let p_full = (|| -> Result<TokenDistribution> {
            let logits = provider.next_logits(&ctx_full, &prefix)?;
            softmax(&apply_temperature(&logits, session.cfg.temperature)?)
        })()
        .map_err(fail)?;

        let fail = step_error(step);
        let (p_sub, combined) = match session.mode {
            DecodeMode::Qcd => (|| -> Result<_> {
                // Both streams condition on the same generated prefix.
                let logits = provider.next_logits(&ctx_sub, &prefix)?;
                let p_sub = softmax(&apply_temperature(&logits, session.cfg.temperature)?)?;
                let combined = qcd_combine(&p_full, &p_sub, &session.cfg)?;
                Ok((Some(p_sub), combined))
            })()
            .map_err(fail)?,
            DecodeMode::Base => (None, p_full.clone()),
        };

        let p_qcd = apply_top_p(&combined, session.cfg.top_p).map_err(step_error(step))?;
        let chosen = pick(&p_qcd, step);
        let token = vocab.token(chosen).to_string();

        records.push(StepRecord { step, p_full, p_sub, p_qcd, chosen });
        output.push(token.clone());
        prefix.push(token);

        if chosen == vocab.eos_id() {
            stop_reason = StopReason::Eos;
            break;
        }
    }

    Ok(DecodeTrace { records, output, stop_reason })
}

/// Decodes by sampling. Each step draws from its own counter-derived stream
/// of the session seed, so traces reproduce regardless of timing.
pub fn decode(session: &DecodeSession<'_>) -> Result<DecodeTrace> {
    run_decode(session, |dist, step| {
        let mut rng = ChaCha8Rng::seed_from_u64(session.seed);
        rng.set_stream(step as u64);
        crate::dist::sample(dist, &mut rng)
    })
}

/// Decodes by argmax; fully deterministic regardless of seed.
pub fn decode_greedy(session: &DecodeSession<'_>) -> Result<DecodeTrace> {
    run_decode(session, |dist, _| sample_greedy(dist))
}

/// Space-joined non-EOS output tokens.
pub fn detokenize(trace: &DecodeTrace, vocab: &Vocabulary) -> String {
    let eos = vocab.token(vocab.eos_id());
    trace
        .output
        .iter()
        .filter(|t| t.as_str() != eos)
        .cloned()
        .collect::<Vec<_>>()
        .join(" ")
}

// ---------------------------------------------------------------------------
// Trace serialization
// ---------------------------------------------------------------------------

fn top_entries(dist: &TokenDistribution, vocab: &Vocabulary) -> String {
    let mut ids: Vec<usize> = (0..dist.vocab_size()).collect();
    ids.sort_by(|&a, &b| {
        dist.get(b)
            .partial_cmp(&dist.get(a))
            .expect("probabilities are finite")
            .then(a.cmp(&b))
    });
    ids.truncate(TRACE_TOP_K);
    ids.iter()
        .map(|&id| format!("{}:{:.6}", vocab.token(id), dist.get(id)))
        .collect::<Vec<_>>()
        .join(",")
}

/// One line per step, tab-separated fields in fixed order (step, chosen
/// token, top-5 of each distribution at six decimals), then a stop line.
/// Byte-identical for identical traces.
pub fn write_trace(trace: &DecodeTrace, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for rec in &trace.records {
        let sub = rec
            .p_sub
            .as_ref()
            .map(|d| top_entries(d, vocab))
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "step={}\tchosen={}\tfull={}\tsub={}\tqcd={}\n",
            rec.step,
            vocab.token(rec.chosen),
            top_entries(&rec.p_full, vocab),
            sub,
            top_entries(&rec.p_qcd, vocab),
        ));
    }
    let stop = match trace.stop_reason {
        StopReason::Eos => "eos",
        StopReason::MaxTokens => "max_tokens",
    };
    out.push_str(&format!("stop={stop}\n"));
    out
}

/// A trace line read back from its serialized form.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedStep {
    pub step: usize,
    pub chosen: String,
    pub full: Vec<(String, f64)>,
    pub sub: Option<Vec<(String, f64)>>,
    pub qcd: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTrace {
    pub steps: Vec<ParsedStep>,
    pub stop_reason: String,
}

fn parse_entries(field: &str, line: usize) -> Result<Vec<(String, f64)>> {
    field
        .split(',')
        .map(|item| {
            let (tok, p) = item.rsplit_once(':').ok_or_else(|| Error::Parse {
                line,
                message: format!("bad trace entry {item:?}"),
            })?;
            let p = p.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("bad probability {p:?}"),
            })?;
            Ok((tok.to_string(), p))
        })
        .collect()
}

pub fn parse_trace(text: &str) -> Result<ParsedTrace> {
    let mut steps = Vec::new();
    let mut stop_reason = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        if raw.is_empty() {
            continue;
        }
        if let Some(stop) = raw.strip_prefix("stop=") {
            stop_reason = Some(stop.to_string());
            continue;
        }
        let mut fields = raw.split('\t');
        let mut next_field = |name: &str| -> Result<String> {
            let field = fields.next().ok_or_else(|| Error::Parse {
                line,
                message: format!("missing field {name}"),
            })?;
            field
                .strip_prefix(&format!("{name}="))
                .map(str::to_string)
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("expected field {name}, got {field:?}"),
                })
        };
        let step = next_field("step")?.parse::<usize>().map_err(|_| Error::Parse {
            line,
            message: "bad step index".into(),
        })?;
        let chosen = next_field("chosen")?;
        let full = parse_entries(&next_field("full")?, line)?;
        let sub_field = next_field("sub")?;
        let sub = if sub_field == "-" {
            None
        } else {
            Some(parse_entries(&sub_field, line)?)
        };
        let qcd = parse_entries(&next_field("qcd")?, line)?;
        steps.push(ParsedStep { step, chosen, full, sub, qcd });
    }
    let stop_reason = stop_reason.ok_or_else(|| Error::Parse {
        line: 0,
        message: "missing stop line".into(),
    })?;
    Ok(ParsedTrace { steps, stop_reason })
}

// ---------------------------------------------------------------------------
// Text hand-off
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryReceipt {
    pub destination: String,
    pub bytes: usize,
    pub delivered: bool,
}

/// Where the detokenized text goes after decoding: a file, an external
/// command's stdin, or nowhere.
pub trait TextSink {
    fn deliver(&mut self, text: &str) -> Result<DeliveryReceipt>;
}

pub struct FileSink {
    path: PathBuf,
}

impl FileSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }
}

impl TextSink for FileSink {
    fn deliver(&mut self, text: &str) -> Result<DeliveryReceipt> {
        std::fs::write(&self.path, text)?;
        Ok(DeliveryReceipt {
            destination: format!("file:{}", self.path.display()),
            bytes: text.len(),
            delivered: true,
        })
    }
}

/// Swallows the text and reports a zero-delivery receipt.
pub struct NullSink;

impl TextSink for NullSink {
    fn deliver(&mut self, text: &str) -> Result<DeliveryReceipt> {
        let _ = text;
        Ok(DeliveryReceipt {
            destination: "null".to_string(),
            bytes: 0,
            delivered: false,
        })
    }
}

/// Pipes the text into an external command's stdin.
pub struct CommandSink {
    program: String,
    args: Vec<String>,
}

impl CommandSink {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self { program: program.into(), args }
    }
}

impl TextSink for CommandSink {
    fn deliver(&mut self, text: &str) -> Result<DeliveryReceipt> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .spawn()
            .map_err(|e| Error::Sink(format!("spawn {}: {e}", self.program)))?;
        child
            .stdin
            .take()
            .ok_or_else(|| Error::Sink("child stdin unavailable".into()))?
            .write_all(text.as_bytes())
            .map_err(|e| Error::Sink(e.to_string()))?;
        let status = child.wait().map_err(|e| Error::Sink(e.to_string()))?;
        if !status.success() {
            return Err(Error::Sink(format!("{} exited with {status}", self.program)));
        }
        Ok(DeliveryReceipt {
            destination: format!("cmd:{}", self.program),
            bytes: text.len(),
            delivered: true,
        })
    }
}

/// Hands the detokenized output text to the sink.
pub fn forward_text(
    trace: &DecodeTrace,
    vocab: &Vocabulary,
    sink: &mut dyn TextSink,
) -> Result<DeliveryReceipt> {
    sink.deliver(&detokenize(trace, vocab))
}
