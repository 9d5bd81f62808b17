//! Structured assembly of the multimodal input sequence and the instruction
//! templates, including hint injection and query removal.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Base instruction used by the diffusion-prompt templates.
pub const TD_INS_BODY: &str = "I give you several words and pictures. First, please analyse \
what the next picture is. Then give me a detailed diffusion prompt to describe the next \
picture. Please only provide me the detailed prompt and start the answer with 'Create an \
image'.";

/// The canonical hint sentence appended behind a "Note:" marker. It states
/// both halves of the hint contract: the final text carries the key clue,
/// and its meaning takes precedence while writing the description.
pub const CANONICAL_HINT: &str = "The last text I provide contains the most important clue \
about the next picture. Focus mainly on understanding and following the meaning of the \
final text when creating your description.";

const CB_INS_BODY: &str = "Please identify the common main object in the images, and \
describe the next image to be generated based on the sequence below. Your description of \
image should contain the description of the common main object and the requested \
<ATTRIBUTE>.";

const COT_INS_BODY: &str = "We provide a few examples, each of which is an input-output \
pair where the output is a description of the image associated with the input. \
(Multimodal context) Based on the examples, the task is to predict the next image \
description. Before predicting the next image, let's think step by step and analyze what \
the relationship between the text input and image output in each example is first. \
(Model's response) Based on the analysis, please describe what the next image should be \
look like given the request.";

const STEP_BY_STEP_SUFFIX: &str = " Let's think step by step";

/// Placeholder in task-specific templates, filled from task metadata.
pub const ATTRIBUTE_PLACEHOLDER: &str = "<ATTRIBUTE>";

/// The five built-in instruction variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateName {
    CbIns,
    CotIns,
    TdIns,
    TdInsPlusPlus,
    Hi,
}

impl TemplateName {
    pub const ALL: [TemplateName; 5] = [
        TemplateName::CbIns,
        TemplateName::CotIns,
        TemplateName::TdIns,
        TemplateName::TdInsPlusPlus,
        TemplateName::Hi,
    ];
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TemplateName::CbIns => "CB-Ins",
            TemplateName::CotIns => "CoT-Ins",
            TemplateName::TdIns => "TD-Ins",
            TemplateName::TdInsPlusPlus => "TD-Ins++",
            TemplateName::Hi => "HI",
        };
        f.write_str(s)
    }
}

impl FromStr for TemplateName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CB-Ins" => Ok(TemplateName::CbIns),
            "CoT-Ins" => Ok(TemplateName::CotIns),
            "TD-Ins" => Ok(TemplateName::TdIns),
            "TD-Ins++" => Ok(TemplateName::TdInsPlusPlus),
            "HI" => Ok(TemplateName::Hi),
            other => Err(Error::InvalidConfig(format!("unknown instruction {other:?}"))),
        }
    }
}

/// An instruction body plus its metadata. `requires_task_rewrite` is true
/// only for the template that must be specialized per task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTemplate {
    pub name: TemplateName,
    pub body: String,
    pub requires_task_rewrite: bool,
}

impl InstructionTemplate {
    pub fn builtin(name: TemplateName) -> Self {
        let (body, rewrite) = match name {
            TemplateName::CbIns => (CB_INS_BODY.to_string(), true),
            TemplateName::CotIns => (COT_INS_BODY.to_string(), false),
            TemplateName::TdIns => (TD_INS_BODY.to_string(), false),
            TemplateName::TdInsPlusPlus => {
                (format!("{TD_INS_BODY}{STEP_BY_STEP_SUFFIX}"), false)
            }
            TemplateName::Hi => (format!("{TD_INS_BODY} Note: {CANONICAL_HINT}"), false),
        };
        Self { name, body, requires_task_rewrite: rewrite }
    }

    /// Fills the `<ATTRIBUTE>` placeholder for task-specific templates.
    /// Templates without the placeholder are returned unchanged.
    pub fn with_attribute(&self, attribute: &str) -> Self {
        Self {
            body: self.body.replace(ATTRIBUTE_PLACEHOLDER, attribute),
            ..self.clone()
        }
    }
}

/// Counts tokens for the instruction-efficiency report.
pub trait TokenCounter {
    fn count(&self, text: &str) -> usize;
}

/// Whitespace word counting, the reference counter for the report.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

pub fn instruction_token_length(template: &InstructionTemplate, counter: &dyn TokenCounter) -> usize {
    counter.count(&template.body)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Instruction,
    ContextText,
    ContextImageRef,
    Query,
    Hint,
}

/// One typed piece of the multimodal input. Image segments carry an opaque
/// reference string; no pixel data is ever interpreted here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
}

impl Segment {
    pub fn new(kind: SegmentKind, text: impl Into<String>) -> Self {
        Self { kind, text: text.into() }
    }
}

/// The ordered input sequence: one instruction first, optional hint
/// segments directly behind it, alternating (image ref, text) context
/// pairs, and at most one query in the final position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultimodalSequence {
    segments: Vec<Segment>,
}

impl MultimodalSequence {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let seq = Self { segments };
        seq.validate()?;
        Ok(seq)
    }

    fn validate(&self) -> Result<()> {
        let segs = &self.segments;
        if segs.is_empty() || segs[0].kind != SegmentKind::Instruction {
            return Err(Error::InvalidSequence(
                "first segment must be the instruction".into(),
            ));
        }
        if segs.iter().filter(|s| s.kind == SegmentKind::Instruction).count() != 1 {
            return Err(Error::InvalidSequence("exactly one instruction segment".into()));
        }
        let query_count = segs.iter().filter(|s| s.kind == SegmentKind::Query).count();
        if query_count > 1 {
            return Err(Error::InvalidSequence("at most one query segment".into()));
        }
        // Hint segments may only sit directly behind the instruction.
        let mut i = 1;
        while i < segs.len() && segs[i].kind == SegmentKind::Hint {
            i += 1;
        }
        let mut expect_image = true;
        while i < segs.len() {
            match segs[i].kind {
                SegmentKind::ContextImageRef if expect_image => expect_image = false,
                SegmentKind::ContextText if !expect_image => expect_image = true,
                SegmentKind::Query => {
                    if i != segs.len() - 1 {
                        return Err(Error::InvalidSequence("query must be last".into()));
                    }
                    if segs[i].text.is_empty() {
                        return Err(Error::InvalidSequence("query text must be non-empty".into()));
                    }
                }
                other => {
                    return Err(Error::InvalidSequence(format!(
                        "unexpected {other:?} segment at position {i}"
                    )))
                }
            }
            i += 1;
        }
        if !expect_image {
            return Err(Error::InvalidSequence(
                "context image ref without its paired text".into(),
            ));
        }
        Ok(())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn has_query(&self) -> bool {
        self.segments.iter().any(|s| s.kind == SegmentKind::Query)
    }

    pub fn query_text(&self) -> Option<&str> {
        self.segments
            .iter()
            .find(|s| s.kind == SegmentKind::Query)
            .map(|s| s.text.as_str())
    }

    /// Number of (image ref, text) context pairs.
    pub fn shot_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::ContextImageRef)
            .count()
    }
}

/// Assembles the full input sequence. When `hint_on` is set and the
/// instruction does not already embed the hint, the canonical hint is
/// appended to the instruction text behind a "Note:" marker; for the
/// hint-embedding template the flag is a no-op.
pub fn build_sequence(
    instruction: &InstructionTemplate,
    context_pairs: &[(String, String)],
    query: &str,
    hint_on: bool,
) -> Result<MultimodalSequence> {
    if context_pairs.is_empty() {
        return Err(Error::InvalidSequence("at least one context pair required".into()));
    }
    if query.is_empty() {
        return Err(Error::InvalidSequence("query must be non-empty".into()));
    }
    let instruction_text = if hint_on && instruction.name != TemplateName::Hi {
        format!("{} Note: {CANONICAL_HINT}", instruction.body)
    } else {
        instruction.body.clone()
    };
    let mut segments = Vec::with_capacity(2 + 2 * context_pairs.len());
    segments.push(Segment::new(SegmentKind::Instruction, instruction_text));
    for (image_ref, text) in context_pairs {
        segments.push(Segment::new(SegmentKind::ContextImageRef, image_ref.clone()));
        segments.push(Segment::new(SegmentKind::ContextText, text.clone()));
    }
    segments.push(Segment::new(SegmentKind::Query, query));
    MultimodalSequence::new(segments)
}

/// Returns the identical sequence with the query segment removed. Hint
/// segments are retained.
pub fn drop_query(seq: &MultimodalSequence) -> Result<MultimodalSequence> {
    if !seq.has_query() {
        return Err(Error::NoQuery);
    }
    let segments = seq
        .segments
        .iter()
        .filter(|s| s.kind != SegmentKind::Query)
        .cloned()
        .collect();
    MultimodalSequence::new(segments)
}

/// Flattens a sequence into the deterministic text form the backends see:
/// the instruction, then `[IMG:<ref>] <text>` per context pair, then
/// `QUERY: <text>`, all joined by single spaces.
pub fn render(seq: &MultimodalSequence) -> String {
    let parts: Vec<String> = seq
        .segments
        .iter()
        .map(|s| match s.kind {
            SegmentKind::ContextImageRef => format!("[IMG:{}]", s.text),
            SegmentKind::Query => format!("QUERY: {}", s.text),
            _ => s.text.clone(),
        })
        .collect();
    parts.join(" ")
}
