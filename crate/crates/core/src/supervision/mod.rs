//! Process-supervision data generation.
//!
//! Each training example is expanded into one teacher call per retrieved
//! document. The call's prompt places the target document after all other
//! documents and asks for a two-step output: the rewrite first, then the
//! explanation and answer. Only the rewrite is kept. The per-document rewrites
//! are then concatenated, in rank order, into a single SFT target.

mod blocks;
mod probe;
mod sft;

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::prompts::{self, NO_REWRITE, STEP1_MARKER, STEP2_MARKER};
use crate::qa::{QAExample, RewriteStatus, RewrittenDocument};

pub use blocks::{parse_blocks, rewrite_set_from_target, serialize_blocks, Block, BlockError};
pub use probe::{detect_citations, prerequisite_rate, probe_traces, TraceProbeResult};
pub use sft::{
    assemble_sft_record, generate_sft, scale_rewrites, AssembleError, ScaledRewrites, SftMeta, SftOptions,
    SftRecord, SftStats, SupervisionError, TeacherConfig,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewritePrompt {
    pub example_id: String,
    /// 1-based position of the target in rank order.
    pub target_index: usize,
    pub rendered_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("target index {index} out of range for {len} document(s)")]
pub struct TargetOutOfRange {
    pub index: usize,
    pub len: usize,
}

pub fn build_rewrite_prompt(
    example: &QAExample,
    target_index: usize,
) -> Result<RewritePrompt, TargetOutOfRange> {
    let ranked = example.ranked_documents();
    if target_index == 0 || target_index > ranked.len() {
        return Err(TargetOutOfRange { index: target_index, len: ranked.len() });
    }
    Ok(RewritePrompt {
        example_id: example.id.clone(),
        target_index,
        rendered_text: prompts::render_rewrite(example, ranked[target_index - 1]),
    })
}

/// A parsed teacher completion. `answer` comes from the second step and is
/// never written into training targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherOutput {
    pub status: RewriteStatus,
    pub text: String,
    pub answer: Option<String>,
}

/// Joins the non-empty lines of a rewrite with single spaces so that every
/// rewrite fits on one block line.
pub fn flatten_rewrite(text: &str) -> String {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ")
}

static ANSWER_LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\banswer\s*:").expect("valid regex"));

/// Text after the last "Answer:" label of a Step 2 body, else the whole body.
fn extract_answer(step2: &str) -> Option<String> {
    let body = step2.trim();
    let body = body.strip_prefix("Explain and answer:").unwrap_or(body);
    let answer = match ANSWER_LABEL.find_iter(body).last() {
        Some(m) => &body[m.end()..],
        None => body,
    };
    let answer = flatten_rewrite(answer);
    (!answer.is_empty()).then_some(answer)
}

pub fn parse_teacher_output(raw: &str) -> TeacherOutput {
    let failure = TeacherOutput { status: RewriteStatus::ParseFailure, text: String::new(), answer: None };
    let Some(start) = raw.find(STEP1_MARKER) else {
        return failure;
    };
    let after = &raw[start + STEP1_MARKER.len()..];
    let Some(end) = after.find(STEP2_MARKER) else {
        return failure;
    };
    let region = flatten_rewrite(&after[..end]);
    let step2 = &after[end + STEP2_MARKER.len()..];
    let answer = extract_answer(step2);
    if region.is_empty() {
        failure
    } else if region == NO_REWRITE {
        TeacherOutput { status: RewriteStatus::NoRewrite, text: String::new(), answer }
    } else {
        TeacherOutput { status: RewriteStatus::Rewritten, text: region, answer }
    }
}

pub fn parse_rewrite_output(raw: &str, source_doc_id: &str) -> RewrittenDocument {
    let parsed = parse_teacher_output(raw);
    RewrittenDocument { source_doc_id: source_doc_id.to_owned(), status: parsed.status, text: parsed.text }
}

/// Step 2 body of a teacher completion, if present.
pub fn step2_content(raw: &str) -> Option<&str> {
    let start = raw.find(STEP1_MARKER)? + STEP1_MARKER.len();
    let end = raw[start..].find(STEP2_MARKER)? + start + STEP2_MARKER.len();
    let body = raw[end..].trim();
    let body = body.strip_prefix("Explain and answer:").map(str::trim).unwrap_or(body);
    (!body.is_empty()).then_some(body)
}
