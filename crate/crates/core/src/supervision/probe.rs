//! Probe for whether a model rewrites documents inside its own reasoning trace.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::gateway::{GatewayError, GenRequest, LlmGateway, Message};
use crate::prompts;
use crate::qa::QAExample;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceProbeResult {
    pub example_id: String,
    pub model_id: String,
    pub contains_rewrite_before_answer: bool,
    /// Ranks cited before the final answer, ascending.
    pub cited_documents: Vec<u32>,
}

static CITATION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\bdocuments?\s*(\d+(?:\s*(?:,|&|\band\b|\bor\b)\s*\d+)*)").expect("valid regex")
});
static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").expect("valid regex"));
static ANSWER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(?:final\s+answer|answer)\s*:").expect("valid regex"));

/// Returns the document ranks cited before the final answer. The answer starts
/// at the last "Answer:" label; without one the whole trace counts as reasoning.
pub fn detect_citations(trace: &str) -> Vec<u32> {
    let boundary = ANSWER.find_iter(trace).last().map_or(trace.len(), |m| m.start());
    let reasoning = &trace[..boundary];
    let mut cited = BTreeSet::new();
    for caps in CITATION.captures_iter(reasoning) {
        for n in NUMBER.find_iter(&caps[1]) {
            if let Ok(rank) = n.as_str().parse::<u32>() {
                if rank > 0 {
                    cited.insert(rank);
                }
            }
        }
    }
    cited.into_iter().collect()
}

/// Runs the probe prompt once per model. Backend errors are returned per model.
pub fn probe_traces(
    example: &QAExample,
    model_ids: &[String],
    gateway: &LlmGateway,
) -> Vec<Result<TraceProbeResult, GatewayError>> {
    let prompt = prompts::render_trace_probe(example);
    model_ids
        .iter()
        .map(|model| {
            let req = GenRequest::new(model, vec![Message::user(prompt.clone())]).with_max_tokens(1024);
            let trace = gateway.generate(&req)?.text;
            let cited = detect_citations(&trace);
            Ok(TraceProbeResult {
                example_id: example.id.clone(),
                model_id: model.clone(),
                contains_rewrite_before_answer: !cited.is_empty(),
                cited_documents: cited,
            })
        })
        .collect()
}

/// Fraction of probes in which a rewrite appears before the answer.
pub fn prerequisite_rate(results: &[TraceProbeResult]) -> Option<f64> {
    (!results.is_empty()).then(|| {
        results.iter().filter(|r| r.contains_rewrite_before_answer).count() as f64 / results.len() as f64
    })
}
