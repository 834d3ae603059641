//! Versioned prompt templates and their renderers.

use crate::qa::{Document, QAExample};

pub const PROMPT_VERSION: &str = "v1";

pub const REWRITE_TEMPLATE: &str = include_str!("../resources/rewrite_v1.txt");
pub const STUDENT_TEMPLATE: &str = include_str!("../resources/student_v1.txt");
pub const ANSWER_TEMPLATE: &str = include_str!("../resources/answer_v1.txt");
pub const JUDGE_TEMPLATE: &str = include_str!("../resources/judge_v1.txt");
pub const TRACE_PROBE_TEMPLATE: &str = include_str!("../resources/trace_probe_v1.txt");

pub const NO_REWRITE: &str = "[NO_REWRITE]";
pub const STEP1_MARKER: &str = "Step 1. Document rewrite:";
pub const STEP2_MARKER: &str = "Step 2.";
pub const TARGET_HEADER: &str = "[Target document]";
pub const OTHER_HEADER: &str = "[Other documents]";

/// Substitutes `{name}` placeholders in one pass, so substituted values are never re-expanded.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start + 1..];
        let value = tail.find('}').and_then(|end| {
            let name = &tail[..end];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (end, *v))
        });
        match value {
            Some((end, v)) => {
                out.push_str(v);
                rest = &tail[end + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

/// `Document {n}: {text}`, with an optional title.
pub fn document_line(number: usize, title: Option<&str>, text: &str) -> String {
    match title {
        Some(t) if !t.is_empty() => format!("Document {number} (title: {t}): {text}"),
        _ => format!("Document {number}: {text}"),
    }
}

fn render_docs<'a>(docs: impl IntoIterator<Item = &'a Document>) -> String {
    docs.into_iter()
        .map(|d| document_line(d.rank as usize, d.title.as_deref(), &d.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Per-target teacher prompt; the target document is rendered after all others.
pub fn render_rewrite(example: &QAExample, target: &Document) -> String {
    let others = render_docs(example.ranked_documents().into_iter().filter(|d| d.doc_id != target.doc_id));
    let target_line = render_docs([target]);
    fill(
        REWRITE_TEMPLATE,
        &[("query", &example.query), ("other_documents", &others), ("target_document", &target_line)],
    )
}

/// Prompt for the single-pass student rewriter (shared by SFT and DPO records).
pub fn render_student(example: &QAExample) -> String {
    let docs = render_docs(example.ranked_documents());
    fill(STUDENT_TEMPLATE, &[("query", &example.query), ("documents", &docs)])
}

/// A document as seen by the answer generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextDoc<'a> {
    pub title: Option<&'a str>,
    pub text: &'a str,
}

/// Generator prompt; documents are numbered 1.. in the order given.
pub fn render_answer(query: &str, docs: &[ContextDoc<'_>]) -> String {
    let rendered = docs
        .iter()
        .enumerate()
        .map(|(i, d)| document_line(i + 1, d.title, d.text))
        .collect::<Vec<_>>()
        .join("\n");
    fill(ANSWER_TEMPLATE, &[("query", query), ("documents", &rendered)])
}

pub fn render_judge(query: &str, golds: &[String], prediction: &str) -> String {
    let golds = serde_json::to_string(golds).expect("strings serialize");
    let prediction = serde_json::to_string(prediction).expect("strings serialize");
    fill(JUDGE_TEMPLATE, &[("query", query), ("golds", &golds), ("prediction", &prediction)])
}

pub fn render_trace_probe(example: &QAExample) -> String {
    let docs = render_docs(example.ranked_documents());
    fill(TRACE_PROBE_TEMPLATE, &[("query", &example.query), ("documents", &docs)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_is_single_pass() {
        assert_eq!(fill("{a}-{b}", &[("a", "{b}"), ("b", "x")]), "{b}-x");
        assert_eq!(fill("keep {unknown} and {", &[]), "keep {unknown} and {");
    }

    #[test]
    fn templates_carry_required_clauses() {
        assert!(REWRITE_TEMPLATE.contains("return exactly: [NO_REWRITE]"));
        assert!(REWRITE_TEMPLATE.contains(STEP1_MARKER));
        assert!(REWRITE_TEMPLATE.contains("Step 2. Explain and answer:"));
        assert!(REWRITE_TEMPLATE.contains("based solely on the target document"));
        assert!(ANSWER_TEMPLATE.contains("Answer with a short phrase."));
        assert!(JUDGE_TEMPLATE.contains("Respond with exactly one word: CORRECT or INCORRECT."));
        assert!(TRACE_PROBE_TEMPLATE.starts_with("Think step by step to use the provided documents"));
    }

    #[test]
    fn document_line_formats() {
        assert_eq!(document_line(2, None, "x"), "Document 2: x");
        assert_eq!(document_line(3, Some("T"), "x"), "Document 3 (title: T): x");
    }
}
