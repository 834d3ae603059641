//! Question-answering domain types, answer normalization, and dataset JSONL persistence.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

/// Upper bound on retrieved documents per example (top-10 context).
pub const MAX_DOCUMENTS: usize = 10;

/// A retrieved document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    /// Retrieval position, starting at 1.
    pub rank: u32,
    pub title: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    Extractive,
    Abstractive,
    Unknown,
}

impl AnswerType {
    pub fn as_str(self) -> &'static str {
        match self {
            AnswerType::Extractive => "extractive",
            AnswerType::Abstractive => "abstractive",
            AnswerType::Unknown => "unknown",
        }
    }
}

/// A query with its gold answers and pre-retrieved documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub query: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
    pub documents: Vec<Document>,
    pub answer_type: AnswerType,
    pub query_type: Option<String>,
}

impl QAExample {
    /// Documents sorted by retrieval rank.
    pub fn ranked_documents(&self) -> Vec<&Document> {
        let mut docs: Vec<&Document> = self.documents.iter().collect();
        docs.sort_by_key(|d| d.rank);
        docs
    }

    pub fn document_by_id(&self, doc_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    /// Checks every record-level invariant.
    pub fn validate(&self) -> Result<(), String> {
        if self.query.trim().is_empty() {
            return Err("query is empty".into());
        }
        if self.gold_answers.is_empty() {
            return Err("answers is empty".into());
        }
        if self.documents.is_empty() {
            return Err("documents is empty".into());
        }
        if self.documents.len() > MAX_DOCUMENTS {
            return Err(format!("{} documents exceeds the maximum of {MAX_DOCUMENTS}", self.documents.len()));
        }
        let mut ids = HashSet::new();
        let mut ranks: Vec<u32> = Vec::with_capacity(self.documents.len());
        for doc in &self.documents {
            if !ids.insert(doc.doc_id.as_str()) {
                return Err(format!("duplicate doc_id {:?}", doc.doc_id));
            }
            if doc.text.trim().is_empty() {
                return Err(format!("document {:?} has empty text", doc.doc_id));
            }
            ranks.push(doc.rank);
        }
        ranks.sort_unstable();
        for (i, rank) in ranks.iter().enumerate() {
            if *rank as usize != i + 1 {
                return Err("document ranks must be distinct and contiguous from 1".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteStatus {
    Rewritten,
    NoRewrite,
    ParseFailure,
}

/// One document's rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewrittenDocument {
    pub source_doc_id: String,
    pub status: RewriteStatus,
    /// Empty unless `status` is `Rewritten`.
    pub text: String,
}

impl RewrittenDocument {
    pub fn rewritten(source_doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { source_doc_id: source_doc_id.into(), status: RewriteStatus::Rewritten, text: text.into() }
    }

    pub fn no_rewrite(source_doc_id: impl Into<String>) -> Self {
        Self { source_doc_id: source_doc_id.into(), status: RewriteStatus::NoRewrite, text: String::new() }
    }

    pub fn parse_failure(source_doc_id: impl Into<String>) -> Self {
        Self { source_doc_id: source_doc_id.into(), status: RewriteStatus::ParseFailure, text: String::new() }
    }
}

/// Rewrites for every document of one example, in rank order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteSet {
    pub example_id: String,
    pub rewrites: Vec<RewrittenDocument>,
}

impl RewriteSet {
    pub fn is_complete(&self) -> bool {
        self.rewrites.iter().all(|r| r.status != RewriteStatus::ParseFailure)
    }

    /// True when the set lines up one-to-one with the example's ranked documents.
    pub fn matches(&self, example: &QAExample) -> bool {
        let ranked = example.ranked_documents();
        self.example_id == example.id
            && ranked.len() == self.rewrites.len()
            && ranked.iter().zip(&self.rewrites).all(|(d, r)| d.doc_id == r.source_doc_id)
    }
}

fn is_article(token: &str) -> bool {
    matches!(token, "a" | "an" | "the")
}

/// Lowercases, replaces ASCII punctuation with spaces, drops the articles
/// "a", "an" and "the", and collapses whitespace. Input is NFC-normalized first.
pub fn normalize_answer(raw: &str) -> String {
    let lowered: String = raw.nfc().collect::<String>().to_lowercase().nfc().collect();
    let stripped: String = lowered.chars().map(|c| if c.is_ascii_punctuation() { ' ' } else { c }).collect();
    stripped.split_whitespace().filter(|t| !is_article(t)).collect::<Vec<_>>().join(" ")
}

/// Normalized tokens of `raw`.
pub fn normalized_tokens(raw: &str) -> Vec<String> {
    normalize_answer(raw).split(' ').filter(|t| !t.is_empty()).map(str::to_owned).collect()
}

fn contains_subsequence(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty()
        && needle.len() <= haystack.len()
        && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Extractive when any gold answer occurs as a contiguous run of normalized
/// tokens inside any document text. Golds that normalize to nothing never match.
pub fn classify_answer_type(example: &QAExample) -> AnswerType {
    let golds: Vec<Vec<String>> = example.gold_answers.iter().map(|g| normalized_tokens(g)).collect();
    let extractive = example.documents.iter().any(|doc| {
        let tokens = normalized_tokens(&doc.text);
        golds.iter().any(|g| contains_subsequence(&tokens, g))
    });
    if extractive {
        AnswerType::Extractive
    } else {
        AnswerType::Abstractive
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: invariant violation: {message}")]
    Invariant { line: usize, message: String },
}

/// Reads one record per line. Blank lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QAExample>, DatasetError> {
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut examples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let example: QAExample =
            serde_json::from_str(&line).map_err(|source| DatasetError::Parse { line: idx + 1, source })?;
        example.validate().map_err(|message| DatasetError::Invariant { line: idx + 1, message })?;
        examples.push(example);
    }
    Ok(examples)
}

pub fn save_dataset(examples: &[QAExample], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_jsonl(examples, path.as_ref())
        .map_err(|source| DatasetError::Io { path: path.as_ref().display().to_string(), source })
}

/// Writes compact JSON, one record per line.
pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Reads a JSONL file of arbitrary records; errors carry the 1-based line number.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let io_err = |source| DatasetError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|source| DatasetError::Parse { line: idx + 1, source })?,
        );
    }
    Ok(records)
}
