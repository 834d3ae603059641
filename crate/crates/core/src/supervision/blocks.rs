//! The rewrite-set block grammar shared by SFT targets, DPO sets, and student output:
//!
//! ```text
//! Document 1: <rewrite text>
//! Document 2: [NO_REWRITE]
//! ```

use std::sync::LazyLock;

use regex::Regex;

use crate::prompts::NO_REWRITE;
use crate::qa::{QAExample, RewriteSet, RewriteStatus, RewrittenDocument};

static HEADER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^Document (\d+):(.*)$").expect("valid regex"));

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub rank: u32,
    pub status: RewriteStatus,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BlockError {
    #[error("no document blocks found")]
    Empty,
    #[error("block for document {0} is empty")]
    EmptyBlock(u32),
    #[error("cannot serialize a parse failure for document {0}")]
    ParseFailure(String),
    #[error("expected blocks for ranks {expected:?}, found {found:?}")]
    RankMismatch { expected: Vec<u32>, found: Vec<u32> },
}

/// Serializes `(rank, rewrite)` pairs, one line each.
pub fn serialize_blocks<'a>(
    entries: impl IntoIterator<Item = (u32, &'a RewrittenDocument)>,
) -> Result<String, BlockError> {
    let mut lines = Vec::new();
    for (rank, doc) in entries {
        let body = match doc.status {
            RewriteStatus::Rewritten => doc.text.as_str(),
            RewriteStatus::NoRewrite => NO_REWRITE,
            RewriteStatus::ParseFailure => return Err(BlockError::ParseFailure(doc.source_doc_id.clone())),
        };
        lines.push(format!("Document {rank}: {body}"));
    }
    Ok(lines.join("\n"))
}

/// Parses block lines. Lines before the first header are ignored; later
/// non-header lines continue the previous block.
pub fn parse_blocks(text: &str) -> Result<Vec<Block>, BlockError> {
    let mut raw: Vec<(u32, String)> = Vec::new();
    for line in text.lines() {
        let line = line.trim_end();
        if let Some(caps) = HEADER.captures(line) {
            if let Ok(rank) = caps[1].parse() {
                raw.push((rank, caps[2].trim().to_owned()));
                continue;
            }
        }
        if let Some((_, body)) = raw.last_mut() {
            let extra = line.trim();
            if !extra.is_empty() {
                if !body.is_empty() {
                    body.push(' ');
                }
                body.push_str(extra);
            }
        }
    }
    if raw.is_empty() {
        return Err(BlockError::Empty);
    }
    raw.into_iter()
        .map(|(rank, body)| match body.as_str() {
            "" => Err(BlockError::EmptyBlock(rank)),
            NO_REWRITE => Ok(Block { rank, status: RewriteStatus::NoRewrite, text: String::new() }),
            _ => Ok(Block { rank, status: RewriteStatus::Rewritten, text: body }),
        })
        .collect()
}

/// Rebuilds the full rewrite set of `example` from a target with one block per document.
pub fn rewrite_set_from_target(example: &QAExample, target: &str) -> Result<RewriteSet, BlockError> {
    let blocks = parse_blocks(target)?;
    let ranked = example.ranked_documents();
    let expected: Vec<u32> = ranked.iter().map(|d| d.rank).collect();
    let found: Vec<u32> = blocks.iter().map(|b| b.rank).collect();
    if expected != found {
        return Err(BlockError::RankMismatch { expected, found });
    }
    Ok(RewriteSet {
        example_id: example.id.clone(),
        rewrites: ranked
            .iter()
            .zip(blocks)
            .map(|(doc, block)| RewrittenDocument {
                source_doc_id: doc.doc_id.clone(),
                status: block.status,
                text: block.text,
            })
            .collect(),
    })
}
