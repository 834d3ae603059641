use serde::{Deserialize, Serialize};

use super::blocks::{serialize_blocks, BlockError};
use super::{build_rewrite_prompt, parse_teacher_output};
use crate::gateway::{GatewayError, GenRequest, LlmGateway, Message};
use crate::metrics::F1Ratio;
use crate::par::parallel_map;
use crate::prompts;
use crate::qa::{QAExample, RewriteSet, RewriteStatus, RewrittenDocument};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl TeacherConfig {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self { model_id: model_id.into(), temperature: 0.0, max_tokens: 1024, seed: None }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SupervisionError {
    #[error("all {k} teacher calls failed for example {example_id}; first error: {first}")]
    AllCallsFailed {
        example_id: String,
        k: usize,
        #[source]
        first: GatewayError,
    },
}

/// Result of the k-call fan-out for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledRewrites {
    pub set: RewriteSet,
    /// Teacher answers from Step 2, aligned with `set.rewrites`; used only for filtering.
    pub answers: Vec<Option<String>>,
    /// Calls that errored at the gateway (recorded as parse failures in `set`).
    pub call_failures: usize,
}

/// Issues one teacher call per document (k = number of documents), in parallel.
pub fn scale_rewrites(
    example: &QAExample,
    teacher: &LlmGateway,
    config: &TeacherConfig,
) -> Result<ScaledRewrites, SupervisionError> {
    let ranked = example.ranked_documents();
    let k = ranked.len();
    let results: Vec<Result<(RewrittenDocument, Option<String>), GatewayError>> =
        parallel_map(&ranked, k, |i, doc| {
            let prompt = build_rewrite_prompt(example, i + 1).expect("index within range");
            let req = GenRequest::new(&config.model_id, vec![Message::user(prompt.rendered_text)])
                .with_temperature(config.temperature)
                .with_max_tokens(config.max_tokens)
                .with_seed(config.seed);
            let resp = teacher.generate(&req)?;
            let parsed = parse_teacher_output(&resp.text);
            Ok((
                RewrittenDocument {
                    source_doc_id: doc.doc_id.clone(),
                    status: parsed.status,
                    text: parsed.text,
                },
                parsed.answer,
            ))
        });

    let mut rewrites = Vec::with_capacity(k);
    let mut answers = Vec::with_capacity(k);
    let mut call_failures = 0;
    let mut first_error = None;
    for (doc, result) in ranked.iter().zip(results) {
        match result {
            Ok((rewrite, answer)) => {
                if rewrite.status == RewriteStatus::ParseFailure {
                    log::warn!("example {}: unparseable teacher output for {}", example.id, doc.doc_id);
                }
                rewrites.push(rewrite);
                answers.push(answer);
            }
            Err(err) => {
                log::warn!("example {}: teacher call for {} failed: {err}", example.id, doc.doc_id);
                call_failures += 1;
                first_error.get_or_insert(err);
                rewrites.push(RewrittenDocument::parse_failure(&doc.doc_id));
                answers.push(None);
            }
        }
    }
    if k > 0 && call_failures == k {
        return Err(SupervisionError::AllCallsFailed {
            example_id: example.id.clone(),
            k,
            first: first_error.expect("k > 0 failures recorded"),
        });
    }
    Ok(ScaledRewrites {
        set: RewriteSet { example_id: example.id.clone(), rewrites },
        answers,
        call_failures,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMeta {
    pub k: usize,
    pub dropped: bool,
    pub teacher_model: String,
}

/// One supervised example: student prompt to full rewrite-set target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub id: String,
    pub prompt: String,
    pub target: String,
    pub meta: SftMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AssembleError {
    #[error("rewrite set for {0} contains parse failures")]
    Incomplete(String),
    #[error("rewrite set does not line up with example {0}")]
    Mismatch(String),
}

pub fn assemble_sft_record(
    example: &QAExample,
    set: &RewriteSet,
    teacher_model: &str,
) -> Result<SftRecord, AssembleError> {
    if !set.matches(example) {
        return Err(AssembleError::Mismatch(example.id.clone()));
    }
    let ranks = example.ranked_documents().into_iter().map(|d| d.rank);
    let target = serialize_blocks(ranks.zip(&set.rewrites)).map_err(|e| match e {
        BlockError::ParseFailure(_) => AssembleError::Incomplete(example.id.clone()),
        _ => AssembleError::Mismatch(example.id.clone()),
    })?;
    Ok(SftRecord {
        id: example.id.clone(),
        prompt: prompts::render_student(example),
        target,
        meta: SftMeta { k: set.rewrites.len(), dropped: false, teacher_model: teacher_model.to_owned() },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftOptions {
    pub teacher: TeacherConfig,
    /// Examples processed concurrently (calls are still bounded by the gateway).
    pub workers: usize,
    /// Drop records where no teacher answer overlaps any gold answer.
    pub filter_by_answer_f1: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftStats {
    pub examples: usize,
    pub records: usize,
    pub teacher_calls: usize,
    pub call_failures: usize,
    pub parse_failures: usize,
    pub no_rewrites: usize,
    pub dropped_incomplete: usize,
    pub dropped_by_answer_f1: usize,
    pub failed_examples: usize,
}

enum Outcome {
    Record(SftRecord, ScaledRewrites),
    Incomplete(ScaledRewrites),
    Filtered(ScaledRewrites),
    Failed,
}

/// Runs the fan-out over a dataset and assembles SFT records in input order.
pub fn generate_sft(
    examples: &[QAExample],
    teacher: &LlmGateway,
    options: &SftOptions,
) -> (Vec<SftRecord>, SftStats) {
    let outcomes = parallel_map(examples, options.workers, |_, example| {
        let scaled = match scale_rewrites(example, teacher, &options.teacher) {
            Ok(s) => s,
            Err(err) => {
                log::warn!("{err}");
                return Outcome::Failed;
            }
        };
        if options.filter_by_answer_f1 {
            let any_overlap =
                scaled.answers.iter().flatten().any(|a| !F1Ratio::best(a, &example.gold_answers).is_zero());
            if !any_overlap {
                return Outcome::Filtered(scaled);
            }
        }
        match assemble_sft_record(example, &scaled.set, &options.teacher.model_id) {
            Ok(record) => Outcome::Record(record, scaled),
            Err(_) => Outcome::Incomplete(scaled),
        }
    });

    let mut stats = SftStats { examples: examples.len(), ..SftStats::default() };
    let mut records = Vec::new();
    for (example, outcome) in examples.iter().zip(outcomes) {
        let k = example.documents.len();
        stats.teacher_calls += k;
        let scaled = match outcome {
            Outcome::Record(record, scaled) => {
                records.push(record);
                scaled
            }
            Outcome::Incomplete(scaled) => {
                stats.dropped_incomplete += 1;
                scaled
            }
            Outcome::Filtered(scaled) => {
                stats.dropped_by_answer_f1 += 1;
                scaled
            }
            Outcome::Failed => {
                stats.failed_examples += 1;
                stats.call_failures += k;
                continue;
            }
        };
        stats.call_failures += scaled.call_failures;
        let count = |status| scaled.set.rewrites.iter().filter(|r| r.status == status).count();
        // Errored calls are stored as parse failures; count them only once.
        stats.parse_failures += count(RewriteStatus::ParseFailure) - scaled.call_failures;
        stats.no_rewrites += count(RewriteStatus::NoRewrite);
    }
    stats.records = records.len();
    (records, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, Responder, RetryPolicy};
    use crate::qa::{AnswerType, Document};
    use crate::supervision::rewrite_set_from_target;

    fn example(n: usize) -> QAExample {
        QAExample {
            id: "ex".into(),
            query: "what colour is the sky".into(),
            gold_answers: vec!["blue".into()],
            documents: (1..=n)
                .map(|i| Document {
                    doc_id: format!("d{i}"),
                    rank: i as u32,
                    title: None,
                    text: format!("passage number {i}"),
                })
                .collect(),
            answer_type: AnswerType::Unknown,
            query_type: None,
        }
    }

    /// Rewrites the target as `rewrite of N`; refuses targets listed in `fail`.
    struct Teacher {
        fail: Vec<usize>,
        answer: &'static str,
    }

    impl Responder for Teacher {
        fn respond(&self, req: &GenRequest) -> Option<String> {
            let p = req.last_user_content();
            let (_, target) = p.split_once(prompts::TARGET_HEADER)?;
            let n: usize = target.trim().strip_prefix("Document ")?.split(':').next()?.parse().ok()?;
            if self.fail.contains(&n) {
                return None;
            }
            Some(format!(
                "Step 1. Document rewrite: rewrite of {n}\nStep 2. Explain and answer: so. Answer: {}",
                self.answer
            ))
        }
    }

    fn teacher(fail: Vec<usize>, answer: &'static str) -> LlmGateway {
        LlmGateway::builder(MockBackend::new("t").with_responder(Teacher { fail, answer }))
            .retry(RetryPolicy::none())
            .build()
    }

    fn options(filter: bool) -> SftOptions {
        SftOptions { teacher: TeacherConfig::new("t"), workers: 2, filter_by_answer_f1: filter }
    }

    #[test]
    fn one_call_per_document() {
        let ex = example(10);
        let gw = teacher(vec![], "blue");
        let scaled = scale_rewrites(&ex, &gw, &TeacherConfig::new("t")).unwrap();
        assert_eq!(gw.stats().backend_calls, 10);
        assert_eq!(scaled.set.rewrites.len(), 10);
        assert!(scaled.set.is_complete());
        assert_eq!(scaled.set.rewrites[6].text, "rewrite of 7");
    }

    #[test]
    fn failed_call_is_recorded_and_record_dropped() {
        let ex = example(4);
        let gw = teacher(vec![3], "blue");
        let scaled = scale_rewrites(&ex, &gw, &TeacherConfig::new("t")).unwrap();
        assert_eq!(scaled.call_failures, 1);
        assert_eq!(scaled.set.rewrites[2].status, RewriteStatus::ParseFailure);

        let (records, stats) = generate_sft(&[ex], &gw, &options(false));
        assert!(records.is_empty());
        assert_eq!(stats.dropped_incomplete, 1);
        assert_eq!((stats.teacher_calls, stats.call_failures, stats.parse_failures), (4, 1, 0));
    }

    #[test]
    fn all_calls_failing_is_an_error() {
        let gw = teacher(vec![1, 2], "blue");
        assert!(matches!(
            scale_rewrites(&example(2), &gw, &TeacherConfig::new("t")),
            Err(SupervisionError::AllCallsFailed { k: 2, .. })
        ));
        let (_, stats) = generate_sft(&[example(2)], &gw, &options(false));
        assert_eq!(stats.failed_examples, 1);
    }

    #[test]
    fn answer_filter() {
        let (kept, _) = generate_sft(&[example(3)], &teacher(vec![], "blue"), &options(true));
        assert_eq!(kept.len(), 1);
        let (dropped, stats) = generate_sft(&[example(3)], &teacher(vec![], "green"), &options(true));
        assert!(dropped.is_empty());
        assert_eq!(stats.dropped_by_answer_f1, 1);
        let (unfiltered, _) = generate_sft(&[example(3)], &teacher(vec![], "green"), &options(false));
        assert_eq!(unfiltered.len(), 1);
    }

    #[test]
    fn target_roundtrips_to_rewrite_set() {
        let ex = example(5);
        let gw = teacher(vec![], "blue");
        let (records, stats) = generate_sft(std::slice::from_ref(&ex), &gw, &options(false));
        let record = &records[0];
        assert_eq!(record.prompt, prompts::render_student(&ex));
        assert_eq!(record.meta, SftMeta { k: 5, dropped: false, teacher_model: "t".into() });
        let set = rewrite_set_from_target(&ex, &record.target).unwrap();
        assert_eq!(set, scale_rewrites(&ex, &gw, &TeacherConfig::new("t")).unwrap().set);
        assert_eq!(stats.records, 1);
        let json = serde_json::to_string(record).unwrap();
        assert_eq!(serde_json::from_str::<SftRecord>(&json).unwrap(), *record);
    }
}
