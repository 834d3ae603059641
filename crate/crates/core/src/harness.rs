//! Naive and bridged RAG pipelines, evaluation, and report rendering.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gateway::{GatewayError, GenRequest, LlmGateway, Message};
use crate::metrics::{self, aggregate, fmt_pct, AggregateReport, JudgeError, ScoredPrediction, SliceSpec};
use crate::par::parallel_map;
use crate::prompts::{self, ContextDoc};
use crate::qa::{self, classify_answer_type, AnswerType, DatasetError, QAExample, RewriteSet, RewriteStatus};
use crate::supervision::{rewrite_set_from_target, scale_rewrites, TeacherConfig};

/// Answer generator: a gateway plus decoding parameters.
#[derive(Clone)]
pub struct Generator {
    pub gateway: LlmGateway,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Generator {
    pub fn new(gateway: LlmGateway, model_id: impl Into<String>) -> Self {
        Self { gateway, model_id: model_id.into(), temperature: 0.0, max_tokens: 64, seed: None }
    }

    pub fn answer(&self, query: &str, docs: &[ContextDoc<'_>]) -> Result<String, GatewayError> {
        let req = GenRequest::new(&self.model_id, vec![Message::user(prompts::render_answer(query, docs))])
            .with_temperature(self.temperature)
            .with_max_tokens(self.max_tokens)
            .with_seed(self.seed);
        Ok(self.gateway.generate(&req)?.text.trim().to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Naive,
    Bridged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeStyle {
    /// One call that rewrites every document.
    #[default]
    Student,
    /// One teacher call per document.
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub mode: PipelineMode,
    pub generator_model: String,
    pub bridge_model: Option<String>,
    pub bridge_style: BridgeStyle,
}

impl PipelineSpec {
    pub fn naive(generator_model: impl Into<String>) -> Self {
        Self {
            mode: PipelineMode::Naive,
            generator_model: generator_model.into(),
            bridge_model: None,
            bridge_style: BridgeStyle::Student,
        }
    }

    pub fn bridged(
        generator_model: impl Into<String>,
        bridge_model: impl Into<String>,
        bridge_style: BridgeStyle,
    ) -> Self {
        Self {
            mode: PipelineMode::Bridged,
            generator_model: generator_model.into(),
            bridge_model: Some(bridge_model.into()),
            bridge_style,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match (self.mode, &self.bridge_model) {
            (PipelineMode::Bridged, None) => Err("bridged pipeline requires a bridge model".into()),
            (PipelineMode::Naive, Some(_)) => Err("naive pipeline takes no bridge model".into()),
            _ => Ok(()),
        }
    }
}

/// The rewriting model between retriever and generator.
#[derive(Clone)]
pub struct Bridge {
    pub gateway: LlmGateway,
    pub model_id: String,
    pub style: BridgeStyle,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Bridge {
    pub fn new(gateway: LlmGateway, model_id: impl Into<String>, style: BridgeStyle) -> Self {
        Self { gateway, model_id: model_id.into(), style, max_tokens: 1024, seed: None }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("example {example_id}: {source}")]
    Gateway {
        example_id: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error("example {example_id}: {message}")]
    Bridge { example_id: String, message: String },
}

fn gateway_err(example: &QAExample) -> impl FnOnce(GatewayError) -> HarnessError + '_ {
    move |source| HarnessError::Gateway { example_id: example.id.clone(), source }
}

/// Answers on the original documents in rank order.
pub fn run_naive(example: &QAExample, generator: &Generator) -> Result<String, HarnessError> {
    let docs: Vec<ContextDoc<'_>> = example
        .ranked_documents()
        .into_iter()
        .map(|d| ContextDoc { title: d.title.as_deref(), text: &d.text })
        .collect();
    generator.answer(&example.query, &docs).map_err(gateway_err(example))
}

/// Rewritten documents as generator context: rank order, sentinels dropped,
/// original titles kept.
pub fn bridged_context<'a>(example: &'a QAExample, set: &'a RewriteSet) -> Vec<ContextDoc<'a>> {
    set.rewrites
        .iter()
        .filter(|r| r.status == RewriteStatus::Rewritten)
        .map(|r| ContextDoc {
            title: example.document_by_id(&r.source_doc_id).and_then(|d| d.title.as_deref()),
            text: &r.text,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgedOutcome {
    /// `None` when the bridge output could not be used.
    pub rewrites: Option<RewriteSet>,
    pub prediction: String,
    pub fell_back: bool,
}

fn bridge_rewrites(example: &QAExample, bridge: &Bridge) -> Result<Result<RewriteSet, String>, HarnessError> {
    match bridge.style {
        BridgeStyle::Student => {
            let req =
                GenRequest::new(&bridge.model_id, vec![Message::user(prompts::render_student(example))])
                    .with_max_tokens(bridge.max_tokens)
                    .with_seed(bridge.seed);
            let raw = bridge.gateway.generate(&req).map_err(gateway_err(example))?.text;
            Ok(rewrite_set_from_target(example, &raw).map_err(|e| e.to_string()))
        }
        BridgeStyle::Teacher => {
            let mut config = TeacherConfig::new(&bridge.model_id);
            config.max_tokens = bridge.max_tokens;
            config.seed = bridge.seed;
            let scaled = scale_rewrites(example, &bridge.gateway, &config).map_err(|e| {
                HarnessError::Bridge { example_id: example.id.clone(), message: e.to_string() }
            })?;
            Ok(if scaled.set.is_complete() {
                Ok(scaled.set)
            } else {
                Err("teacher output missing rewrites".into())
            })
        }
    }
}

/// Rewrites with the bridge, then answers on the rewritten documents. An
/// unusable bridge output falls back to the naive pipeline.
pub fn run_bridged(
    example: &QAExample,
    bridge: &Bridge,
    generator: &Generator,
) -> Result<BridgedOutcome, HarnessError> {
    match bridge_rewrites(example, bridge)? {
        Ok(set) => {
            let prediction = generator
                .answer(&example.query, &bridged_context(example, &set))
                .map_err(gateway_err(example))?;
            Ok(BridgedOutcome { rewrites: Some(set), prediction, fell_back: false })
        }
        Err(reason) => {
            log::warn!("example {}: bridge output unusable ({reason}); answering without it", example.id);
            Ok(BridgedOutcome { rewrites: None, prediction: run_naive(example, generator)?, fell_back: true })
        }
    }
}

#[derive(Clone)]
pub struct Judge {
    pub gateway: LlmGateway,
    pub model_id: String,
}

/// Everything `evaluate` needs at runtime.
#[derive(Clone)]
pub struct EvalSetup {
    pub spec: PipelineSpec,
    pub generator: Generator,
    pub bridge: Option<Bridge>,
    pub judge: Option<Judge>,
    pub slices: SliceSpec,
    pub workers: usize,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleError {
    pub dataset: String,
    pub example_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(flatten)]
    pub scored: ScoredPrediction,
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: Option<u64>,
    pub generator_model: String,
    pub bridge_model: Option<String>,
    pub judge_model: Option<String>,
    pub prompt_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub cache_hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pipeline: PipelineSpec,
    pub meta: RunMeta,
    pub examples: usize,
    pub scored: usize,
    /// `scored / examples`
    pub coverage: f64,
    pub bridged_count: usize,
    pub fallback_count: usize,
    pub aggregate: Option<AggregateReport>,
    pub errors: Vec<ExampleError>,
    pub predictions: Vec<PredictionRecord>,
}

impl EvalReport {
    pub fn is_partial(&self) -> bool {
        !self.errors.is_empty()
    }
}

fn evaluate_one(
    dataset: &str,
    example: &QAExample,
    setup: &EvalSetup,
) -> Result<PredictionRecord, HarnessError> {
    let (prediction, fell_back) = match (&setup.spec.mode, &setup.bridge) {
        (PipelineMode::Bridged, Some(bridge)) => {
            let out = run_bridged(example, bridge, &setup.generator)?;
            (out.prediction, out.fell_back)
        }
        _ => (run_naive(example, &setup.generator)?, false),
    };
    let mut scored = ScoredPrediction::score(dataset, example, &prediction);
    if let Some(judge) = &setup.judge {
        scored.judge_acc =
            Some(metrics::judge_accuracy(example, &prediction, &judge.gateway, &judge.model_id)?);
    }
    Ok(PredictionRecord { scored, fell_back })
}

/// Scores every example of every `(name, examples)` dataset. Per-example
/// failures are collected in the report.
pub fn evaluate(datasets: &[(String, Vec<QAExample>)], setup: &EvalSetup) -> Result<EvalReport, String> {
    setup.spec.validate()?;
    if setup.spec.mode == PipelineMode::Bridged && setup.bridge.is_none() {
        return Err("bridged pipeline requires a configured bridge".into());
    }
    let started_at = chrono::Utc::now().to_rfc3339();
    let items: Vec<(&str, QAExample)> = datasets
        .iter()
        .flat_map(|(name, examples)| {
            examples.iter().map(move |ex| {
                let mut ex = ex.clone();
                if ex.answer_type == AnswerType::Unknown {
                    ex.answer_type = classify_answer_type(&ex);
                }
                (name.as_str(), ex)
            })
        })
        .collect();
    let results = parallel_map(&items, setup.workers, |_, (dataset, ex)| evaluate_one(dataset, ex, setup));

    let mut predictions = Vec::new();
    let mut errors = Vec::new();
    for ((dataset, ex), result) in items.iter().zip(results) {
        match result {
            Ok(p) => predictions.push(p),
            Err(e) => errors.push(ExampleError {
                dataset: dataset.to_string(),
                example_id: ex.id.clone(),
                message: e.to_string(),
            }),
        }
    }
    let bridged = setup.spec.mode == PipelineMode::Bridged;
    let fallback_count = predictions.iter().filter(|p| p.fell_back).count();
    let scored: Vec<ScoredPrediction> = predictions.iter().map(|p| p.scored.clone()).collect();
    let mut hit_rate = setup.generator.gateway.stats().cache_hit_rate();
    if let Some(b) = &setup.bridge {
        hit_rate = hit_rate.max(b.gateway.stats().cache_hit_rate());
    }
    Ok(EvalReport {
        pipeline: setup.spec.clone(),
        meta: RunMeta {
            seed: setup.seed,
            generator_model: setup.spec.generator_model.clone(),
            bridge_model: setup.spec.bridge_model.clone(),
            judge_model: setup.judge.as_ref().map(|j| j.model_id.clone()),
            prompt_version: prompts::PROMPT_VERSION.to_owned(),
            started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
            cache_hit_rate: hit_rate,
        },
        examples: items.len(),
        scored: predictions.len(),
        coverage: if items.is_empty() { 0.0 } else { predictions.len() as f64 / items.len() as f64 },
        bridged_count: if bridged { predictions.len() - fallback_count } else { 0 },
        fallback_count,
        aggregate: aggregate(&scored, setup.slices).ok(),
        errors,
        predictions,
    })
}

/// Fixed-width table: one row per dataset, then the macro average.
pub fn render_table(report: &EvalReport) -> String {
    let Some(agg) = &report.aggregate else {
        return "no scored examples\n".to_owned();
    };
    let with_acc = agg.average.acc.is_some();
    let mut out = String::new();
    let _ = write!(out, "{:<24} {:>6} {:>7} {:>7}", "dataset", "n", "EM", "F1");
    if with_acc {
        let _ = write!(out, " {:>7}", "ACC");
    }
    out.push('\n');
    let rows = agg.datasets.iter().map(|(k, v)| (k.as_str(), v)).chain([("Average", &agg.average)]);
    for (name, s) in rows {
        let _ = write!(out, "{:<24} {:>6} {:>7} {:>7}", name, s.count, fmt_pct(s.em), fmt_pct(s.f1));
        if with_acc {
            let _ = write!(out, " {:>7}", s.acc.map_or("-".to_owned(), fmt_pct));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub extractive: usize,
    pub abstractive: usize,
}

/// Partitions a dataset by answer type, stamping the type on every example.
pub fn split_ext_abs(input: &Path, out_ext: &Path, out_abs: &Path) -> Result<SplitCounts, DatasetError> {
    let examples = qa::load_dataset(input)?;
    let (mut ext, mut abs) = (Vec::new(), Vec::new());
    for mut ex in examples {
        ex.answer_type = classify_answer_type(&ex);
        match ex.answer_type {
            AnswerType::Extractive => ext.push(ex),
            _ => abs.push(ex),
        }
    }
    qa::save_dataset(&ext, out_ext)?;
    qa::save_dataset(&abs, out_abs)?;
    Ok(SplitCounts { extractive: ext.len(), abstractive: abs.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;
    use crate::qa::Document;

    fn example(id: &str, docs: &[(&str, Option<&str>, &str)]) -> QAExample {
        QAExample {
            id: id.into(),
            query: "who wrote it".into(),
            gold_answers: vec!["jane doe".into()],
            documents: docs
                .iter()
                .enumerate()
                .map(|(i, (doc_id, title, text))| Document {
                    doc_id: doc_id.to_string(),
                    rank: i as u32 + 1,
                    title: title.map(str::to_owned),
                    text: text.to_string(),
                })
                .collect(),
            answer_type: AnswerType::Unknown,
            query_type: None,
        }
    }

    fn gateway(backend: MockBackend) -> LlmGateway {
        LlmGateway::builder(backend).build()
    }

    #[test]
    fn spec_validation() {
        assert!(PipelineSpec::naive("g").validate().is_ok());
        let mut s = PipelineSpec::bridged("g", "b", BridgeStyle::Student);
        assert!(s.validate().is_ok());
        s.bridge_model = None;
        assert!(s.validate().is_err());
    }

    #[test]
    fn naive_with_zero_documents() {
        let ex = example("e", &[]);
        let prompt = prompts::render_answer(&ex.query, &[]);
        assert!(prompt.contains("Documents:\n\n"));
        let g = Generator::new(gateway(MockBackend::new("m").reply_to(&prompt, " jane doe\n")), "g");
        assert_eq!(run_naive(&ex, &g).unwrap(), "jane doe");
        assert_eq!(run_naive(&ex, &g).unwrap(), "jane doe");
    }

    #[test]
    fn all_sentinel_bridge_gives_empty_context() {
        let ex = example("e", &[("d1", None, "alpha"), ("d2", None, "beta")]);
        let student = prompts::render_student(&ex);
        let empty = prompts::render_answer(&ex.query, &[]);
        let bridge = Bridge::new(
            gateway(
                MockBackend::new("b")
                    .reply_to(&student, "Document 1: [NO_REWRITE]\nDocument 2: [NO_REWRITE]"),
            ),
            "b",
            BridgeStyle::Student,
        );
        let g = Generator::new(gateway(MockBackend::new("g").reply_to(&empty, "none")), "g");
        let out = run_bridged(&ex, &bridge, &g).unwrap();
        assert!(!out.fell_back);
        assert_eq!(out.prediction, "none");
    }

    #[test]
    fn identity_bridge_matches_naive_prompt() {
        let ex = example("e", &[("d1", Some("T"), "alpha"), ("d2", None, "beta")]);
        let student = prompts::render_student(&ex);
        let naive_prompt = prompts::render_answer(
            &ex.query,
            &[ContextDoc { title: Some("T"), text: "alpha" }, ContextDoc { title: None, text: "beta" }],
        );
        let bridge = Bridge::new(
            gateway(MockBackend::new("b").reply_to(&student, "Document 1: alpha\nDocument 2: beta")),
            "b",
            BridgeStyle::Student,
        );
        let g = Generator::new(gateway(MockBackend::new("g").reply_to(&naive_prompt, "jane doe")), "g");
        let out = run_bridged(&ex, &bridge, &g).unwrap();
        assert_eq!(out.prediction, run_naive(&ex, &g).unwrap());
    }

    #[test]
    fn malformed_bridge_output_falls_back() {
        let ex = example("e", &[("d1", None, "alpha")]);
        let student = prompts::render_student(&ex);
        let naive_prompt = prompts::render_answer(&ex.query, &[ContextDoc { title: None, text: "alpha" }]);
        let bridge = Bridge::new(
            gateway(MockBackend::new("b").reply_to(&student, "I cannot help with that.")),
            "b",
            BridgeStyle::Student,
        );
        let g = Generator::new(gateway(MockBackend::new("g").reply_to(&naive_prompt, "jane doe")), "g");
        let out = run_bridged(&ex, &bridge, &g).unwrap();
        assert!(out.fell_back);
        assert_eq!(out.prediction, "jane doe");
    }

    #[test]
    fn mean_f1_over_known_predictions() {
        let answers = ["jane doe", "nobody", "jane x", "doe y"];
        let examples: Vec<QAExample> =
            (0..4).map(|i| example(&format!("e{i}"), &[("d", None, &format!("text {i}"))])).collect();
        let mut backend = MockBackend::new("g");
        for (ex, a) in examples.iter().zip(answers) {
            let p =
                prompts::render_answer(&ex.query, &[ContextDoc { title: None, text: &ex.documents[0].text }]);
            backend = backend.reply_to(&p, a);
        }
        let setup = EvalSetup {
            spec: PipelineSpec::naive("g"),
            generator: Generator::new(gateway(backend), "g"),
            bridge: None,
            judge: None,
            slices: SliceSpec::default(),
            workers: 2,
            seed: None,
        };
        let report = evaluate(&[("ds".into(), examples)], &setup).unwrap();
        let agg = report.aggregate.as_ref().unwrap();
        assert_eq!(fmt_pct(agg.average.f1), "50.0");
        assert_eq!(agg.slices["answer_type"].values().map(|s| s.count).sum::<usize>(), 4);
        assert_eq!(report.coverage, 1.0);
        assert!(render_table(&report).contains("Average"));
    }

    #[test]
    fn missing_fixture_is_a_collected_error() {
        let setup = EvalSetup {
            spec: PipelineSpec::naive("g"),
            generator: Generator::new(gateway(MockBackend::new("g")), "g"),
            bridge: None,
            judge: None,
            slices: SliceSpec::default(),
            workers: 1,
            seed: None,
        };
        let report = evaluate(&[("ds".into(), vec![example("e", &[("d", None, "x")])])], &setup).unwrap();
        assert!(report.is_partial());
        assert_eq!(report.coverage, 0.0);
        assert!(report.aggregate.is_none());
    }
}
