//! Exact match, token F1, aggregate reports, and the LLM-judge accuracy protocol.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::gateway::{GatewayError, GenRequest, LlmGateway, Message};
use crate::prompts;
use crate::qa::{normalize_answer, normalized_tokens, AnswerType, QAExample};

/// 1 when the normalized prediction equals some normalized gold.
pub fn exact_match(prediction: &str, golds: &[String]) -> u8 {
    let pred = normalize_answer(prediction);
    golds.iter().any(|g| normalize_answer(g) == pred) as u8
}

/// Token F1 kept as the exact ratio `2·overlap / (|pred| + |gold|)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct F1Ratio {
    pub numerator: u32,
    pub denominator: u32,
}

impl F1Ratio {
    pub const ZERO: F1Ratio = F1Ratio { numerator: 0, denominator: 1 };
    pub const ONE: F1Ratio = F1Ratio { numerator: 1, denominator: 1 };

    pub fn between(prediction: &str, gold: &str) -> F1Ratio {
        let pred = normalized_tokens(prediction);
        let gold = normalized_tokens(gold);
        if pred.is_empty() || gold.is_empty() {
            return if pred.is_empty() && gold.is_empty() { F1Ratio::ONE } else { F1Ratio::ZERO };
        }
        let mut counts: HashMap<&str, u32> = HashMap::new();
        for t in &gold {
            *counts.entry(t).or_default() += 1;
        }
        let mut overlap = 0u32;
        for t in &pred {
            if let Some(c) = counts.get_mut(t.as_str()) {
                if *c > 0 {
                    *c -= 1;
                    overlap += 1;
                }
            }
        }
        if overlap == 0 {
            return F1Ratio::ZERO;
        }
        F1Ratio { numerator: 2 * overlap, denominator: (pred.len() + gold.len()) as u32 }
    }

    /// Max over golds.
    pub fn best(prediction: &str, golds: &[String]) -> F1Ratio {
        golds
            .iter()
            .map(|g| F1Ratio::between(prediction, g))
            .max_by(|a, b| a.cmp_value(b))
            .unwrap_or(F1Ratio::ZERO)
    }

    pub fn is_zero(&self) -> bool {
        self.numerator == 0
    }

    pub fn is_one(&self) -> bool {
        self.numerator == self.denominator
    }

    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    fn cmp_value(&self, other: &F1Ratio) -> Ordering {
        (self.numerator as u64 * other.denominator as u64)
            .cmp(&(other.numerator as u64 * self.denominator as u64))
    }
}

pub fn token_f1(prediction: &str, golds: &[String]) -> f64 {
    F1Ratio::best(prediction, golds).value()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub example_id: String,
    pub dataset: String,
    pub prediction: String,
    pub em: u8,
    pub f1: f64,
    pub judge_acc: Option<u8>,
    pub answer_type: AnswerType,
    pub query_type: Option<String>,
}

impl ScoredPrediction {
    pub fn score(dataset: &str, example: &QAExample, prediction: &str) -> Self {
        Self {
            example_id: example.id.clone(),
            dataset: dataset.to_owned(),
            prediction: prediction.to_owned(),
            em: exact_match(prediction, &example.gold_answers),
            f1: token_f1(prediction, &example.gold_answers),
            judge_acc: None,
            answer_type: example.answer_type,
            query_type: example.query_type.clone(),
        }
    }
}

/// Which breakdowns to include in an [`AggregateReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub by_answer_type: bool,
    pub by_query_type: bool,
}

impl Default for SliceSpec {
    fn default() -> Self {
        Self { by_answer_type: true, by_query_type: true }
    }
}

/// Means are percentages in [0, 100], unrounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub em: f64,
    pub f1: f64,
    /// Mean over the items that carry a judge verdict.
    pub acc: Option<f64>,
    pub acc_count: usize,
}

impl MetricSummary {
    fn of(items: &[&ScoredPrediction]) -> MetricSummary {
        let n = items.len() as f64;
        let em = 100.0 * items.iter().map(|s| s.em as f64).sum::<f64>() / n;
        let f1 = 100.0 * items.iter().map(|s| s.f1).sum::<f64>() / n;
        let judged: Vec<u8> = items.iter().filter_map(|s| s.judge_acc).collect();
        let acc = (!judged.is_empty())
            .then(|| 100.0 * judged.iter().map(|&v| v as f64).sum::<f64>() / judged.len() as f64);
        MetricSummary { count: items.len(), em, f1, acc, acc_count: judged.len() }
    }

    /// Uniform average of already-computed summaries.
    pub fn macro_average(summaries: &[&MetricSummary]) -> MetricSummary {
        let n = summaries.len() as f64;
        let accs: Vec<f64> = summaries.iter().filter_map(|s| s.acc).collect();
        MetricSummary {
            count: summaries.iter().map(|s| s.count).sum(),
            em: summaries.iter().map(|s| s.em).sum::<f64>() / n,
            f1: summaries.iter().map(|s| s.f1).sum::<f64>() / n,
            acc: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
            acc_count: summaries.iter().map(|s| s.acc_count).sum(),
        }
    }
}

/// Presentation rounding: one decimal.
pub fn fmt_pct(value: f64) -> String {
    format!("{:.1}", (value * 10.0).round() / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub total: usize,
    pub datasets: BTreeMap<String, MetricSummary>,
    /// Macro average over datasets.
    pub average: MetricSummary,
    /// slice family ("answer_type", "query_type") -> slice value -> summary
    pub slices: BTreeMap<String, BTreeMap<String, MetricSummary>>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AggregateError {
    #[error("nothing to aggregate")]
    Empty,
}

pub const UNSPECIFIED_QUERY_TYPE: &str = "unspecified";

pub fn aggregate(scored: &[ScoredPrediction], slices: SliceSpec) -> Result<AggregateReport, AggregateError> {
    if scored.is_empty() {
        return Err(AggregateError::Empty);
    }
    // Sorting by id makes float summation independent of input order.
    let mut items: Vec<&ScoredPrediction> = scored.iter().collect();
    items.sort_by(|a, b| {
        (&a.dataset, &a.example_id, &a.prediction).cmp(&(&b.dataset, &b.example_id, &b.prediction))
    });

    let group = |key: &dyn Fn(&ScoredPrediction) -> String| {
        let mut groups: BTreeMap<String, Vec<&ScoredPrediction>> = BTreeMap::new();
        for item in &items {
            groups.entry(key(item)).or_default().push(item);
        }
        groups
            .into_iter()
            .filter_map(|(k, v)| {
                if v.is_empty() {
                    log::warn!("slice {k} is empty, omitted");
                    None
                } else {
                    Some((k, MetricSummary::of(&v)))
                }
            })
            .collect::<BTreeMap<_, _>>()
    };

    let datasets = group(&|s| s.dataset.clone());
    let average = MetricSummary::macro_average(&datasets.values().collect::<Vec<_>>());
    let mut slice_map = BTreeMap::new();
    if slices.by_answer_type {
        slice_map.insert("answer_type".to_owned(), group(&|s| s.answer_type.as_str().to_owned()));
    }
    if slices.by_query_type {
        slice_map.insert(
            "query_type".to_owned(),
            group(&|s| s.query_type.clone().unwrap_or_else(|| UNSPECIFIED_QUERY_TYPE.to_owned())),
        );
    }
    Ok(AggregateReport { total: items.len(), datasets, average, slices: slice_map })
}

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("judge backend failed on example {example_id}: {source}")]
    Backend {
        example_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("unparseable judge verdict on example {example_id}: {raw:?}")]
    ParseFailure { example_id: String, raw: String },
}

/// The verdict is the last non-empty line and must be exactly `CORRECT` or `INCORRECT`.
pub fn parse_verdict(raw: &str) -> Option<u8> {
    match raw.lines().map(str::trim).rfind(|l| !l.is_empty())? {
        "CORRECT" => Some(1),
        "INCORRECT" => Some(0),
        _ => None,
    }
}

pub fn judge_accuracy(
    example: &QAExample,
    prediction: &str,
    judge: &LlmGateway,
    judge_model: &str,
) -> Result<u8, JudgeError> {
    let prompt = prompts::render_judge(&example.query, &example.gold_answers, prediction);
    let req = GenRequest::new(judge_model, vec![Message::user(prompt)]).with_max_tokens(8);
    let resp = judge
        .generate(&req)
        .map_err(|source| JudgeError::Backend { example_id: example.id.clone(), source })?;
    parse_verdict(&resp.text)
        .ok_or_else(|| JudgeError::ParseFailure { example_id: example.id.clone(), raw: resp.text })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn golds(g: &[&str]) -> Vec<String> {
        g.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("Paris", &golds(&["paris"])), 1);
        assert_eq!(exact_match("Paris, France", &golds(&["paris"])), 0);
        assert_eq!(exact_match("the answer", &golds(&["answer"])), 1);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("paris", &golds(&["paris"])), 1.0);
        assert_eq!(token_f1("london", &golds(&["paris"])), 0.0);
        let f = token_f1("paris france", &golds(&["paris"]));
        assert!((f - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn f1_empty_sides() {
        assert_eq!(token_f1("the", &golds(&["a"])), 1.0);
        assert_eq!(token_f1("", &golds(&["paris"])), 0.0);
        assert_eq!(token_f1("paris", &golds(&["an"])), 0.0);
    }

    #[test]
    fn f1_ratio_boundaries_are_exact() {
        assert!(F1Ratio::between("a b c", "c b a").is_one());
        assert!(F1Ratio::between("x", "y").is_zero());
        let partial = F1Ratio::between("x y", "x z");
        assert!(!partial.is_zero() && !partial.is_one());
        assert_eq!(partial, F1Ratio { numerator: 2, denominator: 4 });
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("CORRECT"), Some(1));
        assert_eq!(parse_verdict("Reasoning...\nINCORRECT\n\n"), Some(0));
        assert_eq!(parse_verdict("maybe"), None);
        assert_eq!(parse_verdict("correct"), None);
        assert_eq!(parse_verdict(""), None);
    }

    #[test]
    fn aggregate_empty_is_error() {
        assert_eq!(aggregate(&[], SliceSpec::default()), Err(AggregateError::Empty));
    }

    fn tokens() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec("[a-e]{1,2}", 0..6)
    }

    proptest! {
        #[test]
        fn em_implies_f1_one(p in tokens(), g in tokens()) {
            let (p, g) = (p.join(" "), g.join(" "));
            if exact_match(&p, std::slice::from_ref(&g)) == 1 {
                prop_assert_eq!(token_f1(&p, &[g]), 1.0);
            }
        }

        #[test]
        fn f1_symmetric_single_gold(p in tokens(), g in tokens()) {
            let (p, g) = (p.join(" "), g.join(" "));
            prop_assert_eq!(F1Ratio::between(&p, &g), F1Ratio::between(&g, &p));
        }

        #[test]
        fn f1_permutation_invariant(p in tokens(), g in tokens(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = p.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let gold = vec![g.join(" ")];
            prop_assert_eq!(token_f1(&p.join(" "), &gold), token_f1(&shuffled.join(" "), &gold));
        }

        #[test]
        fn f1_in_unit_interval(p in tokens(), g in tokens()) {
            let f = token_f1(&p.join(" "), &[g.join(" ")]);
            prop_assert!((0.0..=1.0).contains(&f));
        }

        #[test]
        fn aggregate_is_order_invariant(
            rows in prop::collection::vec((0u8..3, 0u32..5, any::<bool>()), 1..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let scored: Vec<ScoredPrediction> = rows
                .iter()
                .enumerate()
                .map(|(i, (ds, f, judged))| ScoredPrediction {
                    example_id: format!("e{i}"),
                    dataset: format!("ds{ds}"),
                    prediction: String::new(),
                    em: (*f == 4) as u8,
                    f1: *f as f64 / 4.0,
                    judge_acc: judged.then_some((*f >= 2) as u8),
                    answer_type: if f % 2 == 0 { AnswerType::Extractive } else { AnswerType::Abstractive },
                    query_type: (*f == 1).then(|| "multi-hop".to_owned()),
                })
                .collect();
            let mut permuted = scored.clone();
            permuted.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = aggregate(&scored, SliceSpec::default()).unwrap();
            let b = aggregate(&permuted, SliceSpec::default()).unwrap();
            prop_assert_eq!(&a, &b);
            for family in a.slices.values() {
                prop_assert_eq!(family.values().map(|s| s.count).sum::<usize>(), a.total);
            }
        }
    }
}
