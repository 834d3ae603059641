//! Seeded synthetic QA corpus and a rule-based model that answers every prompt
//! this crate renders. Together they let the whole pipeline run offline and
//! deterministically.
//!
//! Documents state answers as `the answer is X.`. The model answers with the
//! distinct tokens of every such phrase in its context, rewrites a document
//! only when it mentions a content word of the query, and scores a
//! continuation token by whether it occurs in the context.

use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::gateway::{GenRequest, Responder, ScoreRequest};
use crate::metrics::F1Ratio;
use crate::prompts::{self, NO_REWRITE, STEP1_MARKER, TARGET_HEADER};
use crate::qa::{classify_answer_type, normalized_tokens, AnswerType, Document, QAExample};

const ATTRIBUTES: &[&str] =
    &["colour", "emblem", "anthem", "mascot", "founder", "capital", "harbour", "patron"];
const ADJECTIVES: &[&str] =
    &["red", "amber", "silent", "northern", "golden", "quiet", "broken", "tall", "hollow", "bright"];
const NOUNS: &[&str] =
    &["fox", "river", "lantern", "falcon", "garden", "anchor", "tower", "meadow", "comet", "harp"];
const WRONG: &[&str] = &["pebble", "thistle", "walrus", "copper", "saddle"];
const FILLER: &[&str] = &["mill", "pond", "road", "barn", "hill", "lane", "gate", "well", "yard", "shed"];
const SYLLABLES: &[&str] = &["zor", "bla", "tem", "quo", "vin", "dra", "kel", "mur", "pha", "sto"];
const QUERY_TYPES: &[&str] = &["entity", "description", "location"];
const STOPWORDS: &[&str] = &["which", "belongs"];

fn pick<'a>(rng: &mut impl Rng, words: &[&'a str]) -> &'a str {
    words[rng.gen_range(0..words.len())]
}

#[derive(Clone, Copy)]
enum DocKind {
    Full,
    Reordered,
    Partial,
    Wrong,
    Mention,
    Irrelevant,
}

/// `n` examples with 3 to 6 documents each, reproducible from `seed`.
pub fn generate_dataset(n: usize, seed: u64) -> Vec<QAExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| generate_example(&mut rng, i)).collect()
}

fn generate_example(rng: &mut impl Rng, index: usize) -> QAExample {
    let entity: String = (0..3).map(|_| pick(rng, SYLLABLES)).collect();
    let attribute = pick(rng, ATTRIBUTES);
    let (adj, noun) = (pick(rng, ADJECTIVES), pick(rng, NOUNS));
    let gold = format!("{adj} {noun}");
    let abstractive = rng.gen_bool(0.2);

    let mut kinds = vec![if abstractive { DocKind::Reordered } else { DocKind::Full }];
    let extra = rng.gen_range(2..=5);
    for _ in 0..extra {
        kinds.push(match rng.gen_range(0..4) {
            0 => DocKind::Partial,
            1 => DocKind::Wrong,
            2 => DocKind::Mention,
            _ => DocKind::Irrelevant,
        });
    }
    kinds.shuffle(rng);

    let documents = kinds
        .iter()
        .enumerate()
        .map(|(j, kind)| {
            let text = match kind {
                DocKind::Full => format!("Records about {entity} show that the answer is {gold}."),
                DocKind::Reordered => format!("Records about {entity} show that the answer is {noun} {adj}."),
                DocKind::Partial => format!("A note on {entity}: the answer is {adj}."),
                DocKind::Wrong => format!("Rumours about {entity} claim the answer is {}.", pick(rng, WRONG)),
                DocKind::Mention => {
                    format!("{entity} lies past the {} by the {}.", pick(rng, FILLER), pick(rng, FILLER))
                }
                DocKind::Irrelevant => format!(
                    "The {} by the {} has a {}.",
                    pick(rng, FILLER),
                    pick(rng, FILLER),
                    pick(rng, FILLER)
                ),
            };
            Document {
                doc_id: format!("s{index}-d{j}"),
                rank: j as u32 + 1,
                title: rng.gen_bool(0.3).then(|| format!("Page {}", j + 1)),
                text,
            }
        })
        .collect();

    let mut example = QAExample {
        id: format!("syn-{index:04}"),
        query: format!("which {attribute} belongs to {entity}"),
        gold_answers: vec![gold],
        documents,
        answer_type: AnswerType::Unknown,
        query_type: Some(pick(rng, QUERY_TYPES).to_owned()),
    };
    example.answer_type = classify_answer_type(&example);
    example
}

static DOC_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^Document (\d+)(?: \(title: [^)]*\))?: (.*)$").expect("valid regex"));
static ANSWER_PHRASE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"the answer is ([^.]+)\.").expect("valid regex"));

fn first_line(template: &str) -> &str {
    template.lines().next().unwrap_or_default()
}

fn field<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    prompt.lines().find_map(|l| l.strip_prefix(label)).map(str::trim)
}

/// `(number, text)` of every `Document N: ...` line, titles removed.
fn document_lines(text: &str) -> Vec<(u32, &str)> {
    text.lines()
        .filter_map(|l| {
            let caps = DOC_LINE.captures(l)?;
            Some((caps[1].parse().ok()?, caps.get(2)?.as_str()))
        })
        .collect()
}

/// Distinct tokens of every stated answer, in order of appearance.
fn stated_answer(texts: &[&str]) -> String {
    let mut tokens: Vec<String> = Vec::new();
    for text in texts {
        for caps in ANSWER_PHRASE.captures_iter(text) {
            for t in normalized_tokens(&caps[1]) {
                if !tokens.contains(&t) {
                    tokens.push(t);
                }
            }
        }
    }
    if tokens.is_empty() {
        "unknown".to_owned()
    } else {
        tokens.join(" ")
    }
}

fn relevant(query: &str, text: &str) -> bool {
    let doc = normalized_tokens(text);
    normalized_tokens(query)
        .iter()
        .filter(|t| t.len() >= 5 && !STOPWORDS.contains(&t.as_str()))
        .any(|t| doc.contains(t))
}

/// How the single-pass student rewrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StudentMode {
    /// Every document copied verbatim.
    #[default]
    Identity,
    /// Same relevance rule as the teacher.
    Filter,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticResponder {
    pub student: StudentMode,
}

impl SyntheticResponder {
    pub fn new(student: StudentMode) -> Self {
        Self { student }
    }

    fn rewrite(&self, prompt: &str) -> String {
        let query = field(prompt, "Query:").unwrap_or_default();
        let target = prompt
            .split_once(TARGET_HEADER)
            .map(|(_, t)| document_lines(t))
            .and_then(|lines| lines.first().map(|(_, text)| *text))
            .unwrap_or_default();
        let rewrite = if relevant(query, target) { target } else { NO_REWRITE };
        format!(
            "{STEP1_MARKER} {rewrite}\nStep 2. Explain and answer: The target document states it directly. Answer: {}",
            stated_answer(&[target])
        )
    }

    fn student(&self, prompt: &str) -> String {
        let query = field(prompt, "Query:").unwrap_or_default();
        let docs = prompt.split_once("\nDocuments:\n").map_or("", |(_, d)| d);
        document_lines(docs)
            .into_iter()
            .map(|(n, text)| {
                let keep = self.student == StudentMode::Identity || relevant(query, text);
                format!("Document {n}: {}", if keep { text } else { NO_REWRITE })
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn answer(&self, prompt: &str) -> String {
        let docs = prompt.split_once("\nDocuments:\n").map_or("", |(_, d)| d);
        let texts: Vec<&str> = document_lines(docs).into_iter().map(|(_, t)| t).collect();
        stated_answer(&texts)
    }

    fn judge(&self, prompt: &str) -> Option<String> {
        let golds: Vec<String> = serde_json::from_str(field(prompt, "Acceptable answers:")?).ok()?;
        let candidate: String = serde_json::from_str(field(prompt, "Candidate answer:")?).ok()?;
        let correct = F1Ratio::best(&candidate, &golds).is_one();
        Some(if correct { "CORRECT" } else { "INCORRECT" }.to_owned())
    }

    fn trace(&self, prompt: &str) -> String {
        let query = field(prompt, "Question:").unwrap_or_default();
        let docs = prompt.split_once("\nDocuments:\n").map_or("", |(_, d)| d);
        let lines = document_lines(docs);
        let mut out = String::new();
        let mut used = Vec::new();
        for (n, text) in &lines {
            if relevant(query, text) && ANSWER_PHRASE.is_match(text) {
                out.push_str(&format!("From Document {n}: {text}\n"));
                used.push(*text);
            }
        }
        out.push_str(&format!("Answer: {}", stated_answer(&used)));
        out
    }
}

impl Responder for SyntheticResponder {
    fn respond(&self, req: &GenRequest) -> Option<String> {
        let prompt = req.last_user_content();
        if prompt.starts_with(first_line(prompts::REWRITE_TEMPLATE)) {
            Some(self.rewrite(prompt))
        } else if prompt.starts_with(first_line(prompts::STUDENT_TEMPLATE)) {
            Some(self.student(prompt))
        } else if prompt.starts_with(first_line(prompts::JUDGE_TEMPLATE)) {
            self.judge(prompt)
        } else if prompt.starts_with(first_line(prompts::TRACE_PROBE_TEMPLATE)) {
            Some(self.trace(prompt))
        } else if prompt.starts_with(first_line(prompts::ANSWER_TEMPLATE)) {
            Some(self.answer(prompt))
        } else {
            None
        }
    }

    /// `ln 0.9` per continuation token present in the context, `ln 0.1` otherwise.
    fn score(&self, req: &ScoreRequest) -> Option<f64> {
        let context = normalized_tokens(&req.context);
        let tokens = normalized_tokens(&req.continuation);
        if tokens.is_empty() {
            return None;
        }
        Some(tokens.iter().map(|t| if context.contains(t) { 0.9f64.ln() } else { 0.1f64.ln() }).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{LlmGateway, Message, MockBackend};
    use crate::qa::RewriteStatus;
    use crate::supervision::{build_rewrite_prompt, parse_teacher_output};

    fn gen(prompt: String) -> GenRequest {
        GenRequest::new("m", vec![Message::user(prompt)])
    }

    #[test]
    fn dataset_is_valid_and_reproducible() {
        let a = generate_dataset(30, 7);
        assert_eq!(a, generate_dataset(30, 7));
        assert_ne!(a, generate_dataset(30, 8));
        for ex in &a {
            ex.validate().unwrap();
            assert_ne!(ex.answer_type, AnswerType::Unknown);
        }
        assert!(a.iter().any(|e| e.answer_type == AnswerType::Abstractive));
        assert!(a.iter().any(|e| e.answer_type == AnswerType::Extractive));
    }

    #[test]
    fn answers_from_full_document() {
        let ex = &generate_dataset(1, 1)[0];
        let r = SyntheticResponder::default();
        let docs: Vec<prompts::ContextDoc<'_>> = ex
            .documents
            .iter()
            .filter(|d| d.text.starts_with("Records"))
            .map(|d| prompts::ContextDoc { title: d.title.as_deref(), text: &d.text })
            .collect();
        let answer = r.respond(&gen(prompts::render_answer(&ex.query, &docs))).unwrap();
        assert!(F1Ratio::best(&answer, &ex.gold_answers).is_one());
        assert_eq!(r.respond(&gen(prompts::render_answer(&ex.query, &[]))).unwrap(), "unknown");
    }

    #[test]
    fn teacher_skips_irrelevant_documents() {
        for ex in generate_dataset(10, 3) {
            for (i, doc) in ex.ranked_documents().into_iter().enumerate() {
                let prompt = build_rewrite_prompt(&ex, i + 1).unwrap().rendered_text;
                let out = parse_teacher_output(&SyntheticResponder::default().respond(&gen(prompt)).unwrap());
                let expected = if doc.text.starts_with("The ") {
                    RewriteStatus::NoRewrite
                } else {
                    RewriteStatus::Rewritten
                };
                assert_eq!(out.status, expected, "{}", doc.text);
            }
        }
    }

    #[test]
    fn identity_student_copies_documents() {
        let ex = &generate_dataset(1, 5)[0];
        let out = SyntheticResponder::default().respond(&gen(prompts::render_student(ex))).unwrap();
        let set = crate::supervision::rewrite_set_from_target(ex, &out).unwrap();
        for (r, d) in set.rewrites.iter().zip(ex.ranked_documents()) {
            assert_eq!(r.text, d.text);
        }
    }

    #[test]
    fn judge_and_scores() {
        let r = SyntheticResponder::default();
        let golds = vec!["red fox".to_owned()];
        let yes = r.respond(&gen(prompts::render_judge("q", &golds, "fox red"))).unwrap();
        let no = r.respond(&gen(prompts::render_judge("q", &golds, "red"))).unwrap();
        assert_eq!((yes.as_str(), no.as_str()), ("CORRECT", "INCORRECT"));
        assert!(r.respond(&gen("unrelated".into())).is_none());

        let gw = LlmGateway::builder(MockBackend::new("m").with_responder(r)).build();
        let s = |ctx: &str| {
            gw.score_continuation(&ScoreRequest {
                model_id: "m".into(),
                context: ctx.into(),
                continuation: " red fox".into(),
            })
            .unwrap()
        };
        assert!((s("a red fox") - 2.0 * 0.9f64.ln()).abs() < 1e-12);
        assert!((s("a red cat") - (0.9f64.ln() + 0.1f64.ln())).abs() < 1e-12);
    }
}
