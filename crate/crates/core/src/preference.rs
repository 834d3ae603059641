//! Set-level preference pairs built from per-document answer correctness.
//!
//! Each rewritten document is scored alone and placed in category A (F1 = 0),
//! B (0 < F1 < 1), or C (F1 = 1). Candidate sets are composed from these
//! documents, labeled by the F1 of the answer they produce together, and
//! positives are paired against negatives of the same example.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gateway::GatewayError;
use crate::harness::Generator;
use crate::metrics::F1Ratio;
use crate::par::parallel_map;
use crate::prompts::{self, ContextDoc};
use crate::qa::{QAExample, RewriteStatus, RewrittenDocument, MAX_DOCUMENTS};
use crate::supervision::{rewrite_set_from_target, serialize_blocks, SftRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    A,
    B,
    C,
}

impl Category {
    /// Exact on the rational F1.
    pub fn of(f1: F1Ratio) -> Category {
        if f1.is_zero() {
            Category::A
        } else if f1.is_one() {
            Category::C
        } else {
            Category::B
        }
    }

    pub fn letter(self) -> &'static str {
        match self {
            Category::A => "A",
            Category::B => "B",
            Category::C => "C",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorizedDoc {
    pub rewritten: RewrittenDocument,
    /// Retrieval rank of the source document.
    pub rank: u32,
    pub individual_f1: f64,
    pub category: Category,
}

impl CategorizedDoc {
    pub fn new(rewritten: RewrittenDocument, rank: u32, f1: F1Ratio) -> Self {
        Self { rewritten, rank, individual_f1: f1.value(), category: Category::of(f1) }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PreferenceError {
    #[error("example {example_id}, document {doc_id}: {source}")]
    Gateway {
        example_id: String,
        doc_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("example {example_id}: {message}")]
    Input { example_id: String, message: String },
}

fn context<'a>(example: &'a QAExample, members: &[&'a CategorizedDoc]) -> Vec<ContextDoc<'a>> {
    members
        .iter()
        .map(|m| ContextDoc {
            title: example.document_by_id(&m.rewritten.source_doc_id).and_then(|d| d.title.as_deref()),
            text: &m.rewritten.text,
        })
        .collect()
}

fn answer_f1(
    example: &QAExample,
    members: &[&CategorizedDoc],
    generator: &Generator,
    doc_id: &str,
) -> Result<F1Ratio, PreferenceError> {
    let answer = generator.answer(&example.query, &context(example, members)).map_err(|source| {
        PreferenceError::Gateway { example_id: example.id.clone(), doc_id: doc_id.to_owned(), source }
    })?;
    Ok(F1Ratio::best(&answer, &example.gold_answers))
}

/// F1 of the answer generated from the query and this one rewritten document.
pub fn score_individual(
    example: &QAExample,
    rewritten: &RewrittenDocument,
    generator: &Generator,
) -> Result<F1Ratio, PreferenceError> {
    if rewritten.status != RewriteStatus::Rewritten {
        return Err(PreferenceError::Input {
            example_id: example.id.clone(),
            message: format!("document {} has no rewrite to score", rewritten.source_doc_id),
        });
    }
    let probe =
        CategorizedDoc { rewritten: rewritten.clone(), rank: 0, individual_f1: 0.0, category: Category::A };
    answer_f1(example, &[&probe], generator, &rewritten.source_doc_id)
}

/// Scores every rewritten document of `rewrites`; sentinels are excluded.
pub fn categorize_pool(
    example: &QAExample,
    rewrites: &[RewrittenDocument],
    generator: &Generator,
) -> Result<Vec<CategorizedDoc>, PreferenceError> {
    let mut pool = Vec::new();
    for r in rewrites.iter().filter(|r| r.status == RewriteStatus::Rewritten) {
        let rank = example.document_by_id(&r.source_doc_id).map(|d| d.rank).ok_or_else(|| {
            PreferenceError::Input {
                example_id: example.id.clone(),
                message: format!("unknown document {}", r.source_doc_id),
            }
        })?;
        let f1 = score_individual(example, r, generator)?;
        pool.push(CategorizedDoc::new(r.clone(), rank, f1));
    }
    pool.sort_by_key(|d| d.rank);
    Ok(pool)
}

/// Disjoint composition families. Every non-empty set falls in exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    AOnly,
    AB,
    BC,
    /// Any other set with a C member: C alone, or C together with A.
    OtherC,
    BOnly,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::AOnly, Family::AB, Family::BC, Family::OtherC, Family::BOnly];

    pub fn of(composition: &[Category]) -> Family {
        let has = |c| composition.contains(&c);
        match (has(Category::A), has(Category::B), has(Category::C)) {
            (_, _, true) if !has(Category::A) && has(Category::B) => Family::BC,
            (_, _, true) => Family::OtherC,
            (true, true, false) => Family::AB,
            (true, false, false) => Family::AOnly,
            _ => Family::BOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionPolicy {
    pub families: Vec<Family>,
    /// 2 by default; 1 admits singleton sets.
    pub min_size: usize,
    /// Per-family limit after a seeded shuffle; `None` keeps every set.
    pub per_family_cap: Option<usize>,
}

impl Default for CompositionPolicy {
    fn default() -> Self {
        Self { families: Family::ALL.to_vec(), min_size: 2, per_family_cap: Some(8) }
    }
}

impl CompositionPolicy {
    /// Admits singletons and keeps every set.
    pub fn exhaustive() -> Self {
        Self { families: Family::ALL.to_vec(), min_size: 1, per_family_cap: None }
    }
}

/// A candidate set: pool indices in rank order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub family: Family,
    pub members: Vec<usize>,
}

/// Enumerates subsets of the pool by family. Output lists families in policy
/// order, each family's sets ordered by member ranks.
pub fn compose_sets(pool: &[CategorizedDoc], policy: &CompositionPolicy, seed: u64) -> Vec<CandidateSet> {
    let n = pool.len().min(MAX_DOCUMENTS);
    let min_size = policy.min_size.max(1);
    if n < min_size {
        log::info!("pool of {n} documents too small for sets of {min_size}");
        return Vec::new();
    }
    let mut by_family: BTreeMap<Family, Vec<Vec<usize>>> = BTreeMap::new();
    for mask in 1u32..(1 << n) {
        if (mask.count_ones() as usize) < min_size {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let comp: Vec<Category> = members.iter().map(|&i| pool[i].category).collect();
        by_family.entry(Family::of(&comp)).or_default().push(members);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for family in &policy.families {
        let Some(mut sets) = by_family.remove(family) else { continue };
        if let Some(cap) = policy.per_family_cap {
            if sets.len() > cap {
                sets.shuffle(&mut rng);
                sets.truncate(cap);
            }
        }
        let rank_key = |s: &Vec<usize>| s.iter().map(|&i| pool[i].rank).collect::<Vec<_>>();
        sets.sort_by_key(rank_key);
        out.extend(sets.into_iter().map(|members| CandidateSet { family: *family, members }));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetLabel {
    Positive,
    Negative,
    Discarded,
}

impl SetLabel {
    pub fn of(f1: F1Ratio) -> SetLabel {
        if f1.is_one() {
            SetLabel::Positive
        } else if f1.is_zero() {
            SetLabel::Negative
        } else {
            SetLabel::Discarded
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub example_id: String,
    /// Members in rank order.
    pub members: Vec<CategorizedDoc>,
    pub set_f1: f64,
    pub label: SetLabel,
}

impl LabeledSet {
    pub fn member_doc_ids(&self) -> Vec<&str> {
        self.members.iter().map(|m| m.rewritten.source_doc_id.as_str()).collect()
    }

    pub fn ranks(&self) -> Vec<u32> {
        self.members.iter().map(|m| m.rank).collect()
    }

    /// Category letters, sorted.
    pub fn composition(&self) -> Vec<Category> {
        let mut c: Vec<Category> = self.members.iter().map(|m| m.category).collect();
        c.sort();
        c
    }
}

/// Answers from the query and the set's members together, then labels by F1.
pub fn label_set(
    example: &QAExample,
    pool: &[CategorizedDoc],
    set: &CandidateSet,
    generator: &Generator,
) -> Result<LabeledSet, PreferenceError> {
    let mut members: Vec<&CategorizedDoc> = set.members.iter().map(|&i| &pool[i]).collect();
    members.sort_by_key(|m| m.rank);
    let ids = members.iter().map(|m| m.rewritten.source_doc_id.as_str()).collect::<Vec<_>>().join(",");
    let f1 = answer_f1(example, &members, generator, &ids)?;
    Ok(LabeledSet {
        example_id: example.id.clone(),
        members: members.into_iter().cloned().collect(),
        set_f1: f1.value(),
        label: SetLabel::of(f1),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoMeta {
    pub chosen_composition: Vec<String>,
    pub rejected_composition: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoRecord {
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub meta: DpoMeta,
}

/// One block per document of the example: members carry their rewrite,
/// everything else is the sentinel.
pub fn serialize_set(example: &QAExample, members: &[CategorizedDoc]) -> String {
    let ranked = example.ranked_documents();
    let docs: Vec<RewrittenDocument> = ranked
        .iter()
        .map(|d| {
            members
                .iter()
                .find(|m| m.rewritten.source_doc_id == d.doc_id)
                .map_or_else(|| RewrittenDocument::no_rewrite(&d.doc_id), |m| m.rewritten.clone())
        })
        .collect();
    serialize_blocks(ranked.iter().map(|d| d.rank).zip(&docs)).expect("members are rewritten documents")
}

fn letters(c: &[Category]) -> Vec<String> {
    c.iter().map(|c| c.letter().to_owned()).collect()
}

fn record(example: &QAExample, chosen: &LabeledSet, rejected: &LabeledSet) -> DpoRecord {
    DpoRecord {
        id: example.id.clone(),
        prompt: prompts::render_student(example),
        chosen: serialize_set(example, &chosen.members),
        rejected: serialize_set(example, &rejected.members),
        meta: DpoMeta {
            chosen_composition: letters(&chosen.composition()),
            rejected_composition: letters(&rejected.composition()),
        },
    }
}

/// Size of the symmetric difference of two category multisets.
pub fn composition_distance(a: &[Category], b: &[Category]) -> usize {
    let count = |s: &[Category], c| s.iter().filter(|&&x| x == c).count();
    [Category::A, Category::B, Category::C].into_iter().map(|c| count(a, c).abs_diff(count(b, c))).sum()
}

pub const DEFAULT_PAIR_CAP: usize = 4;

/// Pairs positives with negatives of the same example. Per example, the `cap`
/// pairs with the most distant compositions are kept; ties go to the
/// lexicographically smaller (chosen ranks, rejected ranks). `None` keeps all.
pub fn build_pairs(example: &QAExample, labeled: &[LabeledSet], cap: Option<usize>) -> Vec<DpoRecord> {
    let own = |label| labeled.iter().filter(move |s| s.example_id == example.id && s.label == label);
    let mut candidates: Vec<(usize, Vec<u32>, Vec<u32>, &LabeledSet, &LabeledSet)> = Vec::new();
    for p in own(SetLabel::Positive) {
        for n in own(SetLabel::Negative) {
            if p.ranks() == n.ranks() {
                continue;
            }
            let d = composition_distance(&p.composition(), &n.composition());
            candidates.push((d, p.ranks(), n.ranks(), p, n));
        }
    }
    candidates.sort_by(|x, y| y.0.cmp(&x.0).then_with(|| (&x.1, &x.2).cmp(&(&y.1, &y.2))));
    candidates.dedup_by(|x, y| x.1 == y.1 && x.2 == y.2);
    candidates
        .into_iter()
        .take(cap.unwrap_or(usize::MAX))
        .map(|(_, _, _, p, n)| record(example, p, n))
        .collect()
}

/// Every C document alone as chosen against every A document alone as rejected.
pub fn build_pairs_naive(example: &QAExample, pool: &[CategorizedDoc]) -> Vec<DpoRecord> {
    let single = |d: &CategorizedDoc, label| LabeledSet {
        example_id: example.id.clone(),
        members: vec![d.clone()],
        set_f1: d.individual_f1,
        label,
    };
    let of = |c| pool.iter().filter(move |d| d.category == c);
    let mut out = Vec::new();
    for c in of(Category::C) {
        for a in of(Category::A) {
            out.push(record(example, &single(c, SetLabel::Positive), &single(a, SetLabel::Negative)));
        }
    }
    out
}

/// `(chosen, rejected)` member-id sets of a record, read back from its blocks.
pub fn pair_members(example: &QAExample, record: &DpoRecord) -> Option<(BTreeSet<String>, BTreeSet<String>)> {
    let ids = |text: &str| {
        rewrite_set_from_target(example, text).ok().map(|set| {
            set.rewrites
                .into_iter()
                .filter(|r| r.status == RewriteStatus::Rewritten)
                .map(|r| r.source_doc_id)
                .collect::<BTreeSet<_>>()
        })
    };
    Some((ids(&record.chosen)?, ids(&record.rejected)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoOptions {
    pub policy: CompositionPolicy,
    pub pair_cap: Option<usize>,
    pub naive: bool,
    pub seed: u64,
    pub workers: usize,
}

impl Default for DpoOptions {
    fn default() -> Self {
        Self {
            policy: CompositionPolicy::default(),
            pair_cap: Some(DEFAULT_PAIR_CAP),
            naive: false,
            seed: 0,
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoStats {
    pub examples: usize,
    pub records: usize,
    pub pool_docs: usize,
    pub category_a: usize,
    pub category_b: usize,
    pub category_c: usize,
    pub candidate_sets: usize,
    pub positives: usize,
    pub negatives: usize,
    pub discarded: usize,
    pub skipped_examples: usize,
    pub failed_examples: usize,
}

struct ExampleOutcome {
    pool: Vec<CategorizedDoc>,
    labeled: Vec<LabeledSet>,
    candidates: usize,
    records: Vec<DpoRecord>,
}

fn pairs_for_example(
    example: &QAExample,
    sft: &SftRecord,
    generator: &Generator,
    options: &DpoOptions,
) -> Result<ExampleOutcome, PreferenceError> {
    let set = rewrite_set_from_target(example, &sft.target)
        .map_err(|e| PreferenceError::Input { example_id: example.id.clone(), message: e.to_string() })?;
    let pool = categorize_pool(example, &set.rewrites, generator)?;
    if options.naive {
        let records = build_pairs_naive(example, &pool);
        return Ok(ExampleOutcome { pool, labeled: Vec::new(), candidates: 0, records });
    }
    let candidates = compose_sets(&pool, &options.policy, options.seed);
    let labeled =
        candidates.iter().map(|c| label_set(example, &pool, c, generator)).collect::<Result<Vec<_>, _>>()?;
    let records = build_pairs(example, &labeled, options.pair_cap);
    Ok(ExampleOutcome { pool, labeled, candidates: candidates.len(), records })
}

/// Builds DPO records for every SFT record with a matching example, in SFT order.
pub fn generate_dpo(
    examples: &[QAExample],
    sft_records: &[SftRecord],
    generator: &Generator,
    options: &DpoOptions,
) -> (Vec<DpoRecord>, DpoStats) {
    let by_id: BTreeMap<&str, &QAExample> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut stats = DpoStats::default();
    let mut jobs = Vec::new();
    for r in sft_records {
        match by_id.get(r.id.as_str()) {
            Some(ex) => jobs.push((*ex, r)),
            None => {
                log::warn!("no example for rewrite record {}", r.id);
                stats.skipped_examples += 1;
            }
        }
    }
    stats.examples = jobs.len();
    let outcomes =
        parallel_map(&jobs, options.workers, |_, (ex, sft)| pairs_for_example(ex, sft, generator, options));
    let mut records = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(o) => {
                stats.pool_docs += o.pool.len();
                for d in &o.pool {
                    match d.category {
                        Category::A => stats.category_a += 1,
                        Category::B => stats.category_b += 1,
                        Category::C => stats.category_c += 1,
                    }
                }
                stats.candidate_sets += o.candidates;
                for s in &o.labeled {
                    match s.label {
                        SetLabel::Positive => stats.positives += 1,
                        SetLabel::Negative => stats.negatives += 1,
                        SetLabel::Discarded => stats.discarded += 1,
                    }
                }
                records.extend(o.records);
            }
            Err(e) => {
                log::warn!("{e}");
                stats.failed_examples += 1;
            }
        }
    }
    stats.records = records.len();
    (records, stats)
}
