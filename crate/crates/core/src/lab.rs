//! Exact checks of the rewrite-objective algebra on small enumerable worlds.
//!
//! A [`ToyWorld`] fixes, for one query and document set, a prior over
//! rewrites `P(d'|q,d)`, a likelihood table `P(a|q,d')`, and the baseline
//! `P(a|q,d)` as the marginal of the two. On such a world every quantity is a
//! finite sum, so the Bayes posterior over rewrites, the factorization of the
//! joint, and the importance-weighted objective can be compared exactly.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

pub const MAX_OUTCOMES: usize = 16;
pub const TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LabError {
    #[error("answer {0} has zero baseline probability")]
    ZeroBaseline(usize),
    #[error("answer index {0} out of range")]
    UnknownAnswer(usize),
    #[error("invalid world: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorld {
    pub answers: Vec<String>,
    pub rewrites: Vec<String>,
    /// `P(d'|q,d)`, indexed by rewrite.
    pub prior: Vec<f64>,
    /// `P(a|q,d')`: one row per rewrite, one column per answer.
    pub likelihood: Vec<Vec<f64>>,
    /// `P(a|q,d) = Σ_{d'} P(a|q,d') P(d'|q,d)`.
    pub baseline: Vec<f64>,
}

fn check_distribution(name: &str, row: &[f64]) -> Result<(), LabError> {
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(LabError::Invalid(format!("{name} has a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > TOLERANCE {
        return Err(LabError::Invalid(format!("{name} sums to {sum}")));
    }
    Ok(())
}

impl ToyWorld {
    /// Builds a world and derives the baseline as the marginal.
    pub fn new(
        answers: Vec<String>,
        rewrites: Vec<String>,
        prior: Vec<f64>,
        likelihood: Vec<Vec<f64>>,
    ) -> Result<Self, LabError> {
        let mut world = ToyWorld { answers, rewrites, prior, likelihood, baseline: Vec::new() };
        world.check_shape()?;
        world.baseline = world.marginal();
        world.validate()?;
        Ok(world)
    }

    /// Unnamed outcomes `a0..`, `r0..`.
    pub fn from_tables(prior: Vec<f64>, likelihood: Vec<Vec<f64>>) -> Result<Self, LabError> {
        let n_answers = likelihood.first().map_or(0, Vec::len);
        ToyWorld::new(
            (0..n_answers).map(|i| format!("a{i}")).collect(),
            (0..prior.len()).map(|i| format!("r{i}")).collect(),
            prior,
            likelihood,
        )
    }

    fn check_shape(&self) -> Result<(), LabError> {
        let (na, nr) = (self.answers.len(), self.rewrites.len());
        if na == 0 || nr == 0 || na > MAX_OUTCOMES || nr > MAX_OUTCOMES {
            return Err(LabError::Invalid(format!("{na} answers x {nr} rewrites out of bounds")));
        }
        if self.prior.len() != nr || self.likelihood.len() != nr {
            return Err(LabError::Invalid("prior/likelihood rows must match rewrites".into()));
        }
        if self.likelihood.iter().any(|row| row.len() != na) {
            return Err(LabError::Invalid("likelihood rows must cover every answer".into()));
        }
        Ok(())
    }

    fn marginal(&self) -> Vec<f64> {
        (0..self.answers.len())
            .map(|a| self.prior.iter().zip(&self.likelihood).map(|(p, row)| p * row[a]).sum())
            .collect()
    }

    /// Checks every invariant, including a stored baseline against the marginal.
    pub fn validate(&self) -> Result<(), LabError> {
        self.check_shape()?;
        check_distribution("prior", &self.prior)?;
        for (i, row) in self.likelihood.iter().enumerate() {
            check_distribution(&format!("likelihood row {i}"), row)?;
        }
        check_distribution("baseline", &self.baseline)?;
        let marginal = self.marginal();
        if self.baseline.len() != marginal.len()
            || self.baseline.iter().zip(&marginal).any(|(b, m)| (b - m).abs() > TOLERANCE)
        {
            return Err(LabError::Invalid("baseline differs from the marginal".into()));
        }
        Ok(())
    }

    pub fn n_answers(&self) -> usize {
        self.answers.len()
    }

    pub fn n_rewrites(&self) -> usize {
        self.rewrites.len()
    }

    fn baseline_of(&self, answer: usize) -> Result<f64, LabError> {
        let b = *self.baseline.get(answer).ok_or(LabError::UnknownAnswer(answer))?;
        if b <= 0.0 {
            return Err(LabError::ZeroBaseline(answer));
        }
        Ok(b)
    }

    /// `P(a, d' | q, d)` under sufficiency: likelihood times prior.
    pub fn joint(&self) -> Vec<Vec<f64>> {
        self.likelihood.iter().zip(&self.prior).map(|(row, p)| row.iter().map(|l| l * p).collect()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("worlds serialize")
    }

    pub fn from_json(json: &str) -> Result<Self, LabError> {
        let world: ToyWorld = serde_json::from_str(json).map_err(|e| LabError::Invalid(e.to_string()))?;
        world.validate()?;
        Ok(world)
    }
}

/// `P(d'|q,d,a) = P(a|q,d') P(d'|q,d) / P(a|q,d)`.
pub fn ideal_rewrite_posterior(world: &ToyWorld, answer: usize) -> Result<Vec<f64>, LabError> {
    let baseline = world.baseline_of(answer)?;
    Ok(world.prior.iter().zip(&world.likelihood).map(|(p, row)| row[answer] * p / baseline).collect())
}

/// Max `|joint(a,d') - posterior(d'|a) · baseline(a)|` using the world's own joint.
pub fn check_factorization(world: &ToyWorld) -> f64 {
    factorization_residual(world, &world.joint())
}

/// Residual of an externally supplied joint table (rows by rewrite) against
/// the world's posterior-times-baseline factorization.
pub fn factorization_residual(world: &ToyWorld, joint: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for a in 0..world.n_answers() {
        let posterior = ideal_rewrite_posterior(world, a).ok();
        for (r, row) in joint.iter().enumerate() {
            let factored = posterior.as_ref().map_or(0.0, |p| p[r] * world.baseline[a]);
            worst = worst.max((row[a] - factored).abs());
        }
    }
    worst
}

/// `w · ln(x)` with `0 · ln 0 := 0`.
fn weighted_log(weight: f64, x: f64) -> f64 {
    if weight == 0.0 {
        0.0
    } else {
        weight * x.ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    /// `E_{d'~posterior}[log P(a|q,d')]`
    pub lhs: f64,
    /// `E_{d'~prior}[(P(a|q,d')/P(a|q,d)) log P(a|q,d')]`
    pub rhs: f64,
    pub discrepancy: f64,
}

pub fn check_importance_identity(world: &ToyWorld, answer: usize) -> Result<IdentityCheck, LabError> {
    let baseline = world.baseline_of(answer)?;
    let posterior = ideal_rewrite_posterior(world, answer)?;
    let lhs: f64 =
        posterior.iter().zip(&world.likelihood).map(|(q, row)| weighted_log(*q, row[answer])).sum();
    let rhs: f64 = world
        .prior
        .iter()
        .zip(&world.likelihood)
        .map(|(p, row)| {
            let lik = row[answer];
            weighted_log(p * (lik / baseline), lik)
        })
        .sum();
    Ok(IdentityCheck { lhs, rhs, discrepancy: (lhs - rhs).abs() })
}

/// `E_prior[log P(a|q,d')]`, which may be `-inf`.
pub fn prior_expected_log_likelihood(world: &ToyWorld, answer: usize) -> f64 {
    world.prior.iter().zip(&world.likelihood).map(|(p, row)| weighted_log(*p, row[answer])).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Plain Monte-Carlo estimate of the importance-weighted objective with
/// rewrites drawn from the prior.
pub fn monte_carlo_objective(
    world: &ToyWorld,
    answer: usize,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate, LabError> {
    if n_samples == 0 {
        return Err(LabError::Invalid("n_samples must be >= 1".into()));
    }
    let baseline = world.baseline_of(answer)?;
    let values: Vec<f64> =
        world.likelihood.iter().map(|row| weighted_log(row[answer] / baseline, row[answer])).collect();
    let sampler = WeightedIndex::new(&world.prior).map_err(|e| LabError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Welford accumulation.
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for i in 0..n_samples {
        let x = values[sampler.sample(&mut rng)];
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let std_error =
        if n_samples > 1 { (m2 / (n_samples - 1) as f64).sqrt() / (n_samples as f64).sqrt() } else { 0.0 };
    Ok(McEstimate { mean, std_error, n: n_samples })
}

/// A world with the full conditional `P(a|q,d',d)` next to `P(a|q,d')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyWorld {
    pub world: ToyWorld,
    /// One row per rewrite, one column per answer.
    pub full_conditional: Vec<Vec<f64>>,
}

impl SufficiencyWorld {
    pub fn new(world: ToyWorld, full_conditional: Vec<Vec<f64>>) -> Result<Self, LabError> {
        if full_conditional.len() != world.n_rewrites()
            || full_conditional.iter().any(|r| r.len() != world.n_answers())
        {
            return Err(LabError::Invalid("full conditional shape mismatch".into()));
        }
        for (i, row) in full_conditional.iter().enumerate() {
            check_distribution(&format!("full conditional row {i}"), row)?;
        }
        Ok(Self { world, full_conditional })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    /// `max |P(a|q,d',d) - P(a|q,d')|`
    pub gap: f64,
    /// Max deviation between the posterior computed from the full conditional
    /// and the one computed under sufficiency.
    pub max_posterior_deviation: f64,
    /// Analytic bound on that deviation: `gap · (P(d'|q,d) + posterior) / P_full(a|q,d)`.
    pub posterior_error_bound: f64,
}

pub fn sufficiency_gap(sw: &SufficiencyWorld) -> SufficiencyReport {
    let w = &sw.world;
    let mut gap: f64 = 0.0;
    for (full, approx) in sw.full_conditional.iter().zip(&w.likelihood) {
        for (f, l) in full.iter().zip(approx) {
            gap = gap.max((f - l).abs());
        }
    }
    let mut deviation: f64 = 0.0;
    let mut bound: f64 = 0.0;
    for a in 0..w.n_answers() {
        let full_baseline: f64 = w.prior.iter().zip(&sw.full_conditional).map(|(p, r)| p * r[a]).sum();
        let Ok(approx) = ideal_rewrite_posterior(w, a) else { continue };
        if full_baseline <= 0.0 {
            continue;
        }
        for (r, p) in w.prior.iter().enumerate() {
            let exact = sw.full_conditional[r][a] * p / full_baseline;
            deviation = deviation.max((exact - approx[r]).abs());
            bound = bound.max(gap * (p + approx[r]) / full_baseline);
        }
    }
    SufficiencyReport { gap, max_posterior_deviation: deviation, posterior_error_bound: bound }
}

fn random_row(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    // Uniform draws on (0, 1], normalized.
    let raw: Vec<f64> = (0..n).map(|_| 1.0 - rng.gen::<f64>()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

/// A full-support world with the given dimensions.
pub fn random_world(rng: &mut impl Rng, n_answers: usize, n_rewrites: usize) -> ToyWorld {
    let prior = random_row(rng, n_rewrites);
    let likelihood = (0..n_rewrites).map(|_| random_row(rng, n_answers)).collect();
    ToyWorld::from_tables(prior, likelihood).expect("normalized rows form a valid world")
}

/// `count` worlds with dimensions drawn from `1..=max_dim`, reproducible from `seed`.
pub fn random_worlds(count: usize, max_dim: usize, seed: u64) -> Vec<ToyWorld> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let na = rng.gen_range(1..=max_dim);
            let nr = rng.gen_range(1..=max_dim);
            random_world(&mut rng, na, nr)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub worlds: usize,
    pub seed: u64,
    pub max_dim: usize,
    pub answers_checked: usize,
    pub max_factorization_residual: f64,
    pub max_identity_discrepancy: f64,
    pub max_posterior_sum_error: f64,
    /// Answers where the posterior expected log-likelihood fell below the prior's.
    pub monotonicity_violations: usize,
    pub elapsed_ms: u128,
    pub passed: bool,
}

/// Runs every exact check over `count` seeded random worlds.
pub fn verify(count: usize, max_dim: usize, seed: u64) -> VerifyReport {
    let start = Instant::now();
    let worlds = random_worlds(count, max_dim, seed);
    let mut report = VerifyReport {
        worlds: count,
        seed,
        max_dim,
        answers_checked: 0,
        max_factorization_residual: 0.0,
        max_identity_discrepancy: 0.0,
        max_posterior_sum_error: 0.0,
        monotonicity_violations: 0,
        elapsed_ms: 0,
        passed: false,
    };
    for world in &worlds {
        report.max_factorization_residual = report.max_factorization_residual.max(check_factorization(world));
        for a in 0..world.n_answers() {
            let (Ok(posterior), Ok(identity)) =
                (ideal_rewrite_posterior(world, a), check_importance_identity(world, a))
            else {
                continue;
            };
            report.answers_checked += 1;
            let sum: f64 = posterior.iter().sum();
            report.max_posterior_sum_error = report.max_posterior_sum_error.max((sum - 1.0).abs());
            report.max_identity_discrepancy = report.max_identity_discrepancy.max(identity.discrepancy);
            if identity.lhs < prior_expected_log_likelihood(world, a) - TOLERANCE {
                report.monotonicity_violations += 1;
            }
        }
    }
    report.elapsed_ms = start.elapsed().as_millis();
    report.passed = report.max_factorization_residual <= TOLERANCE
        && report.max_identity_discrepancy <= TOLERANCE
        && report.max_posterior_sum_error <= TOLERANCE
        && report.monotonicity_violations == 0;
    report
}
