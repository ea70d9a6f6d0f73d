//! Decision theory over time-binned outcome tables.
//!
//! An [`OutcomeTable`] holds, for every hypothesis, the probability of each
//! `(sink, step)` click. From it we build MAP decision rules, evaluate the
//! single-copy error, and compute how the Bayes error falls as more i.i.d.
//! copies are measured one at a time.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QsdError, Result};
use crate::network::{conditional_distribution, evolve, NetworkConfig, Sink};
use crate::quantum::Ensemble;
use crate::seed::rng_for;

/// Row-sum tolerance for outcome tables.
pub const ROW_TOL: f64 = 1e-10;

/// Limit on the number of count vectors enumerated by exact mode.
pub const EXACT_ENUMERATION_LIMIT: u128 = 20_000_000;

/// Floor applied to zero likelihoods when Monte Carlo smoothing is enabled.
pub const EPSILON_FLOOR: f64 = 1e-12;

const TIE_TOL: f64 = 1e-12;
const MC_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Outcome {
    pub sink: Sink,
    /// 1-based extraction step.
    pub step: usize,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "s{}_t{}", self.sink.node(), self.step)
    }
}

/// Conditional outcome probabilities, one row per hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeTable {
    outcomes: Vec<Outcome>,
    rows: Vec<Vec<f64>>,
}

impl OutcomeTable {
    pub fn new(outcomes: Vec<Outcome>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() || outcomes.is_empty() {
            return Err(QsdError::InvalidTable("empty table".into()));
        }
        for (j, row) in rows.iter().enumerate() {
            if row.len() != outcomes.len() {
                return Err(QsdError::InvalidTable(format!(
                    "row {j} has {} entries for {} outcomes",
                    row.len(),
                    outcomes.len()
                )));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(QsdError::InvalidTable(format!(
                    "row {j} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL {
                return Err(QsdError::InvalidTable(format!("row {j} sums to {sum}")));
            }
        }
        Ok(OutcomeTable { outcomes, rows })
    }

    /// Evolves every ensemble state and takes its conditional distribution
    /// over the retained bins. Outcomes are ordered step-major, sink 5 first.
    pub fn from_network(config: &NetworkConfig, ensemble: &Ensemble) -> Result<Self> {
        let mut outcomes = Vec::new();
        let mut rows = Vec::with_capacity(ensemble.len());
        for (j, state) in ensemble.states().iter().enumerate() {
            let table = conditional_distribution(&evolve(config, state))?;
            if j == 0 {
                outcomes = table
                    .steps
                    .iter()
                    .flat_map(|&step| Sink::ALL.map(|sink| Outcome { sink, step }))
                    .collect();
            }
            rows.push(table.probs.iter().flatten().copied().collect());
        }
        OutcomeTable::new(outcomes, rows)
    }

    pub fn outcomes(&self) -> &[Outcome] {
        &self.outcomes
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn n_hypotheses(&self) -> usize {
        self.rows.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes.len()
    }

    pub fn prob(&self, hypothesis: usize, outcome: usize) -> f64 {
        self.rows[hypothesis][outcome]
    }

    fn check_priors(&self, priors: &[f64]) -> Result<()> {
        if priors.len() != self.n_hypotheses() {
            return Err(QsdError::Shape(format!(
                "{} priors for {} hypotheses",
                priors.len(),
                self.n_hypotheses()
            )));
        }
        if priors.iter().any(|p| !p.is_finite() || *p < 0.0)
            || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(QsdError::InvalidArgument(
                "priors must be non-negative and sum to 1".into(),
            ));
        }
        Ok(())
    }

    /// Merges outcome columns whose likelihood vectors are proportional
    /// across hypotheses. The Bayes error of `m` i.i.d. copies is unchanged,
    /// since the merged count is a sufficient statistic. Columns that are zero
    /// under every hypothesis are dropped.
    fn lumped_columns(&self) -> Vec<Vec<f64>> {
        let n = self.n_hypotheses();
        let mut groups: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for o in 0..self.n_outcomes() {
            let col: Vec<f64> = (0..n).map(|j| self.rows[j][o]).collect();
            let sum: f64 = col.iter().sum();
            if sum <= 0.0 {
                continue;
            }
            let shape: Vec<f64> = col.iter().map(|p| p / sum).collect();
            let found = groups.iter_mut().find(|(s, _)| {
                s.iter().zip(&shape).all(|(a, b)| (a - b).abs() <= 1e-12)
            });
            match found {
                Some((_, acc)) => acc.iter_mut().zip(&col).for_each(|(a, c)| *a += c),
                None => groups.push((shape, col)),
            }
        }
        groups.into_iter().map(|(_, col)| col).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    LowestIndex,
}

/// Deterministic guess for every outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRule {
    pub assignment: Vec<usize>,
    pub tie_break: TieBreak,
}

impl DecisionRule {
    pub fn new(assignment: Vec<usize>) -> Self {
        DecisionRule {
            assignment,
            tie_break: TieBreak::LowestIndex,
        }
    }

    pub fn guess(&self, outcome: usize) -> usize {
        self.assignment[outcome]
    }
}

fn argmax_lowest(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, v) in values.enumerate() {
        if j == 0 || v > best.1 + TIE_TOL * best.1.abs() {
            best = (j, v);
        }
    }
    best
}

/// MAP rule: each outcome goes to `argmax_j prior_j P(o|j)`, ties to the
/// lowest hypothesis index.
pub fn build_map_rule(table: &OutcomeTable, priors: &[f64]) -> Result<DecisionRule> {
    table.check_priors(priors)?;
    let assignment = (0..table.n_outcomes())
        .map(|o| argmax_lowest((0..table.n_hypotheses()).map(|j| priors[j] * table.prob(j, o))).0)
        .collect();
    Ok(DecisionRule::new(assignment))
}

/// `1 - sum_o prior_{r(o)} P(o | r(o))`.
pub fn single_copy_error(rule: &DecisionRule, table: &OutcomeTable, priors: &[f64]) -> Result<f64> {
    table.check_priors(priors)?;
    if rule.assignment.len() != table.n_outcomes() {
        return Err(QsdError::Shape(format!(
            "rule covers {} outcomes, table has {}",
            rule.assignment.len(),
            table.n_outcomes()
        )));
    }
    if let Some(&bad) = rule.assignment.iter().find(|&&j| j >= table.n_hypotheses()) {
        return Err(QsdError::Shape(format!("rule guesses unknown hypothesis {bad}")));
    }
    let correct: f64 = rule
        .assignment
        .iter()
        .enumerate()
        .map(|(o, &j)| priors[j] * table.prob(j, o))
        .sum();
    Ok((1.0 - correct).max(0.0))
}

/// Single-copy error of the MAP rule.
pub fn map_error(table: &OutcomeTable, priors: &[f64]) -> Result<f64> {
    let rule = build_map_rule(table, priors)?;
    single_copy_error(&rule, table, priors)
}

/// Outcome counts from `m` measured copies, aligned to a table's outcomes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountVector {
    counts: Vec<u64>,
}

impl CountVector {
    pub fn new(counts: Vec<u64>) -> Self {
        CountVector { counts }
    }

    pub fn zeros(n: usize) -> Self {
        CountVector { counts: vec![0; n] }
    }

    /// A single copy observed at `outcome`.
    pub fn single(n: usize, outcome: usize) -> Self {
        let mut c = CountVector::zeros(n);
        c.counts[outcome] = 1;
        c
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total_copies(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn normalize_log_weights(logw: &[f64]) -> Result<Vec<f64>> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(QsdError::ContradictoryEvidence);
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

fn log_or_floor(p: f64, floor: Option<f64>) -> f64 {
    match floor {
        Some(eps) => p.max(eps).ln(),
        None => p.ln(),
    }
}

/// Posterior over hypotheses, `prior_j prod_o P(o|j)^{n_o}` normalized in
/// log space.
pub fn multi_copy_posterior(
    counts: &CountVector,
    table: &OutcomeTable,
    priors: &[f64],
) -> Result<Vec<f64>> {
    posterior_with_floor(counts, table, priors, None)
}

/// [`multi_copy_posterior`] with zero likelihoods raised to `floor`, so
/// counts no hypothesis can explain still yield a posterior.
pub fn multi_copy_posterior_floored(
    counts: &CountVector,
    table: &OutcomeTable,
    priors: &[f64],
    floor: f64,
) -> Result<Vec<f64>> {
    posterior_with_floor(counts, table, priors, Some(floor))
}

fn posterior_with_floor(
    counts: &CountVector,
    table: &OutcomeTable,
    priors: &[f64],
    floor: Option<f64>,
) -> Result<Vec<f64>> {
    table.check_priors(priors)?;
    if counts.counts.len() != table.n_outcomes() {
        return Err(QsdError::InvalidCounts(format!(
            "{} counts for {} outcomes",
            counts.counts.len(),
            table.n_outcomes()
        )));
    }
    let logw: Vec<f64> = (0..table.n_hypotheses())
        .map(|j| {
            let mut l = priors[j].ln();
            for (o, &n) in counts.counts.iter().enumerate() {
                if n > 0 {
                    l += n as f64 * log_or_floor(table.prob(j, o), floor);
                }
            }
            l
        })
        .collect();
    normalize_log_weights(&logw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ErrorMode {
    Exact,
    MonteCarlo {
        seed: u64,
        trials: u64,
        #[serde(default)]
        epsilon_floor: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub value: f64,
    /// Standard error of a Monte Carlo estimate; zero for exact values.
    pub std_error: f64,
    pub trials: u64,
    /// Whether zero likelihoods were floored at [`EPSILON_FLOOR`].
    pub floored: bool,
}

/// Number of ways to split `m` copies among `k` outcomes, `C(m + k - 1, k - 1)`.
pub fn composition_count(m: u64, k: usize) -> u128 {
    if k == 0 {
        return u128::from(m == 0);
    }
    let r = (k - 1) as u128;
    let mut acc: u128 = 1;
    for i in 1..=r {
        // acc = C(m + i, i); exact at every step
        acc = match acc.checked_mul(m as u128 + i) {
            Some(v) => v / i,
            None => return u128::MAX,
        };
    }
    acc
}

/// Expected Bayes error `E[1 - max_j P(j | counts)]` after `m` copies.
pub fn expected_multi_copy_error(
    table: &OutcomeTable,
    priors: &[f64],
    m: u64,
    mode: ErrorMode,
) -> Result<ErrorEstimate> {
    table.check_priors(priors)?;
    if m == 0 {
        return Err(QsdError::InvalidArgument("m must be >= 1".into()));
    }
    match mode {
        ErrorMode::Exact => exact_error(table, priors, m),
        ErrorMode::MonteCarlo {
            seed,
            trials,
            epsilon_floor,
        } => monte_carlo_error(table, priors, m, seed, trials, epsilon_floor),
    }
}

struct Enumerator<'a> {
    log_p: Vec<Vec<f64>>, // [outcome][hypothesis]
    log_prior: &'a [f64],
    log_fact: Vec<f64>,
    m: u64,
    acc: f64,
}

impl Enumerator<'_> {
    fn visit(&mut self, outcome: usize, remaining: u64, log_coef: f64, loglik: &mut [f64]) {
        let last = outcome + 1 == self.log_p.len();
        let range = if last { remaining..=remaining } else { 0..=remaining };
        for c in range {
            let saved: Vec<f64> = loglik.to_vec();
            if c > 0 {
                for (l, lp) in loglik.iter_mut().zip(&self.log_p[outcome]) {
                    *l += c as f64 * lp;
                }
            }
            let coef = log_coef - self.log_fact[c as usize];
            if last {
                let best = loglik
                    .iter()
                    .zip(self.log_prior)
                    .map(|(l, p)| l + p)
                    .fold(f64::NEG_INFINITY, f64::max);
                if best > f64::NEG_INFINITY {
                    self.acc += (coef + self.log_fact[self.m as usize] + best).exp();
                }
            } else {
                self.visit(outcome + 1, remaining - c, coef, loglik);
            }
            loglik.copy_from_slice(&saved);
        }
    }
}

fn exact_error(table: &OutcomeTable, priors: &[f64], m: u64) -> Result<ErrorEstimate> {
    let columns = table.lumped_columns();
    let required = composition_count(m, columns.len());
    if required > EXACT_ENUMERATION_LIMIT {
        return Err(QsdError::Capacity {
            required,
            limit: EXACT_ENUMERATION_LIMIT,
        });
    }
    let mut log_fact = vec![0.0; m as usize + 1];
    for i in 1..=m as usize {
        log_fact[i] = log_fact[i - 1] + (i as f64).ln();
    }
    let log_prior: Vec<f64> = priors.iter().map(|p| p.ln()).collect();
    let mut e = Enumerator {
        log_p: columns
            .iter()
            .map(|col| col.iter().map(|p| p.ln()).collect())
            .collect(),
        log_prior: &log_prior,
        log_fact,
        m,
        acc: 0.0,
    };
    let mut loglik = vec![0.0; table.n_hypotheses()];
    e.visit(0, m, 0.0, &mut loglik);
    Ok(ErrorEstimate {
        value: (1.0 - e.acc).clamp(0.0, 1.0),
        std_error: 0.0,
        trials: 0,
        floored: false,
    })
}

/// Inverse-CDF sampling from a cumulative table.
fn sample_index(cdf: &[f64], rng: &mut impl Rng) -> usize {
    let total = *cdf.last().expect("non-empty");
    let u = rng.random::<f64>() * total;
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    p.iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

fn monte_carlo_error(
    table: &OutcomeTable,
    priors: &[f64],
    m: u64,
    seed: u64,
    trials: u64,
    epsilon_floor: bool,
) -> Result<ErrorEstimate> {
    if trials < 2 {
        return Err(QsdError::InvalidArgument(
            "montecarlo mode needs at least 2 trials".into(),
        ));
    }
    let floor = epsilon_floor.then_some(EPSILON_FLOOR);
    let prior_cdf = cumulative(priors);
    let row_cdfs: Vec<Vec<f64>> = table.rows.iter().map(|r| cumulative(r)).collect();
    let log_p: Vec<Vec<f64>> = table
        .rows
        .iter()
        .map(|r| r.iter().map(|&p| log_or_floor(p, floor)).collect())
        .collect();
    let log_prior: Vec<f64> = priors.iter().map(|p| p.ln()).collect();

    let n_chunks = (trials as usize).div_ceil(MC_CHUNK);
    let partial: Vec<Result<(f64, f64)>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let start = (chunk * MC_CHUNK) as u64;
            let end = (start + MC_CHUNK as u64).min(trials);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let mut loglik = vec![0.0; log_prior.len()];
            for trial in start..end {
                let mut rng = rng_for(seed, trial);
                let truth = sample_index(&prior_cdf, &mut rng);
                loglik.copy_from_slice(&log_prior);
                for _ in 0..m {
                    let o = sample_index(&row_cdfs[truth], &mut rng);
                    for (l, lp) in loglik.iter_mut().zip(&log_p) {
                        *l += lp[o];
                    }
                }
                let post = normalize_log_weights(&loglik)?;
                let err = 1.0 - post.iter().copied().fold(0.0, f64::max);
                sum += err;
                sum_sq += err * err;
            }
            Ok((sum, sum_sq))
        })
        .collect();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for p in partial {
        let (s, q) = p?;
        sum += s;
        sum_sq += q;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(ErrorEstimate {
        value: mean,
        std_error: (var / n).sqrt(),
        trials,
        floored: epsilon_floor,
    })
}

/// Least-squares slope of `ln(error)` against `m`, with two standard errors:
/// the ordinary regression error and the error propagated from per-point
/// Monte Carlo uncertainties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub regression_std_error: f64,
    pub propagated_std_error: f64,
}

impl SlopeFit {
    pub fn std_error(&self) -> f64 {
        self.regression_std_error.max(self.propagated_std_error)
    }

    /// `slope + 3 sigma < 0`.
    pub fn significantly_negative(&self, sigmas: f64) -> bool {
        self.slope + sigmas * self.std_error() < 0.0
    }
}

/// Fits `ln(value) = a + b m` over `(m, estimate)` points with positive values.
pub fn log_slope(points: &[(u64, ErrorEstimate)]) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64, f64)> = points
        .iter()
        .filter(|(_, e)| e.value > 0.0)
        .map(|(m, e)| (*m as f64, e.value.ln(), e.std_error / e.value))
        .collect();
    if pts.len() < 3 {
        return Err(QsdError::InvalidArgument(
            "need at least 3 positive points to fit a slope".into(),
        ));
    }
    let n = pts.len() as f64;
    let xbar = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ybar = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - xbar).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - xbar) * (p.1 - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let rss: f64 = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let regression_std_error = (rss / (n - 2.0) / sxx).sqrt();
    let propagated_std_error = pts
        .iter()
        .map(|p| ((p.0 - xbar) / sxx * p.2).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        regression_std_error,
        propagated_std_error,
    })
}
