//! Monte Carlo model of the photon-counting experiment.
//!
//! A run of `duration` seconds draws a number of detected pairs, spreads them
//! over the `(sink, bin)` cells according to the network's conditional
//! distribution, and adds accidental coincidences to every cell. Noise-only
//! runs estimate the background, which is subtracted before runs are
//! post-selected on a Poisson-compatible photon number and fed to the
//! Bayesian classifier.

use std::io::{BufRead, BufReader, Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrimination::{
    multi_copy_posterior, multi_copy_posterior_floored, CountVector, Outcome, OutcomeTable,
    EPSILON_FLOOR,
};
use crate::error::{QsdError, Result};
use crate::format::fmt_f64;
use crate::network::{conditional_distribution, evolve, NetworkConfig, Sink};
use crate::quantum::{Ensemble, PureState};
use crate::seed::{derive_seed, derive_seed2};

/// `-ln(0.05)`: one-sided 95% upper bound on a Poisson mean after zero counts.
pub const ZERO_COUNT_UPPER: f64 = 2.995_732_273_553_991;

/// Default half-width of the post-selection window, in units of `sqrt(k)`.
pub const DEFAULT_WINDOW_SIGMAS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GenerationStatistics {
    Poisson,
    /// Negative-binomial totals with variance `mean + (g2 - 1) mean^2`.
    Thermal { g2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Expected detected pairs per second landing in retained cells.
    pub pair_rate: f64,
    /// Expected accidental coincidences per second in every cell.
    pub accidental_rate_per_bin: f64,
    pub generation: GenerationStatistics,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            pair_rate: 1.5,
            accidental_rate_per_bin: 0.0,
            generation: GenerationStatistics::Poisson,
        }
    }
}

impl NoiseModel {
    pub fn noiseless(pair_rate: f64) -> Self {
        NoiseModel {
            pair_rate,
            ..Default::default()
        }
    }

    pub fn background_only(accidental_rate_per_bin: f64) -> Self {
        NoiseModel {
            pair_rate: 0.0,
            accidental_rate_per_bin,
            generation: GenerationStatistics::Poisson,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.pair_rate) || !ok(self.accidental_rate_per_bin) {
            return Err(QsdError::InvalidArgument(
                "noise rates must be finite and non-negative".into(),
            ));
        }
        if let GenerationStatistics::Thermal { g2 } = self.generation {
            if !(g2.is_finite() && g2 >= 1.0) {
                return Err(QsdError::InvalidArgument(format!("thermal g2 = {g2} must be >= 1")));
            }
        }
        Ok(())
    }
}

fn poisson(mean: f64, rng: &mut ChaCha8Rng) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
}

fn sample_total(generation: GenerationStatistics, mean: f64, rng: &mut ChaCha8Rng) -> u64 {
    match generation {
        GenerationStatistics::Thermal { g2 } if g2 > 1.0 && mean > 0.0 => {
            let shape = 1.0 / (g2 - 1.0);
            let intensity = Gamma::new(shape, mean / shape)
                .expect("positive shape and scale")
                .sample(rng);
            poisson(intensity, rng)
        }
        _ => poisson(mean, rng),
    }
}

/// Counts over `(sink, bin)` cells from one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub outcomes: Vec<Outcome>,
    pub counts: Vec<f64>,
    pub duration_seconds: f64,
    /// Background not yet subtracted.
    pub raw: bool,
    pub seed: Option<u64>,
    pub label: Option<String>,
    /// Cells clamped at zero by background subtraction.
    pub clamped_cells: usize,
}

impl EventRecord {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let t = self.total();
        self.counts.iter().map(|c| if t > 0.0 { c / t } else { 0.0 }).collect()
    }

    fn same_cells(&self, other: &[Outcome]) -> Result<()> {
        if self.outcomes != other {
            return Err(QsdError::Shape(format!(
                "record has {} cells that do not match the expected {}",
                self.outcomes.len(),
                other.len()
            )));
        }
        Ok(())
    }

    /// Rounds the counts to `m` copies: rescale to total `m`, floor, then
    /// hand the remaining units to the largest remainders (ties to the lower
    /// cell index).
    pub fn to_copies(&self, m: u64) -> Result<CountVector> {
        round_to_total(&self.counts, m)
    }

    /// CSV with `# key=value` metadata lines, then `sink,bin,count`.
    pub fn write_csv(&self, w: impl Write, include_label: bool) -> Result<()> {
        let mut w = w;
        writeln!(w, "# duration_seconds={}", fmt_f64(self.duration_seconds))?;
        writeln!(w, "# raw={}", self.raw)?;
        if let Some(seed) = self.seed {
            writeln!(w, "# seed={seed}")?;
        }
        if include_label {
            if let Some(label) = &self.label {
                writeln!(w, "# label={label}")?;
            }
        }
        writeln!(w, "# clamped_cells={}", self.clamped_cells)?;
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["sink", "bin", "count"])?;
        for (o, c) in self.outcomes.iter().zip(&self.counts) {
            wtr.write_record([o.sink.node().to_string(), o.step.to_string(), fmt_count(*c)])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut text = String::new();
        BufReader::new(r).read_to_string(&mut text)?;
        let bad = |msg: String| QsdError::InvalidArgument(msg);
        let mut rec = EventRecord {
            outcomes: Vec::new(),
            counts: Vec::new(),
            duration_seconds: f64::NAN,
            raw: true,
            seed: None,
            label: None,
            clamped_cells: 0,
        };
        for line in text.as_bytes().lines() {
            let line = line?;
            let Some(meta) = line.strip_prefix("# ") else { continue };
            let (key, value) = meta
                .split_once('=')
                .ok_or_else(|| bad(format!("bad metadata line {line:?}")))?;
            let parse_err = || bad(format!("bad value for {key}: {value:?}"));
            match key {
                "duration_seconds" => rec.duration_seconds = value.parse().map_err(|_| parse_err())?,
                "raw" => rec.raw = value.parse().map_err(|_| parse_err())?,
                "seed" => rec.seed = Some(value.parse().map_err(|_| parse_err())?),
                "label" => rec.label = Some(value.to_string()),
                "clamped_cells" => rec.clamped_cells = value.parse().map_err(|_| parse_err())?,
                _ => return Err(bad(format!("unknown metadata key {key:?}"))),
            }
        }
        if !rec.duration_seconds.is_finite() {
            return Err(bad("missing duration_seconds metadata".into()));
        }
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        for row in rdr.records() {
            let row = row?;
            let node: u32 = row[0].parse().map_err(|_| bad(format!("bad sink {:?}", &row[0])))?;
            let sink = Sink::from_node(node).ok_or_else(|| bad(format!("unknown sink {node}")))?;
            let step = row[1].parse().map_err(|_| bad(format!("bad bin {:?}", &row[1])))?;
            let count: f64 = row[2].parse().map_err(|_| bad(format!("bad count {:?}", &row[2])))?;
            rec.outcomes.push(Outcome { sink, step });
            rec.counts.push(count);
        }
        Ok(rec)
    }
}

fn fmt_count(c: f64) -> String {
    if c.fract() == 0.0 && c.abs() < 1e15 {
        format!("{}", c as i64)
    } else {
        fmt_f64(c)
    }
}

/// Largest-remainder rounding of non-negative `counts` onto total `m`.
pub fn round_to_total(counts: &[f64], m: u64) -> Result<CountVector> {
    let total: f64 = counts.iter().sum();
    if !(total > 0.0) || counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(QsdError::InvalidCounts(format!(
            "cannot rescale counts with total {total} to {m} copies"
        )));
    }
    let scaled: Vec<f64> = counts.iter().map(|c| c * m as f64 / total).collect();
    let mut out: Vec<u64> = scaled.iter().map(|s| s.floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (scaled[a] - scaled[a].floor(), scaled[b] - scaled[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(m.saturating_sub(assigned) as usize) {
        out[i] += 1;
    }
    Ok(CountVector::new(out))
}

fn cells_for(config: &NetworkConfig, state: &PureState) -> Result<(Vec<Outcome>, Vec<f64>)> {
    let table = conditional_distribution(&evolve(config, state))?;
    let outcomes = table
        .steps
        .iter()
        .flat_map(|&step| Sink::ALL.map(|sink| Outcome { sink, step }))
        .collect();
    let probs = table.probs.iter().flatten().copied().collect();
    Ok((outcomes, probs))
}

/// One simulated run of `duration` seconds with input `state`.
pub fn simulate_run(
    config: &NetworkConfig,
    state: &PureState,
    noise: &NoiseModel,
    duration: f64,
    seed: u64,
) -> Result<EventRecord> {
    noise.validate()?;
    if !(duration.is_finite() && duration > 0.0) {
        return Err(QsdError::InvalidArgument(format!("duration {duration} must be > 0")));
    }
    let (outcomes, probs) = cells_for(config, state)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut left = sample_total(noise.generation, noise.pair_rate * duration, &mut rng);
    let mut mass_left = 1.0;
    let mut counts = vec![0.0; probs.len()];
    for (c, &p) in counts.iter_mut().zip(&probs) {
        if left == 0 {
            break;
        }
        let share = if mass_left > 0.0 { (p / mass_left).clamp(0.0, 1.0) } else { 1.0 };
        let n = Binomial::new(left, share).expect("probability in [0, 1]").sample(&mut rng);
        *c = n as f64;
        left -= n;
        mass_left -= p;
    }
    // rounding can leave a few pairs for the last populated cell
    if left > 0 {
        let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        counts[last] += left as f64;
    }
    let accidental = noise.accidental_rate_per_bin * duration;
    for c in counts.iter_mut() {
        *c += poisson(accidental, &mut rng) as f64;
    }
    Ok(EventRecord {
        outcomes,
        counts,
        duration_seconds: duration,
        raw: true,
        seed: Some(seed),
        label: None,
        clamped_cells: 0,
    })
}

/// Per-cell background rates pooled over noise-only runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundEstimate {
    pub outcomes: Vec<Outcome>,
    /// Counts per second.
    pub rates: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// One-sided 95% upper bound for cells with zero counts.
    pub zero_count_upper: Vec<Option<f64>>,
    pub total_duration: f64,
}

impl BackgroundEstimate {
    pub fn zero(outcomes: Vec<Outcome>) -> Self {
        let n = outcomes.len();
        BackgroundEstimate {
            outcomes,
            rates: vec![0.0; n],
            std_errors: vec![0.0; n],
            zero_count_upper: vec![None; n],
            total_duration: 0.0,
        }
    }
}

pub fn estimate_background(records: &[EventRecord]) -> Result<BackgroundEstimate> {
    let first = records.first().ok_or(QsdError::EmptyInput("noise-only records"))?;
    let mut totals = vec![0.0; first.counts.len()];
    let mut duration = 0.0;
    for r in records {
        r.same_cells(&first.outcomes)?;
        if !r.raw {
            return Err(QsdError::InvalidArgument(
                "background must be estimated from raw records".into(),
            ));
        }
        for (t, c) in totals.iter_mut().zip(&r.counts) {
            *t += c;
        }
        duration += r.duration_seconds;
    }
    Ok(BackgroundEstimate {
        outcomes: first.outcomes.clone(),
        rates: totals.iter().map(|c| c / duration).collect(),
        std_errors: totals.iter().map(|c| c.sqrt() / duration).collect(),
        zero_count_upper: totals
            .iter()
            .map(|&c| (c == 0.0).then_some(ZERO_COUNT_UPPER / duration))
            .collect(),
        total_duration: duration,
    })
}

/// `count - rate * duration` per cell, clamped at zero.
pub fn subtract_background(record: &EventRecord, background: &BackgroundEstimate) -> Result<EventRecord> {
    if !record.raw {
        return Err(QsdError::InvalidArgument(
            "background already subtracted from this record".into(),
        ));
    }
    record.same_cells(&background.outcomes)?;
    let mut clamped = 0;
    let counts = record
        .counts
        .iter()
        .zip(&background.rates)
        .map(|(c, r)| {
            let v = c - r * record.duration_seconds;
            if v < 0.0 {
                clamped += 1;
                0.0
            } else {
                v
            }
        })
        .collect();
    Ok(EventRecord {
        counts,
        raw: false,
        clamped_cells: clamped,
        ..record.clone()
    })
}

fn in_window(total: f64, k: u64, window_sigmas: f64) -> bool {
    (total - k as f64).abs() <= window_sigmas * (k as f64).sqrt() + 1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostSelection {
    pub average: EventRecord,
    pub kept: usize,
    pub discarded: usize,
}

/// Keeps records whose total lies within `k +- window_sigmas sqrt(k)` and
/// averages them cell by cell.
pub fn postselect_k_photon(records: &[EventRecord], k: u64, window_sigmas: f64) -> Result<PostSelection> {
    let first = records.first().ok_or(QsdError::EmptyInput("records"))?;
    if !(window_sigmas.is_finite() && window_sigmas >= 0.0) {
        return Err(QsdError::InvalidArgument(format!(
            "window_sigmas {window_sigmas} must be >= 0"
        )));
    }
    for r in records {
        r.same_cells(&first.outcomes)?;
        let rel = (r.duration_seconds - first.duration_seconds).abs() / first.duration_seconds;
        if rel > 1e-12 || r.raw != first.raw {
            return Err(QsdError::Shape(
                "post-selected records must share duration and raw flag".into(),
            ));
        }
    }
    let kept: Vec<&EventRecord> = records
        .iter()
        .filter(|r| in_window(r.total(), k, window_sigmas))
        .collect();
    if kept.is_empty() {
        let half = window_sigmas * (k as f64).sqrt();
        return Err(QsdError::NoEventsInWindow {
            lower: k as f64 - half,
            upper: k as f64 + half,
        });
    }
    let mut counts = vec![0.0; first.counts.len()];
    for r in &kept {
        for (a, c) in counts.iter_mut().zip(&r.counts) {
            *a += c;
        }
    }
    counts.iter_mut().for_each(|c| *c /= kept.len() as f64);
    let label = first
        .label
        .clone()
        .filter(|l| kept.iter().all(|r| r.label.as_ref() == Some(l)));
    Ok(PostSelection {
        average: EventRecord {
            outcomes: first.outcomes.clone(),
            counts,
            duration_seconds: first.duration_seconds,
            raw: first.raw,
            seed: None,
            label,
            clamped_cells: kept.iter().map(|r| r.clamped_cells).sum(),
        },
        kept: kept.len(),
        discarded: records.len() - kept.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Classify every post-selected event and average the errors.
    PerEvent,
    /// Average the post-selected events first and classify the mean event.
    Averaged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveOptions {
    pub window_sigmas: f64,
    pub aggregation: Aggregation,
    /// Noise-only runs per `k` used for the background estimate; defaults to
    /// `runs_per_k`.
    pub background_runs: Option<usize>,
}

impl Default for CurveOptions {
    fn default() -> Self {
        CurveOptions {
            window_sigmas: DEFAULT_WINDOW_SIGMAS,
            aggregation: Aggregation::PerEvent,
            background_runs: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: u64,
    /// Mean of `1 - max_j P(j | event)`.
    pub p_err: f64,
    pub std_error: f64,
    /// Mean of `1 - P(true state | event)`.
    pub p_err_true_posterior: f64,
    pub true_posterior_std_error: f64,
    pub kept: usize,
    pub discarded: usize,
    /// Events that needed the likelihood floor to be classified.
    pub floored_events: usize,
}

#[derive(Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    /// Variance of the mean; zero for fewer than two samples.
    fn var_of_mean(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        ((self.sum_sq - n * self.mean().powi(2)) / (n - 1.0)).max(0.0) / n
    }
}

fn classify(counts: &CountVector, table: &OutcomeTable, priors: &[f64]) -> Result<(Vec<f64>, bool)> {
    match multi_copy_posterior(counts, table, priors) {
        Ok(p) => Ok((p, false)),
        Err(QsdError::ContradictoryEvidence) => {
            multi_copy_posterior_floored(counts, table, priors, EPSILON_FLOOR).map(|p| (p, true))
        }
        Err(e) => Err(e),
    }
}

/// Raw and background-subtracted runs for one photon number `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub k: u64,
    pub duration_seconds: f64,
    pub background: BackgroundEstimate,
    /// `raw[h][r]`: run `r` with hypothesis `h` as input.
    pub raw: Vec<Vec<EventRecord>>,
    pub cleaned: Vec<Vec<EventRecord>>,
}

/// Simulates `runs` runs per hypothesis plus `background_runs` noise-only
/// runs, all lasting `duration` seconds. Seeds derive from
/// `(seed, hypothesis, k_index, run)`; noise-only runs use `u64::MAX` as the
/// hypothesis index.
#[allow(clippy::too_many_arguments)]
pub fn simulate_batch(
    config: &NetworkConfig,
    ensemble: &Ensemble,
    noise: &NoiseModel,
    k: u64,
    k_index: u64,
    duration: f64,
    runs: usize,
    background_runs: usize,
    seed: u64,
) -> Result<Batch> {
    noise.validate()?;
    if runs == 0 {
        return Err(QsdError::InvalidArgument("runs must be >= 1".into()));
    }
    let outcomes = cells_for(config, &ensemble.states()[0])?.0;
    let background = if noise.accidental_rate_per_bin > 0.0 && background_runs > 0 {
        let bg_noise = NoiseModel::background_only(noise.accidental_rate_per_bin);
        let bg_seed = derive_seed2(seed, u64::MAX, k_index);
        let records = (0..background_runs as u64)
            .into_par_iter()
            .map(|r| {
                simulate_run(config, &ensemble.states()[0], &bg_noise, duration, derive_seed(bg_seed, r))
            })
            .collect::<Result<Vec<_>>>()?;
        estimate_background(&records)?
    } else {
        BackgroundEstimate::zero(outcomes)
    };
    let mut raw = Vec::with_capacity(ensemble.len());
    let mut cleaned = Vec::with_capacity(ensemble.len());
    for (h, state) in ensemble.states().iter().enumerate() {
        let run_seed = derive_seed2(seed, h as u64, k_index);
        let records = (0..runs as u64)
            .into_par_iter()
            .map(|r| {
                let mut rec = simulate_run(config, state, noise, duration, derive_seed(run_seed, r))?;
                rec.label = Some(h.to_string());
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()?;
        cleaned.push(
            records
                .iter()
                .map(|r| subtract_background(r, &background))
                .collect::<Result<Vec<_>>>()?,
        );
        raw.push(records);
    }
    Ok(Batch {
        k,
        duration_seconds: duration,
        background,
        raw,
        cleaned,
    })
}

/// Post-selects and classifies the cleaned runs of a batch.
pub fn score_batch(
    batch: &Batch,
    table: &OutcomeTable,
    priors: &[f64],
    options: &CurveOptions,
) -> Result<CurvePoint> {
    let k = batch.k;
    let no_events = || {
        let half = options.window_sigmas * (k as f64).sqrt();
        QsdError::NoEventsInWindow {
            lower: k as f64 - half,
            upper: k as f64 + half,
        }
    };
    if batch.cleaned.len() != table.n_hypotheses() {
        return Err(QsdError::Shape(format!(
            "{} hypotheses in the batch, {} in the table",
            batch.cleaned.len(),
            table.n_hypotheses()
        )));
    }
    let mut max_err = Vec::new();
    let mut true_err = Vec::new();
    let (mut kept, mut discarded, mut floored) = (0, 0, 0);
    for (h, cleaned) in batch.cleaned.iter().enumerate() {
        let (mut mm, mut mt) = (Moments::default(), Moments::default());
        let mut score = |post: Vec<f64>, fl: bool| {
            floored += usize::from(fl);
            mm.push(1.0 - post.iter().copied().fold(0.0, f64::max));
            mt.push(1.0 - post[h]);
        };
        match options.aggregation {
            Aggregation::PerEvent => {
                for rec in cleaned {
                    rec.same_cells(table.outcomes())?;
                    let total = rec.total();
                    if !(total > 0.0) || !in_window(total, k, options.window_sigmas) {
                        discarded += 1;
                        continue;
                    }
                    kept += 1;
                    let (post, fl) = classify(&rec.to_copies(k)?, table, priors)?;
                    score(post, fl);
                }
            }
            Aggregation::Averaged => {
                let sel = postselect_k_photon(cleaned, k, options.window_sigmas)?;
                sel.average.same_cells(table.outcomes())?;
                kept += sel.kept;
                discarded += sel.discarded;
                let (post, fl) = classify(&sel.average.to_copies(k)?, table, priors)?;
                score(post, fl);
            }
        }
        if mm.n == 0 {
            return Err(no_events());
        }
        max_err.push(mm);
        true_err.push(mt);
    }
    let combine = |m: &[Moments]| -> (f64, f64) {
        let mean = m.iter().zip(priors).map(|(x, p)| p * x.mean()).sum();
        let var: f64 = m.iter().zip(priors).map(|(x, p)| p * p * x.var_of_mean()).sum();
        (mean, var.sqrt())
    };
    let (p_err, std_error) = combine(&max_err);
    let (p_true, se_true) = combine(&true_err);
    Ok(CurvePoint {
        k,
        p_err,
        std_error,
        p_err_true_posterior: p_true,
        true_posterior_std_error: se_true,
        kept,
        discarded,
        floored_events: floored,
    })
}

/// Simulate, clean, post-select and classify `runs_per_k` runs per
/// hypothesis for every `k`, each run lasting `k / pair_rate` seconds.
pub fn end_to_end_error_curve(
    config: &NetworkConfig,
    ensemble: &Ensemble,
    noise: &NoiseModel,
    k_values: &[u64],
    runs_per_k: usize,
    seed: u64,
    options: &CurveOptions,
) -> Result<Vec<CurvePoint>> {
    noise.validate()?;
    if k_values.is_empty() {
        return Err(QsdError::EmptyInput("k values"));
    }
    if k_values.contains(&0) || runs_per_k == 0 {
        return Err(QsdError::InvalidArgument("k and runs_per_k must be >= 1".into()));
    }
    if !(noise.pair_rate > 0.0) {
        return Err(QsdError::InvalidArgument("pair_rate must be > 0".into()));
    }
    let table = OutcomeTable::from_network(config, ensemble)?;
    let bg_runs = options.background_runs.unwrap_or(runs_per_k);
    k_values
        .iter()
        .enumerate()
        .map(|(ki, &k)| {
            let duration = k as f64 / noise.pair_rate;
            let batch = simulate_batch(
                config, ensemble, noise, k, ki as u64, duration, runs_per_k, bg_runs, seed,
            )?;
            score_batch(&batch, &table, ensemble.priors(), options)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrimination::{expected_multi_copy_error, ErrorMode};
    use crate::network::ExtractionSchedule;
    use crate::quantum::{geometrically_uniform, orthogonal_pair, Unitary2};
    use crate::receiver::gu_receiver;

    fn gu_config(schedule: ExtractionSchedule) -> NetworkConfig {
        gu_receiver().network(schedule, 12).unwrap()
    }

    fn tv(a: &[f64], b: &[f64]) -> f64 {
        0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
    }

    #[test]
    fn runs_are_reproducible_from_the_seed() {
        let cfg = gu_config(ExtractionSchedule::experimental());
        let noise = NoiseModel {
            accidental_rate_per_bin: 0.2,
            ..Default::default()
        };
        let s = geometrically_uniform().ensemble.states()[2];
        let a = simulate_run(&cfg, &s, &noise, 30.0, 77).unwrap();
        let b = simulate_run(&cfg, &s, &noise, 30.0, 77).unwrap();
        let c = simulate_run(&cfg, &s, &noise, 30.0, 78).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.counts, c.counts);
        // experimental mode drops the first bin
        assert_eq!(a.outcomes[0].step, 2);
    }

    #[test]
    fn noiseless_runs_converge_to_the_conditional_table() {
        let cfg = gu_config(ExtractionSchedule::experimental());
        let s = geometrically_uniform().ensemble.states()[3];
        let (_, probs) = cells_for(&cfg, &s).unwrap();
        let mut pass = 0;
        for seed in 0..100 {
            let r = simulate_run(&cfg, &s, &NoiseModel::noiseless(1.0), 1e4, seed).unwrap();
            let n = r.total();
            if tv(&r.frequencies(), &probs) < 3.0 / n.sqrt() {
                pass += 1;
            }
        }
        assert!(pass >= 95, "{pass}");
    }

    #[test]
    fn gu_plus_never_reaches_sink_six_in_bin_one() {
        let cfg = gu_config(ExtractionSchedule::uniform(0.3).unwrap());
        let plus = geometrically_uniform().ensemble.states()[0];
        let r = simulate_run(&cfg, &plus, &NoiseModel::noiseless(1.0), 1e5, 5).unwrap();
        assert_eq!(r.outcomes[1], Outcome { sink: Sink::S6, step: 1 });
        assert_eq!(r.counts[1], 0.0);
        assert!(r.counts[0] > 0.0);
    }

    #[test]
    fn background_only_runs_are_poisson_per_cell() {
        let cfg = gu_config(ExtractionSchedule::experimental());
        let noise = NoiseModel::background_only(0.5);
        let records: Vec<EventRecord> = (0..400)
            .map(|s| simulate_run(&cfg, &PureState::h(), &noise, 10.0, s).unwrap())
            .collect();
        let cells = records[0].counts.len();
        for c in 0..cells {
            let xs: Vec<f64> = records.iter().map(|r| r.counts[c]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            // mean 5, standard error of the mean ~0.11
            assert!((mean - 5.0).abs() < 0.5, "{mean}");
            assert!((var / mean - 1.0).abs() < 0.35, "{var}");
        }
    }

    fn record(counts: Vec<f64>, duration: f64) -> EventRecord {
        let outcomes = (0..counts.len())
            .map(|i| Outcome {
                sink: Sink::from_index(i % 2).unwrap(),
                step: i / 2 + 1,
            })
            .collect();
        EventRecord {
            outcomes,
            counts,
            duration_seconds: duration,
            raw: true,
            seed: None,
            label: None,
            clamped_cells: 0,
        }
    }

    #[test]
    fn background_estimation_examples() {
        let bg = estimate_background(&[record(vec![30.0, 0.0], 10.0)]).unwrap();
        assert_eq!(bg.rates, vec![3.0, 0.0]);
        assert_eq!(bg.zero_count_upper[0], None);
        assert!((bg.zero_count_upper[1].unwrap() - ZERO_COUNT_UPPER / 10.0).abs() < 1e-15);

        let pooled =
            estimate_background(&[record(vec![30.0, 4.0], 10.0), record(vec![10.0, 2.0], 30.0)])
                .unwrap();
        assert_eq!(pooled.rates, vec![1.0, 0.15]);
        assert!(matches!(estimate_background(&[]), Err(QsdError::EmptyInput(_))));
    }

    #[test]
    fn subtraction_examples() {
        let r = record(vec![5.0, 7.0], 2.0);
        let zero = BackgroundEstimate::zero(r.outcomes.clone());
        let same = subtract_background(&r, &zero).unwrap();
        assert_eq!(same.counts, r.counts);
        assert!(!same.raw);

        let full = estimate_background(std::slice::from_ref(&r)).unwrap();
        let cleaned = subtract_background(&r, &full).unwrap();
        assert!(cleaned.counts.iter().all(|c| *c == 0.0));

        let mut big = full.clone();
        big.rates = vec![10.0, 0.0];
        let clamped = subtract_background(&r, &big).unwrap();
        assert_eq!(clamped.clamped_cells, 1);
        assert_eq!(clamped.counts, vec![0.0, 7.0]);

        let other = record(vec![1.0, 1.0, 1.0, 1.0], 2.0);
        assert!(matches!(subtract_background(&other, &full), Err(QsdError::Shape(_))));
        assert!(subtract_background(&cleaned, &full).is_err());
    }

    #[test]
    fn subtraction_is_unbiased_over_seeds() {
        let cfg = gu_config(ExtractionSchedule::experimental());
        let s = geometrically_uniform().ensemble.states()[1];
        let noise = NoiseModel {
            pair_rate: 2.0,
            accidental_rate_per_bin: 0.3,
            generation: GenerationStatistics::Poisson,
        };
        let bg_records: Vec<EventRecord> = (0..200)
            .map(|i| simulate_run(&cfg, &s, &NoiseModel::background_only(0.3), 20.0, 10_000 + i).unwrap())
            .collect();
        let bg = estimate_background(&bg_records).unwrap();
        let (_, probs) = cells_for(&cfg, &s).unwrap();
        let n = 1000;
        let cleaned: Vec<EventRecord> = (0..n)
            .map(|i| subtract_background(&simulate_run(&cfg, &s, &noise, 20.0, i).unwrap(), &bg).unwrap())
            .collect();
        for (c, p) in probs.iter().enumerate() {
            let signal = 40.0 * p;
            let xs: Vec<f64> = cleaned.iter().map(|r| r.counts[c]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            // the shared background estimate adds its own uncertainty
            let se = (var / n as f64 + (bg.std_errors[c] * 20.0).powi(2)).sqrt();
            // clamping only biases cells whose expected signal is tiny
            if signal > 2.0 {
                assert!((mean - signal).abs() < 3.0 * se + 1e-9, "cell {c}: {mean} vs {signal}");
            }
        }
    }

    #[test]
    fn postselection_examples() {
        let recs = vec![record(vec![1.0, 2.0], 1.0), record(vec![3.0, 0.0], 1.0)];
        let sel = postselect_k_photon(&recs, 3, 0.0).unwrap();
        assert_eq!((sel.kept, sel.discarded), (2, 0));
        assert_eq!(sel.average.counts, vec![2.0, 1.0]);

        let mixed = vec![record(vec![1.0, 2.0], 1.0), record(vec![3.0, 1.0], 1.0)];
        let sel = postselect_k_photon(&mixed, 3, 0.0).unwrap();
        assert_eq!((sel.kept, sel.discarded), (1, 1));

        let err = postselect_k_photon(&mixed, 10, 0.5).unwrap_err();
        assert!(matches!(err, QsdError::NoEventsInWindow { .. }));
        let uneven = vec![record(vec![1.0, 2.0], 1.0), record(vec![3.0, 0.0], 2.0)];
        assert!(postselect_k_photon(&uneven, 3, 1.0).is_err());
    }

    #[test]
    fn thermal_light_discards_more_records() {
        let cfg = gu_config(ExtractionSchedule::experimental());
        let s = PureState::h();
        let discards = |generation| {
            let noise = NoiseModel {
                pair_rate: 1.0,
                accidental_rate_per_bin: 0.0,
                generation,
            };
            let recs: Vec<EventRecord> = (0..1000)
                .map(|i| simulate_run(&cfg, &s, &noise, 10.0, i).unwrap())
                .collect();
            postselect_k_photon(&recs, 10, 2.0).unwrap().discarded
        };
        let poisson = discards(GenerationStatistics::Poisson);
        let thermal = discards(GenerationStatistics::Thermal { g2: 2.0 });
        assert!(thermal > poisson, "{thermal} vs {poisson}");
    }

    #[test]
    fn rounding_keeps_the_requested_total() {
        let c = round_to_total(&[0.4, 1.7, 0.9], 3).unwrap();
        assert_eq!(c.counts(), &[0, 2, 1]);
        let c = round_to_total(&[1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(c.counts(), &[1, 1, 0]);
        assert_eq!(round_to_total(&[2.0, 5.0], 7).unwrap().counts(), &[2, 5]);
        assert!(round_to_total(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn csv_round_trip_and_blind_mode() {
        let mut r = record(vec![3.0, 0.25], 12.5);
        r.seed = Some(9);
        r.label = Some("R".into());
        let mut buf = Vec::new();
        r.write_csv(&mut buf, true).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("# label=R\n"));
        assert!(text.contains("sink,bin,count\n5,1,3\n6,1,0.250000000\n"));
        let back = EventRecord::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, r);

        let mut blind = Vec::new();
        r.write_csv(&mut blind, false).unwrap();
        assert!(!String::from_utf8(blind.clone()).unwrap().contains("label"));
        assert_eq!(EventRecord::read_csv(blind.as_slice()).unwrap().label, None);
    }

    #[test]
    fn noiseless_gu_single_copy_error_is_one_half() {
        let cfg = gu_config(ExtractionSchedule::uniform(0.3).unwrap());
        let ens = geometrically_uniform().ensemble;
        let curve = end_to_end_error_curve(
            &cfg,
            &ens,
            &NoiseModel::noiseless(1.0),
            &[1],
            200,
            3,
            &CurveOptions {
                window_sigmas: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((curve[0].p_err - 0.5).abs() <= 3.0 * curve[0].std_error + 1e-12);
    }

    #[test]
    fn many_photons_drive_the_error_down() {
        let cfg = gu_config(ExtractionSchedule::experimental());
        let ens = geometrically_uniform().ensemble;
        let curve = end_to_end_error_curve(
            &cfg,
            &ens,
            &NoiseModel::noiseless(1.5),
            &[2, 8, 64],
            60,
            4,
            &CurveOptions::default(),
        )
        .unwrap();
        assert!(curve[2].p_err < 0.01, "{:?}", curve[2]);
        for w in curve.windows(2) {
            assert!(w[1].p_err <= w[0].p_err + 3.0 * (w[0].std_error + w[1].std_error));
        }
    }

    #[test]
    fn orthogonal_states_are_never_confused() {
        let cfg = NetworkConfig::new(
            Unitary2::identity(),
            Unitary2::identity(),
            ExtractionSchedule::uniform(0.3).unwrap(),
            12,
        )
        .unwrap();
        let ens = orthogonal_pair().ensemble;
        let noise = NoiseModel::noiseless(1.0);
        for aggregation in [Aggregation::PerEvent, Aggregation::Averaged] {
            let opts = CurveOptions {
                aggregation,
                ..Default::default()
            };
            let curve = end_to_end_error_curve(&cfg, &ens, &noise, &[1, 4, 9], 40, 1, &opts).unwrap();
            assert!(curve.iter().all(|p| p.p_err.abs() < 1e-12 && p.p_err_true_posterior.abs() < 1e-12));
        }
    }

    #[test]
    fn exact_k_curve_matches_the_analytic_error() {
        let cfg = gu_config(ExtractionSchedule::uniform(0.3).unwrap());
        let ens = geometrically_uniform().ensemble;
        let table = OutcomeTable::from_network(&cfg, &ens).unwrap();
        let ks = [2, 3, 5];
        let curve = end_to_end_error_curve(
            &cfg,
            &ens,
            &NoiseModel::noiseless(1.0),
            &ks,
            4000,
            21,
            &CurveOptions {
                window_sigmas: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        for p in curve {
            let exact = expected_multi_copy_error(&table, ens.priors(), p.k, ErrorMode::Exact).unwrap();
            assert!((p.p_err - exact.value).abs() < 3.0 * p.std_error, "{p:?} vs {}", exact.value);
        }
    }
}
