//! Discrete-time evolution of the two-layer looped sink network.
//!
//! The walker alternates between the input layer (nodes 1, 2) and the sinker
//! layer (nodes 3, 4). On every arrival at the sinker layer, a fraction of the
//! population is extracted: node 3 feeds sink 5 and node 4 feeds sink 6, and
//! the extraction step `t_k` is recorded. What stays in the network returns to
//! the input layer through `U_B` and is sent forward again through `U_F`.
//!
//! Once extracted, amplitude never interferes with other time tags, so the
//! engine carries one 2-vector for the network and real probabilities per bin.

use serde::{Deserialize, Serialize};

use crate::error::{QsdError, Result};
use crate::quantum::{apply_unitary, Ensemble, PureState, Unitary2};

pub const DEFAULT_MAX_LOOPS: usize = 12;

/// Extraction probability used for the ideal-network curves.
pub const DEFAULT_EXTRACTION_PROB: f64 = 0.3;

/// Output sink. Sink 5 is fed by node 3 (basis index 0), sink 6 by node 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sink {
    #[serde(rename = "5")]
    S5,
    #[serde(rename = "6")]
    S6,
}

impl Sink {
    pub const ALL: [Sink; 2] = [Sink::S5, Sink::S6];

    pub fn index(self) -> usize {
        match self {
            Sink::S5 => 0,
            Sink::S6 => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Sink> {
        match i {
            0 => Some(Sink::S5),
            1 => Some(Sink::S6),
            _ => None,
        }
    }

    /// Node label of the sink (5 or 6).
    pub fn node(self) -> u32 {
        5 + self.index() as u32
    }

    pub fn from_node(node: u32) -> Option<Sink> {
        match node {
            5 => Some(Sink::S5),
            6 => Some(Sink::S6),
            _ => None,
        }
    }

    pub fn other(self) -> Sink {
        match self {
            Sink::S5 => Sink::S6,
            Sink::S6 => Sink::S5,
        }
    }
}

/// Probability of extraction into the sinks at each encounter with the
/// extraction element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct ExtractionSchedule {
    default_extraction_prob: f64,
    first_step_override: Option<f64>,
    first_step_discarded: bool,
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if p.is_finite() && p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(QsdError::InvalidSchedule(format!(
            "{name} = {p} is outside (0, 1]"
        )))
    }
}

impl ExtractionSchedule {
    pub fn new(
        default_extraction_prob: f64,
        first_step_override: Option<f64>,
        first_step_discarded: bool,
    ) -> Result<Self> {
        check_prob("default_extraction_prob", default_extraction_prob)?;
        if let Some(p) = first_step_override {
            check_prob("first_step_override", p)?;
        }
        Ok(ExtractionSchedule {
            default_extraction_prob,
            first_step_override,
            first_step_discarded,
        })
    }

    /// The same extraction probability at every encounter, all bins kept.
    pub fn uniform(p: f64) -> Result<Self> {
        ExtractionSchedule::new(p, None, false)
    }

    /// Unbalanced beam splitter: 0.7 extraction on the first pass, 0.3 after,
    /// with the first bin dropped from the analysis.
    pub fn experimental() -> Self {
        ExtractionSchedule {
            default_extraction_prob: 0.3,
            first_step_override: Some(0.7),
            first_step_discarded: true,
        }
    }

    pub fn default_extraction_prob(&self) -> f64 {
        self.default_extraction_prob
    }

    pub fn first_step_override(&self) -> Option<f64> {
        self.first_step_override
    }

    pub fn first_step_discarded(&self) -> bool {
        self.first_step_discarded
    }

    /// Extraction probability at encounter `k` (1-based).
    pub fn extraction_prob(&self, k: usize) -> f64 {
        match (k, self.first_step_override) {
            (1, Some(p)) => p,
            _ => self.default_extraction_prob,
        }
    }

    /// Probability of being extracted at exactly encounter `k`:
    /// `(prod_{j<k} T_j) (1 - T_k)` with `T_j` the stay probability.
    pub fn envelope(&self, k: usize) -> f64 {
        let stay: f64 = (1..k).map(|j| 1.0 - self.extraction_prob(j)).product();
        stay * self.extraction_prob(k)
    }
}

impl Default for ExtractionSchedule {
    fn default() -> Self {
        ExtractionSchedule {
            default_extraction_prob: DEFAULT_EXTRACTION_PROB,
            first_step_override: None,
            first_step_discarded: false,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleRepr {
    default_extraction_prob: f64,
    #[serde(default)]
    first_step_override: Option<f64>,
    #[serde(default)]
    first_step_discarded: bool,
}

impl TryFrom<ScheduleRepr> for ExtractionSchedule {
    type Error = QsdError;

    fn try_from(r: ScheduleRepr) -> Result<Self> {
        ExtractionSchedule::new(
            r.default_extraction_prob,
            r.first_step_override,
            r.first_step_discarded,
        )
    }
}

impl From<ExtractionSchedule> for ScheduleRepr {
    fn from(s: ExtractionSchedule) -> Self {
        ScheduleRepr {
            default_extraction_prob: s.default_extraction_prob,
            first_step_override: s.first_step_override,
            first_step_discarded: s.first_step_discarded,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub u_forward: Unitary2,
    pub u_backward: Unitary2,
    pub schedule: ExtractionSchedule,
    max_loops: usize,
}

impl NetworkConfig {
    pub fn new(
        u_forward: Unitary2,
        u_backward: Unitary2,
        schedule: ExtractionSchedule,
        max_loops: usize,
    ) -> Result<Self> {
        if max_loops == 0 {
            return Err(QsdError::InvalidConfig("max_loops must be >= 1".into()));
        }
        if schedule.first_step_discarded && max_loops < 2 {
            return Err(QsdError::InvalidConfig(
                "first_step_discarded needs max_loops >= 2".into(),
            ));
        }
        Ok(NetworkConfig {
            u_forward,
            u_backward,
            schedule,
            max_loops,
        })
    }

    pub fn max_loops(&self) -> usize {
        self.max_loops
    }

    pub fn with_schedule(self, schedule: ExtractionSchedule) -> Result<Self> {
        NetworkConfig::new(self.u_forward, self.u_backward, schedule, self.max_loops)
    }

    pub fn with_max_loops(self, max_loops: usize) -> Result<Self> {
        NetworkConfig::new(self.u_forward, self.u_backward, self.schedule, max_loops)
    }
}

/// Sink probabilities per extraction step plus the population left in the
/// network after the last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBinnedDistribution {
    bins: Vec<[f64; 2]>,
    residual: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    first_bin_discarded: bool,
}

impl TimeBinnedDistribution {
    pub fn new(bins: Vec<[f64; 2]>, residual: f64, first_bin_discarded: bool) -> Result<Self> {
        let all = bins.iter().flatten().chain(std::iter::once(&residual));
        if all.clone().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(QsdError::InvalidArgument(
                "distribution entries must be finite and non-negative".into(),
            ));
        }
        Ok(TimeBinnedDistribution {
            bins,
            residual,
            first_bin_discarded,
        })
    }

    /// All bins, `bins()[k - 1]` being extraction step `t_k`.
    pub fn bins(&self) -> &[[f64; 2]] {
        &self.bins
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn first_bin_discarded(&self) -> bool {
        self.first_bin_discarded
    }

    /// `(k, [p5, p6])` for every bin kept in the analysis; `k` is the 1-based
    /// extraction step, so retained bins start at 2 when the first is dropped.
    pub fn retained(&self) -> impl Iterator<Item = (usize, [f64; 2])> + '_ {
        let skip = usize::from(self.first_bin_discarded);
        self.bins
            .iter()
            .enumerate()
            .skip(skip)
            .map(|(i, b)| (i + 1, *b))
    }

    /// Sum of all bins and the residual; 1 for any output of [`evolve`].
    pub fn total(&self) -> f64 {
        self.bins.iter().flatten().sum::<f64>() + self.residual
    }
}

/// Propagates `input` through `max_loops` extraction steps.
///
/// `P_sigma(t_k) = (prod_{j<k} T_j)(1 - T_k) |<sigma| U_L^{k-1} U_F |input>|^2`.
pub fn evolve(config: &NetworkConfig, input: &PureState) -> TimeBinnedDistribution {
    let schedule = &config.schedule;
    let mut bins = Vec::with_capacity(config.max_loops);
    let mut network = *input;
    let mut stay = 1.0;
    for k in 1..=config.max_loops {
        let sinker = apply_unitary(&config.u_forward, &network);
        let extracted = stay * schedule.extraction_prob(k);
        let [p3, p4] = sinker.populations();
        bins.push([extracted * p3, extracted * p4]);
        stay *= 1.0 - schedule.extraction_prob(k);
        network = apply_unitary(&config.u_backward, &sinker);
    }
    TimeBinnedDistribution {
        bins,
        residual: stay,
        first_bin_discarded: schedule.first_step_discarded,
    }
}

/// `U_L = U_F U_B`: maps the sinker-layer state at one extraction step to the
/// sinker-layer state at the next.
pub fn loop_operator(config: &NetworkConfig) -> Unitary2 {
    config.u_forward.compose(&config.u_backward)
}

/// Per-bin `(p5, p6)` table over the retained extraction steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkTable {
    pub steps: Vec<usize>,
    pub probs: Vec<[f64; 2]>,
}

impl SinkTable {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().flatten().sum()
    }

    pub fn column(&self, sink: Sink) -> Vec<f64> {
        self.probs.iter().map(|p| p[sink.index()]).collect()
    }
}

/// Renormalizes the retained bins to sum to one; the residual is ignored.
pub fn conditional_distribution(d: &TimeBinnedDistribution) -> Result<SinkTable> {
    let (steps, probs): (Vec<usize>, Vec<[f64; 2]>) = d.retained().unzip();
    let total: f64 = probs.iter().flatten().sum();
    if !(total > 0.0) {
        return Err(QsdError::DegenerateDistribution);
    }
    Ok(SinkTable {
        steps,
        probs: probs.iter().map(|[a, b]| [a / total, b / total]).collect(),
    })
}

/// Divides each retained bin by its extraction envelope and renormalizes it,
/// recovering the sinker-node populations at every encounter. Bins the
/// schedule can never reach (zero envelope) are dropped.
pub fn decay_free_distribution(
    d: &TimeBinnedDistribution,
    schedule: &ExtractionSchedule,
) -> Result<SinkTable> {
    let mut steps = Vec::new();
    let mut probs = Vec::new();
    for (k, [p5, p6]) in d.retained() {
        let env = schedule.envelope(k);
        if env <= 0.0 {
            continue;
        }
        let (a, b) = (p5 / env, p6 / env);
        let sum = a + b;
        if sum > 0.0 {
            steps.push(k);
            probs.push([a / sum, b / sum]);
        }
    }
    if steps.is_empty() {
        return Err(QsdError::DegenerateDistribution);
    }
    Ok(SinkTable { steps, probs })
}

/// Normalized cumulative probability of a correct guess for a two-state
/// ensemble, one entry per retained bin.
///
/// `sink_map[i]` is the sink whose click is read as "state `i`". Entry `k` is
/// `(p1 C_1(k) + p2 C_2(k)) / (p1 Ctot_1(k) + p2 Ctot_2(k))` with `C_i` the
/// cumulative population of state `i`'s sink and `Ctot_i` the cumulative
/// extracted population.
pub fn cumulative_correct(
    config: &NetworkConfig,
    ensemble: &Ensemble,
    sink_map: [Sink; 2],
) -> Result<Vec<f64>> {
    if ensemble.len() != 2 {
        return Err(QsdError::Arity {
            expected: 2,
            actual: ensemble.len(),
        });
    }
    let dists: Vec<TimeBinnedDistribution> =
        ensemble.states().iter().map(|s| evolve(config, s)).collect();
    let priors = ensemble.priors();
    let bins: Vec<Vec<[f64; 2]>> = dists
        .iter()
        .map(|d| d.retained().map(|(_, b)| b).collect())
        .collect();
    let n = bins[0].len();
    let mut correct = 0.0;
    let mut total = 0.0;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        for i in 0..2 {
            let b = bins[i][k];
            correct += priors[i] * b[sink_map[i].index()];
            total += priors[i] * (b[0] + b[1]);
        }
        if !(total > 0.0) {
            return Err(QsdError::DegenerateDistribution);
        }
        out.push(correct / total);
    }
    Ok(out)
}
