//! Receiver synthesis.
//!
//! A receiver is the pair `(U_F, U_B)` programmed into the network. This
//! module provides the closed-form Helstrom receiver for two states, the two
//! published four-state receivers, a restarted simplex search for arbitrary
//! ensembles of up to four states, and the QWP-HWP-QWP angles that realize any
//! of these unitaries with waveplates.

pub mod params;
pub mod simplex;
mod waveplate;

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use params::UnitaryParams;
pub use simplex::{SimplexOptions, SimplexResult};
pub use waveplate::{hwp, qwp, waveplate_decomposition, WaveplateAngles};

use crate::discrimination::{map_error, OutcomeTable};
use crate::error::{QsdError, Result};
use crate::network::{
    decay_free_distribution, evolve, ExtractionSchedule, NetworkConfig, Sink, DEFAULT_MAX_LOOPS,
};
use crate::quantum::{inner_product, nearest_unitary, Ensemble, Mat2, PureState, Unitary2, C64};
use crate::seed::rng_for;

/// Largest ensemble the search is designed for.
pub const MAX_ENSEMBLE: usize = 4;

const POLISH_ROUNDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Receiver {
    pub u_forward: Unitary2,
    pub u_backward: Unitary2,
}

impl Receiver {
    pub fn new(u_forward: Unitary2, u_backward: Unitary2) -> Self {
        Receiver {
            u_forward,
            u_backward,
        }
    }

    pub fn network(&self, schedule: ExtractionSchedule, max_loops: usize) -> Result<NetworkConfig> {
        NetworkConfig::new(self.u_forward, self.u_backward, schedule, max_loops)
    }
}

/// Helstrom receiver for two states: `U_F` maps the positive and negative
/// eigenvectors of `p1|psi1><psi1| - p2|psi2><psi2|` to sinks 5 and 6, and
/// `U_B = U_F^dagger` so every extraction step repeats the same measurement.
pub fn binary_optimal(psi1: &PureState, psi2: &PureState, p1: f64, p2: f64) -> Result<Receiver> {
    if !(p1 >= 0.0 && p2 >= 0.0 && ((p1 + p2) - 1.0).abs() <= 1e-12) {
        return Err(QsdError::InvalidArgument(format!(
            "priors ({p1}, {p2}) must be non-negative and sum to 1"
        )));
    }
    if inner_product(psi1, psi2).norm() >= 1.0 - 1e-12 {
        return Err(QsdError::DegenerateEnsemble(
            "the two states are identical up to phase".into(),
        ));
    }
    let outer = |s: &PureState, w: f64| {
        let [a, b] = s.amplitudes();
        Mat2::new(a * a.conj(), a * b.conj(), b * a.conj(), b * b.conj()).scale(C64::new(w, 0.0))
    };
    let gamma = outer(psi1, p1).sub(&outer(psi2, p2));
    let a = gamma.get(0, 0).re;
    let d = gamma.get(1, 1).re;
    let b = gamma.get(0, 1);
    let mean = (a + d) / 2.0;
    let radius = (((a - d) / 2.0).powi(2) + b.norm_sqr()).sqrt();
    let lambda = mean + radius;
    let plus = if b.norm() > 1e-15 * radius.max(f64::MIN_POSITIVE) {
        let v = [b, C64::new(lambda - a, 0.0)];
        let n = (v[0].norm_sqr() + v[1].norm_sqr()).sqrt();
        [v[0] / n, v[1] / n]
    } else if a >= d {
        [C64::new(1.0, 0.0), C64::new(0.0, 0.0)]
    } else {
        [C64::new(0.0, 0.0), C64::new(1.0, 0.0)]
    };
    let plus = canonical_phase(plus);
    let minus = canonical_phase([-plus[1].conj(), plus[0].conj()]);
    let u_f = Unitary2::new(Mat2::new(
        plus[0].conj(),
        plus[1].conj(),
        minus[0].conj(),
        minus[1].conj(),
    ))?;
    Ok(Receiver::new(u_f, u_f.adjoint()))
}

/// Rotates the phase so the first non-negligible entry is real and positive.
fn canonical_phase(v: [C64; 2]) -> [C64; 2] {
    let lead = if v[0].norm() > 1e-12 { v[0] } else { v[1] };
    let ph = C64::from_polar(1.0, -lead.arg());
    [v[0] * ph, v[1] * ph]
}

/// The published receiver for `{|+>, |->, |R>, |L>}`:
/// `U_F = H`, `U_B = (1/2)[[1+i, 1+i], [1-i, i-1]]`.
pub fn gu_receiver() -> Receiver {
    let p = C64::new(0.5, 0.5);
    let m = C64::new(0.5, -0.5);
    let u_b = Unitary2::new(Mat2::new(p, p, m, -m)).expect("published matrix is unitary");
    Receiver::new(Unitary2::hadamard(), u_b)
}

/// Printed Tetrad receiver entries, before sanitizing.
pub fn tetrad_printed_entries() -> (Mat2, Mat2) {
    let c = |re: f64, im: f64| C64::new(re, im);
    let u_f = Mat2::real(0.953021, 0.302905, -0.302905, 0.953021);
    let u_b = Mat2::new(
        c(-0.674645, 0.216571),
        c(0.2118, -0.673121),
        c(-0.2118, -0.673121),
        c(-0.674645, -0.216571),
    );
    (u_f, u_b)
}

/// The published Tetrad receiver, projected onto the nearest unitaries.
pub fn tetrad_receiver() -> Receiver {
    let (f, b) = tetrad_printed_entries();
    Receiver::new(
        nearest_unitary(&f).expect("printed entries are nonsingular"),
        nearest_unitary(&b).expect("printed entries are nonsingular"),
    )
}

/// `(1/sqrt 2)[[1, i], [i, 1]]`, the loop operator both four-state receivers
/// aim for.
pub fn target_loop_operator() -> Mat2 {
    let r = C64::new(FRAC_1_SQRT_2, 0.0);
    let i = C64::new(0.0, FRAC_1_SQRT_2);
    Mat2::new(r, i, i, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Minimize the single-copy MAP error of the induced outcome table.
    MapError,
    /// Maximize the worst per-bin lead of the assigned state in one sink's
    /// decay-free distribution.
    BinAssignmentMargin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub variant: Variant,
    pub bins_window: usize,
    pub schedule: ExtractionSchedule,
    pub max_loops: usize,
    pub sink: Sink,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            variant: Variant::MapError,
            bins_window: 4,
            schedule: ExtractionSchedule::default(),
            max_loops: DEFAULT_MAX_LOOPS,
            sink: Sink::S5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpec {
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub f_tol: f64,
    pub x_tol: f64,
    pub initial_step: f64,
}

impl Default for SearchSpec {
    fn default() -> Self {
        SearchSpec {
            restarts: 32,
            max_iters: 3000,
            seed: 0,
            f_tol: 1e-12,
            x_tol: 1e-9,
            initial_step: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStatus {
    Converged,
    /// The best restart hit `max_iters` before meeting the tolerances.
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub u_forward: Unitary2,
    pub u_backward: Unitary2,
    /// MAP error, or the margin, depending on `variant`.
    pub objective: f64,
    pub variant: Variant,
    pub seed: u64,
    pub restarts: usize,
    pub best_restart: usize,
    pub status: SearchStatus,
    /// `(restart, iteration, objective)` with the objective in its reported
    /// sign.
    #[serde(skip)]
    pub trace: Vec<(usize, usize, f64)>,
}

impl OptimizeResult {
    pub fn receiver(&self) -> Receiver {
        Receiver::new(self.u_forward, self.u_backward)
    }
}

fn receiver_from(x: &[f64]) -> Receiver {
    Receiver::new(
        UnitaryParams::gauged(x[0], x[1], x[2]).unitary(),
        UnitaryParams::gauged(x[3], x[4], x[5]).unitary(),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

/// Worst-bin margin under the best assignment of states to bins, where bin
/// `k` of the window goes to state `perm[k mod n]`.
pub fn bin_assignment_margin(
    config: &NetworkConfig,
    ensemble: &Ensemble,
    sink: Sink,
    window: usize,
) -> Result<f64> {
    let n = ensemble.len();
    if window < n {
        return Err(QsdError::InvalidArgument(format!(
            "bins_window {window} is smaller than the ensemble size {n}"
        )));
    }
    let mut values = Vec::with_capacity(n);
    for state in ensemble.states() {
        let table = decay_free_distribution(&evolve(config, state), &config.schedule)?;
        if table.len() < window {
            return Err(QsdError::InvalidArgument(format!(
                "only {} retained bins for a window of {window}",
                table.len()
            )));
        }
        values.push(table.column(sink)[..window].to_vec());
    }
    let margin = permutations(n)
        .iter()
        .map(|perm| {
            (0..window)
                .map(|k| {
                    let own = perm[k % n];
                    let rival = (0..n)
                        .filter(|&j| j != own)
                        .map(|j| values[j][k])
                        .fold(f64::NEG_INFINITY, f64::max);
                    values[own][k] - rival
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(margin)
}

/// Objective value in its reported sign for a receiver.
pub fn evaluate(receiver: &Receiver, ensemble: &Ensemble, objective: &ObjectiveSpec) -> Result<f64> {
    let config = receiver.network(objective.schedule, objective.max_loops)?;
    match objective.variant {
        Variant::MapError => {
            let table = OutcomeTable::from_network(&config, ensemble)?;
            map_error(&table, ensemble.priors())
        }
        Variant::BinAssignmentMargin => {
            bin_assignment_margin(&config, ensemble, objective.sink, objective.bins_window)
        }
    }
}

/// Restarted simplex search over both unitaries, three gauge-fixed angles
/// each.
pub fn optimize(
    ensemble: &Ensemble,
    objective: &ObjectiveSpec,
    search: &SearchSpec,
) -> Result<OptimizeResult> {
    let n = ensemble.len();
    if !(2..=MAX_ENSEMBLE).contains(&n) {
        return Err(QsdError::InvalidArgument(format!(
            "optimize supports 2 to {MAX_ENSEMBLE} states, got {n}"
        )));
    }
    if search.restarts == 0 {
        return Err(QsdError::InvalidArgument("restarts must be >= 1".into()));
    }
    // validates schedule, loops and window before any restart runs
    evaluate(
        &Receiver::new(Unitary2::hadamard(), Unitary2::hadamard()),
        ensemble,
        objective,
    )?;

    let sign = match objective.variant {
        Variant::MapError => 1.0,
        Variant::BinAssignmentMargin => -1.0,
    };
    let cost = |x: &[f64]| -> f64 {
        evaluate(&receiver_from(x), ensemble, objective)
            .map(|v| sign * v)
            .unwrap_or(f64::INFINITY)
    };
    let opts = SimplexOptions {
        max_iters: search.max_iters,
        f_tol: search.f_tol,
        x_tol: search.x_tol,
        initial_step: search.initial_step,
    };

    let runs: Vec<SimplexResult> = (0..search.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_for(search.seed, r as u64);
            let mut x0 = [0.0; 6];
            for pair in x0.chunks_mut(3) {
                pair[0] = rng.random_range(0.0..PI / 2.0);
                pair[1] = rng.random_range(-PI..PI);
                pair[2] = rng.random_range(-PI..PI);
            }
            simplex::minimize_restarted(cost, &x0, &opts, POLISH_ROUNDS)
        })
        .collect();

    let mut best = 0;
    for (r, run) in runs.iter().enumerate() {
        if run.f < runs[best].f {
            best = r;
        }
    }
    let trace = runs
        .iter()
        .enumerate()
        .flat_map(|(r, run)| {
            run.history
                .iter()
                .enumerate()
                .map(move |(i, f)| (r, i, sign * f))
        })
        .collect();
    let winner = &runs[best];
    let receiver = receiver_from(&winner.x);
    Ok(OptimizeResult {
        u_forward: receiver.u_forward,
        u_backward: receiver.u_backward,
        objective: sign * winner.f,
        variant: objective.variant,
        seed: search.seed,
        restarts: search.restarts,
        best_restart: best,
        status: if winner.converged {
            SearchStatus::Converged
        } else {
            SearchStatus::BudgetExhausted
        },
        trace,
    })
}
