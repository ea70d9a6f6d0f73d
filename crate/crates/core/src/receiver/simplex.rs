//! Downhill simplex (Nelder-Mead) minimization.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplexOptions {
    pub max_iters: usize,
    /// Spread of objective values across the simplex.
    pub f_tol: f64,
    /// Largest coordinate distance from the best vertex.
    pub x_tol: f64,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            max_iters: 2000,
            f_tol: 1e-12,
            x_tol: 1e-9,
            initial_step: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective after each iteration, starting with the initial simplex.
    pub history: Vec<f64>,
}

const ALPHA: f64 = 1.0;
const GAMMA: f64 = 2.0;
const RHO: f64 = 0.5;
const SIGMA: f64 = 0.5;

/// Minimizes `f` from `x0`. The returned point is never worse than `x0`.
pub fn minimize(f: impl Fn(&[f64]) -> f64, x0: &[f64], opts: &SimplexOptions) -> SimplexResult {
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64]| {
        evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += opts.initial_step;
        let fx = eval(&x);
        simplex.push((x, fx));
    }
    // stable sort keeps earlier vertices ahead on ties, so x0 wins ties
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));

    let mut history = vec![simplex[0].1];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        let best = &simplex[0];
        let f_spread = simplex[n].1 - best.1;
        let x_spread = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&best.0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if f_spread <= opts.f_tol && x_spread <= opts.x_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / n as f64;
            }
        }
        let along = |t: f64, worst: &[f64]| -> Vec<f64> {
            centroid
                .iter()
                .zip(worst)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let worst = simplex[n].0.clone();
        let f_worst = simplex[n].1;
        let f_second = simplex[n - 1].1;
        let f_best = simplex[0].1;

        let xr = along(ALPHA, &worst);
        let fr = eval(&xr);
        if fr < f_best {
            let xe = along(GAMMA, &worst);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < f_second {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < f_worst {
                let xc = along(RHO * ALPHA, &worst);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = along(-RHO, &worst);
                let fc = eval(&xc);
                (xc, fc)
            };
            if fc < fr.min(f_worst) {
                simplex[n] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for (x, fx) in simplex.iter_mut().skip(1) {
                    for (xi, bi) in x.iter_mut().zip(&x_best) {
                        *xi = bi + SIGMA * (*xi - bi);
                    }
                    *fx = eval(x);
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        history.push(simplex[0].1);
    }

    let (x, f) = simplex.swap_remove(0);
    SimplexResult {
        x,
        f,
        iterations,
        evaluations: evals,
        converged,
        history,
    }
}

/// Repeats [`minimize`] from each result while it keeps improving, which
/// lets the simplex escape collapses on kinks of non-smooth objectives. The
/// iteration budget is shared across rounds.
pub fn minimize_restarted(
    f: impl Fn(&[f64]) -> f64,
    x0: &[f64],
    opts: &SimplexOptions,
    max_rounds: usize,
) -> SimplexResult {
    let mut total = minimize(&f, x0, opts);
    for _ in 1..max_rounds {
        let left = opts.max_iters.saturating_sub(total.iterations);
        if !total.converged || left == 0 {
            break;
        }
        let round = minimize(&f, &total.x, &SimplexOptions { max_iters: left, ..*opts });
        let improved = round.f < total.f - opts.f_tol;
        total.iterations += round.iterations;
        total.evaluations += round.evaluations;
        total.converged = round.converged;
        total.history.extend(round.history.iter().skip(1).map(|v| v.min(total.f)));
        if round.f < total.f {
            total.x = round.x;
            total.f = round.f;
        }
        if !improved {
            total.converged = true;
            break;
        }
    }
    total
}
