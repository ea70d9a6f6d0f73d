//! Quarter-half-quarter waveplate realization of a polarization unitary.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::simplex::{self, SimplexOptions};
use crate::quantum::{Mat2, Unitary2, C64};

fn rotation(theta: f64) -> Mat2 {
    let (s, c) = theta.sin_cos();
    Mat2::real(c, -s, s, c)
}

fn retarder(theta: f64, retardance: f64) -> Mat2 {
    let d = Mat2::new(
        C64::new(1.0, 0.0),
        C64::new(0.0, 0.0),
        C64::new(0.0, 0.0),
        C64::from_polar(1.0, retardance),
    );
    rotation(theta) * d * rotation(-theta)
}

/// Jones matrix of a quarter waveplate with fast axis at `theta`.
pub fn qwp(theta: f64) -> Mat2 {
    retarder(theta, PI / 2.0)
}

/// Jones matrix of a half waveplate with fast axis at `theta`.
pub fn hwp(theta: f64) -> Mat2 {
    retarder(theta, PI)
}

/// Fast-axis angles in `[0, pi)` for `QWP(qwp2) HWP(hwp) QWP(qwp1)`, where
/// `qwp1` acts first, plus the phase `phi` with product `= e^{i phi} u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveplateAngles {
    pub qwp1: f64,
    pub hwp: f64,
    pub qwp2: f64,
    pub global_phase: f64,
}

impl WaveplateAngles {
    pub fn product(&self) -> Mat2 {
        qwp(self.qwp2) * hwp(self.hwp) * qwp(self.qwp1)
    }
}

fn wrap(theta: f64) -> f64 {
    let t = theta.rem_euclid(PI);
    if t >= PI {
        0.0
    } else {
        t
    }
}

fn phase_residual(u: &Mat2, angles: [f64; 3]) -> (f64, f64) {
    let w = qwp(angles[2]) * hwp(angles[1]) * qwp(angles[0]);
    let phase = (u.adjoint() * w).trace().arg();
    let diff = w.sub(&u.scale(C64::from_polar(1.0, phase)));
    (diff.frobenius_norm().powi(2), phase)
}

/// `QWP(a3) HWP(a2) QWP(a1)` is proportional to `Ry(a3) Rx(a1 + a3 - 2 a2) Ry(-a1)`
/// with `Ry(a) = exp(-i a sigma_y)`, `Rx(a) = exp(-i a sigma_x)`; matching the
/// Euler form of `u / sqrt(det u)` gives the angles directly.
fn analytic_angles(u: &Mat2) -> [f64; 3] {
    let v = u.scale(u.det().sqrt().inv());
    let (p, q) = (v.get(0, 0), v.get(1, 0));
    let b = (q.im.hypot(p.im)).atan2(q.re.hypot(p.re));
    let s = q.re.atan2(p.re);
    let d = p.im.atan2(-q.im);
    let (a, g) = ((s + d) / 2.0, (s - d) / 2.0);
    let (t3, t1) = (a, -g);
    [wrap(t1), wrap((t1 + t3 - b) / 2.0), wrap(t3)]
}

/// Waveplate angles realizing `u` up to a global phase.
pub fn waveplate_decomposition(u: &Unitary2) -> WaveplateAngles {
    let m = *u.matrix();
    let mut angles = analytic_angles(&m);
    let (res, _) = phase_residual(&m, angles);
    if res > 1e-24 {
        let opts = SimplexOptions {
            max_iters: 4000,
            f_tol: 1e-30,
            x_tol: 1e-14,
            initial_step: 1e-3,
        };
        let r = simplex::minimize(|x| phase_residual(&m, [x[0], x[1], x[2]]).0, &angles, &opts);
        if r.f < res {
            angles = [r.x[0], r.x[1], r.x[2]];
        }
    }
    let angles = angles.map(wrap);
    let (_, phase) = phase_residual(&m, angles);
    WaveplateAngles {
        qwp1: angles[0],
        hwp: angles[1],
        qwp2: angles[2],
        global_phase: phase,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check(u: &Unitary2) -> WaveplateAngles {
        let w = waveplate_decomposition(u);
        for a in [w.qwp1, w.hwp, w.qwp2] {
            assert!((0.0..PI).contains(&a));
        }
        let target = u.matrix().scale(C64::from_polar(1.0, w.global_phase));
        assert!(w.product().sub(&target).operator_norm() < 1e-8);
        w
    }

    #[test]
    fn waveplates_are_unitary_with_expected_action() {
        assert!(qwp(0.3).unitarity_defect() < 1e-15);
        assert!(hwp(1.1).unitarity_defect() < 1e-15);
        // HWP at 22.5 degrees is a Hadamard up to phase
        let h = hwp(PI / 8.0);
        assert!(h.phase_distance_max(Unitary2::hadamard().matrix()) < 1e-15);
        // two quarter waveplates make a half waveplate
        assert!((qwp(0.7) * qwp(0.7)).phase_distance_max(&hwp(0.7)) < 1e-15);
    }

    #[test]
    fn round_trip_of_a_waveplate_product() {
        let m = qwp(0.3) * hwp(0.7) * qwp(1.1);
        check(&Unitary2::new(m).unwrap());
    }

    #[test]
    fn identity_and_hadamard() {
        check(&Unitary2::identity());
        check(&Unitary2::hadamard());
    }

    fn grid_best(u: &Mat2, steps: usize) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..steps {
            for j in 0..steps {
                for k in 0..steps {
                    let a = [i, j, k].map(|n| n as f64 * PI / steps as f64);
                    best = best.min(phase_residual(u, a).0);
                }
            }
        }
        best
    }

    #[test]
    fn solver_beats_dense_grid_search() {
        let h = *Unitary2::hadamard().matrix();
        let w = waveplate_decomposition(&Unitary2::hadamard());
        let (res, _) = phase_residual(&h, [w.qwp1, w.hwp, w.qwp2]);
        let grid = grid_best(&h, 48);
        assert!(res <= grid + 1e-12);
        assert!(res < 1e-16);
    }

    #[test]
    fn random_unitaries_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let m = qwp(rng.random_range(0.0..PI))
                * hwp(rng.random_range(0.0..PI))
                * qwp(rng.random_range(0.0..PI));
            let phase = C64::from_polar(1.0, rng.random_range(-PI..PI));
            check(&Unitary2::new(m.scale(phase)).unwrap());
        }
    }
}
