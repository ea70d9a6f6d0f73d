//! Euler-angle coordinates on U(2).

use serde::{Deserialize, Serialize};

use crate::quantum::{Mat2, Unitary2, C64};

/// `U = e^{i global} diag(e^{i phi1}, e^{-i phi1}) R(theta) diag(e^{i phi2}, e^{-i phi2})`
/// with `R(theta) = [[cos, -sin], [sin, cos]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitaryParams {
    pub theta: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub global: f64,
}

impl UnitaryParams {
    pub fn new(theta: f64, phi1: f64, phi2: f64, global: f64) -> Self {
        UnitaryParams {
            theta,
            phi1,
            phi2,
            global,
        }
    }

    /// Global phase chosen so that the `(0, 0)` entry is real.
    pub fn gauged(theta: f64, phi1: f64, phi2: f64) -> Self {
        UnitaryParams::new(theta, phi1, phi2, -(phi1 + phi2))
    }

    pub fn matrix(&self) -> Mat2 {
        let (s, c) = self.theta.sin_cos();
        let e = |a: f64| C64::from_polar(1.0, a);
        let g = self.global;
        let (p, q) = (self.phi1, self.phi2);
        Mat2::new(
            e(g + p + q) * c,
            -e(g + p - q) * s,
            e(g - p + q) * s,
            e(g - p - q) * c,
        )
    }

    pub fn unitary(&self) -> Unitary2 {
        Unitary2::new(self.matrix()).expect("Euler-angle product is unitary")
    }

    /// One preimage of `u`, with `theta` in `[0, pi/2]`.
    pub fn from_unitary(u: &Unitary2) -> Self {
        let m = u.matrix();
        let global = m.det().arg() / 2.0;
        let unphase = C64::from_polar(1.0, -global);
        let v00 = m.get(0, 0) * unphase;
        let v10 = m.get(1, 0) * unphase;
        let theta = v10.norm().atan2(v00.norm());
        let s = if v00.norm() > 1e-15 { v00.arg() } else { 0.0 };
        let d = if v10.norm() > 1e-15 {
            v10.arg()
        } else {
            0.0
        };
        let (phi1, phi2) = if v00.norm() > 1e-15 {
            ((s - d) / 2.0, (s + d) / 2.0)
        } else {
            // only phi2 - phi1 = d is determined
            (-d / 2.0, d / 2.0)
        };
        UnitaryParams::new(theta, phi1, phi2, global)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn haar(a: [f64; 8]) -> Option<Unitary2> {
        let z = |i: usize| C64::new(a[2 * i], a[2 * i + 1]);
        let c0 = [z(0), z(1)];
        let n0 = (c0[0].norm_sqr() + c0[1].norm_sqr()).sqrt();
        if n0 < 1e-3 {
            return None;
        }
        let c0 = [c0[0] / n0, c0[1] / n0];
        let mut c1 = [z(2), z(3)];
        let proj = c0[0].conj() * c1[0] + c0[1].conj() * c1[1];
        c1 = [c1[0] - proj * c0[0], c1[1] - proj * c0[1]];
        let n1 = (c1[0].norm_sqr() + c1[1].norm_sqr()).sqrt();
        if n1 < 1e-3 {
            return None;
        }
        Unitary2::new(Mat2::new(c0[0], c1[0] / n1, c0[1], c1[1] / n1)).ok()
    }

    #[test]
    fn identity_and_hadamard() {
        let id = UnitaryParams::from_unitary(&Unitary2::identity());
        assert!(id.matrix().max_abs_diff(&Mat2::identity()) < 1e-15);
        let h = Unitary2::hadamard();
        let p = UnitaryParams::from_unitary(&h);
        assert!(p.matrix().max_abs_diff(h.matrix()) < 1e-14);
    }

    #[test]
    fn antidiagonal_round_trip() {
        let x = Unitary2::new(Mat2::real(0.0, 1.0, 1.0, 0.0)).unwrap();
        let p = UnitaryParams::from_unitary(&x);
        assert!(p.matrix().max_abs_diff(x.matrix()) < 1e-14);
    }

    #[test]
    fn gauge_makes_corner_real() {
        let m = UnitaryParams::gauged(0.4, 1.3, -2.2).matrix();
        assert!(m.get(0, 0).im.abs() < 1e-15 && m.get(0, 0).re > 0.0);
    }

    proptest! {
        #[test]
        fn matrix_params_matrix_round_trip(a in proptest::array::uniform8(-1.0f64..1.0)) {
            if let Some(u) = haar(a) {
                let back = UnitaryParams::from_unitary(&u).matrix();
                prop_assert!(back.max_abs_diff(u.matrix()) < 1e-10);
            }
        }

        #[test]
        fn every_parameter_point_is_unitary(
            t in -4.0f64..4.0, p in -4.0f64..4.0, q in -4.0f64..4.0, g in -4.0f64..4.0
        ) {
            prop_assert!(UnitaryParams::new(t, p, q, g).matrix().unitarity_defect() < 1e-14);
        }
    }
}
