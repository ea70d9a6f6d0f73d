//! Two-dimensional complex linear algebra, pure qubit states and the
//! canonical state sets used throughout the crate.
//!
//! Basis convention: index 0 is `|H>` (nodes 1, 3, 5 of the network), index 1
//! is `|V>` (nodes 2, 4, 6).

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::ops::Mul;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{QsdError, Result};

pub use num_complex::Complex64 as C64;

/// Normalization tolerance for [`PureState`].
pub const NORM_TOL: f64 = 1e-12;
/// Entrywise tolerance on `U^dagger U - I` for [`Unitary2`].
pub const UNITARY_TOL: f64 = 1e-10;
/// Prior-sum tolerance for [`Ensemble`].
pub const PRIOR_TOL: f64 = 1e-12;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

fn finite(z: C64) -> bool {
    z.re.is_finite() && z.im.is_finite()
}

/// A general 2x2 complex matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2 {
    pub m: [C64; 4],
}

impl Mat2 {
    pub const fn new(m00: C64, m01: C64, m10: C64, m11: C64) -> Self {
        Mat2 {
            m: [m00, m01, m10, m11],
        }
    }

    pub const fn identity() -> Self {
        Mat2::new(ONE, ZERO, ZERO, ONE)
    }

    /// Builds a matrix from real entries.
    pub fn real(m00: f64, m01: f64, m10: f64, m11: f64) -> Self {
        Mat2::new(m00.into(), m01.into(), m10.into(), m11.into())
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.m[2 * row + col]
    }

    pub fn adjoint(&self) -> Self {
        let [a, b, c, d] = self.m;
        Mat2::new(a.conj(), c.conj(), b.conj(), d.conj())
    }

    pub fn det(&self) -> C64 {
        let [a, b, c, d] = self.m;
        a * d - b * c
    }

    pub fn trace(&self) -> C64 {
        self.m[0] + self.m[3]
    }

    pub fn scale(&self, s: C64) -> Self {
        Mat2 {
            m: self.m.map(|z| z * s),
        }
    }

    pub fn sub(&self, other: &Mat2) -> Self {
        let mut m = self.m;
        for (x, y) in m.iter_mut().zip(other.m) {
            *x -= y;
        }
        Mat2 { m }
    }

    pub fn apply(&self, v: [C64; 2]) -> [C64; 2] {
        let [a, b, c, d] = self.m;
        [a * v[0] + b * v[1], c * v[0] + d * v[1]]
    }

    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if det.norm() == 0.0 {
            return None;
        }
        let [a, b, c, d] = self.m;
        Some(Mat2::new(d, -b, -c, a).scale(det.inv()))
    }

    pub fn pow(&self, n: u32) -> Self {
        (0..n).fold(Mat2::identity(), |acc, _| acc * *self)
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|&z| finite(z))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Spectral norm (largest singular value), closed form for 2x2.
    pub fn operator_norm(&self) -> f64 {
        let f2 = self.m.iter().map(|z| z.norm_sqr()).sum::<f64>();
        let d = self.det().norm();
        let disc = (f2 * f2 - 4.0 * d * d).max(0.0).sqrt();
        ((f2 + disc) / 2.0).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Mat2) -> f64 {
        self.m
            .iter()
            .zip(other.m.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// The global phase `e^{i phi}` minimizing `|| self - e^{i phi} other ||_F`.
    pub fn best_phase_to(&self, other: &Mat2) -> C64 {
        // tr(other^dagger self)
        let t: C64 = other
            .m
            .iter()
            .zip(self.m.iter())
            .map(|(o, s)| o.conj() * s)
            .sum();
        if t.norm() == 0.0 {
            ONE
        } else {
            t / t.norm()
        }
    }

    /// Max entrywise distance to `other` after removing the best global phase.
    pub fn phase_distance_max(&self, other: &Mat2) -> f64 {
        let ph = self.best_phase_to(other);
        self.max_abs_diff(&other.scale(ph))
    }

    /// Operator-norm distance to `other` after removing the best global phase.
    pub fn phase_distance_op(&self, other: &Mat2) -> f64 {
        let ph = self.best_phase_to(other);
        self.sub(&other.scale(ph)).operator_norm()
    }

    /// Max entrywise deviation of `M^dagger M` from the identity.
    pub fn unitarity_defect(&self) -> f64 {
        (self.adjoint() * *self).max_abs_diff(&Mat2::identity())
    }
}

impl Mul for Mat2 {
    type Output = Mat2;

    fn mul(self, rhs: Mat2) -> Mat2 {
        let [a, b, c, d] = self.m;
        let [e, f, g, h] = rhs.m;
        Mat2::new(a * e + b * g, a * f + b * h, c * e + d * g, c * f + d * h)
    }
}

/// A normalized pure qubit state `a0|H> + a1|V>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PureState {
    a0: C64,
    a1: C64,
}

impl PureState {
    /// Validates normalization within [`NORM_TOL`].
    pub fn new(a0: C64, a1: C64) -> Result<Self> {
        if !finite(a0) || !finite(a1) {
            return Err(QsdError::NonFinite("state amplitude"));
        }
        let norm_sqr = a0.norm_sqr() + a1.norm_sqr();
        if (norm_sqr - 1.0).abs() > NORM_TOL {
            return Err(QsdError::NotNormalized { norm_sqr });
        }
        Ok(PureState { a0, a1 })
    }

    /// Rescales the amplitudes to unit norm.
    pub fn normalized(a0: C64, a1: C64) -> Result<Self> {
        if !finite(a0) || !finite(a1) {
            return Err(QsdError::NonFinite("state amplitude"));
        }
        let n = (a0.norm_sqr() + a1.norm_sqr()).sqrt();
        if n == 0.0 {
            return Err(QsdError::NotNormalized { norm_sqr: 0.0 });
        }
        Ok(PureState {
            a0: a0 / n,
            a1: a1 / n,
        })
    }

    pub const fn h() -> Self {
        PureState { a0: ONE, a1: ZERO }
    }

    pub const fn v() -> Self {
        PureState { a0: ZERO, a1: ONE }
    }

    pub fn a0(&self) -> C64 {
        self.a0
    }

    pub fn a1(&self) -> C64 {
        self.a1
    }

    pub fn amplitudes(&self) -> [C64; 2] {
        [self.a0, self.a1]
    }

    /// Population of basis index 0 and 1.
    pub fn populations(&self) -> [f64; 2] {
        [self.a0.norm_sqr(), self.a1.norm_sqr()]
    }

    pub fn with_global_phase(&self, phi: f64) -> Self {
        let p = C64::from_polar(1.0, phi);
        PureState {
            a0: self.a0 * p,
            a1: self.a1 * p,
        }
    }

    /// `|<self|other>| >= 1 - tol`, i.e. equal up to a global phase.
    pub fn equivalent(&self, other: &PureState, tol: f64) -> bool {
        inner_product(self, other).norm() >= 1.0 - tol
    }
}

/// `<a|b>`, conjugate-linear in the first argument.
pub fn inner_product(a: &PureState, b: &PureState) -> C64 {
    a.a0.conj() * b.a0 + a.a1.conj() * b.a1
}

/// A 2x2 unitary, validated entrywise within [`UNITARY_TOL`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unitary2(Mat2);

impl Unitary2 {
    pub fn new(m: Mat2) -> Result<Self> {
        if !m.is_finite() {
            return Err(QsdError::NonFinite("matrix entry"));
        }
        let defect = m.unitarity_defect();
        if defect > UNITARY_TOL {
            return Err(QsdError::NotUnitary { defect });
        }
        Ok(Unitary2(m))
    }

    pub fn identity() -> Self {
        Unitary2(Mat2::identity())
    }

    /// `(1/sqrt2) [[1, 1], [1, -1]]`.
    pub fn hadamard() -> Self {
        Unitary2(Mat2::real(1.0, 1.0, 1.0, -1.0).scale(FRAC_1_SQRT_2.into()))
    }

    pub fn matrix(&self) -> &Mat2 {
        &self.0
    }

    pub fn adjoint(&self) -> Self {
        Unitary2(self.0.adjoint())
    }

    /// Product `self * rhs`.
    pub fn compose(&self, rhs: &Unitary2) -> Self {
        Unitary2(self.0 * rhs.0)
    }

    pub fn pow(&self, n: u32) -> Self {
        Unitary2(self.0.pow(n))
    }
}

impl From<Unitary2> for Mat2 {
    fn from(u: Unitary2) -> Mat2 {
        u.0
    }
}

impl fmt::Display for Unitary2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.0.m;
        write!(
            f,
            "[[{:.6}, {:.6}], [{:.6}, {:.6}]]",
            m[0], m[1], m[2], m[3]
        )
    }
}

/// Matrix-vector product; the result is renormalized to absorb rounding.
pub fn apply_unitary(u: &Unitary2, s: &PureState) -> PureState {
    let [a0, a1] = u.0.apply(s.amplitudes());
    let n = (a0.norm_sqr() + a1.norm_sqr()).sqrt();
    PureState {
        a0: a0 / n,
        a1: a1 / n,
    }
}

/// Unitary factor `U` of the polar decomposition `m = U P`, the unitary
/// closest to `m` in Frobenius norm.
///
/// For 2x2 the positive factor has the closed form
/// `P = (m^dagger m + |det m| I) / sqrt(tr(m^dagger m) + 2 |det m|)`.
pub fn nearest_unitary(m: &Mat2) -> Result<Unitary2> {
    if !m.is_finite() {
        return Err(QsdError::NonFinite("matrix entry"));
    }
    let det = m.det().norm();
    let scale = m.frobenius_norm();
    if scale == 0.0 || det <= 1e-12 * scale * scale {
        return Err(QsdError::SingularMatrix { det });
    }
    let gram = m.adjoint() * *m;
    let t = (gram.trace().re + 2.0 * det).sqrt();
    let mut p = gram;
    p.m[0] += det;
    p.m[3] += det;
    let p = p.scale((1.0 / t).into());
    let p_inv = p.inverse().ok_or(QsdError::SingularMatrix { det })?;
    Unitary2::new(*m * p_inv)
}

/// Maximal success probability for discriminating two pure states,
/// `(1 + sqrt(1 - 4 p1 p2 |<psi1|psi2>|^2)) / 2`.
pub fn helstrom_bound(psi1: &PureState, psi2: &PureState, p1: f64, p2: f64) -> f64 {
    let overlap = inner_product(psi1, psi2).norm_sqr();
    let disc = (1.0 - 4.0 * p1 * p2 * overlap).max(0.0);
    0.5 * (1.0 + disc.sqrt())
}

/// Candidate input states with prior probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnsembleRepr", into = "EnsembleRepr")]
pub struct Ensemble {
    states: Vec<PureState>,
    priors: Vec<f64>,
}

impl Ensemble {
    pub fn new(states: Vec<PureState>, priors: Vec<f64>) -> Result<Self> {
        if states.is_empty() {
            return Err(QsdError::InvalidEnsemble("no states".into()));
        }
        if states.len() != priors.len() {
            return Err(QsdError::InvalidEnsemble(format!(
                "{} states but {} priors",
                states.len(),
                priors.len()
            )));
        }
        if priors.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(QsdError::InvalidEnsemble(
                "priors must be finite and non-negative".into(),
            ));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > PRIOR_TOL {
            return Err(QsdError::InvalidEnsemble(format!(
                "priors sum to {total}, expected 1"
            )));
        }
        Ok(Ensemble { states, priors })
    }

    /// Equal priors over `states`.
    pub fn uniform(states: Vec<PureState>) -> Result<Self> {
        let n = states.len().max(1);
        Ensemble::new(states, vec![1.0 / n as f64; n])
    }

    pub fn states(&self) -> &[PureState] {
        &self.states
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// An ensemble with a name and a label per state.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedEnsemble {
    pub name: &'static str,
    pub labels: Vec<&'static str>,
    pub ensemble: Ensemble,
}

impl NamedEnsemble {
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.eq_ignore_ascii_case(label))
    }
}

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// `cos(pi/8)|H> +- sin(pi/8)|V>` with equal priors.
pub fn binary_pair() -> NamedEnsemble {
    let (s, co) = (PI / 8.0).sin_cos();
    let states = vec![
        PureState::new(c(co, 0.0), c(s, 0.0)).expect("normalized"),
        PureState::new(c(co, 0.0), c(-s, 0.0)).expect("normalized"),
    ];
    NamedEnsemble {
        name: "binary",
        labels: vec!["psi1", "psi2"],
        ensemble: Ensemble::uniform(states).expect("valid"),
    }
}

/// `{|+>, |->, |R>, |L>}` with equal priors.
pub fn geometrically_uniform() -> NamedEnsemble {
    let r = FRAC_1_SQRT_2;
    let states = [
        (c(r, 0.0), c(r, 0.0)),
        (c(r, 0.0), c(-r, 0.0)),
        (c(r, 0.0), c(0.0, r)),
        (c(r, 0.0), c(0.0, -r)),
    ]
    .into_iter()
    .map(|(a, b)| PureState::new(a, b).expect("normalized"))
    .collect();
    NamedEnsemble {
        name: "gu",
        labels: vec!["+", "-", "R", "L"],
        ensemble: Ensemble::uniform(states).expect("valid"),
    }
}

/// The Tetrad: four states with pairwise `|<psi_i|psi_j>|^2 = 1/3`.
pub fn tetrad() -> NamedEnsemble {
    let inv3 = 1.0 / 3f64.sqrt();
    let arm = 2f64.sqrt() * inv3;
    let states = vec![
        PureState::normalized(c(-inv3, 0.0), C64::from_polar(arm, -2.0 * PI / 3.0)),
        PureState::normalized(c(-inv3, 0.0), C64::from_polar(arm, 2.0 * PI / 3.0)),
        PureState::normalized(c(-inv3, 0.0), c(arm, 0.0)),
        Ok(PureState::h()),
    ]
    .into_iter()
    .collect::<Result<Vec<_>>>()
    .expect("normalized");
    NamedEnsemble {
        name: "tetrad",
        labels: vec!["psi1", "psi2", "psi3", "psi4"],
        ensemble: Ensemble::uniform(states).expect("valid"),
    }
}

/// `{|H>, |V>}`, a perfectly distinguishable control case.
pub fn orthogonal_pair() -> NamedEnsemble {
    NamedEnsemble {
        name: "orthogonal",
        labels: vec!["H", "V"],
        ensemble: Ensemble::uniform(vec![PureState::h(), PureState::v()]).expect("valid"),
    }
}

pub fn canonical_ensembles() -> Vec<NamedEnsemble> {
    vec![binary_pair(), geometrically_uniform(), tetrad()]
}

/// Looks up a canonical ensemble (or the orthogonal control pair) by name.
pub fn ensemble_by_name(name: &str) -> Option<NamedEnsemble> {
    match name.to_ascii_lowercase().as_str() {
        "binary" => Some(binary_pair()),
        "gu" => Some(geometrically_uniform()),
        "tetrad" => Some(tetrad()),
        "orthogonal" => Some(orthogonal_pair()),
        _ => None,
    }
}

// Structured-text representations: complex numbers as `[re, im]` pairs.

type Pair = [f64; 2];

fn to_pair(z: C64) -> Pair {
    [z.re, z.im]
}

fn from_pair(p: Pair) -> C64 {
    C64::new(p[0], p[1])
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRepr {
    a0: Pair,
    a1: Pair,
}

impl Serialize for PureState {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        StateRepr {
            a0: to_pair(self.a0),
            a1: to_pair(self.a1),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PureState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = StateRepr::deserialize(d)?;
        PureState::new(from_pair(r.a0), from_pair(r.a1)).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatRepr {
    m: [Pair; 4],
}

impl Serialize for Mat2 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatRepr {
            m: self.m.map(to_pair),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mat2 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = MatRepr::deserialize(d)?;
        Ok(Mat2 {
            m: r.m.map(from_pair),
        })
    }
}

impl Serialize for Unitary2 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Unitary2 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = Mat2::deserialize(d)?;
        Unitary2::new(m).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleRepr {
    states: Vec<PureState>,
    priors: Vec<f64>,
}

impl TryFrom<EnsembleRepr> for Ensemble {
    type Error = QsdError;

    fn try_from(r: EnsembleRepr) -> Result<Self> {
        Ensemble::new(r.states, r.priors)
    }
}

impl From<Ensemble> for EnsembleRepr {
    fn from(e: Ensemble) -> Self {
        EnsembleRepr {
            states: e.states,
            priors: e.priors,
        }
    }
}
