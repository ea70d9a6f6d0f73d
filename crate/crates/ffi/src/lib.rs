//! C ABI for qsdnet.
//!
//! Every fallible call returns a [`QsdStatus`]; on failure a message is kept
//! per thread and can be copied out with [`qsd_last_error_message`]. Networks
//! and distributions are opaque handles owned by the caller and released with
//! their `_free` functions. Complex numbers are `{re, im}` pairs, 2x2 matrices
//! are four of them in row-major order.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use qsdnet::discrimination::{expected_multi_copy_error, map_error, ErrorMode, OutcomeTable};
use qsdnet::network::evolve;
use qsdnet::quantum::helstrom_bound;
use qsdnet::receiver::{binary_optimal, gu_receiver, tetrad_receiver, waveplate_decomposition, Receiver};
use qsdnet::{
    Ensemble, ExtractionSchedule, Mat2, NetworkConfig, PureState, QsdError, TimeBinnedDistribution,
    Unitary2, C64,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QsdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotUnitary = 3,
    NotNormalized = 4,
    Capacity = 5,
    Numerical = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QsdComplex {
    pub re: f64,
    pub im: f64,
}

/// Fast-axis angles for `QWP(qwp2) HWP(hwp) QWP(qwp1)` and the phase with
/// product `= e^{i global_phase} U`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QsdWaveplates {
    pub qwp1: f64,
    pub hwp: f64,
    pub qwp2: f64,
    pub global_phase: f64,
}

/// Opaque network handle.
pub struct QsdNetwork(NetworkConfig);

/// Opaque time-binned distribution handle.
pub struct QsdDistribution(TimeBinnedDistribution);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(QsdStatus, String);

impl From<QsdError> for Failure {
    fn from(e: QsdError) -> Self {
        let status = match e {
            QsdError::NotUnitary { .. } | QsdError::SingularMatrix { .. } => QsdStatus::NotUnitary,
            QsdError::NotNormalized { .. } => QsdStatus::NotNormalized,
            QsdError::Capacity { .. } => QsdStatus::Capacity,
            QsdError::DegenerateDistribution | QsdError::ContradictoryEvidence | QsdError::NonFinite(_) => {
                QsdStatus::Numerical
            }
            _ => QsdStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(QsdStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> QsdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            QsdStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            QsdStatus::Panic
        }
    }
}

fn c64(z: QsdComplex) -> C64 {
    C64::new(z.re, z.im)
}

fn qc(z: C64) -> QsdComplex {
    QsdComplex { re: z.re, im: z.im }
}

unsafe fn read_state(p: *const QsdComplex) -> Result<PureState, Failure> {
    if p.is_null() {
        return Err(null("state"));
    }
    let s = std::slice::from_raw_parts(p, 2);
    Ok(PureState::new(c64(s[0]), c64(s[1]))?)
}

unsafe fn read_unitary(p: *const QsdComplex) -> Result<Unitary2, Failure> {
    if p.is_null() {
        return Err(null("matrix"));
    }
    let s = std::slice::from_raw_parts(p, 4);
    Ok(Unitary2::new(Mat2::new(c64(s[0]), c64(s[1]), c64(s[2]), c64(s[3])))?)
}

unsafe fn write_unitary(u: &Unitary2, out: *mut QsdComplex) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output matrix"));
    }
    let dst = std::slice::from_raw_parts_mut(out, 4);
    for (d, z) in dst.iter_mut().zip(u.matrix().m) {
        *d = qc(z);
    }
    Ok(())
}

unsafe fn write_receiver(r: &Receiver, u_forward: *mut QsdComplex, u_backward: *mut QsdComplex) -> Result<(), Failure> {
    write_unitary(&r.u_forward, u_forward)?;
    write_unitary(&r.u_backward, u_backward)
}

unsafe fn read_ensemble(states: *const QsdComplex, priors: *const f64, n: usize) -> Result<Ensemble, Failure> {
    if states.is_null() || priors.is_null() {
        return Err(null("states or priors"));
    }
    let states = (0..n)
        .map(|i| read_state(states.add(2 * i)))
        .collect::<Result<Vec<_>, _>>()?;
    let priors = std::slice::from_raw_parts(priors, n).to_vec();
    Ok(Ensemble::new(states, priors)?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qsd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length including the NUL,
/// or 0 when the last call succeeded.
///
/// # Safety
/// `buf` must point to `len` writable bytes or be null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn qsd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Maximum success probability for discriminating two pure states.
///
/// # Safety
/// `psi1` and `psi2` point to two complex amplitudes each; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn qsd_helstrom_bound(
    psi1: *const QsdComplex,
    psi2: *const QsdComplex,
    p1: f64,
    p2: f64,
    out: *mut f64,
) -> QsdStatus {
    guard(|| {
        let (a, b) = (read_state(psi1)?, read_state(psi2)?);
        if out.is_null() {
            return Err(null("out"));
        }
        if !(p1 >= 0.0 && p2 >= 0.0 && (p1 + p2 - 1.0).abs() < 1e-9) {
            return Err(Failure(QsdStatus::InvalidArgument, "priors must sum to 1".into()));
        }
        *out = helstrom_bound(&a, &b, p1, p2);
        Ok(())
    })
}

/// Published receiver for `{|+>, |->, |R>, |L>}`.
///
/// # Safety
/// Both outputs point to four writable complex numbers.
#[no_mangle]
pub unsafe extern "C" fn qsd_receiver_gu(u_forward: *mut QsdComplex, u_backward: *mut QsdComplex) -> QsdStatus {
    guard(|| write_receiver(&gu_receiver(), u_forward, u_backward))
}

/// Published Tetrad receiver projected onto the nearest unitaries.
///
/// # Safety
/// Both outputs point to four writable complex numbers.
#[no_mangle]
pub unsafe extern "C" fn qsd_receiver_tetrad(u_forward: *mut QsdComplex, u_backward: *mut QsdComplex) -> QsdStatus {
    guard(|| write_receiver(&tetrad_receiver(), u_forward, u_backward))
}

/// Helstrom receiver for two states.
///
/// # Safety
/// `psi1`, `psi2` point to two complex amplitudes; both outputs to four
/// writable complex numbers.
#[no_mangle]
pub unsafe extern "C" fn qsd_receiver_binary(
    psi1: *const QsdComplex,
    psi2: *const QsdComplex,
    p1: f64,
    p2: f64,
    u_forward: *mut QsdComplex,
    u_backward: *mut QsdComplex,
) -> QsdStatus {
    guard(|| {
        let r = binary_optimal(&read_state(psi1)?, &read_state(psi2)?, p1, p2)?;
        write_receiver(&r, u_forward, u_backward)
    })
}

/// QWP-HWP-QWP angles realizing `u` up to a global phase.
///
/// # Safety
/// `u` points to four complex numbers; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn qsd_waveplate_decomposition(u: *const QsdComplex, out: *mut QsdWaveplates) -> QsdStatus {
    guard(|| {
        let u = read_unitary(u)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let w = waveplate_decomposition(&u);
        *out = QsdWaveplates {
            qwp1: w.qwp1,
            hwp: w.hwp,
            qwp2: w.qwp2,
            global_phase: w.global_phase,
        };
        Ok(())
    })
}

/// Builds a network. A `first_step_prob` outside `(0, 1]` (for example a
/// negative value) means no first-step override.
///
/// # Safety
/// Matrix pointers hold four complex numbers; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn qsd_network_new(
    u_forward: *const QsdComplex,
    u_backward: *const QsdComplex,
    extraction_prob: f64,
    first_step_prob: f64,
    discard_first_step: bool,
    max_loops: usize,
    out: *mut *mut QsdNetwork,
) -> QsdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let first = (first_step_prob > 0.0 && first_step_prob <= 1.0).then_some(first_step_prob);
        let schedule = ExtractionSchedule::new(extraction_prob, first, discard_first_step)?;
        let net = NetworkConfig::new(read_unitary(u_forward)?, read_unitary(u_backward)?, schedule, max_loops)?;
        *out = Box::into_raw(Box::new(QsdNetwork(net)));
        Ok(())
    })
}

/// # Safety
/// `network` is null or a handle from [`qsd_network_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qsd_network_free(network: *mut QsdNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

/// Evolves `state` through the network.
///
/// # Safety
/// `network` is a live handle, `state` holds two complex amplitudes and `out`
/// is writable.
#[no_mangle]
pub unsafe extern "C" fn qsd_network_evolve(
    network: *const QsdNetwork,
    state: *const QsdComplex,
    out: *mut *mut QsdDistribution,
) -> QsdStatus {
    guard(|| {
        let net = network.as_ref().ok_or_else(|| null("network"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let d = evolve(&net.0, &read_state(state)?);
        *out = Box::into_raw(Box::new(QsdDistribution(d)));
        Ok(())
    })
}

/// Number of extraction steps, or 0 for a null handle.
///
/// # Safety
/// `dist` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qsd_distribution_len(dist: *const QsdDistribution) -> usize {
    dist.as_ref().map_or(0, |d| d.0.bins().len())
}

/// Population still in the network after the last step, or NaN for a null
/// handle.
///
/// # Safety
/// `dist` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qsd_distribution_residual(dist: *const QsdDistribution) -> f64 {
    dist.as_ref().map_or(f64::NAN, |d| d.0.residual())
}

/// Copies sink 5 and sink 6 probabilities per step into `p5` and `p6`.
///
/// # Safety
/// `dist` is a live handle; `p5` and `p6` point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn qsd_distribution_bins(
    dist: *const QsdDistribution,
    p5: *mut f64,
    p6: *mut f64,
    len: usize,
) -> QsdStatus {
    guard(|| {
        let d = dist.as_ref().ok_or_else(|| null("distribution"))?;
        if p5.is_null() || p6.is_null() {
            return Err(null("output buffer"));
        }
        let bins = d.0.bins();
        if len < bins.len() {
            return Err(Failure(
                QsdStatus::BufferTooSmall,
                format!("need {} entries, got {len}", bins.len()),
            ));
        }
        for (k, b) in bins.iter().enumerate() {
            *p5.add(k) = b[0];
            *p6.add(k) = b[1];
        }
        Ok(())
    })
}

/// # Safety
/// `dist` is null or a live handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qsd_distribution_free(dist: *mut QsdDistribution) {
    if !dist.is_null() {
        drop(Box::from_raw(dist));
    }
}

/// Single-copy MAP error over the network's retained `(sink, bin)` outcomes.
///
/// # Safety
/// `states` holds `2 n` complex amplitudes, `priors` holds `n` doubles and
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn qsd_single_copy_error(
    network: *const QsdNetwork,
    states: *const QsdComplex,
    priors: *const f64,
    n: usize,
    out: *mut f64,
) -> QsdStatus {
    guard(|| {
        let net = network.as_ref().ok_or_else(|| null("network"))?;
        let ens = read_ensemble(states, priors, n)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let table = OutcomeTable::from_network(&net.0, &ens)?;
        *out = map_error(&table, ens.priors())?;
        Ok(())
    })
}

/// Expected Bayes error after `m` copies. `trials == 0` selects exact
/// enumeration; otherwise a seeded Monte Carlo estimate with its standard
/// error in `std_error`.
///
/// # Safety
/// As for [`qsd_single_copy_error`]; `value` and `std_error` are writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn qsd_multi_copy_error(
    network: *const QsdNetwork,
    states: *const QsdComplex,
    priors: *const f64,
    n: usize,
    m: u64,
    trials: u64,
    seed: u64,
    value: *mut f64,
    std_error: *mut f64,
) -> QsdStatus {
    guard(|| {
        let net = network.as_ref().ok_or_else(|| null("network"))?;
        let ens = read_ensemble(states, priors, n)?;
        if value.is_null() || std_error.is_null() {
            return Err(null("output"));
        }
        let mode = if trials == 0 {
            ErrorMode::Exact
        } else {
            ErrorMode::MonteCarlo {
                seed,
                trials,
                epsilon_floor: false,
            }
        };
        let table = OutcomeTable::from_network(&net.0, &ens)?;
        let e = expected_multi_copy_error(&table, ens.priors(), m, mode)?;
        *value = e.value;
        *std_error = e.std_error;
        Ok(())
    })
}
