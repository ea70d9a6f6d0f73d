#ifndef QSDNET_H
#define QSDNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QsdStatus {
  QSD_STATUS_OK = 0,
  QSD_STATUS_NULL_POINTER = 1,
  QSD_STATUS_INVALID_ARGUMENT = 2,
  QSD_STATUS_NOT_UNITARY = 3,
  QSD_STATUS_NOT_NORMALIZED = 4,
  QSD_STATUS_CAPACITY = 5,
  QSD_STATUS_NUMERICAL = 6,
  QSD_STATUS_BUFFER_TOO_SMALL = 7,
  QSD_STATUS_PANIC = 8,
} QsdStatus;

// Opaque time-binned distribution handle.
typedef struct QsdDistribution QsdDistribution;

// Opaque network handle.
typedef struct QsdNetwork QsdNetwork;

typedef struct QsdComplex {
  double re;
  double im;
} QsdComplex;

// Fast-axis angles for `QWP(qwp2) HWP(hwp) QWP(qwp1)` and the phase with
// product `= e^{i global_phase} U`.
typedef struct QsdWaveplates {
  double qwp1;
  double hwp;
  double qwp2;
  double global_phase;
} QsdWaveplates;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *qsd_version(void);

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length including the NUL,
// or 0 when the last call succeeded.
//
// # Safety
// `buf` must point to `len` writable bytes or be null with `len == 0`.
size_t qsd_last_error_message(char *buf, size_t len);

// Maximum success probability for discriminating two pure states.
//
// # Safety
// `psi1` and `psi2` point to two complex amplitudes each; `out` is writable.
enum QsdStatus qsd_helstrom_bound(const struct QsdComplex *psi1,
                                  const struct QsdComplex *psi2,
                                  double p1,
                                  double p2,
                                  double *out);

// Published receiver for `{|+>, |->, |R>, |L>}`.
//
// # Safety
// Both outputs point to four writable complex numbers.
enum QsdStatus qsd_receiver_gu(struct QsdComplex *u_forward, struct QsdComplex *u_backward);

// Published Tetrad receiver projected onto the nearest unitaries.
//
// # Safety
// Both outputs point to four writable complex numbers.
enum QsdStatus qsd_receiver_tetrad(struct QsdComplex *u_forward, struct QsdComplex *u_backward);

// Helstrom receiver for two states.
//
// # Safety
// `psi1`, `psi2` point to two complex amplitudes; both outputs to four
// writable complex numbers.
enum QsdStatus qsd_receiver_binary(const struct QsdComplex *psi1,
                                   const struct QsdComplex *psi2,
                                   double p1,
                                   double p2,
                                   struct QsdComplex *u_forward,
                                   struct QsdComplex *u_backward);

// QWP-HWP-QWP angles realizing `u` up to a global phase.
//
// # Safety
// `u` points to four complex numbers; `out` is writable.
enum QsdStatus qsd_waveplate_decomposition(const struct QsdComplex *u, struct QsdWaveplates *out);

// Builds a network. A `first_step_prob` outside `(0, 1]` (for example a
// negative value) means no first-step override.
//
// # Safety
// Matrix pointers hold four complex numbers; `out` is writable.
enum QsdStatus qsd_network_new(const struct QsdComplex *u_forward,
                               const struct QsdComplex *u_backward,
                               double extraction_prob,
                               double first_step_prob,
                               bool discard_first_step,
                               size_t max_loops,
                               struct QsdNetwork **out);

// # Safety
// `network` is null or a handle from [`qsd_network_new`] not yet freed.
void qsd_network_free(struct QsdNetwork *network);

// Evolves `state` through the network.
//
// # Safety
// `network` is a live handle, `state` holds two complex amplitudes and `out`
// is writable.
enum QsdStatus qsd_network_evolve(const struct QsdNetwork *network,
                                  const struct QsdComplex *state,
                                  struct QsdDistribution **out);

// Number of extraction steps, or 0 for a null handle.
//
// # Safety
// `dist` is null or a live handle.
size_t qsd_distribution_len(const struct QsdDistribution *dist);

// Population still in the network after the last step, or NaN for a null
// handle.
//
// # Safety
// `dist` is null or a live handle.
double qsd_distribution_residual(const struct QsdDistribution *dist);

// Copies sink 5 and sink 6 probabilities per step into `p5` and `p6`.
//
// # Safety
// `dist` is a live handle; `p5` and `p6` point to `len` writable doubles.
enum QsdStatus qsd_distribution_bins(const struct QsdDistribution *dist,
                                     double *p5,
                                     double *p6,
                                     size_t len);

// # Safety
// `dist` is null or a live handle not yet freed.
void qsd_distribution_free(struct QsdDistribution *dist);

// Single-copy MAP error over the network's retained `(sink, bin)` outcomes.
//
// # Safety
// `states` holds `2 n` complex amplitudes, `priors` holds `n` doubles and
// `out` is writable.
enum QsdStatus qsd_single_copy_error(const struct QsdNetwork *network,
                                     const struct QsdComplex *states,
                                     const double *priors,
                                     size_t n,
                                     double *out);

// Expected Bayes error after `m` copies. `trials == 0` selects exact
// enumeration; otherwise a seeded Monte Carlo estimate with its standard
// error in `std_error`.
//
// # Safety
// As for [`qsd_single_copy_error`]; `value` and `std_error` are writable.
enum QsdStatus qsd_multi_copy_error(const struct QsdNetwork *network,
                                    const struct QsdComplex *states,
                                    const double *priors,
                                    size_t n,
                                    uint64_t m,
                                    uint64_t trials,
                                    uint64_t seed,
                                    double *value,
                                    double *std_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QSDNET_H */
