#ifndef CESENTRY_H
#define CESENTRY_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum {
  CES_STATUS_OK = 0,
  CES_STATUS_NULL_POINTER = 1,
  CES_STATUS_INVALID_ARGUMENT = 2,
  CES_STATUS_INFEASIBLE = 3,
  CES_STATUS_NOT_IN_ALPHABET = 4,
  CES_STATUS_ALREADY_STOPPED = 5,
  CES_STATUS_NO_CONVERGENCE = 6,
  CES_STATUS_PANIC = 7,
} CesStatus;

typedef enum {
  CES_OUTCOME_DETECTED = 0,
  CES_OUTCOME_FALSE_ALARM = 1,
  CES_OUTCOME_CENSORED_NO_STOP = 2,
  CES_OUTCOME_CENSORED_PRE_CHANGE = 3,
} CesOutcome;

/**
 * Calibrated detector.
 */
typedef struct CesDetector CesDetector;

/**
 * Victim-side tilted family `tau_theta`.
 */
typedef struct CesFamily CesFamily;

/**
 * Running state of one detector instance.
 */
typedef struct CesState CesState;

/**
 * Result of one simulated episode. Times are 1-based; 0 means "none".
 */
typedef struct {
  uint64_t stop_time;
  /**
   * 0 for the CUSUM branch, `k` for window `k`, -1 when not stopped.
   */
  int64_t stop_window;
  uint64_t change_time;
  CesOutcome outcome;
  double impact;
  uint64_t steps;
} CesEpisode;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *ces_last_error_message(void);

/**
 * `log(3 (d + 1)^2) - log(alpha |log alpha|)`.
 *
 * # Safety
 * `out` must be a valid pointer to a `double`.
 */
CesStatus ces_mu_alpha(double d_min, double alpha, double *out);

/**
 * Builds a family from a victim pmf over `len` distinct utilities.
 *
 * # Safety
 * `alphabet` and `pmf` must point to `len` doubles; `out` must be valid.
 */
CesStatus ces_family_new(const double *alphabet, const double *pmf, size_t len, CesFamily **out);

/**
 * Family of the first player of chicken under the mediator's equilibrium.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
CesStatus ces_family_chicken(CesFamily **out);

/**
 * # Safety
 * `family` must come from a `ces_family_*` constructor or be null.
 */
void ces_family_free(CesFamily *family);

/**
 * Number of supported utilities.
 *
 * # Safety
 * `family` must be a live handle or null.
 */
size_t ces_family_len(const CesFamily *family);

/**
 * Copies the sorted alphabet and base pmf into caller buffers of `len`
 * entries; either buffer may be null.
 *
 * # Safety
 * Non-null buffers must hold at least `len` doubles.
 */
CesStatus ces_family_support(const CesFamily *family, double *alphabet, double *pmf, size_t len);

/**
 * Expected victim utility `u_pi` under the unmanipulated signal.
 *
 * # Safety
 * `family` must be a live handle; `out` must be valid.
 */
CesStatus ces_family_base_mean(const CesFamily *family, double *out);

/**
 * Supremum of feasible `epsilon`, `u_pi - u_min`.
 *
 * # Safety
 * `family` must be a live handle; `out` must be valid.
 */
CesStatus ces_family_max_epsilon(const CesFamily *family, double *out);

/**
 * Tilt parameter whose expected cost equals `epsilon`.
 *
 * # Safety
 * `family` must be a live handle; `out` must be valid.
 */
CesStatus ces_family_theta_for_epsilon(const CesFamily *family, double epsilon, double *out);

/**
 * Writes `tau_theta` into `pmf` (at least `len` entries) and optionally its
 * KL divergence from the base and its mean utility.
 *
 * # Safety
 * `pmf` must hold `len` doubles; `kl` and `mean` may be null.
 */
CesStatus ces_family_tilt(const CesFamily *family,
                          double theta,
                          double *pmf,
                          size_t len,
                          double *kl,
                          double *mean);

/**
 * Calibrates `theta_min` from `epsilon` and the threshold from `alpha`.
 * With `snap` set, off-alphabet observations map to the nearest symbol.
 *
 * # Safety
 * `family` must be a live handle; `out` must be valid.
 */
CesStatus ces_detector_new(const CesFamily *family,
                           double epsilon,
                           double alpha,
                           bool snap,
                           CesDetector **out);

/**
 * Like [`ces_detector_new`] with the threshold `mu` given directly.
 *
 * # Safety
 * `family` must be a live handle; `out` must be valid.
 */
CesStatus ces_detector_with_threshold(const CesFamily *family,
                                      double epsilon,
                                      double mu,
                                      bool snap,
                                      CesDetector **out);

/**
 * # Safety
 * `detector` must come from a `ces_detector_*` constructor or be null.
 */
void ces_detector_free(CesDetector *detector);

/**
 * # Safety
 * `detector` must be a live handle or null (returns NaN).
 */
double ces_detector_theta_min(const CesDetector *detector);

/**
 * # Safety
 * `detector` must be a live handle or null (returns NaN).
 */
double ces_detector_d_min(const CesDetector *detector);

/**
 * # Safety
 * `detector` must be a live handle or null (returns NaN).
 */
double ces_detector_mu(const CesDetector *detector);

/**
 * Number of windows `M`.
 *
 * # Safety
 * `detector` must be a live handle or null (returns 0).
 */
size_t ces_detector_window_count(const CesDetector *detector);

/**
 * Fresh state for `detector`.
 *
 * # Safety
 * `detector` must be a live handle; `out` must be valid.
 */
CesStatus ces_state_new(const CesDetector *detector, CesState **out);

/**
 * # Safety
 * `state` must come from [`ces_state_new`] or be null.
 */
void ces_state_free(CesState *state);

/**
 * Feeds one observed utility. `stopped` receives whether an alarm fired.
 *
 * # Safety
 * All pointers must be live; `state` must belong to `detector`.
 */
CesStatus ces_detector_step(const CesDetector *detector,
                            CesState *state,
                            double utility,
                            bool *stopped);

/**
 * Current time, CUSUM statistic and stop time (0 while running).
 *
 * # Safety
 * `state` must be live; output pointers may be null.
 */
CesStatus ces_state_query(const CesState *state,
                          uint64_t *t,
                          double *r,
                          uint64_t *stop_time,
                          int64_t *stop_window);

/**
 * Simulates one episode against the tilted attack `tau_theta` starting at
 * `change_time` (0: never). Deterministic in `seed`.
 *
 * # Safety
 * `detector` must be live; `out` must be valid.
 */
CesStatus ces_run_episode(const CesDetector *detector,
                          double theta,
                          uint64_t change_time,
                          uint64_t horizon,
                          uint64_t seed,
                          CesEpisode *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CESENTRY_H */
