#ifndef MIRPAIRS_H
#define MIRPAIRS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum MpStatus {
  MP_STATUS_OK = 0,
  MP_STATUS_INVALID_ARGUMENT = 1,
  MP_STATUS_UNDER_RESOLVED = 2,
  MP_STATUS_NON_CONVERGENCE = 3,
  MP_STATUS_INSUFFICIENT_DATA = 4,
  MP_STATUS_REJECTED_DATA = 5,
  MP_STATUS_MALFORMED_TAGS = 6,
  MP_STATUS_IO = 7,
  MP_STATUS_NULL_POINTER = 8,
  MP_STATUS_PANIC = 9,
} MpStatus;

/**
 * Pair-source experiment: source, two channels and two detectors.
 */
typedef struct MpExperiment MpExperiment;

/**
 * Start-stop coincidence histogram.
 */
typedef struct MpHistogram MpHistogram;

/**
 * Simulated or loaded detection events.
 */
typedef struct MpTagStream MpTagStream;

typedef struct MpCar {
  double x_raw;
  double x_acc;
  /**
   * Infinite when no accidentals were counted.
   */
  double car;
  double car_err;
} MpCar;

typedef struct MpPeak {
  double center_ps;
  double center_err_ps;
  double fwhm_ps;
  double fwhm_err_ps;
  double amplitude;
  double background;
  bool converged;
} MpPeak;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * success. Valid until the next call on the same thread.
 */
const char *mp_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mp_version(void);

/**
 * γ in 1/(W·m) from n₂ (m²/W), A_eff (m²) and wavelength (m).
 */
enum MpStatus mp_nonlinear_parameter(double n2, double a_eff, double wavelength, double *out);

/**
 * Waveguide TPA coefficient in 1/(W·m) from bulk β_TPA (m/W) and A_eff (m²).
 */
enum MpStatus mp_tpa_bulk_to_waveguide(double beta_tpa, double a_eff, double *out);

/**
 * Mean pairs per pulse for efficiency ξ (1/W²) at peak power P (W).
 */
enum MpStatus mp_pairs_per_pulse(double xi, double power, double *out);

/**
 * Monitored coincidence probability of the two-source state at pump
 * phase `phi` and coupler reflectivity `r`.
 */
enum MpStatus mp_coincidence_probability(double phi, double r, double *out);

/**
 * Raw visibility ceiling CAR/(2 + CAR); 1 for infinite CAR.
 */
double mp_raw_visibility_bound(double car);

/**
 * Build an experiment from the JSON accepted by `mirpairs pairs`.
 */
enum MpStatus mp_experiment_from_json(const char *json, struct MpExperiment **out);

void mp_experiment_free(struct MpExperiment *exp);

/**
 * Pulse period of the experiment's source, ps.
 */
enum MpStatus mp_experiment_period_ps(const struct MpExperiment *exp, double *out);

/**
 * Simulate `duration` seconds at peak power `power`; identical inputs give
 * identical streams.
 */
enum MpStatus mp_simulate_tags(const struct MpExperiment *exp,
                               double power,
                               double duration,
                               uint64_t seed,
                               struct MpTagStream **out);

/**
 * Load a binary tag file.
 */
enum MpStatus mp_tags_read(const char *path, struct MpTagStream **out);

/**
 * Write a binary tag file.
 */
enum MpStatus mp_tags_write(const struct MpTagStream *tags, const char *path);

void mp_tags_free(struct MpTagStream *tags);

/**
 * Number of tags; with `channel` 0 or 1 only that channel is counted, any
 * other value counts both.
 */
enum MpStatus mp_tags_len(const struct MpTagStream *tags, int32_t channel, size_t *out);

/**
 * Copy up to `capacity` tags into `times_ps` and `channels`; `written`
 * receives the number copied.
 */
enum MpStatus mp_tags_copy(const struct MpTagStream *tags,
                           int64_t *times_ps,
                           uint8_t *channels,
                           size_t capacity,
                           size_t *written);

/**
 * Histogram of B − A delays within ±`span_ps`, `bin_width_ps` wide bins.
 */
enum MpStatus mp_histogram_build(const struct MpTagStream *tags,
                                 int64_t bin_width_ps,
                                 int64_t span_ps,
                                 struct MpHistogram **out);

void mp_histogram_free(struct MpHistogram *hist);

/**
 * Number of bins.
 */
enum MpStatus mp_histogram_len(const struct MpHistogram *hist, size_t *out);

/**
 * Copy up to `capacity` bin centres (ps) and counts.
 */
enum MpStatus mp_histogram_copy(const struct MpHistogram *hist,
                                double *delays_ps,
                                uint64_t *counts,
                                size_t capacity,
                                size_t *written);

/**
 * Coincidence-to-accidental ratio with `n_side_peaks` accidental windows.
 */
enum MpStatus mp_histogram_car(const struct MpHistogram *hist,
                               double window_ps,
                               size_t n_side_peaks,
                               double period_ps,
                               struct MpCar *out);

/**
 * Gaussian-plus-background fit of the zero-delay peak within
 * ±`fit_half_width_ps`.
 */
enum MpStatus mp_histogram_fit_peak(const struct MpHistogram *hist,
                                    double fit_half_width_ps,
                                    struct MpPeak *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIRPAIRS_H */
