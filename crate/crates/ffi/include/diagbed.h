#ifndef DIAGBED_H
#define DIAGBED_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DiagbedStatus {
  DIAGBED_STATUS_OK = 0,
  DIAGBED_STATUS_NULL_POINTER = 1,
  DIAGBED_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Dataset, manifest or value error.
   */
  DIAGBED_STATUS_DATA = 3,
  /**
   * The surrogate failed or is misconfigured.
   */
  DIAGBED_STATUS_SURROGATE = 4,
  /**
   * Operation not allowed in the session's current state.
   */
  DIAGBED_STATUS_CONFLICT = 5,
  DIAGBED_STATUS_PANIC = 6,
} DiagbedStatus;

/**
 * A loaded dataset.
 */
typedef struct DiagbedDataset DiagbedDataset;

/**
 * One interactive diagnosis session.
 */
typedef struct DiagbedSession DiagbedSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *diagbed_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library.
 */
void diagbed_string_free(char *s);

/**
 * KL(Bern(q) || Bern(p)) in nats.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DiagbedStatus diagbed_kl_bernoulli(double q, double p, double *out);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum DiagbedStatus diagbed_entropy_bernoulli(double p, double *out);

/**
 * Mean KL of `n` posterior draws against `prior`.
 *
 * # Safety
 * `draws` must point to `n` doubles; `out` must be valid.
 */
enum DiagbedStatus diagbed_expected_kl(const double *draws, size_t n, double prior, double *out);

/**
 * Expected KL a test must exceed to be worth acquiring.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DiagbedStatus diagbed_stopping_threshold(double prior,
                                              double theta,
                                              double gamma,
                                              double *out);

/**
 * ROC AUC. Fails when only one class is present.
 *
 * # Safety
 * `labels` and `scores` must point to `n` elements; `out` must be valid.
 */
enum DiagbedStatus diagbed_auc(const uint8_t *labels, const double *scores, size_t n, double *out);

/**
 * # Safety
 * `a` and `b` must point to `na` and `nb` doubles; `out` must be valid.
 */
enum DiagbedStatus diagbed_wasserstein_1d(const double *a,
                                          size_t na,
                                          const double *b,
                                          size_t nb,
                                          double *out);

/**
 * # Safety
 * `a` and `b` must point to `na` and `nb` doubles; `out` must be valid.
 */
enum DiagbedStatus diagbed_energy_distance_1d(const double *a,
                                              size_t na,
                                              const double *b,
                                              size_t nb,
                                              double *out);

/**
 * Loads a dataset from its TOML manifest.
 *
 * # Safety
 * `manifest_path` must be a NUL-terminated string; `out` must be valid.
 */
enum DiagbedStatus diagbed_dataset_open(const char *manifest_path, struct DiagbedDataset **out);

/**
 * # Safety
 * `dataset` must be NULL or a handle from [`diagbed_dataset_open`].
 */
void diagbed_dataset_free(struct DiagbedDataset *dataset);

/**
 * Number of loaded patient records.
 *
 * # Safety
 * `dataset` must be a valid handle; `out` must be valid.
 */
enum DiagbedStatus diagbed_dataset_len(const struct DiagbedDataset *dataset, size_t *out);

/**
 * Patient id of record `index`.
 *
 * # Safety
 * `dataset` must be a valid handle; `out` must be valid.
 */
enum DiagbedStatus diagbed_dataset_patient_id(const struct DiagbedDataset *dataset,
                                              size_t index,
                                              char **out);

/**
 * Vignette of record `index` with every feature known.
 *
 * # Safety
 * `dataset` must be a valid handle; `out` must be valid.
 */
enum DiagbedStatus diagbed_dataset_vignette(const struct DiagbedDataset *dataset,
                                            size_t index,
                                            char **out);

/**
 * Starts a session for `patient_id`. `surrogate_path` names a surrogate
 * TOML; relative paths inside it resolve against its directory.
 *
 * # Safety
 * Strings must be NUL-terminated; `dataset` must be a valid handle; `out`
 * must be valid.
 */
enum DiagbedStatus diagbed_session_new(const struct DiagbedDataset *dataset,
                                       const char *patient_id,
                                       const char *surrogate_path,
                                       double theta,
                                       double gamma,
                                       size_t m,
                                       uint64_t seed,
                                       struct DiagbedSession **out);

/**
 * # Safety
 * `session` must be NULL or a handle from [`diagbed_session_new`].
 */
void diagbed_session_free(struct DiagbedSession *session);

/**
 * Evaluates the current step and writes the recommendation as JSON. The
 * result is cached until a value is submitted.
 *
 * # Safety
 * `session` must be a valid handle; `out_json` must be valid.
 */
enum DiagbedStatus diagbed_session_recommend(struct DiagbedSession *session, char **out_json);

/**
 * Records an observed value for `feature`. Without `override_choice` the
 * feature must be the current recommendation.
 *
 * # Safety
 * `session` must be a valid handle; strings must be NUL-terminated.
 */
enum DiagbedStatus diagbed_session_submit(struct DiagbedSession *session,
                                          const char *feature,
                                          const char *value,
                                          bool override_choice);

/**
 * Full session state, including the trajectory, as JSON.
 *
 * # Safety
 * `session` must be a valid handle; `out_json` must be valid.
 */
enum DiagbedStatus diagbed_session_state(const struct DiagbedSession *session, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIAGBED_H */
