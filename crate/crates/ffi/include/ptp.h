#ifndef PTP_H
#define PTP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PtpStatus {
  PTP_STATUS_OK = 0,
  PTP_STATUS_NULL_ARGUMENT = 1,
  PTP_STATUS_INVALID_UTF8 = 2,
  /**
   * Input parsed but violates a domain rule.
   */
  PTP_STATUS_VALIDATION = 3,
  /**
   * Input could not be parsed.
   */
  PTP_STATUS_PARSE = 4,
  PTP_STATUS_IO = 5,
  /**
   * A metric could not be computed (e.g. no Tumor samples).
   */
  PTP_STATUS_METRICS = 6,
  PTP_STATUS_PANIC = 7,
} PtpStatus;

/**
 * A loaded cohort manifest.
 */
typedef struct PtpCohort PtpCohort;

/**
 * Per-slice predictions keyed by slice id.
 */
typedef struct PtpPredictions PtpPredictions;

typedef struct PtpSliceConfig {
  double conf_threshold;
  uint32_t min_boxes;
} PtpSliceConfig;

/**
 * A metric value; `applicable` is false when its denominator was zero,
 * in which case `value` is 0.
 */
typedef struct PtpScore {
  double value;
  bool applicable;
} PtpScore;

typedef struct PtpConfusion {
  uint64_t tp;
  uint64_t fp;
  uint64_t tn;
  uint64_t fn_;
} PtpConfusion;

typedef struct PtpSliceMetrics {
  struct PtpScore precision;
  struct PtpScore recall;
  struct PtpScore f1;
  struct PtpConfusion confusion;
} PtpSliceMetrics;

typedef struct PtpPatientMetrics {
  struct PtpScore accuracy;
  struct PtpScore precision;
  struct PtpScore recall;
  struct PtpScore f1;
  struct PtpConfusion confusion;
} PtpPatientMetrics;

typedef struct PtpGtt {
  double gtt;
  double q1;
  double median;
} PtpGtt;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failed call on this thread, or null. The
 * pointer stays valid until the next call into the library on this thread.
 */
const char *ptp_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ptp_version(void);

void ptp_string_free(char *s);

/**
 * Parses a cohort manifest from JSON text.
 */
enum PtpStatus ptp_cohort_from_json(const char *json, struct PtpCohort **out_cohort);

/**
 * Reads a cohort manifest from a file.
 */
enum PtpStatus ptp_cohort_read(const char *path, struct PtpCohort **out_cohort);

void ptp_cohort_free(struct PtpCohort *cohort);

enum PtpStatus ptp_cohort_patient_count(const struct PtpCohort *cohort, size_t *out_count);

enum PtpStatus ptp_cohort_slice_count(const struct PtpCohort *cohort, size_t *out_count);

/**
 * An empty prediction set.
 */
enum PtpStatus ptp_predictions_new(struct PtpPredictions **out_preds);

/**
 * Parses one prediction file's text and stores it for `slice_id`,
 * replacing any earlier entry.
 */
enum PtpStatus ptp_predictions_add(struct PtpPredictions *preds,
                                   const char *slice_id,
                                   const char *file_text);

/**
 * Reads a prediction directory laid out like the cohort's relative paths.
 * In strict mode stray `.txt` files are an error.
 */
enum PtpStatus ptp_predictions_scan(const char *root,
                                    const struct PtpCohort *cohort,
                                    bool strict,
                                    struct PtpPredictions **out_preds);

enum PtpStatus ptp_predictions_len(const struct PtpPredictions *preds, size_t *out_len);

void ptp_predictions_free(struct PtpPredictions *preds);

/**
 * Slice-level metrics for the Tumor class.
 */
enum PtpStatus ptp_evaluate_slices(const struct PtpCohort *cohort,
                                   const struct PtpPredictions *preds,
                                   struct PtpSliceConfig cfg,
                                   struct PtpSliceMetrics *out_metrics);

/**
 * Patient-level metrics at threshold `gtt`.
 */
enum PtpStatus ptp_evaluate(const struct PtpCohort *cohort,
                            const struct PtpPredictions *preds,
                            struct PtpSliceConfig cfg,
                            double gtt,
                            struct PtpPatientMetrics *out_metrics);

/**
 * Calibrates the general tumor threshold from Tumor-patient PSTT values.
 */
enum PtpStatus ptp_calibrate_gtt(const double *values, size_t len, struct PtpGtt *out_gtt);

/**
 * Harmonic mean of precision and recall; 0 when both are 0, not
 * applicable when either input is not applicable.
 */
struct PtpScore ptp_f1(struct PtpScore precision, struct PtpScore recall);

/**
 * Support-weighted mean of per-class F1 values.
 */
enum PtpStatus ptp_weighted_f1(const double *f1,
                               const uint64_t *support,
                               size_t len,
                               struct PtpScore *out_score);

/**
 * Full report (slice section and patient section) as canonical JSON.
 * Release the returned string with `ptp_string_free`.
 */
enum PtpStatus ptp_report_json(const struct PtpCohort *cohort,
                               const struct PtpPredictions *preds,
                               struct PtpSliceConfig cfg,
                               double gtt,
                               char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PTP_H */
