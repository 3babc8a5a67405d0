#ifndef FAIRLM_H
#define FAIRLM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Sentence score reduction: mean or sum of token log-probabilities.
 */
typedef enum FairlmScoreMode {
  FAIRLM_SCORE_MODE_MEAN = 0,
  FAIRLM_SCORE_MODE_SUM = 1,
} FairlmScoreMode;

/**
 * Result codes shared by every entry point.
 */
typedef enum FairlmStatus {
  FAIRLM_STATUS_OK = 0,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  FAIRLM_STATUS_NULL_OR_INVALID_ARGUMENT = 1,
  /**
   * Input data was rejected (bad file, unknown token id, out-of-range value).
   */
  FAIRLM_STATUS_VALIDATION = 2,
  /**
   * Reading or writing a file failed.
   */
  FAIRLM_STATUS_IO = 3,
  /**
   * An internal invariant failed.
   */
  FAIRLM_STATUS_INTERNAL = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  FAIRLM_STATUS_PANIC = 5,
} FairlmStatus;

/**
 * A loaded checkpoint, optionally with adapters applied.
 */
typedef struct FairlmModel FairlmModel;

/**
 * A computed bias report.
 */
typedef struct FairlmReport FairlmReport;

/**
 * Numeric columns of one bias report row.
 */
typedef struct FairlmReportRow {
  size_t n;
  double lms;
  double ss;
  double icat;
  double perplexity;
} FairlmReportRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Free with
 * [`fairlm_string_free`].
 */
char *fairlm_last_error(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void fairlm_string_free(char *s);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fairlm_version(void);

/**
 * `lms · min(ss, 100 − ss) / 50`. Both inputs must lie in [0, 100].
 *
 * # Safety
 * `out` must be a valid pointer to a `double`.
 */
enum FairlmStatus fairlm_icat(double lms, double ss, double *out);

/**
 * Loads a checkpoint that embeds its vocabulary. `adapters_path` may be
 * NULL; otherwise the adapter file is applied on top.
 *
 * # Safety
 * Path arguments must be NUL-terminated strings or (for adapters) NULL;
 * `out` must be a valid pointer.
 */
enum FairlmStatus fairlm_model_load(const char *checkpoint_path,
                                    const char *adapters_path,
                                    struct FairlmModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`fairlm_model_load`] and not have been freed.
 */
void fairlm_model_free(struct FairlmModel *model);

/**
 * Vocabulary size of a loaded model, or 0 for NULL.
 *
 * # Safety
 * `model` must be a live handle or NULL.
 */
size_t fairlm_model_vocab_size(const struct FairlmModel *model);

/**
 * Score of one sentence: reduced next-token log-probability.
 *
 * # Safety
 * `model` must be live, `text` NUL-terminated and `out` valid.
 */
enum FairlmStatus fairlm_sentence_log_prob(const struct FairlmModel *model,
                                           const char *text,
                                           enum FairlmScoreMode mode,
                                           double *out);

/**
 * Token-weighted perplexity over `n` sentences.
 *
 * # Safety
 * `sentences` must point to `n` NUL-terminated strings; `out` must be valid.
 */
enum FairlmStatus fairlm_perplexity(const struct FairlmModel *model,
                                    const char *const *sentences,
                                    size_t n,
                                    double *out);

/**
 * Evaluates a triplet JSON-Lines file into a report handle.
 *
 * # Safety
 * `model` must be live, `triplets_path` NUL-terminated and `out` valid.
 */
enum FairlmStatus fairlm_eval_triplets(const struct FairlmModel *model,
                                       const char *triplets_path,
                                       enum FairlmScoreMode mode,
                                       bool include_unrelated,
                                       struct FairlmReport **out);

/**
 * Number of rows, the last being the all-domains row. 0 for NULL.
 *
 * # Safety
 * `report` must be a live handle or NULL.
 */
size_t fairlm_report_len(const struct FairlmReport *report);

/**
 * Copies row `index` into `out` and, when `domain` is non-NULL, stores a
 * newly allocated domain name there.
 *
 * # Safety
 * `report` must be live; `out` valid; `domain` NULL or valid.
 */
enum FairlmStatus fairlm_report_row(const struct FairlmReport *report,
                                    size_t index,
                                    struct FairlmReportRow *out,
                                    char **domain);

/**
 * The report as `domain,n,lms,ss,icat,perplexity` CSV. Free with
 * [`fairlm_string_free`]; NULL on a NULL handle.
 *
 * # Safety
 * `report` must be a live handle or NULL.
 */
char *fairlm_report_csv(const struct FairlmReport *report);

/**
 * Releases a report. NULL is ignored.
 *
 * # Safety
 * `report` must come from [`fairlm_eval_triplets`] and not have been freed.
 */
void fairlm_report_free(struct FairlmReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FAIRLM_H */
