#ifndef MCLKIT_H
#define MCLKIT_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MclStatus {
  MCL_STATUS_OK = 0,
  MCL_STATUS_NULL_POINTER = 1,
  MCL_STATUS_INVALID_ARGUMENT = 2,
  MCL_STATUS_INVALID_CONFIG = 3,
  MCL_STATUS_NUMERICAL = 4,
  MCL_STATUS_PANIC = 5,
} MclStatus;

typedef enum MclLossKind {
  MCL_LOSS_KIND_NT_XENT = 0,
  MCL_LOSS_KIND_CCM = 1,
  MCL_LOSS_KIND_MCL = 2,
  MCL_LOSS_KIND_SUP_CLR = 3,
} MclLossKind;

typedef enum MclAggregation {
  MCL_AGGREGATION_AVG = 0,
  MCL_AGGREGATION_MAX = 1,
  MCL_AGGREGATION_W_AVG = 2,
} MclAggregation;

/**
 * Opaque class-conditional Gaussian bank.
 */
typedef struct MclBank MclBank;

typedef struct MclLossConfig {
  double tau;
  double alpha;
  double beta;
  double lambda;
  /**
   * Nonzero: use aux labels in the masks and the positive sets.
   */
  uint8_t aux;
  /**
   * Nonzero: one sampled positive per query instead of the expectation.
   */
  uint8_t spa_single_sample;
  uint64_t seed;
} MclLossConfig;

typedef struct MclValidity {
  double attraction_bound;
  double convergence_bound;
  uint8_t attraction_ok;
  uint8_t convergence_ok;
  uint8_t overall_ok;
} MclValidity;

typedef struct MclMetrics {
  double auroc;
  double fpr_at_95;
  double aupr_ind;
  double aupr_ood;
} MclMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *mcl_last_error_message(void);

/**
 * Checks `alpha` against the attraction and convergence bounds. A
 * non-positive `expected_positives` selects the default `2N/C`.
 *
 * # Safety
 * `out` must point to writable memory for one `MclValidity`.
 */
enum MclStatus mcl_validate_hparams(struct MclLossConfig cfg,
                                    size_t batch_size,
                                    size_t c_main,
                                    size_t c_aux,
                                    double expected_positives,
                                    struct MclValidity *out);

/**
 * Loss value and `dL/dZ` for `n_views` interleaved views (views `2k` and
 * `2k+1` share a parent). `aux_labels` may be null; `grad_out` may be null
 * or hold `n_views * dim` values.
 *
 * # Safety
 * Every non-null pointer must reference a buffer of the stated length.
 */
enum MclStatus mcl_loss_and_gradient(enum MclLossKind kind,
                                     const double *embeddings,
                                     size_t n_views,
                                     size_t dim,
                                     const size_t *main_labels,
                                     const size_t *aux_labels,
                                     struct MclLossConfig cfg,
                                     double *loss_out,
                                     double *grad_out);

/**
 * AUROC, FPR at 95% TPR and both AUPR variants. `is_ind[k]` nonzero marks
 * sample `k` as in-distribution; higher confidence means more IND.
 *
 * # Safety
 * `confidence` and `is_ind` must hold `n` values; `out` must be writable.
 */
enum MclStatus mcl_metrics(const double *confidence,
                           const uint8_t *is_ind,
                           size_t n,
                           struct MclMetrics *out);

/**
 * Fits one Gaussian per (main, aux) label pair from `n` embeddings of
 * dimension `dim`. `aux_labels` may be null (single aux cell). A
 * non-positive `ridge` selects the trace-scaled default.
 *
 * # Safety
 * Buffers must hold the stated number of values; `bank_out` must be writable.
 */
enum MclStatus mcl_bank_fit(const double *embeddings,
                            size_t n,
                            size_t dim,
                            const size_t *main_labels,
                            const size_t *aux_labels,
                            double ridge,
                            struct MclBank **bank_out);

/**
 * Releases a bank. Null is ignored.
 *
 * # Safety
 * `bank` must come from [`mcl_bank_fit`] and not be used afterwards.
 */
void mcl_bank_free(struct MclBank *bank);

/**
 * Writes the class counts and embedding dimension of a bank.
 *
 * # Safety
 * `bank` must be a live handle; outputs must be writable.
 */
enum MclStatus mcl_bank_shape(const struct MclBank *bank,
                              size_t *c_main,
                              size_t *c_aux,
                              size_t *dim);

/**
 * Scores `z` against every main class under aux cell `aux`; writes
 * `c_main` values (negative squared Mahalanobis distances).
 *
 * # Safety
 * `bank` must be a live handle; `z` holds `dim` values and `scores_out`
 * room for `c_main`.
 */
enum MclStatus mcl_bank_score(const struct MclBank *bank,
                              const double *z,
                              size_t dim,
                              size_t aux,
                              double *scores_out,
                              size_t c_main);

/**
 * Aggregates `n_aux` score vectors of length `c` (row-major) and writes the
 * winning label and its aggregated score.
 *
 * # Safety
 * `scores` holds `n_aux * c` values; outputs must be writable.
 */
enum MclStatus mcl_sei_aggregate(const double *scores,
                                 size_t n_aux,
                                 size_t c,
                                 enum MclAggregation agg,
                                 size_t *label_out,
                                 double *confidence_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MCLKIT_H */
