#ifndef DFCON_H
#define DFCON_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. `1`-`3` match the command-line exit codes.
 */
typedef enum DfconStatus {
  DFCON_STATUS_OK = 0,
  DFCON_STATUS_CHECK_FAILED = 1,
  DFCON_STATUS_INVALID_INPUT = 2,
  DFCON_STATUS_DATA_PRECONDITION = 3,
  DFCON_STATUS_NULL_POINTER = 4,
  DFCON_STATUS_PANIC = 5,
} DfconStatus;

/**
 * Cross loss variants.
 */
typedef enum DfconCrossMode {
  DFCON_CROSS_MODE_SYMMETRIC = 0,
  /**
   * Both terms use the video-to-audio row denominator.
   */
  DFCON_CROSS_MODE_SHARED_DENOMINATOR = 1,
} DfconCrossMode;

/**
 * Loaded intra and cross models plus scoring settings.
 */
typedef struct DfconDetector DfconDetector;

/**
 * Scores plus the least consistent windows. Spans are half-open frame
 * ranges; intra spans index identity frames, the cross span visual frames.
 */
typedef struct DfconScoreReport {
  double score_intra;
  double score_cross;
  double score_combined;
  uint64_t intra_span_a_start;
  uint64_t intra_span_a_end;
  uint64_t intra_span_b_start;
  uint64_t intra_span_b_end;
  double intra_min_sim;
  uint64_t cross_span_start;
  uint64_t cross_span_end;
  double cross_min_sim;
} DfconScoreReport;

/**
 * Borrowed row-major `num_frames x dim` feature matrix.
 */
typedef struct DfconStream {
  const float *frames;
  size_t num_frames;
  size_t dim;
  double frame_rate_hz;
} DfconStream;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dfcon_version(void);

/**
 * Message of the last failed call on this thread (empty after a success).
 * Valid until the next dfcon call on the same thread.
 */
const char *dfcon_last_error(void);

/**
 * Loads `intra.ckpt` and `cross.ckpt` from `checkpoint_dir` with default
 * scoring settings.
 *
 * # Safety
 * `checkpoint_dir` must be a NUL-terminated string; `out` must be writable.
 */
enum DfconStatus dfcon_detector_load(const char *checkpoint_dir, struct DfconDetector **out);

/**
 * Overrides the intra percentile (in `(0, 100]`).
 *
 * # Safety
 * `det` must come from [`dfcon_detector_load`].
 */
enum DfconStatus dfcon_detector_set_percentile(struct DfconDetector *det, double percentile_n);

/**
 * # Safety
 * `det` must come from [`dfcon_detector_load`] and not be used afterwards.
 * Null is accepted.
 */
void dfcon_detector_free(struct DfconDetector *det);

/**
 * Scores the stream triple stored in `stream_dir`.
 *
 * # Safety
 * `det` must be a live detector, `stream_dir` a NUL-terminated string and
 * `out` writable.
 */
enum DfconStatus dfcon_detector_score_dir(const struct DfconDetector *det,
                                          const char *stream_dir,
                                          struct DfconScoreReport *out);

/**
 * Scores in-memory feature matrices.
 *
 * # Safety
 * Each stream's `frames` must point to `num_frames * dim` floats; `out`
 * must be writable.
 */
enum DfconStatus dfcon_detector_score_buffers(const struct DfconDetector *det,
                                              const struct DfconStream *identity,
                                              const struct DfconStream *visual,
                                              const struct DfconStream *audio,
                                              struct DfconScoreReport *out);

/**
 * ROC AUC (real = 1 outranking fake = 0, ties one half).
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements; `out` must be writable.
 */
enum DfconStatus dfcon_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Step-wise average precision with fake as the positive class.
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements; `out` must be writable.
 */
enum DfconStatus dfcon_average_precision(const double *scores,
                                         const uint8_t *labels,
                                         size_t n,
                                         double *out);

/**
 * Intra-modal loss of unit-norm embeddings `mu` (`identities x samples x
 * dim`, identity-major).
 *
 * # Safety
 * `mu` must hold `identities * samples * dim` doubles; `out` writable.
 */
enum DfconStatus dfcon_intra_loss(const double *mu,
                                  size_t identities,
                                  size_t samples,
                                  size_t dim,
                                  double tau,
                                  double *out);

/**
 * Cross-modal loss of unit-norm visual `gamma` and audio `alpha`
 * embeddings (`identities x windows x dim` each).
 *
 * # Safety
 * `gamma` and `alpha` must each hold `identities * windows * dim` doubles;
 * `out` must be writable.
 */
enum DfconStatus dfcon_cross_loss(const double *gamma,
                                  const double *alpha,
                                  size_t identities,
                                  size_t windows,
                                  size_t dim,
                                  double tau,
                                  enum DfconCrossMode mode,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DFCON_H */
