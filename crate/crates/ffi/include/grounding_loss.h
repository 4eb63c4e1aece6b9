#ifndef GROUNDING_LOSS_H
#define GROUNDING_LOSS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GlGrounding {
  GL_GROUNDING_CE = 0,
  GL_GROUNDING_KL = 1,
  GL_GROUNDING_KL_SEM = 2,
} GlGrounding;

typedef enum GlRefinement {
  GL_REFINEMENT_SMOOTH_L1 = 0,
  GL_REFINEMENT_CIOU_SEM = 1,
} GlRefinement;

typedef enum GlStatus {
  GL_STATUS_OK = 0,
  GL_STATUS_NULL_POINTER = 1,
  GL_STATUS_INVALID_INPUT = 2,
  GL_STATUS_INVALID_TARGET = 3,
  GL_STATUS_PARSE = 4,
  GL_STATUS_SCHEMA = 5,
  GL_STATUS_IO = 6,
  GL_STATUS_NUMERICAL = 7,
  GL_STATUS_USAGE = 8,
  GL_STATUS_PANIC = 9,
} GlStatus;

/**
 * Opaque dataset handle.
 */
typedef struct GlDataset GlDataset;

/**
 * Opaque handle to trained head parameters.
 */
typedef struct GlParams GlParams;

typedef struct GlCiouBreakdown {
  double s;
  double d;
  double v;
  double iou;
  double alpha;
  double total;
} GlCiouBreakdown;

typedef struct GlTrainOptions {
  enum GlGrounding grounding;
  enum GlRefinement refinement;
  double eta;
  double lambda;
  size_t epochs;
  double lr;
  uint64_t seed;
} GlTrainOptions;

typedef struct GlEvalReport {
  double accuracy;
  double point_game_accuracy;
  size_t n_queries;
} GlEvalReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length excluding the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t gl_last_error_message(char *buf, size_t len);

/**
 * IoU of two pixel boxes given as `[x1, y1, x2, y2]`.
 *
 * # Safety
 * `a` and `b` must point to 4 doubles, `out` to one writable double.
 */
enum GlStatus gl_iou(const double *a, const double *b, double *out);

/**
 * CIoU loss of a predicted box against a target, both `[cx, cy, w, h]`.
 * `grad` receives the gradient with respect to the prediction and may be null.
 *
 * # Safety
 * `pred` and `gt` must point to 4 doubles, `out` to a writable breakdown,
 * `grad` to 4 writable doubles or be null.
 */
enum GlStatus gl_ciou(const double *pred,
                      const double *gt,
                      bool v_unsquared,
                      bool alpha_constant,
                      struct GlCiouBreakdown *out,
                      double *grad);

/**
 * Semantic grounding target for one query.
 *
 * `u_row` holds `k` IoUs, `class_probs` is `k x n_classes` row-major.
 * `p_target` and `u_hat` receive `k` values each.
 *
 * # Safety
 * All array pointers must cover the sizes above; scalar outputs must be writable.
 */
enum GlStatus gl_build_target(const double *u_row,
                              size_t k,
                              const double *class_probs,
                              size_t n_classes,
                              double eta,
                              double eps,
                              double *p_target,
                              double *u_hat,
                              size_t *j_star,
                              bool *fallback_used);

/**
 * Synthetic dataset with the default generator settings apart from the arguments.
 *
 * # Safety
 * `out` must be writable; the handle is released with [`gl_dataset_free`].
 */
enum GlStatus gl_dataset_generate(uint64_t seed,
                                  size_t k,
                                  size_t classes,
                                  size_t examples,
                                  struct GlDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string, `out` writable.
 */
enum GlStatus gl_dataset_read(const char *path, struct GlDataset **out);

/**
 * # Safety
 * `ds` must be a live handle and `path` a NUL-terminated string.
 */
enum GlStatus gl_dataset_write(const struct GlDataset *ds, const char *path);

/**
 * Number of examples, 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t gl_dataset_len(const struct GlDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void gl_dataset_free(struct GlDataset *ds);

/**
 * Default training options (KL-Sem + CIoU-Sem, eta 0.3, lambda 1, 9 epochs, lr 0.001).
 */
struct GlTrainOptions gl_train_options_default(void);

/**
 * Trains a head on `ds`. `val_accuracy` may be null.
 *
 * # Safety
 * `ds` must be a live handle, `opts` readable, `out` writable; the
 * parameters are released with [`gl_params_free`].
 */
enum GlStatus gl_train(const struct GlDataset *ds,
                       const struct GlTrainOptions *opts,
                       struct GlParams **out,
                       double *val_accuracy);

/**
 * Accuracy and pointing-game accuracy of `params` over every query of `ds`.
 *
 * # Safety
 * Both handles must be live and `out` writable.
 */
enum GlStatus gl_evaluate(const struct GlDataset *ds,
                          const struct GlParams *params,
                          struct GlEvalReport *out);

/**
 * # Safety
 * `params` must be a live handle and `path` a NUL-terminated string.
 */
enum GlStatus gl_params_save(const struct GlParams *params, const char *path);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum GlStatus gl_params_load(const char *path, struct GlParams **out);

/**
 * Number of scalar parameters, 0 for a null handle.
 *
 * # Safety
 * `params` must be null or a live handle.
 */
size_t gl_params_num_params(const struct GlParams *params);

/**
 * # Safety
 * `params` must be null or a handle not yet freed.
 */
void gl_params_free(struct GlParams *params);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GROUNDING_LOSS_H */
