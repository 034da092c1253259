#ifndef LDIT_H
#define LDIT_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a fallible call.
 */
typedef enum LditStatus {
  LDIT_STATUS_OK = 0,
  LDIT_STATUS_NULL_POINTER = 1,
  LDIT_STATUS_DIMENSION = 2,
  LDIT_STATUS_OVERFLOW = 3,
  LDIT_STATUS_DEGENERATE = 4,
  LDIT_STATUS_OUT_OF_RANGE = 5,
  LDIT_STATUS_NON_FINITE = 6,
  LDIT_STATUS_CONSTRUCTION = 7,
  LDIT_STATUS_INVALID_ARGUMENT = 8,
  LDIT_STATUS_IO = 9,
  LDIT_STATUS_PANIC = 10,
} LditStatus;

/**
 * Attention instance: inputs `A1, A2, A3`, weights `W, W_OV` and target `Y`.
 */
typedef struct LditAttention LditAttention;

/**
 * Row-major dense matrix of doubles.
 */
typedef struct LditMatrix LditMatrix;

/**
 * Diagnostics of a low-rank call.
 */
typedef struct LditFastInfo {
  /**
   * Taylor degree of the feature map.
   */
  size_t degree;
  /**
   * Rank of the softmax factors.
   */
  size_t rank;
  /**
   * Certified max-norm bound on the error of the returned matrix.
   */
  double err_bound;
  uint64_t flops;
  /**
   * High-water mark of live floats in the factorized path.
   */
  size_t peak_floats;
} LditFastInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ldit_version(void);

/**
 * Message of the last failed call on this thread, or null if the last call
 * succeeded. The pointer stays valid until the next call on this thread.
 */
const char *ldit_last_error_message(void);

/**
 * Copies `rows·cols` row-major doubles into a new matrix.
 *
 * # Safety
 * `data` must point to `rows·cols` readable doubles (it may be null when the
 * product is zero) and `out` must be a valid pointer.
 */
enum LditStatus ldit_matrix_new(size_t rows,
                                size_t cols,
                                const double *data,
                                struct LditMatrix **out);

/**
 * Releases a matrix. Null is ignored.
 *
 * # Safety
 * `m` must be null or a handle from this library not freed before.
 */
void ldit_matrix_free(struct LditMatrix *m);

/**
 * Row count, 0 for null.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
size_t ldit_matrix_rows(const struct LditMatrix *m);

/**
 * Column count, 0 for null.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
size_t ldit_matrix_cols(const struct LditMatrix *m);

/**
 * Borrowed view of the row-major entries, valid while `m` lives.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
const double *ldit_matrix_data(const struct LditMatrix *m);

/**
 * Copies the entries into `buf`, which must hold exactly `rows·cols` doubles.
 *
 * # Safety
 * `m` must be a live handle and `buf` must point to `len` writable doubles.
 */
enum LditStatus ldit_matrix_copy(const struct LditMatrix *m, double *buf, size_t len);

/**
 * Cross-attention instance. The inputs are copied; the caller keeps ownership
 * of its matrix handles.
 *
 * # Safety
 * Every pointer must be a live matrix handle and `out` must be valid.
 */
enum LditStatus ldit_attention_new_cross(const struct LditMatrix *a1,
                                         const struct LditMatrix *a2,
                                         const struct LditMatrix *a3,
                                         const struct LditMatrix *w,
                                         const struct LditMatrix *w_ov,
                                         const struct LditMatrix *y,
                                         struct LditAttention **out);

/**
 * Self-attention instance with `A1 = A2 = x`.
 *
 * # Safety
 * Every pointer must be a live matrix handle and `out` must be valid.
 */
enum LditStatus ldit_attention_new_self(const struct LditMatrix *x,
                                        const struct LditMatrix *a3,
                                        const struct LditMatrix *w,
                                        const struct LditMatrix *w_ov,
                                        const struct LditMatrix *y,
                                        struct LditAttention **out);

/**
 * Replaces `W` by `W_Kᵀ W_Q` and keeps the split for the fast paths.
 *
 * # Safety
 * `inst`, `w_k` and `w_q` must be live handles.
 */
enum LditStatus ldit_attention_set_split(struct LditAttention *inst,
                                         const struct LditMatrix *w_k,
                                         const struct LditMatrix *w_q);

/**
 * Releases an instance. Null is ignored.
 *
 * # Safety
 * `inst` must be null or a handle from this library not freed before.
 */
void ldit_attention_free(struct LditAttention *inst);

/**
 * Exact attention output `W_OV A3 fᵀ` (d×L).
 *
 * # Safety
 * `inst` must be a live handle and `out` a valid pointer.
 */
enum LditStatus ldit_attention_exact(const struct LditAttention *inst, struct LditMatrix **out);

/**
 * Loss `½‖W_OV A3 fᵀ − Y‖²_F`.
 *
 * # Safety
 * `inst` must be a live handle and `out` a valid pointer.
 */
enum LditStatus ldit_attention_loss(const struct LditAttention *inst, double *out);

/**
 * Exact gradient of the loss with respect to `W` (d×d).
 *
 * # Safety
 * `inst` must be a live handle and `out` a valid pointer.
 */
enum LditStatus ldit_attention_grad_exact(const struct LditAttention *inst,
                                          struct LditMatrix **out);

/**
 * Low-rank attention output within `eps_target` in max norm.
 * `info` may be null.
 *
 * # Safety
 * `inst` must be a live handle, `out` a valid pointer and `info` null or valid.
 */
enum LditStatus ldit_attention_inference_fast(const struct LditAttention *inst,
                                              double eps_target,
                                              struct LditMatrix **out,
                                              struct LditFastInfo *info);

/**
 * Low-rank gradient with respect to `W` within `eps_target` in max norm.
 * `info` may be null.
 *
 * # Safety
 * `inst` must be a live handle, `out` a valid pointer and `info` null or valid.
 */
enum LditStatus ldit_attention_grad_fast(const struct LditAttention *inst,
                                         double eps_target,
                                         struct LditMatrix **out,
                                         struct LditFastInfo *info);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LDIT_H */
