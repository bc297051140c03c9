#ifndef CCMPLUS_H
#define CCMPLUS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CcmplusStatus {
  CCMPLUS_STATUS_OK = 0,
  CCMPLUS_STATUS_NULL_POINTER = 1,
  CCMPLUS_STATUS_ARGUMENT = 2,
  CCMPLUS_STATUS_SHAPE = 3,
  CCMPLUS_STATUS_IO = 4,
  CCMPLUS_STATUS_PARSE = 5,
  CCMPLUS_STATUS_CONFIG = 6,
  CCMPLUS_STATUS_CHECKPOINT = 7,
  CCMPLUS_STATUS_NUMERIC = 8,
  CCMPLUS_STATUS_BUFFER_TOO_SMALL = 9,
  CCMPLUS_STATUS_PANIC = 10,
} CcmplusStatus;

/**
 * A trained forecaster with its stored causal matrix.
 */
typedef struct CcmplusModel CcmplusModel;

/**
 * A loaded traffic panel.
 */
typedef struct CcmplusPanel CcmplusPanel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ccmplus_last_error_message(void);

/**
 * Cross-map skill of `x`'s shadow manifold estimating `y`.
 *
 * # Safety
 * `x` and `y` must point to `len` readable doubles; outputs must be writable.
 */
enum CcmplusStatus ccmplus_cross_map_skill(const double *x,
                                           const double *y,
                                           size_t len,
                                           size_t dim,
                                           size_t tau,
                                           double *out_skill,
                                           bool *out_degenerate);

/**
 * Skill on each prefix length in `lengths`, written to `out_skills`.
 *
 * # Safety
 * `x`, `y` hold `len` doubles; `lengths` and `out_skills` hold `n_lengths` items.
 */
enum CcmplusStatus ccmplus_convergence_scan(const double *x,
                                            const double *y,
                                            size_t len,
                                            size_t dim,
                                            size_t tau,
                                            const size_t *lengths,
                                            size_t n_lengths,
                                            double *out_skills);

/**
 * Loads a trace file.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum CcmplusStatus ccmplus_panel_load(const char *path, struct CcmplusPanel **out);

/**
 * Builds a panel from row-major `n_services x len` values. Services are named
 * `svc-0`, `svc-1`, ...
 *
 * # Safety
 * `values` holds `n_services * len` doubles; `out` is writable.
 */
enum CcmplusStatus ccmplus_panel_from_values(const double *values,
                                             size_t n_services,
                                             size_t len,
                                             int64_t start_time,
                                             uint64_t granularity,
                                             struct CcmplusPanel **out);

/**
 * # Safety
 * `panel` is null or a handle from this library not yet freed.
 */
void ccmplus_panel_free(struct CcmplusPanel *panel);

/**
 * Number of services, or 0 for a null handle.
 *
 * # Safety
 * `panel` is null or a live handle.
 */
size_t ccmplus_panel_services(const struct CcmplusPanel *panel);

/**
 * Number of buckets, or 0 for a null handle.
 *
 * # Safety
 * `panel` is null or a live handle.
 */
size_t ccmplus_panel_len(const struct CcmplusPanel *panel);

/**
 * Classic skill matrix; entry `(m, n)` is manifold `m` estimating service `n`.
 *
 * # Safety
 * `panel` is a live handle; `out` holds `capacity` doubles.
 */
enum CcmplusStatus ccmplus_ccm_matrix(const struct CcmplusPanel *panel,
                                      size_t dim,
                                      size_t tau,
                                      double *out,
                                      size_t capacity);

/**
 * Loads a checkpoint written by `ccmplus train`.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum CcmplusStatus ccmplus_model_load(const char *path, struct CcmplusModel **out);

/**
 * # Safety
 * `model` is null or a handle from this library not yet freed.
 */
void ccmplus_model_free(struct CcmplusModel *model);

/**
 * Number of services the model was trained on, or 0 for a null handle.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t ccmplus_model_services(const struct CcmplusModel *model);

/**
 * Stored `N x N` causal matrix, row-major.
 *
 * # Safety
 * `model` is a live handle; `out` holds `capacity` doubles.
 */
enum CcmplusStatus ccmplus_model_causal_matrix(const struct CcmplusModel *model,
                                               double *out,
                                               size_t capacity);

/**
 * Test-split MSE and MAE of `model` on `panel`, using the split ratios and
 * batch size stored with the model.
 *
 * # Safety
 * Handles are live; outputs are writable.
 */
enum CcmplusStatus ccmplus_model_evaluate(const struct CcmplusModel *model,
                                          const struct CcmplusPanel *panel,
                                          double *out_mse,
                                          double *out_mae,
                                          size_t *out_samples);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CCMPLUS_H */
